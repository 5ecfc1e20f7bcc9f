use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Reference/inference partition of one identity's image indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub identity: usize,
    pub reference: Vec<usize>,
    pub inference: Vec<usize>,
}

/// One row of the statistics table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsRow {
    pub ref_count: usize,
    pub n_inference: usize,
    pub n_total: usize,
    pub n_ids: usize,
}

pub const STATS_HEADER: &str = "ref_count,n_inference,n_total,n_ids";

/// Drops identities with at most `k` images; survivors get `k` uniformly chosen
/// references and the rest as inference images.
pub fn reorganize_by_reference_count(images_per_identity: &[Vec<usize>], k: usize, rng: &mut impl Rng) -> Result<Vec<Partition>> {
    if k < 1 {
        return Err(Error::Invalid("reference count k must be ≥ 1".into()));
    }
    let mut out = Vec::new();
    for (identity, imgs) in images_per_identity.iter().enumerate() {
        if imgs.len() <= k {
            continue;
        }
        let mut shuffled = imgs.clone();
        shuffled.shuffle(rng);
        let mut reference = shuffled[..k].to_vec();
        let mut inference = shuffled[k..].to_vec();
        reference.sort_unstable();
        inference.sort_unstable();
        out.push(Partition { identity, reference, inference });
    }
    Ok(out)
}

/// Counts for every reference number `1..=k_max` on the same corpus.
pub fn reference_count_stats(images_per_identity: &[Vec<usize>], k_max: usize) -> Vec<StatsRow> {
    (1..=k_max)
        .map(|k| {
            let kept: Vec<usize> = images_per_identity.iter().map(Vec::len).filter(|&n| n > k).collect();
            let n_total: usize = kept.iter().sum();
            StatsRow { ref_count: k, n_inference: n_total - k * kept.len(), n_total, n_ids: kept.len() }
        })
        .collect()
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut s = String::from(STATS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.ref_count, r.n_inference, r.n_total, r.n_ids);
    }
    s
}

/// Seeded shuffle, then the first round(0.6N) train, next round(0.1N) val, rest test.
/// Returns the split of each input position.
pub fn split_identities(n: usize, rng: &mut impl Rng) -> Result<Vec<Split>> {
    if n < 10 {
        return Err(Error::Invalid(format!("splitting needs ≥ 10 identities, got {n}")));
    }
    let (n_train, n_val) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// `(round(0.6N), round(0.1N))`.
pub fn split_counts(n: usize) -> (usize, usize) {
    ((0.6 * n as f64).round() as usize, (0.1 * n as f64).round() as usize)
}
