use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "region,id_sim_mean,id_sim_sd,fid_like,kid_like,prompt_alignment";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: String,
    pub id_sim_mean: f64,
    pub id_sim_sd: f64,
    pub fid_like: f64,
    pub kid_like: f64,
    pub prompt_alignment: Option<f64>,
}

/// Per-region rows and their unweighted column means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<RegionRow>,
    pub mean: RegionRow,
}

fn column_mean(rows: &[RegionRow], f: impl Fn(&RegionRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

impl MetricReport {
    pub fn from_rows(rows: Vec<RegionRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("a report needs at least one region".into()));
        }
        let alignment = if rows.iter().all(|r| r.prompt_alignment.is_some()) {
            Some(column_mean(&rows, |r| r.prompt_alignment.unwrap_or_default()))
        } else {
            None
        };
        let mean = RegionRow {
            region: "mean".into(),
            id_sim_mean: column_mean(&rows, |r| r.id_sim_mean),
            id_sim_sd: column_mean(&rows, |r| r.id_sim_sd),
            fid_like: column_mean(&rows, |r| r.fid_like),
            kid_like: column_mean(&rows, |r| r.kid_like),
            prompt_alignment: alignment,
        };
        Ok(MetricReport { rows, mean })
    }

    pub fn row(&self, region: &str) -> Option<&RegionRow> {
        self.rows.iter().find(|r| r.region == region)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(s, "{}", csv_fields(r));
        }
        s
    }
}

pub(crate) fn csv_fields(r: &RegionRow) -> String {
    let pa = r.prompt_alignment.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!(
        "{},{:.6},{:.6},{:.6},{:.6e},{}",
        r.region, r.id_sim_mean, r.id_sim_sd, r.fid_like, r.kid_like, pa
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(region: &str, v: f64) -> RegionRow {
        RegionRow {
            region: region.into(),
            id_sim_mean: v,
            id_sim_sd: 0.1,
            fid_like: 2.0 * v,
            kid_like: 0.0,
            prompt_alignment: None,
        }
    }

    #[test]
    fn single_region_mean_is_that_row() {
        let r = MetricReport::from_rows(vec![row("eye_brow", 0.4)]).unwrap();
        assert_eq!(r.mean.id_sim_mean, 0.4);
        assert_eq!(r.mean.fid_like, 0.8);
        assert!(r.to_csv().starts_with(REPORT_HEADER));
        assert!(r.to_csv().lines().last().unwrap().starts_with("mean,"));
        assert!(MetricReport::from_rows(vec![]).is_err());
    }
}
