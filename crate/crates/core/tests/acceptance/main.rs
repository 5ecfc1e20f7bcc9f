//! One test per acceptance criterion. Each prints a single
//! `criterion NN <name>: PASS|FAIL (<measurements>)` line; run with
//! `--nocapture` to see the lines of passing criteria too.

mod dataset;
mod e2e;
mod gradients;
mod invariants;
mod metrics;
mod training;

use std::sync::{Mutex, MutexGuard, OnceLock};

use pva_core::dataset::{build_dataset, BuilderConfig, Corpus};
use pva_core::identity::recognizer::init_facenet;
use pva_core::identity::RecognizerConfig;
use pva_core::model::{DenoiserConfig, ParamStore};
use pva_core::rng::stream;

/// Criteria run one at a time so the end-to-end wall clock only counts its own work.
pub fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn report(n: usize, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n:02} {name}: {verdict} ({detail})");
    println!("{line}");
    assert!(pass, "{line}");
}

/// Untrained `facenet.*` weights sized for `cfg`.
pub fn tiny_recognizer(cfg: &DenoiserConfig, seed: u64) -> ParamStore {
    let rc = RecognizerConfig {
        input_dim: cfg.image_numel(),
        hidden: vec![16],
        feature_dim: cfg.feature_dim,
        ..RecognizerConfig::default()
    };
    init_facenet(&rc, &mut stream(seed, "tiny.facenet"))
}

/// A corpus of 8×8 renders for the fast training checks.
pub fn small_corpus() -> &'static Corpus {
    static CORPUS: OnceLock<(tempfile::TempDir, Corpus)> = OnceLock::new();
    &CORPUS
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = BuilderConfig { identities: 12, renders: 8, extent: 8, mask_pool: 50, seed: 4, ..BuilderConfig::default() };
            build_dataset(&cfg, dir.path()).unwrap();
            let corpus = Corpus::load(dir.path()).unwrap();
            (dir, corpus)
        })
        .1
}

