//! Shared fixtures for the criterion benches: default-sized model and
//! inputs built from fixed seeds.

use patchmoe::training::{prepare, RunStreams};
use patchmoe::synthdata::gen_dataset;
use patchmoe::{Matrix, Model, Prepared, ScoredSet, SeededRng, TrainConfig};

pub fn default_model() -> (TrainConfig, Model) {
    let cfg = TrainConfig::default();
    let model = Model::init(&cfg.arch, &mut RunStreams::new(0).init).expect("default config is valid");
    (cfg, model)
}

pub fn default_sample(model: &Model, cfg: &TrainConfig) -> Prepared {
    let samples = gen_dataset(&cfg.data, &[0], 1, &mut SeededRng::new(1)).expect("valid data config");
    prepare(model, &samples).expect("shapes agree").remove(0)
}

pub fn random_features(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::randn(rows, cols, 1.0, &mut SeededRng::new(seed))
}

/// `n` scores with about 10% positives and coarse ties.
pub fn scored_set(n: usize, seed: u64) -> ScoredSet {
    let mut rng = SeededRng::new(seed);
    let mut set = ScoredSet::default();
    for _ in 0..n {
        let label = rng.bernoulli(0.1);
        let score = (rng.uniform() * 200.0).floor() / 200.0 + if label { 0.2 } else { 0.0 };
        set.push(score, label);
    }
    set
}
