//! Fixtures shared by the criterion benchmarks.

use coda_core::{Capacity, CodaConfig, CodaLayerParams, Matrix, Rng, ScoreVector};

/// Gaussian scores of length `n`.
pub fn scores(n: usize, seed: u64) -> ScoreVector {
    let mut rng = Rng::new(seed);
    ScoreVector::new((0..n).map(|_| rng.normal()).collect()).expect("finite scores")
}

/// A layer config with `d_ffn = 4d` and 64-wide heads (at least one).
pub fn layer_config(n: usize, d: usize, r: f64) -> CodaConfig {
    CodaConfig {
        n,
        d,
        heads: (d / 64).max(1),
        d_ffn: 4 * d,
        d_adpt: 64.min(d),
        capacity: Capacity::Reduction(r),
        ..CodaConfig::default()
    }
}

pub fn layer_inputs(cfg: &CodaConfig, seed: u64) -> (Matrix, CodaLayerParams) {
    let mut rng = Rng::new(seed);
    let params = CodaLayerParams::init(cfg, &mut rng);
    (rng.gaussian_matrix(cfg.n, cfg.d, 1.0), params)
}
