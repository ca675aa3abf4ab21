//! Small, well-conditioned networks and inputs for gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{GradCheck, GradCheckReport};

use super::{Batch, InputDims, ModelConfig, ModelError, Network, Variant};

pub fn tiny_dims() -> InputDims {
    InputDims {
        clinical: 5,
        tracked: vec![0, 2, 3],
        comorbidities: 4,
    }
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        hidden_sizes: vec![6, 5, 4],
        heads: 2,
        key_dim: 3,
        token_embed_dim: 3,
        dropout_rate: 0.2,
        output_scale: 2.0,
    }
}

pub fn tiny_batch(rows: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = tiny_dims();
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    let c = draw(rows * d.clinical, -2.0, 2.0);
    let t = draw(rows * d.tracked.len(), 0.0, 2.0);
    let z: Vec<f64> = draw(rows * d.comorbidities, 0.0, 1.0)
        .into_iter()
        .map(|v| if v < 0.4 { 1.0 } else { 0.0 })
        .collect();
    Batch::from_rows(rows, &c, &t, &z).unwrap()
}

/// Pushes every parameter away from its initial value so biases, decay
/// and norm parameters are exercised too.
pub fn perturbed(variant: Variant, seed: u64) -> Network<f64> {
    let mut net = Network::init(tiny_config(variant), tiny_dims(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (_, _, t) in net.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    net
}

/// Finite-difference check of the summed risk of a 3-window batch with
/// respect to every parameter of a perturbed fixture network.
pub fn check_risk_gradients(variant: Variant, seed: u64) -> Result<GradCheckReport, ModelError> {
    let net = perturbed(variant, seed);
    let batch = tiny_batch(3, seed + 100);
    Ok(GradCheck::default().run(&net.params, |g, p| {
        let r = net.forward(g, p, &batch, 0.0).map_err(|e| match e {
            ModelError::Numerics(n) => n,
            other => panic!("fixture widths are consistent: {other}"),
        })?;
        Ok(g.sum(r))
    })?)
}
