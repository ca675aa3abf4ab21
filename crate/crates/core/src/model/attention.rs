//! Per-window reference computations for the TSLM layer, tokenization and
//! multi-head attention. The batched graph in [`super::Network`] computes the
//! same quantities in factored form; these direct versions are what it is
//! tested against and what callers use to inspect attention weights.

use crate::numerics::{ParamStore, Tensor};

use super::{ModelError, LAYER_NORM_EPS};

pub fn softplus(w: f64) -> f64 {
    if w > 0.0 {
        w + (-w).exp().ln_1p()
    } else {
        w.exp().ln_1p()
    }
}

/// `x * exp(-softplus(w) * dt)`.
pub fn tslm_scale(x: f64, dt: f64, w: f64) -> f64 {
    x * (-softplus(w) * dt).exp()
}

/// One token per clinical variable: `value * value_embed[j] + identity_embed[j]`.
pub fn build_tokens(
    clinical: &[f64],
    value_embed: &Tensor<f64>,
    identity_embed: &Tensor<f64>,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let (rows, d) = value_embed.dims2()?;
    if rows != clinical.len() || identity_embed.shape() != value_embed.shape() {
        return Err(ModelError::Width {
            what: "token embeddings",
            expected: clinical.len(),
            found: rows,
        });
    }
    Ok(clinical
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            (0..d)
                .map(|k| x * value_embed.at(j, k) + identity_embed.at(j, k))
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    /// `query_width x key_dim`
    pub query: Tensor<f64>,
    /// `embed_dim x key_dim`
    pub key: Tensor<f64>,
    /// `embed_dim x key_dim`
    pub value: Tensor<f64>,
    /// `key_dim x embed_dim`
    pub output: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub heads: Vec<HeadWeights>,
    pub output_bias: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
}

impl AttentionBlock {
    pub fn from_params(params: &ParamStore<f64>, heads: usize) -> Result<Self, ModelError> {
        let heads = (0..heads)
            .map(|h| {
                Ok(HeadWeights {
                    query: params.get(&format!("attn.h{h}.query"))?.clone(),
                    key: params.get(&format!("attn.h{h}.key"))?.clone(),
                    value: params.get(&format!("attn.h{h}.value"))?.clone(),
                    output: params.get(&format!("attn.h{h}.output"))?.clone(),
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            heads,
            output_bias: params.get("attn.output_bias")?.data().to_vec(),
            norm_gain: params.get("attn.norm_gain")?.data().to_vec(),
            norm_bias: params.get("attn.norm_bias")?.data().to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// Softmax weights over tokens, per head.
    pub weights: Vec<Vec<f64>>,
    /// Weighted sum of value projections, per head.
    pub context: Vec<Vec<f64>>,
    /// Output projection of all heads plus bias, before normalization.
    pub projected: Vec<f64>,
    /// Layer-normalized, gained and shifted output.
    pub output: Vec<f64>,
}

/// `v * M` for a row vector `v` and matrix `M`.
fn row_times(v: &[f64], m: &Tensor<f64>) -> Vec<f64> {
    let cols = m.shape()[1];
    (0..cols)
        .map(|c| v.iter().enumerate().map(|(r, x)| x * m.at(r, c)).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Single-query multi-head attention over `tokens`.
pub fn mha_forward(
    query_source: &[f64],
    tokens: &[Vec<f64>],
    block: &AttentionBlock,
) -> Result<AttentionOutput, ModelError> {
    let mut weights = Vec::new();
    let mut context = Vec::new();
    let embed = block.output_bias.len();
    let mut projected = block.output_bias.clone();
    for head in &block.heads {
        let (qw, dk) = head.query.dims2()?;
        if qw != query_source.len() {
            return Err(ModelError::Width {
                what: "attention query source",
                expected: qw,
                found: query_source.len(),
            });
        }
        let q = row_times(query_source, &head.query);
        let keys: Vec<Vec<f64>> = tokens.iter().map(|t| row_times(t, &head.key)).collect();
        let values: Vec<Vec<f64>> = tokens.iter().map(|t| row_times(t, &head.value)).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| dot(&q, k) / (dk as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let ctx: Vec<f64> = (0..dk)
            .map(|k| alpha.iter().zip(&values).map(|(a, v)| a * v[k]).sum())
            .collect();
        for (p, o) in projected.iter_mut().zip(row_times(&ctx, &head.output)) {
            *p += o;
        }
        weights.push(alpha);
        context.push(ctx);
    }
    let mean = projected.iter().sum::<f64>() / embed as f64;
    let var = projected.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / embed as f64;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let output = projected
        .iter()
        .zip(block.norm_gain.iter().zip(&block.norm_bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect();
    Ok(AttentionOutput {
        weights,
        context,
        projected,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn block(
        query: Tensor<f64>,
        key: Tensor<f64>,
        value: Tensor<f64>,
        embed: usize,
    ) -> AttentionBlock {
        let dk = key.shape()[1];
        AttentionBlock {
            heads: vec![HeadWeights {
                query,
                key,
                value,
                output: Tensor::filled(vec![dk, embed], 1.0).unwrap(),
            }],
            output_bias: vec![0.0; embed],
            norm_gain: vec![1.0; embed],
            norm_bias: vec![0.0; embed],
        }
    }

    #[test]
    fn tslm_scale_cases() {
        for w in [-5.0, -1.0, 0.0, 2.0, 5.0] {
            assert_eq!(tslm_scale(3.7, 0.0, w), 3.7);
        }
        assert!((tslm_scale(2.0, 1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!(tslm_scale(1.0, 72.0, 10.0) < 1e-300);
        for wi in 0..=20 {
            let w = -5.0 + 0.5 * wi as f64;
            let mut prev = tslm_scale(1.0, 0.0, w);
            for t in 1..=72 {
                let cur = tslm_scale(1.0, t as f64, w);
                assert!(cur < prev, "w={w} dt={t}");
                prev = cur;
            }
        }
    }

    #[test]
    fn zero_value_token_is_identity_embedding() {
        let e = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let u = m(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let t = build_tokens(&[0.0, 2.0], &e, &u).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0], vec![0.1, 0.2, 0.3]);
        assert_eq!(t[1], vec![8.4, 10.5, 12.6]);
        assert!(build_tokens(&[1.0], &e, &u).is_err());
    }

    #[test]
    fn hand_case() {
        // Tokens (1, 2) and (-1, 0); keys read the first component, values
        // the second.
        let b = block(
            m(1, 1, &[1.0]),
            m(2, 1, &[1.0, 0.0]),
            m(2, 1, &[0.0, 1.0]),
            2,
        );
        let out = mha_forward(&[1.0], &[vec![1.0, 2.0], vec![-1.0, 0.0]], &b).unwrap();
        assert!((out.weights[0][0] - 0.880797).abs() < 1e-6);
        assert!((out.weights[0][1] - 0.119203).abs() < 1e-6);
        assert!((out.context[0][0] - 1.761594).abs() < 1e-6);
    }

    #[test]
    fn single_and_identical_tokens() {
        let b = block(
            m(2, 2, &[0.3, -0.2, 0.5, 0.7]),
            m(2, 2, &[1.0, 0.5, -0.5, 2.0]),
            m(2, 2, &[0.2, 0.1, 0.4, -0.3]),
            3,
        );
        let one = mha_forward(&[0.4, -1.1], &[vec![1.5, -0.5]], &b).unwrap();
        assert_eq!(one.weights[0], vec![1.0]);
        let v = row_times(&[1.5, -0.5], &b.heads[0].value);
        for (c, e) in one.context[0].iter().zip(&v) {
            assert!((c - e).abs() < 1e-15);
        }
        let same = mha_forward(&[0.4, -1.1], &vec![vec![0.3, 0.9]; 4], &b).unwrap();
        for w in &same.weights[0] {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }
}
