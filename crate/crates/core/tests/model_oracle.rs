//! The batched network against a per-window forward pass written out with
//! plain loops over the stored parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ventrisk::cohort::FeatureSchema;
use ventrisk::model::{Batch, InputDims, ModelConfig, Network, Variant};
use ventrisk::numerics::ParamStore;

/// Row-major matrix view of a stored parameter.
struct M<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

fn mat<'a>(p: &'a ParamStore<f64>, name: &str) -> M<'a> {
    let t = p.get(name).unwrap();
    M {
        rows: t.shape()[0],
        cols: t.shape()[1],
        data: t.data(),
    }
}

/// `v * m`
fn vm(v: &[f64], m: &M) -> Vec<f64> {
    assert_eq!(v.len(), m.rows);
    let mut out = vec![0.0; m.cols];
    for (r, x) in v.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += x * m.data[r * m.cols + c];
        }
    }
    out
}

fn softplus(w: f64) -> f64 {
    (1.0 + w.exp()).ln()
}

fn straight_line(net: &Network<f64>, x: &[f64], dt: &[f64], z: &[f64]) -> f64 {
    let p = &net.params;
    let cfg = &net.config;
    let decay_w = p.get("tslm.decay").unwrap().data();
    let decay: Vec<f64> = dt
        .iter()
        .zip(decay_w)
        .map(|(t, w)| (-softplus(*w) * t).exp())
        .collect();
    let mut xs = x.to_vec();
    for (i, &j) in net.dims.tracked.iter().enumerate() {
        xs[j] *= decay[i];
    }

    let mut features = Vec::new();
    if cfg.variant != Variant::Ffnn {
        let query: Vec<f64> = match cfg.variant {
            Variant::FfnnSa => xs.clone(),
            Variant::FfnnCa => decay.clone(),
            _ => decay.iter().chain(z).copied().collect(),
        };
        let e = mat(p, "tokens.value_embed");
        let u = mat(p, "tokens.identity_embed");
        let de = e.cols;
        let tokens: Vec<Vec<f64>> = (0..xs.len())
            .map(|j| {
                (0..de)
                    .map(|k| xs[j] * e.data[j * de + k] + u.data[j * de + k])
                    .collect()
            })
            .collect();
        let mut out = p.get("attn.output_bias").unwrap().data().to_vec();
        for h in 0..cfg.heads {
            let wq = mat(p, &format!("attn.h{h}.query"));
            let wk = mat(p, &format!("attn.h{h}.key"));
            let wv = mat(p, &format!("attn.h{h}.value"));
            let wo = mat(p, &format!("attn.h{h}.output"));
            let q = vm(&query, &wq);
            let scores: Vec<f64> = tokens
                .iter()
                .map(|t| {
                    let k = vm(t, &wk);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (wk.cols as f64).sqrt()
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; wv.cols];
            for (t, ex) in tokens.iter().zip(&exps) {
                for (c, v) in ctx.iter_mut().zip(vm(t, &wv)) {
                    *c += ex / sum * v;
                }
            }
            for (o, v) in out.iter_mut().zip(vm(&ctx, &wo)) {
                *o += v;
            }
        }
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let gain = p.get("attn.norm_gain").unwrap().data();
        let bias = p.get("attn.norm_bias").unwrap().data();
        for (k, v) in out.iter().enumerate() {
            features.push((v - mean) / (var + 1e-5).sqrt() * gain[k] + bias[k]);
        }
    }
    features.extend(&xs);
    features.extend(z);

    let mut h = features;
    for i in 0..cfg.hidden_sizes.len() {
        let a = vm(&h, &mat(p, &format!("dense{i}.weight")));
        let b = p.get(&format!("dense{i}.bias")).unwrap().data();
        h = a.iter().zip(b).map(|(a, b)| (a + b).max(0.0)).collect();
    }
    let logit = vm(&h, &mat(p, "head.weight"))[0] + p.get("head.bias").unwrap().data()[0];
    cfg.output_scale / (1.0 + (-logit).exp())
}

fn random_network(variant: Variant, dims: InputDims, seed: u64) -> Network<f64> {
    let mut net = Network::init(ModelConfig::with_variant(variant), dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, _, t) in net.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    net
}

#[test]
fn batched_forward_matches_straight_line_oracle() {
    let schema = FeatureSchema::default();
    let dims = InputDims::from_schema(&schema);
    let (c, k, m) = (dims.clinical, dims.tracked.len(), dims.comorbidities);
    let rows = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..rows * c).map(|_| rng.random_range(-2.5..2.5)).collect();
    let dt: Vec<f64> = (0..rows * k).map(|_| rng.random_range(0.0..72.0)).collect();
    let z: Vec<f64> = (0..rows * m)
        .map(|_| f64::from(u8::from(rng.random_bool(0.2))))
        .collect();
    let batch = Batch::from_rows(rows, &x, &dt, &z).unwrap();

    for (s, variant) in Variant::ALL.into_iter().enumerate() {
        let net = random_network(variant, dims.clone(), s as u64);
        let risks = net.predict_batch(&batch).unwrap();
        for i in 0..rows {
            let want = straight_line(
                &net,
                &x[i * c..(i + 1) * c],
                &dt[i * k..(i + 1) * k],
                &z[i * m..(i + 1) * m],
            );
            assert!(
                (risks[i] - want).abs() < 1e-10,
                "{variant} row {i}: {} vs {want}",
                risks[i]
            );
            assert!((0.0..=2.0).contains(&risks[i]));
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let schema = FeatureSchema::default();
    let dims = InputDims::from_schema(&schema);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = 5;
    let x: Vec<f64> = (0..rows * dims.clinical)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let dt: Vec<f64> = (0..rows * dims.tracked.len())
        .map(|_| rng.random_range(0.0..10.0))
        .collect();
    let z = vec![0.0; rows * dims.comorbidities];
    let net = random_network(Variant::FfnnMha, dims, 4);
    let wide = net
        .predict_batch(&Batch::from_rows(rows, &x, &dt, &z).unwrap())
        .unwrap();
    let narrow = net
        .cast::<f32>()
        .predict_batch(&Batch::from_rows(rows, &x, &dt, &z).unwrap())
        .unwrap();
    for (a, b) in wide.iter().zip(&narrow) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}
