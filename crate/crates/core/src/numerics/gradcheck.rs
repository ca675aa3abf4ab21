//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Bindings, Graph, Mode, ParamKind, ParamStore, Result, Tensor, Var};

/// Relative-error floor in the denominator, so exact zeros compare cleanly.
const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Finite-difference settings. The function under test is rebuilt on a fresh
/// graph for every evaluation with the same `seed`, so dropout in
/// [`Mode::Train`] sees identical masks and stays deterministic.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            mode: Mode::Eval,
            seed: 0,
        }
    }
}

impl GradCheck {
    fn evaluate<F>(&self, params: &ParamStore<f64>, f: &F) -> Result<f64>
    where
        F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
    {
        let mut g = Graph::with_seed(self.mode, self.seed);
        let b = g.bind(params);
        let out = f(&mut g, &b)?;
        Ok(g.value(out).data()[0])
    }

    /// Max over all parameter entries of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub fn run<F>(&self, params: &ParamStore<f64>, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
    {
        let mut g = Graph::with_seed(self.mode, self.seed);
        let b = g.bind(params);
        let out = f(&mut g, &b)?;
        let analytic = g.backward(out)?.params();

        let mut work = params.clone();
        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            worst_parameter: None,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
        };
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let n = params.get(&name)?.len();
            for i in 0..n {
                let original = work.get(&name)?.data()[i];
                work.get_mut(&name)?.data_mut()[i] = original + self.epsilon;
                let plus = self.evaluate(&work, &f)?;
                work.get_mut(&name)?.data_mut()[i] = original - self.epsilon;
                let minus = self.evaluate(&work, &f)?;
                work.get_mut(&name)?.data_mut()[i] = original;

                let numeric = (plus - minus) / (2.0 * self.epsilon);
                let a = analytic[&name].data()[i];
                let denom = a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
                let err = (a - numeric).abs() / denom;
                report.checked += 1;
                if report.worst_parameter.is_none() || err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst_parameter = Some(name.clone());
                    report.worst_index = i;
                    report.worst_analytic = a;
                    report.worst_numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

/// Eval-mode check with the given step size.
pub fn grad_check<F>(params: &ParamStore<f64>, f: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    GradCheck {
        epsilon,
        ..GradCheck::default()
    }
    .run(params, f)
}

#[derive(Clone, Debug, Serialize)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    AwayFromZero,
    Positive,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, domain: Domain) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-2.0..2.0),
            Domain::AwayFromZero => {
                let m: f64 = rng.random_range(0.2..2.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            }
            Domain::Positive => rng.random_range(0.5..3.0),
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// entry contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let (r, c) = g.value(y).dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = g.constant(random_tensor(&mut rng, r, c, Domain::Any));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Finite-difference check of every primitive on randomized shapes.
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(2..=6usize);
    let (r, k, c, r2) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));

    let store = |rng: &mut ChaCha8Rng, specs: &[(&str, usize, usize, Domain)]| {
        let mut s = ParamStore::new();
        for &(name, rows, cols, domain) in specs {
            s.insert(
                name,
                ParamKind::Weight,
                random_tensor(rng, rows, cols, domain),
            );
        }
        s
    };

    type Body = dyn Fn(&mut Graph<f64>, &Bindings) -> Result<Var>;
    let mut cases: Vec<(&'static str, ParamStore<f64>, Mode, Box<Body>)> = Vec::new();
    let any = Domain::Any;

    cases.push((
        "matmul",
        store(&mut rng, &[("a", r, k, any), ("b", k, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.matmul(b.get("a")?, b.get("b")?)),
    ));
    cases.push((
        "add",
        store(&mut rng, &[("a", r, c, any), ("b", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.add(b.get("a")?, b.get("b")?)),
    ));
    cases.push((
        "add_bias",
        store(&mut rng, &[("a", r, c, any), ("b", 1, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.add(b.get("a")?, b.get("b")?)),
    ));
    cases.push((
        "sub",
        store(&mut rng, &[("a", r, c, any), ("b", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.sub(b.get("a")?, b.get("b")?)),
    ));
    cases.push((
        "multiply",
        store(&mut rng, &[("a", r, c, any), ("b", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.mul(b.get("a")?, b.get("b")?)),
    ));
    cases.push((
        "concat_axis0",
        store(&mut rng, &[("a", r, c, any), ("b", r2, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.concat(&[b.get("a")?, b.get("b")?], 0)),
    ));
    cases.push((
        "concat_axis1",
        store(&mut rng, &[("a", r, c, any), ("b", r, k, any)]),
        Mode::Eval,
        Box::new(|g, b| g.concat(&[b.get("a")?, b.get("b")?], 1)),
    ));
    cases.push((
        "exp",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| Ok(g.exp(b.get("a")?))),
    ));
    cases.push((
        "sigmoid",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| Ok(g.sigmoid(b.get("a")?))),
    ));
    cases.push((
        "relu",
        store(&mut rng, &[("a", r, c, Domain::AwayFromZero)]),
        Mode::Eval,
        Box::new(|g, b| Ok(g.relu(b.get("a")?))),
    ));
    cases.push((
        "softplus",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| Ok(g.softplus(b.get("a")?))),
    ));
    cases.push((
        "sqrt",
        store(&mut rng, &[("a", r, c, Domain::Positive)]),
        Mode::Eval,
        Box::new(|g, b| Ok(g.sqrt(b.get("a")?))),
    ));
    cases.push((
        "abs",
        store(&mut rng, &[("a", r, c, Domain::AwayFromZero)]),
        Mode::Eval,
        Box::new(|g, b| Ok(g.abs(b.get("a")?))),
    ));
    for axis in [0usize, 1] {
        cases.push((
            if axis == 0 {
                "softmax_axis0"
            } else {
                "softmax_axis1"
            },
            store(&mut rng, &[("a", r, c, any)]),
            Mode::Eval,
            Box::new(move |g, b| g.softmax(b.get("a")?, axis)),
        ));
        cases.push((
            if axis == 0 {
                "layer_norm_axis0"
            } else {
                "layer_norm_axis1"
            },
            store(&mut rng, &[("a", r.max(3), c.max(3), any)]),
            Mode::Eval,
            Box::new(move |g, b| g.layer_norm(b.get("a")?, axis, 1e-5)),
        ));
    }
    cases.push((
        "dropout_train",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Train,
        Box::new(|g, b| g.dropout(b.get("a")?, 0.3)),
    ));
    cases.push((
        "dropout_eval",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.dropout(b.get("a")?, 0.3)),
    ));
    cases.push((
        "scale",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| Ok(g.scale(b.get("a")?, -1.7))),
    ));
    cases.push((
        "transpose",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| g.transpose(b.get("a")?)),
    ));
    cases.push((
        "sum",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| {
            let a = b.get("a")?;
            let sq = g.mul(a, a)?;
            Ok(g.sum(sq))
        }),
    ));
    cases.push((
        "mean",
        store(&mut rng, &[("a", r, c, any)]),
        Mode::Eval,
        Box::new(|g, b| {
            let a = b.get("a")?;
            let e = g.exp(a);
            Ok(g.mean(e))
        }),
    ));

    cases
        .into_iter()
        .map(|(name, params, mode, body)| {
            let check = GradCheck {
                mode,
                seed: seed ^ 0xd00d,
                ..GradCheck::default()
            };
            let report = check.run(&params, |g, b| {
                let y = body(g, b)?;
                weighted_sum(g, y)
            })?;
            Ok(PrimitiveCheck {
                name,
                max_relative_error: report.max_relative_error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::CORRUPT_SIGMOID_BACKWARD;

    #[test]
    fn linear_function_is_exact() {
        let mut p = ParamStore::new();
        p.insert(
            "w",
            ParamKind::Weight,
            Tensor::row(vec![0.5, -1.5, 2.0]).unwrap(),
        );
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, -3.0]).unwrap();
        let report = grad_check(
            &p,
            |g, b| {
                let xv = g.constant(x.clone());
                g.matmul(b.get("w")?, xv)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn every_primitive_passes() {
        for seed in 0..5 {
            for check in primitive_suite(seed).unwrap() {
                assert!(
                    check.max_relative_error < 1e-4,
                    "seed {seed}: {} {}",
                    check.name,
                    check.max_relative_error
                );
            }
        }
    }

    #[test]
    fn corrupted_sigmoid_backward_is_caught() {
        CORRUPT_SIGMOID_BACKWARD.with(|c| c.set(true));
        let result = primitive_suite(3);
        CORRUPT_SIGMOID_BACKWARD.with(|c| c.set(false));
        let sigmoid = result
            .unwrap()
            .into_iter()
            .find(|c| c.name == "sigmoid")
            .unwrap();
        assert!(sigmoid.max_relative_error > 1e-2, "{sigmoid:?}");
    }

    #[test]
    fn matmul_backward_matches_finite_differences_5x4x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamStore::new();
        p.insert(
            "a",
            ParamKind::Weight,
            random_tensor(&mut rng, 5, 4, Domain::Any),
        );
        p.insert(
            "b",
            ParamKind::Weight,
            random_tensor(&mut rng, 4, 3, Domain::Any),
        );
        let report = grad_check(
            &p,
            |g, b| {
                let y = g.matmul(b.get("a")?, b.get("b")?)?;
                weighted_sum(g, y)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4);
    }
}
