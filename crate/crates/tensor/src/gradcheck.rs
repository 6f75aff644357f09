//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The numeric side only evaluates the forward function, so it shares no code
//! path with the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Lower bound on the denominator of the relative error, so gradients
    /// that are zero up to rounding do not blow the ratio up.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub rel_tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.rel_tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_selected(inputs, &all, f, cfg)
}

/// Checks only the listed (input, element) pairs.
pub fn check_selected<F>(
    inputs: &[Tensor<f64>],
    selection: &[(usize, usize)],
    f: F,
    cfg: GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let ids: Vec<usize> = vars.iter().map(|v| v.id()).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        ids.iter()
            .zip(inputs)
            .map(|(&id, t)| {
                grads
                    .get_id(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect::<Vec<_>>()
    };
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        rel_tol: cfg.rel_tol,
    };
    let mut work = inputs.to_vec();
    for &(i, e) in selection {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + cfg.step;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - cfg.step;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i].data()[e];
        let err = relative_error(a, numeric, cfg.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            if err >= report.max_rel_error {
                report.worst = Some((i, e, a, numeric));
            }
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
    Ok(report)
}

/// Largest relative error of one op over its random instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub trials: u64,
    pub max_rel_error: f64,
    pub rel_tol: f64,
    /// First failing trial and its report.
    pub failure: Option<(u64, GradcheckReport)>,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// One differentiable op family of the suite.
#[derive(Clone, Copy)]
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<OpCheck>,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Reduces `out` to a scalar through fixed random weights, so that every
/// output element contributes a distinct coefficient.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(random(&mut rng, &out.shape(), -1.0, 1.0));
    Ok(out.mul(w)?.sum_all())
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..4)).collect()
}

fn sweep<S, F>(name: &'static str, trials: u64, mut setup: S, f: F) -> Result<OpCheck>
where
    S: FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>], u64) -> Result<Var<'t, f64>>,
{
    let cfg = GradcheckConfig::default();
    let mut out = OpCheck {
        name,
        trials,
        max_rel_error: 0.0,
        rel_tol: cfg.rel_tol,
        failure: None,
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let inputs = setup(&mut rng);
        let report = check(
            &inputs,
            |tape, vars| {
                let out = f(tape, vars, trial)?;
                project(tape, out, trial)
            },
            cfg,
        )?;
        out.max_rel_error = out.max_rel_error.max(report.max_rel_error);
        if !report.passed() && out.failure.is_none() {
            out.failure = Some((trial, report));
        }
    }
    Ok(out)
}

/// Every differentiable op, each checked on random small f64 instances
/// (step 1e-5, relative tolerance 1e-4).
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            run: |trials| {
                sweep(
                    "matmul",
                    trials,
                    |rng| {
                        let lead = dims(rng, 1);
                        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                        vec![
                            random(rng, &[lead[0], m, k], -1.0, 1.0),
                            random(rng, &[k, n], -1.0, 1.0),
                        ]
                    },
                    |_, v, _| v[0].matmul(v[1]),
                )
            },
        },
        OpCase {
            name: "matmul_batched",
            run: |trials| {
                sweep(
                    "matmul_batched",
                    trials,
                    |rng| {
                        let b = rng.random_range(1..4);
                        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                        vec![random(rng, &[b, m, k], -1.0, 1.0), random(rng, &[b, k, n], -1.0, 1.0)]
                    },
                    |_, v, _| v[0].matmul(v[1]),
                )
            },
        },
        OpCase {
            name: "binary",
            run: |trials| {
                sweep(
                    "binary",
                    trials,
                    |rng| {
                        let shape = dims(rng, 3);
                        let suffix = shape[rng.random_range(0..3)..].to_vec();
                        vec![random(rng, &shape, -1.0, 1.0), random(rng, &suffix, -1.0, 1.0)]
                    },
                    |_, v, t| match t % 4 {
                        0 => v[0].add(v[1]),
                        1 => v[0].sub(v[1]),
                        2 => v[0].mul(v[1]),
                        _ => v[1].mul(v[0])?.sub(v[0]),
                    },
                )
            },
        },
        OpCase {
            name: "scalar_ops",
            run: |trials| {
                sweep(
                    "scalar_ops",
                    trials,
                    |rng| {
                        let s = dims(rng, 2);
                        vec![random(rng, &s, -1.0, 1.0)]
                    },
                    |_, v, _| Ok(v[0].scale(-1.7).add_scalar(0.3).mul(v[0])?),
                )
            },
        },
        OpCase {
            name: "concat_slice",
            run: |trials| {
                sweep(
                    "concat_slice",
                    trials,
                    |rng| {
                        let mut a = dims(rng, 3);
                        a[1] += 1;
                        let mut b = a.clone();
                        b[1] = rng.random_range(1..4);
                        vec![random(rng, &a, -1.0, 1.0), random(rng, &b, -1.0, 1.0)]
                    },
                    |tape, v, _| {
                        let c = tape.concat(&[v[0], v[1], v[0]], 1)?;
                        let n = c.shape()[1];
                        c.slice(1, 1, n - 1)
                    },
                )
            },
        },
        OpCase {
            name: "shape",
            run: |trials| {
                sweep(
                    "shape",
                    trials,
                    |rng| {
                        let s = dims(rng, 3);
                        vec![random(rng, &s, -1.0, 1.0)]
                    },
                    |_, v, t| {
                        let s = v[0].shape();
                        let p = v[0].permute(&[2, 0, 1])?;
                        let r = p.reshape(&[s[2] * s[0], s[1]])?;
                        if t % 2 == 0 {
                            r.transpose(0, 1)
                        } else {
                            Ok(r)
                        }
                    },
                )
            },
        },
        OpCase {
            name: "softmax",
            run: |trials| {
                sweep(
                    "softmax",
                    trials,
                    |rng| {
                        let s = dims(rng, 3);
                        vec![random(rng, &s, -2.0, 2.0)]
                    },
                    |_, v, t| v[0].softmax((t % 3) as usize),
                )
            },
        },
        OpCase {
            name: "reduce",
            run: |trials| {
                sweep(
                    "reduce",
                    trials,
                    |rng| {
                        let s = dims(rng, 3);
                        vec![random(rng, &s, -1.0, 1.0)]
                    },
                    |_, v, t| {
                        let axis = (t % 3) as usize;
                        match t % 4 {
                            0 => v[0].sum(axis),
                            1 => v[0].mean(axis),
                            2 => Ok(v[0].sum_all().mul(v[0])?),
                            _ => Ok(v[0].mean_all().mul(v[0])?),
                        }
                    },
                )
            },
        },
        OpCase {
            name: "unary",
            run: |trials| {
                sweep(
                    "unary",
                    trials,
                    |rng| {
                        let s = dims(rng, 2);
                        vec![random(rng, &s, -2.0, 2.0)]
                    },
                    |_, v, t| {
                        Ok(match t % 5 {
                            0 => v[0].gelu(),
                            1 => v[0].exp(),
                            2 => v[0].silu(),
                            3 => v[0].softplus(),
                            _ => v[0].tanh(),
                        })
                    },
                )
            },
        },
        OpCase {
            name: "sqrt_log",
            run: |trials| {
                sweep(
                    "sqrt_log",
                    trials,
                    |rng| {
                        let s = dims(rng, 2);
                        vec![random(rng, &s, 0.2, 3.0)]
                    },
                    |_, v, t| Ok(if t % 2 == 0 { v[0].sqrt() } else { v[0].log() }),
                )
            },
        },
        OpCase {
            name: "huber",
            run: |trials| {
                sweep(
                    "huber",
                    trials,
                    |rng| {
                        let shape = dims(rng, 2);
                        vec![Tensor::from_fn(shape, |_| {
                            let mag = if rng.random_bool(0.5) {
                                rng.random_range(0.0..0.4)
                            } else {
                                rng.random_range(0.6..2.0)
                            };
                            if rng.random_bool(0.5) {
                                mag
                            } else {
                                -mag
                            }
                        })]
                    },
                    |_, v, _| Ok(v[0].huber(0.5)),
                )
            },
        },
        OpCase {
            name: "layernorm",
            run: |trials| {
                sweep(
                    "layernorm",
                    trials,
                    |rng| {
                        let mut shape = dims(rng, 2);
                        shape[1] += 1;
                        vec![random(rng, &shape, -2.0, 2.0)]
                    },
                    |_, v, _| v[0].layernorm_noaffine(1e-5),
                )
            },
        },
        OpCase {
            name: "normalize_last",
            run: |trials| {
                sweep(
                    "normalize_last",
                    trials,
                    |rng| {
                        let s = dims(rng, 2);
                        vec![random(rng, &s, 0.3, 2.0)]
                    },
                    |_, v, _| v[0].normalize_last(1e-9),
                )
            },
        },
        OpCase {
            name: "attention",
            run: |trials| {
                sweep(
                    "attention",
                    trials,
                    |rng| {
                        let d = rng.random_range(1..7);
                        let (b, tq, tk) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
                        vec![
                            random(rng, &[b, tq, d], -1.0, 1.0),
                            random(rng, &[b, tk, d], -1.0, 1.0),
                            random(rng, &[b, tk, d], -1.0, 1.0),
                        ]
                    },
                    |_, v, t| {
                        // Two heads whenever the width allows it.
                        let heads = if v[0].shape()[2] % 2 == 0 { 2 } else { 1 };
                        let (tq, tk) = (v[0].shape()[1], v[1].shape()[1]);
                        // Keep column 0 open so no row is fully masked.
                        let mask = (t % 2 == 1).then(|| {
                            Tensor::from_fn([tq, tk], |i| if i % tk == 0 || (i / tk + i) % 3 != 0 { 0.0 } else { -1e9 })
                        });
                        v[0].attention(v[1], v[2], heads, mask.as_ref())
                    },
                )
            },
        },
        OpCase {
            name: "mlp",
            run: |trials| {
                sweep(
                    "mlp",
                    trials,
                    |rng| {
                        vec![
                            random(rng, &[4, 3], -1.0, 1.0),
                            random(rng, &[3, 5], -1.0, 1.0),
                            random(rng, &[5], -0.5, 0.5),
                            random(rng, &[5, 2], -1.0, 1.0),
                            random(rng, &[2], -0.5, 0.5),
                        ]
                    },
                    |_, v, _| {
                        let h = v[0].matmul(v[1])?.add(v[2])?.layernorm_noaffine(1e-5)?.gelu();
                        let out = h.matmul(v[3])?.add(v[4])?;
                        Ok(out.softmax(1)?.mul(out)?)
                    },
                )
            },
        },
    ]
}
