//! Central finite-difference validation of analytic gradients.
//!
//! Checks run at 64-bit only: the differencing step h = 1e-5 is below f32
//! resolution, so 32-bit runs would drown in rounding noise. The numeric side
//! rebuilds the forward pass from scratch for every probe and never touches
//! the backward machinery it validates.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_err < self.tol && self.max_err.is_finite()
    }
}

/// Mixed relative/absolute error: |a − n| / max(1, |a|, |n|), maximized over
/// elements. The unit floor keeps near-zero gradients from amplifying
/// differencing noise.
pub fn max_mixed_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` at `params`, one probe pair per element.
pub fn central_diff(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    params: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p][i] += h;
            let fp = f(&plus);
            let mut minus = params.to_vec();
            minus[p][i] -= h;
            let fm = f(&minus);
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// A differentiable graph to validate: parameter values plus a builder that
/// assembles a scalar loss on a fresh tape.
pub struct GraphCheck<'a> {
    pub name: &'a str,
    pub params: Vec<(Vec<f64>, Vec<usize>)>,
    pub build: Box<dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>> + 'a>,
    pub tol: f64,
}

pub fn check_graph(check: &GraphCheck) -> CheckReport {
    let leaves: Vec<Tensor<f64>> = check
        .params
        .iter()
        .map(|(data, shape)| Tensor::from_vec(data.clone(), shape, true).expect("valid check shape"))
        .collect();
    let tape = Tape::new();
    let loss = (check.build)(&tape, &leaves).expect("check graph must build");
    tape.backward(&loss).expect("check loss must be scalar");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut eval = |vals: &[Vec<f64>]| -> f64 {
        let leaves: Vec<Tensor<f64>> = vals
            .iter()
            .zip(&check.params)
            .map(|(data, (_, shape))| {
                Tensor::from_vec(data.clone(), shape, false).expect("valid check shape")
            })
            .collect();
        let tape = Tape::new();
        let loss = (check.build)(&tape, &leaves).expect("check graph must build");
        loss.scalar().expect("check loss must be scalar")
    };
    let values: Vec<Vec<f64>> = check.params.iter().map(|(d, _)| d.clone()).collect();
    let numeric = central_diff(&mut eval, &values, FD_STEP);

    let max_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_mixed_error(a, n))
        .fold(0.0, f64::max);
    CheckReport { name: check.name.to_string(), max_err, tol: check.tol }
}

fn rand_data(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (data, shape.to_vec())
}

/// Per-operation gradient checks over randomized shapes (dims up to 4×8×8).
pub fn op_checks(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=8usize);
    let k = rng.random_range(1..=8usize);
    let n = rng.random_range(1..=8usize);

    let mut reports = Vec::new();

    let checks: Vec<GraphCheck> = vec![
        GraphCheck {
            name: "matmul_2d",
            params: vec![rand_data(&mut rng, &[m, k]), rand_data(&mut rng, &[k, n])],
            build: Box::new(|t, p| t.sum_all(&t.matmul(&p[0], &p[1])?)),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "matmul_batched_shared_rhs",
            params: vec![rand_data(&mut rng, &[b, m, k]), rand_data(&mut rng, &[k, n])],
            build: Box::new(|t, p| t.sum_all(&t.matmul(&p[0], &p[1])?)),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "matmul_batched_matched",
            params: vec![rand_data(&mut rng, &[b, m, k]), rand_data(&mut rng, &[b, k, n])],
            build: Box::new(|t, p| t.sum_all(&t.matmul(&p[0], &p[1])?)),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "matmul_nt",
            params: vec![rand_data(&mut rng, &[b, m, k]), rand_data(&mut rng, &[b, n, k])],
            build: Box::new(|t, p| t.sum_all(&t.matmul_nt(&p[0], &p[1])?)),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "add_broadcast_bias",
            params: vec![rand_data(&mut rng, &[b, m, n]), rand_data(&mut rng, &[n])],
            build: Box::new(|t, p| {
                let s = t.add(&p[0], &p[1])?;
                let sq = t.mul(&s, &s)?;
                t.sum_all(&sq)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "sub_mul_broadcast",
            params: vec![rand_data(&mut rng, &[m, n]), rand_data(&mut rng, &[1, n])],
            build: Box::new(|t, p| {
                let d = t.sub(&p[0], &p[1])?;
                let q = t.mul(&d, &p[0])?;
                t.mean_all(&q)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "scale_transpose_reshape",
            params: vec![rand_data(&mut rng, &[m, n])],
            build: Box::new(move |t, p| {
                let s = t.scale(&p[0], 1.7)?;
                let tr = t.transpose(&s)?;
                let r = t.reshape(&tr, &[n * m])?;
                let sq = t.mul(&r, &r)?;
                t.sum_all(&sq)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "narrow_concat",
            params: vec![rand_data(&mut rng, &[4, 6]), rand_data(&mut rng, &[4, 3])],
            build: Box::new(|t, p| {
                let left = t.narrow(&p[0], 1, 0, 2)?;
                let right = t.narrow(&p[0], 1, 3, 3)?;
                let joined = t.concat(&[left, p[1].clone(), right], 1)?;
                let sq = t.mul(&joined, &joined)?;
                t.sum_all(&sq)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "softmax_last_axis",
            params: vec![rand_data(&mut rng, &[b, m, n.max(2)])],
            build: Box::new(|t, p| {
                let s = t.softmax(&p[0], 2)?;
                let sq = t.mul(&s, &s)?;
                t.sum_all(&sq)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "softmax_middle_axis",
            params: vec![rand_data(&mut rng, &[b, m.max(2), n])],
            build: Box::new(|t, p| {
                let s = t.softmax(&p[0], 1)?;
                let sq = t.mul(&s, &s)?;
                t.sum_all(&sq)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "layer_norm",
            params: vec![
                rand_data(&mut rng, &[m.max(2), 4]),
                rand_data(&mut rng, &[4]),
                rand_data(&mut rng, &[4]),
            ],
            build: Box::new(|t, p| {
                let ln = t.layer_norm(&p[0], &p[1], &p[2], 1e-5)?;
                let sq = t.mul(&ln, &ln)?;
                t.sum_all(&sq)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "gelu",
            params: vec![rand_data(&mut rng, &[m, n])],
            build: Box::new(|t, p| {
                let g = t.gelu(&p[0])?;
                t.sum_all(&g)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "embedding_table",
            params: vec![rand_data(&mut rng, &[6, k])],
            build: Box::new(|t, p| {
                let e = t.embedding(&p[0], &[0, 3, 3, 5])?;
                let sq = t.mul(&e, &e)?;
                t.sum_all(&sq)
            }),
            tol: DEFAULT_TOL,
        },
        GraphCheck {
            name: "cross_entropy",
            params: vec![rand_data(&mut rng, &[m.max(2), 5])],
            build: Box::new(move |t, p| t.cross_entropy(&p[0], &vec![1usize; m.max(2)])),
            tol: DEFAULT_TOL,
        },
    ];

    for check in &checks {
        reports.push(check_graph(check));
    }
    reports
}

/// Analytic-vs-numeric softmax Jacobian at a fixed probe point.
pub fn softmax_jacobian_check() -> CheckReport {
    let x0 = vec![0.1, 0.2, 0.3];
    let n = x0.len();
    let mut analytic = vec![0.0; n * n];
    for i in 0..n {
        let x = Tensor::<f64>::from_vec(x0.clone(), &[n], true).unwrap();
        let tape = Tape::new();
        let s = tape.softmax(&x, 0).unwrap();
        let row = tape.narrow(&s, 0, i, 1).unwrap();
        tape.backward(&row).unwrap();
        analytic[i * n..(i + 1) * n].copy_from_slice(&x.grad().unwrap());
    }
    let mut numeric = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let mut eval = |x: &[f64]| {
                let t = Tensor::<f64>::from_vec(x.to_vec(), &[n], false).unwrap();
                let tape = Tape::new();
                tape.softmax(&t, 0).unwrap().value()[i]
            };
            let mut plus = x0.clone();
            plus[j] += FD_STEP;
            let mut minus = x0.clone();
            minus[j] -= FD_STEP;
            numeric[i * n + j] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
    }
    CheckReport {
        name: "softmax_jacobian".to_string(),
        max_err: max_mixed_error(&analytic, &numeric),
        tol: 1e-5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_fd_check() {
        for seed in [7u64, 21, 1234] {
            for report in op_checks(seed) {
                assert!(
                    report.passed(),
                    "op {} failed: err {} >= tol {} (seed {seed})",
                    report.name,
                    report.max_err,
                    report.tol
                );
            }
        }
    }

    #[test]
    fn softmax_jacobian_matches_fd() {
        let r = softmax_jacobian_check();
        assert!(r.passed(), "jacobian err {}", r.max_err);
    }

    #[test]
    fn matmul_grad_matches_hand_value() {
        // d/dA sum(A·B) with B all ones is a row-sum broadcast: every entry 2.
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let b = Tensor::<f64>::from_vec(vec![1.0; 4], &[2, 2], false).unwrap();
        let tape = Tape::new();
        let c = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum_all(&c).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0, 2.0, 2.0]);
    }
}
