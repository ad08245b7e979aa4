//! Finite-difference gradient checking.
//!
//! Central differences at f64 against the tape's analytic adjoints. The
//! program under test must be deterministic; the harness runs it twice and
//! refuses to check anything that disagrees with itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
/// Per-layer tolerance; assembled architectures use 1e-4.
pub const LAYER_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub n_elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub params: Vec<ParamGradReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn worst_param(&self) -> Option<&ParamGradReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Checks d loss / d params for a scalar-valued tape program.
///
/// `f` receives one tracked leaf per entry of `params`, in order, and must
/// return the scalar loss. Relative error per element is
/// `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)`.
pub fn finite_difference_gradcheck<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    h: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).scalar()
    };

    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let base = eval(&tensors)?;
    if eval(&tensors)?.to_bits() != base.to_bits() {
        return Err(TensorError::Invalid(
            "gradcheck: program is not deterministic (two forward passes disagree)".into(),
        ));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("tracked leaf has grad").to_vec())
        .collect();

    let mut reports = Vec::with_capacity(params.len());
    let mut work = tensors.clone();
    for (pi, (name, _)) in params.iter().enumerate() {
        let n = work[pi].numel();
        let mut max_rel = 0.0f64;
        let mut sum_rel = 0.0f64;
        for e in 0..n {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ga = analytic[pi][e];
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            sum_rel += rel;
        }
        reports.push(ParamGradReport {
            name: name.clone(),
            max_rel_err: max_rel,
            mean_rel_err: if n > 0 { sum_rel / n as f64 } else { 0.0 },
            n_elements: n,
        });
    }
    Ok(GradcheckReport { params: reports })
}

// ── Primitive suite ─────────────────────────────────────────────────────
//
// One named check per tape primitive, exercised by the verification tests
// and the acceptance gradient suite.

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, rng)
}

/// Uniform values kept away from zero, for kinked ops (relu).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mag = 0.1 + 0.9 * rng.random::<f64>();
            if rng.random::<f64>() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// A second tensor offset elementwise from the first by at least 0.05, so
/// cross-tensor max ops keep their winners within +-h.
fn separated_from(rng: &mut ChaCha8Rng, base: &Tensor<f64>) -> Tensor<f64> {
    let data = base
        .data()
        .iter()
        .map(|&v| {
            let gap = 0.05 + 0.1 * rng.random::<f64>();
            if rng.random::<f64>() < 0.5 {
                v - gap
            } else {
                v + gap
            }
        })
        .collect();
    Tensor::from_vec(base.shape().to_vec(), data).unwrap()
}

/// Values with pairwise gaps, so max-style ops keep their argmax within +-h.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..numel).collect();
    for i in (1..numel).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let data = order
        .iter()
        .map(|&r| r as f64 / numel as f64 + 0.001 * rng.random::<f64>())
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar through a fixed random linear functional,
/// so each primitive is checked through non-trivial output gradients.
fn scalarize(tape: &mut Tape<f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let w = tape.leaf(probe, false);
    let prod = tape.mul(y, w)?;
    tape.sum_all(prod)
}

fn probe_like(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

pub fn primitive_check(name: &str, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    match name {
        "add" | "sub" | "mul" | "emax" => {
            let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let b = if name == "emax" {
                separated_from(&mut rng, &a)
            } else {
                uniform(&mut rng, &[3, 4], -1.0, 1.0)
            };
            let probe = probe_like(&mut rng, &[3, 4]);
            let op = name.to_string();
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = match op.as_str() {
                        "add" => tape.add(vars[0], vars[1])?,
                        "sub" => tape.sub(vars[0], vars[1])?,
                        "mul" => tape.mul(vars[0], vars[1])?,
                        _ => tape.emax(vars[0], vars[1])?,
                    };
                    scalarize(tape, y, &probe)
                },
                &[("a".into(), a), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        "scalar_mul" => {
            let a = uniform(&mut rng, &[5], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[5]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.scalar_mul(vars[0], -1.7)?;
                    scalarize(tape, y, &probe)
                },
                &[("a".into(), a)],
                DEFAULT_STEP,
            )
        }
        "matmul" => {
            let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[3, 2]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.matmul(vars[0], vars[1])?;
                    scalarize(tape, y, &probe)
                },
                &[("a".into(), a), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        "add_row_bias" => {
            let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, &[4], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[3, 4]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.add_row_bias(vars[0], vars[1])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x), ("bias".into(), b)],
                DEFAULT_STEP,
            )
        }
        "conv2d" => {
            let x = uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
            let w = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[4], -0.5, 0.5);
            let probe = probe_like(&mut rng, &[2, 4, 5, 5]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1], vars[2], 1, 1)?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x), ("w".into(), w), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        "conv2d_strided" => {
            let x = uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
            let w = uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
            let b = uniform(&mut rng, &[3], -0.5, 0.5);
            let probe = probe_like(&mut rng, &[1, 3, 3, 3]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1], vars[2], 2, 0)?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x), ("w".into(), w), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        "conv3d" => {
            let x = uniform(&mut rng, &[4, 1, 2, 4, 4], -1.0, 1.0);
            let w = uniform(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[2], -0.5, 0.5);
            let probe = probe_like(&mut rng, &[4, 1, 2, 4, 4]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.conv3d_views(vars[0], vars[1], vars[2])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x), ("w".into(), w), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        "relu" => {
            let x = away_from_zero(&mut rng, &[4, 5]);
            let probe = probe_like(&mut rng, &[4, 5]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.relu(vars[0])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "max_pool2d" => {
            let x = well_separated(&mut rng, &[1, 2, 4, 4]);
            let probe = probe_like(&mut rng, &[1, 2, 2, 2]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.max_pool2d(vars[0], 2, 2)?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "global_avg_pool" => {
            let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[2, 3]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.global_avg_pool(vars[0])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "softmax" => {
            let x = uniform(&mut rng, &[3, 5], -2.0, 2.0);
            let probe = probe_like(&mut rng, &[3, 5]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.softmax_rows(vars[0])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "cross_entropy" => {
            let x = uniform(&mut rng, &[4, 3], -2.0, 2.0);
            let targets = vec![0usize, 2, 1, 2];
            finite_difference_gradcheck(
                move |tape, vars| tape.cross_entropy_mean(vars[0], &targets),
                &[("logits".into(), x)],
                DEFAULT_STEP,
            )
        }
        "concat" => {
            let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[2, 2], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[2, 5]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.concat(&[vars[0], vars[1]], 1)?;
                    scalarize(tape, y, &probe)
                },
                &[("a".into(), a), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        "outer" => {
            let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[2, 4], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[2, 12]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.outer_rows(vars[0], vars[1])?;
                    scalarize(tape, y, &probe)
                },
                &[("a".into(), a), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        "l2_normalize" => {
            let x = uniform(&mut rng, &[2, 6], 0.2, 1.2);
            let probe = probe_like(&mut rng, &[2, 6]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.l2_normalize_rows(vars[0])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "reshape" => {
            let x = uniform(&mut rng, &[2, 6], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[3, 4]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.reshape(vars[0], vec![3, 4])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "transpose2d" => {
            let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[4, 3]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.transpose2d(vars[0])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "dropout" => {
            // Fixed mask seed per forward pass keeps the program deterministic.
            let x = uniform(&mut rng, &[4, 4], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[4, 4]);
            let mask_seed = seed.wrapping_mul(31).wrapping_add(7);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let y = tape.dropout(vars[0], 0.5, true, &mut mask_rng)?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "residuals" => {
            let x = uniform(&mut rng, &[4, 3], -1.0, 1.0);
            let c = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[4, 2, 3]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.residuals(vars[0], vars[1])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x), ("c".into(), c)],
                DEFAULT_STEP,
            )
        }
        "assign_weights" => {
            let r = uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
            let s = uniform(&mut rng, &[2], 0.2, 1.5);
            let probe = probe_like(&mut rng, &[3, 2]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.assign_weights(vars[0], vars[1])?;
                    scalarize(tape, y, &probe)
                },
                &[("r".into(), r), ("s".into(), s)],
                DEFAULT_STEP,
            )
        }
        "encode" => {
            let w = uniform(&mut rng, &[3, 2], 0.1, 0.9);
            let r = uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[2, 4]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.encode(vars[0], vars[1])?;
                    scalarize(tape, y, &probe)
                },
                &[("w".into(), w), ("r".into(), r)],
                DEFAULT_STEP,
            )
        }
        "pooled_bilinear" => {
            let x = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[2, 9]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.pooled_bilinear(vars[0])?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "slice_batch" => {
            let x = uniform(&mut rng, &[3, 2, 2], -1.0, 1.0);
            let probe = probe_like(&mut rng, &[1, 2, 2]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let y = tape.slice_batch(vars[0], 1)?;
                    scalarize(tape, y, &probe)
                },
                &[("x".into(), x)],
                DEFAULT_STEP,
            )
        }
        "stack_view_max" => {
            let a = uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
            let b = separated_from(&mut rng, &a);
            let probe = probe_like(&mut rng, &[1, 2, 3, 3]);
            finite_difference_gradcheck(
                move |tape, vars| {
                    let stack = tape.stack_views(&[vars[0], vars[1]])?;
                    let y = tape.view_max(stack)?;
                    scalarize(tape, y, &probe)
                },
                &[("a".into(), a), ("b".into(), b)],
                DEFAULT_STEP,
            )
        }
        other => Err(TensorError::Invalid(format!("unknown primitive check: {other}"))),
    }
}

/// Every primitive with an analytic adjoint, in suite order.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "emax",
    "matmul",
    "add_row_bias",
    "conv2d",
    "conv2d_strided",
    "conv3d",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "softmax",
    "cross_entropy",
    "concat",
    "outer",
    "l2_normalize",
    "reshape",
    "transpose2d",
    "dropout",
    "residuals",
    "assign_weights",
    "encode",
    "pooled_bilinear",
    "slice_batch",
    "stack_view_max",
];

/// Runs the whole primitive sweep; returns (name, seed, report) triples.
pub fn primitive_suite(seeds: &[u64]) -> Result<Vec<(String, u64, GradcheckReport)>> {
    let mut out = Vec::new();
    for &name in PRIMITIVES {
        for &seed in seeds {
            let report = primitive_check(name, seed)?;
            out.push((name.to_string(), seed, report));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_square_matches_calculus() {
        // f(x) = x^2 at x = 3: analytic 6.0, central differences agree to 1e-8.
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let report = finite_difference_gradcheck(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                tape.sum_all(sq)
            },
            &[("x".into(), x.clone())],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-8), "rel err {}", report.max_rel_err());

        // and the analytic value itself is 6
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(xv).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn nondeterministic_program_is_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let err = finite_difference_gradcheck(
            move |tape, vars| {
                let c = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let y = tape.scalar_mul(vars[0], 1.0 + c)?;
                tape.sum_all(y)
            },
            &[("x".into(), x)],
            DEFAULT_STEP,
        )
        .map(|_| ())
        .unwrap_err();
        assert!(matches!(err, TensorError::Invalid(_)));
    }

    #[test]
    fn primitive_suite_names_are_checkable() {
        for &name in PRIMITIVES {
            let report = primitive_check(name, 1).unwrap();
            assert!(
                report.passes(LAYER_TOL),
                "{name}: max rel err {}",
                report.max_rel_err()
            );
        }
    }
}
