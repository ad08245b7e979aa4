//! Bilinear models: two-factor combinations that are linear in either factor
//! with the other held fixed.
//!
//! The learnable mixing weights live in the fully connected layer that
//! consumes the outer-product vector, so the op itself is parameter-free.

use crate::tensor::{Element, Result, Tape, TensorError, Var};

/// Vectorized outer product of two vectors: `out[i*J + j] = a_i * b_j`.
/// Accepts rank-1 vectors `[I]`, `[J]`.
pub fn bilinear_outer<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 1 || sb.len() != 1 {
        return Err(TensorError::Shape {
            op: "bilinear_outer",
            detail: format!("expected vectors, got {sa:?} x {sb:?}"),
        });
    }
    let ar = tape.reshape(a, vec![1, sa[0]])?;
    let br = tape.reshape(b, vec![1, sb[0]])?;
    let out = tape.outer_rows(ar, br)?;
    tape.reshape(out, vec![sa[0] * sb[0]])
}

/// Batched outer product of row pairs: `[N, I] x [N, J] -> [N, I*J]`.
pub fn bilinear_outer_rows<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    tape.outer_rows(a, b)
}

/// Self outer products at each spatial location, sum-pooled over the grid:
/// `[N, C, H, W] -> [N, C*C]`. Used by the Bilinear-CNN baseline head.
pub fn pooled_bilinear<T: Element>(tape: &mut Tape<T>, featmap: Var) -> Result<Var> {
    tape.pooled_bilinear(featmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::rng_for;
    use crate::tensor::gradcheck::{finite_difference_gradcheck, DEFAULT_STEP, LAYER_TOL};
    use crate::tensor::{Tape, Tensor};

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn outer_of_basis_vectors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[2], &[1.0, 0.0]), false);
        let b = tape.leaf(&t64(&[2], &[0.0, 1.0]), false);
        let y = bilinear_outer(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn outer_of_unit_bases_is_an_indicator() {
        for i in 0..3 {
            for j in 0..4 {
                let mut a = vec![0.0; 3];
                let mut b = vec![0.0; 4];
                a[i] = 1.0;
                b[j] = 1.0;
                let mut tape = Tape::<f64>::new();
                let av = tape.leaf(&t64(&[3], &a), false);
                let bv = tape.leaf(&t64(&[4], &b), false);
                let y = bilinear_outer(&mut tape, av, bv).unwrap();
                let out = tape.value(y).data();
                for (k, &v) in out.iter().enumerate() {
                    let expect = if k == i * 4 + j { 1.0 } else { 0.0 };
                    assert_eq!(v, expect);
                }
            }
        }
    }

    #[test]
    fn bilinearity_in_the_first_factor() {
        // Y(alpha a1 + beta a2, b) = alpha Y(a1, b) + beta Y(a2, b)
        let mut rng = rng_for(3, &[7]);
        for _ in 0..20 {
            let a1 = Tensor::<f64>::rand_uniform(vec![5], -1.0, 1.0, &mut rng);
            let a2 = Tensor::<f64>::rand_uniform(vec![5], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::rand_uniform(vec![5], -1.0, 1.0, &mut rng);
            let (alpha, beta) = (0.37, -1.25);

            let eval = |a: &Tensor<f64>, b: &Tensor<f64>| {
                let mut tape = Tape::new();
                let av = tape.leaf(a, false);
                let bv = tape.leaf(b, false);
                let y = bilinear_outer(&mut tape, av, bv).unwrap();
                tape.value(y).data().to_vec()
            };

            let mixed = Tensor::from_vec(
                vec![5],
                a1.data()
                    .iter()
                    .zip(a2.data())
                    .map(|(&x, &y)| alpha * x + beta * y)
                    .collect(),
            )
            .unwrap();
            let lhs = eval(&mixed, &b);
            let y1 = eval(&a1, &b);
            let y2 = eval(&a2, &b);
            for ((l, p), q) in lhs.iter().zip(&y1).zip(&y2) {
                assert!((l - (alpha * p + beta * q)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pooled_bilinear_constant_field() {
        // constant channel vector u at P locations -> P * (u outer u)
        let u = [0.5, -1.5];
        let (h, w) = (2, 3);
        let p = (h * w) as f64;
        let mut data = Vec::new();
        for &uv in &u {
            data.extend(std::iter::repeat(uv).take(h * w));
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2, h, w], &data), false);
        let y = pooled_bilinear(&mut tape, x).unwrap();
        let out = tape.value(y).data();
        for i in 0..2 {
            for j in 0..2 {
                assert!((out[i * 2 + j] - p * u[i] * u[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooled_bilinear_single_location_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2, 1, 1], &[3.0, 4.0]), false);
        let y = pooled_bilinear(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0, 12.0, 12.0, 16.0]);
    }

    #[test]
    fn pooled_bilinear_matches_oracle_and_is_location_order_invariant() {
        let mut rng = rng_for(8, &[1]);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let expect = reference::pooled_bilinear(x.data(), x.shape());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let y = pooled_bilinear(&mut tape, xv).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12);
        }

        // swap two spatial locations in every channel; sum pooling is blind to it
        let mut xswap = x.clone();
        for item in 0..2 {
            for ch in 0..3 {
                let base = (item * 3 + ch) * 4;
                xswap.data_mut().swap(base, base + 3);
            }
        }
        let mut tape2 = Tape::new();
        let xv2 = tape2.leaf(&xswap, false);
        let y2 = pooled_bilinear(&mut tape2, xv2).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape2.value(y2).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pooled_bilinear_is_symmetric_as_a_matrix() {
        let mut rng = rng_for(12, &[2]);
        let x = Tensor::<f64>::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let y = pooled_bilinear(&mut tape, xv).unwrap();
        let out = tape.value(y).data();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(out[i * 4 + j].to_bits(), out[j * 4 + i].to_bits());
            }
        }
    }

    #[test]
    fn bilinear_ops_pass_gradcheck() {
        let mut rng = rng_for(77, &[3]);
        let a = Tensor::<f64>::rand_uniform(vec![4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![3], -1.0, 1.0, &mut rng);
        let probe = Tensor::<f64>::rand_uniform(vec![12], -1.0, 1.0, &mut rng);
        let report = finite_difference_gradcheck(
            move |tape, vars| {
                let y = bilinear_outer(tape, vars[0], vars[1])?;
                let p = tape.leaf(&probe, false);
                let prod = tape.mul(y, p)?;
                tape.sum_all(prod)
            },
            &[("a".into(), a), ("b".into(), b)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(LAYER_TOL));

        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let probe2 = Tensor::<f64>::rand_uniform(vec![2, 9], -1.0, 1.0, &mut rng);
        let report2 = finite_difference_gradcheck(
            move |tape, vars| {
                let y = pooled_bilinear(tape, vars[0])?;
                let p = tape.leaf(&probe2, false);
                let prod = tape.mul(y, p)?;
                tape.sum_all(prod)
            },
            &[("x".into(), x)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report2.passes(LAYER_TOL));
    }
}
