//! Texture encoding layer: soft-assignment residual encoding of
//! convolutional descriptors against learned codewords.
//!
//! For descriptors X = {x_1..x_m} and codewords C = {c_1..c_n} with
//! smoothing factors s_1..s_n:
//!
//! ```text
//! r_ij = x_i - c_j
//! w_ij = exp(-s_j ||r_ij||^2) / sum_k exp(-s_k ||r_ik||^2)   (k over codewords)
//! e_j  = sum_i w_ij r_ij
//! ```
//!
//! The aggregation over descriptors makes E = {e_1..e_n} an orderless
//! representation: permuting descriptor rows leaves the output bit-identical.
//! See `Tape::assign_weights` for why the normalization runs over the
//! codeword axis and why the smoothing factors are per codeword.

use rand::Rng;

use crate::tensor::{Element, Result, Tape, Tensor, Var};

/// Learnable state of one encoding layer: codewords `[n, d]` and smoothing
/// factors `[n]`. Smoothing values are stored unconstrained and used as
/// given; nothing forces them positive.
pub struct EncodingInit {
    pub n_codewords: usize,
    pub dim: usize,
}

impl EncodingInit {
    /// Codewords drawn uniform in (-1/sqrt(n), 1/sqrt(n)) per element.
    pub fn codewords<T: Element, R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        let bound = 1.0 / (self.n_codewords as f64).sqrt();
        Tensor::rand_uniform(vec![self.n_codewords, self.dim], -bound, bound, rng)
    }

    /// Smoothing factors drawn uniform in (0, 1).
    pub fn smoothing<T: Element, R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        Tensor::rand_uniform(vec![self.n_codewords], 0.0, 1.0, rng)
    }
}

/// Residual encoding of a descriptor matrix `[m, d]`: returns `E` as `[n, d]`.
pub fn encode_descriptors<T: Element>(
    tape: &mut Tape<T>,
    descriptors: Var,
    codewords: Var,
    smoothing: Var,
) -> Result<Var> {
    let r = tape.residuals(descriptors, codewords)?;
    let w = tape.assign_weights(r, smoothing)?;
    tape.encode(w, r)
}

/// Encoding layer over a batched feature map `[N, C, H, W]`: per item, the
/// spatial grid becomes m = H*W descriptors of d = C channels, the encoding
/// is flattened to n*C and L2-normalized. Output `[N, n*C]`.
pub fn encoding_forward<T: Element>(
    tape: &mut Tape<T>,
    featmap: Var,
    codewords: Var,
    smoothing: Var,
) -> Result<Var> {
    let shape = tape.shape(featmap).to_vec();
    if shape.len() != 4 {
        return Err(crate::tensor::TensorError::Shape {
            op: "encoding_forward",
            detail: format!("expected [N, C, H, W], got {shape:?}"),
        });
    }
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let code_shape = tape.shape(codewords).to_vec();
    if code_shape[1] != c {
        return Err(crate::tensor::TensorError::Shape {
            op: "encoding_forward",
            detail: format!("feature channels {c} vs codeword dim {}", code_shape[1]),
        });
    }
    let n_codewords = code_shape[0];
    let mut rows = Vec::with_capacity(n);
    for item in 0..n {
        let sliced = tape.slice_batch(featmap, item)?;
        let chans = tape.reshape(sliced, vec![c, plane])?;
        let descriptors = tape.transpose2d(chans)?;
        let encoded = encode_descriptors(tape, descriptors, codewords, smoothing)?;
        let row = tape.reshape(encoded, vec![1, n_codewords * c])?;
        rows.push(row);
    }
    let stacked = tape.concat(&rows, 0)?;
    tape.l2_normalize_rows(stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::rng_for;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn residual_of_matching_codeword_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 3], &[0.5, -1.0, 2.0]), false);
        let c = tape.leaf(&t64(&[1, 3], &[0.5, -1.0, 2.0]), false);
        let r = tape.residuals(x, c).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residuals_two_codeword_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2], &[1.0, 0.0]), false);
        let c = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]), false);
        let r = tape.residuals(x, c).unwrap();
        // r_11 = [0,0], r_12 = [1,0]
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn residuals_match_brute_force_loops() {
        let mut rng = rng_for(11, &[0]);
        let x = Tensor::<f64>::rand_uniform(vec![5, 4], -1.0, 1.0, &mut rng);
        let c = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let expect = reference::residuals(x.data(), 5, 4, c.data(), 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let cv = tape.leaf(&c, false);
        let r = tape.residuals(xv, cv).unwrap();
        assert_eq!(tape.value(r).data(), &expect[..]);
    }

    #[test]
    fn single_codeword_takes_all_weight() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[4, 2], &[0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.0, 0.0]), false);
        let c = tape.leaf(&t64(&[1, 2], &[0.5, 0.5]), false);
        let s = tape.leaf(&t64(&[1], &[0.7]), false);
        let r = tape.residuals(x, c).unwrap();
        let w = tape.assign_weights(r, s).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn assign_weights_two_codeword_value() {
        // ||r_11||^2 = 0, ||r_12||^2 = 1, s = [1, 1]:
        // w_11 = 1/(1+e^-1), w_12 = e^-1/(1+e^-1)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2], &[1.0, 0.0]), false);
        let c = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]), false);
        let s = tape.leaf(&t64(&[2], &[1.0, 1.0]), false);
        let r = tape.residuals(x, c).unwrap();
        let w = tape.assign_weights(r, s).unwrap();
        let out = tape.value(w).data();
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out[0] - expect).abs() < 1e-9, "w_11 = {}", out[0]);
        assert!((out[1] - (1.0 - expect)).abs() < 1e-9);
        assert!((out[0] - 0.73106).abs() < 1e-5);
        assert!((out[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn equidistant_codewords_stay_uniform_under_smoothing_scale() {
        // ||r_i1|| = ||r_i2|| => weights 1/2 for any common s, doubled or not.
        for scale in [1.0, 2.0] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&t64(&[1, 2], &[0.0, 0.0]), false);
            let c = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, -1.0, 0.0]), false);
            let s = tape.leaf(&t64(&[2], &[0.8 * scale, 0.8 * scale]), false);
            let r = tape.residuals(x, c).unwrap();
            let w = tape.assign_weights(r, s).unwrap();
            for &v in tape.value(w).data() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concentration_increases_with_smoothing() {
        // unique nearest codeword j*: w_ij* -> 1 monotonically in s
        let x = t64(&[1, 2], &[0.9, 0.0]);
        let c = t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let mut last = 0.0;
        for s_val in [1.0, 10.0, 100.0] {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(&x, false);
            let cv = tape.leaf(&c, false);
            let sv = tape.leaf(&t64(&[2], &[s_val, s_val]), false);
            let r = tape.residuals(xv, cv).unwrap();
            let w = tape.assign_weights(r, sv).unwrap();
            let w_near = tape.value(w).data()[0];
            assert!(w_near > last, "s={s_val}: {w_near} <= {last}");
            last = w_near;
        }
        assert!(last > 0.999);
    }

    #[test]
    fn encode_zero_residuals_gives_zero_matrix() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]), false);
        let c = tape.leaf(&t64(&[1, 2], &[0.5, 0.5]), false);
        let s = tape.leaf(&t64(&[1], &[1.0]), false);
        let e = encode_descriptors(&mut tape, x, c, s).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_two_codeword_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2], &[1.0, 0.0]), false);
        let c = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]), false);
        let s = tape.leaf(&t64(&[2], &[1.0, 1.0]), false);
        let e = encode_descriptors(&mut tape, x, c, s).unwrap();
        let out = tape.value(e).data();
        let w12 = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - w12).abs() < 1e-9);
        assert!((out[2] - 0.26894).abs() < 1e-5);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn encode_matches_triple_loop_oracle() {
        let mut rng = rng_for(23, &[1]);
        let x = Tensor::<f64>::rand_uniform(vec![6, 5], -1.0, 1.0, &mut rng);
        let c = Tensor::<f64>::rand_uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let s = Tensor::<f64>::rand_uniform(vec![4], 0.1, 2.0, &mut rng);
        let expect = reference::encode_full(x.data(), 6, 5, c.data(), 4, s.data());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let cv = tape.leaf(&c, false);
        let sv = tape.leaf(&s, false);
        let e = encode_descriptors(&mut tape, xv, cv, sv).unwrap();
        for (got, want) in tape.value(e).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn forward_zero_encoding_is_guarded_not_fatal() {
        // constant feature map equal to the single codeword: E = 0, the
        // L2 guard fires and the output stays finite (all zeros).
        let mut tape = Tape::<f64>::new();
        let fm = tape.leaf(&Tensor::full(vec![1, 4, 3, 3], 0.25), false);
        let c = tape.leaf(&Tensor::full(vec![1, 4], 0.25), false);
        let s = tape.leaf(&t64(&[1], &[1.0]), false);
        let out = encoding_forward(&mut tape, fm, c, s).unwrap();
        assert!(tape.l2_guard_hits() > 0);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_spatially_orderless_bit_for_bit() {
        let mut rng = rng_for(5, &[2]);
        let fm = Tensor::<f64>::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let c = Tensor::<f64>::rand_uniform(vec![2, 4], -0.5, 0.5, &mut rng);
        let s = Tensor::<f64>::rand_uniform(vec![2], 0.1, 1.0, &mut rng);

        // permute the 9 spatial positions consistently across channels
        let perm = [4usize, 7, 1, 0, 8, 3, 6, 2, 5];
        let mut permuted = fm.clone();
        for ch in 0..4 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted.data_mut()[ch * 9 + dst] = fm.data()[ch * 9 + src];
            }
        }

        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let fmv = tape.leaf(input, false);
            let cv = tape.leaf(&c, false);
            let sv = tape.leaf(&s, false);
            let out = encoding_forward(&mut tape, fmv, cv, sv).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run(&fm);
        let b = run(&permuted);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_length_is_codewords_times_channels() {
        let mut rng = rng_for(9, &[3]);
        let fm = Tensor::<f64>::rand_uniform(vec![2, 16, 3, 3], -1.0, 1.0, &mut rng);
        let c = Tensor::<f64>::rand_uniform(vec![8, 16], -0.4, 0.4, &mut rng);
        let s = Tensor::<f64>::rand_uniform(vec![8], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let fmv = tape.leaf(&fm, false);
        let cv = tape.leaf(&c, false);
        let sv = tape.leaf(&s, false);
        let out = encoding_forward(&mut tape, fmv, cv, sv).unwrap();
        assert_eq!(tape.shape(out), &[2, 128]);
        // unit norm per row
        for row in tape.value(out).data().chunks(128) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoding_layer_gradcheck() {
        // 2 codewords, 3 descriptors, d = 4: all parameter grads pass 1e-5.
        use crate::tensor::gradcheck::{finite_difference_gradcheck, DEFAULT_STEP, LAYER_TOL};
        let mut rng = rng_for(31, &[4]);
        let x = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let c = Tensor::<f64>::rand_uniform(vec![2, 4], -0.7, 0.7, &mut rng);
        let s = Tensor::<f64>::rand_uniform(vec![2], 0.2, 1.2, &mut rng);
        let probe = Tensor::<f64>::rand_uniform(vec![2, 4], -1.0, 1.0, &mut rng);
        let report = finite_difference_gradcheck(
            move |tape, vars| {
                let e = encode_descriptors(tape, vars[0], vars[1], vars[2])?;
                let p = tape.leaf(&probe, false);
                let prod = tape.mul(e, p)?;
                tape.sum_all(prod)
            },
            &[
                ("descriptors".into(), x),
                ("codewords".into(), c),
                ("smoothing".into(), s),
            ],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(LAYER_TOL), "max rel err {}", report.max_rel_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_are_row_stochastic(seed in 0u64..1000, m in 1usize..8, n in 1usize..8, d in 1usize..8) {
            let mut rng = rng_for(seed, &[99]);
            let x = Tensor::<f64>::rand_uniform(vec![m, d], -2.0, 2.0, &mut rng);
            let c = Tensor::<f64>::rand_uniform(vec![n, d], -2.0, 2.0, &mut rng);
            let s = Tensor::<f64>::rand_uniform(vec![n], 0.0, 3.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x, false);
            let cv = tape.leaf(&c, false);
            let sv = tape.leaf(&s, false);
            let r = tape.residuals(xv, cv).unwrap();
            let w = tape.assign_weights(r, sv).unwrap();
            for row in tape.value(w).data().chunks(n) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn encode_is_descriptor_order_invariant(seed in 0u64..1000) {
            let mut rng = rng_for(seed, &[100]);
            let m = 6;
            let x = Tensor::<f64>::rand_uniform(vec![m, 3], -1.0, 1.0, &mut rng);
            let c = Tensor::<f64>::rand_uniform(vec![3, 3], -1.0, 1.0, &mut rng);
            let s = Tensor::<f64>::rand_uniform(vec![3], 0.1, 1.5, &mut rng);

            use rand::Rng;
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut xp = x.clone();
            for (dst, &src) in perm.iter().enumerate() {
                for k in 0..3 {
                    xp.data_mut()[dst * 3 + k] = x.data()[src * 3 + k];
                }
            }

            let run = |input: &Tensor<f64>| {
                let mut tape = Tape::new();
                let xv = tape.leaf(input, false);
                let cv = tape.leaf(&c, false);
                let sv = tape.leaf(&s, false);
                let e = encode_descriptors(&mut tape, xv, cv, sv).unwrap();
                tape.value(e).data().to_vec()
            };
            let a = run(&x);
            let b = run(&xp);
            prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
