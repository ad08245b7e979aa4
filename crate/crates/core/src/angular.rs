//! Differential angular imaging and cross-stream / cross-view combination.
//!
//! The differential image is I_delta = I_v - I_{v+delta}, the pixelwise
//! difference of a view pair, a discrete approximation of the angular
//! intensity gradient. (The opposite sign convention appears in some
//! derivations; the two differ only by sign and downstream networks are
//! sign-agnostic. This crate uses I_v - I_{v+delta} throughout.)

use std::fmt;
use std::str::FromStr;

use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};

/// How two stream feature maps merge at the fusion layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureCombine {
    Sum,
    Max,
}

impl fmt::Display for FeatureCombine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureCombine::Sum => write!(f, "sum"),
            FeatureCombine::Max => write!(f, "max"),
        }
    }
}

impl FromStr for FeatureCombine {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(FeatureCombine::Sum),
            "max" => Ok(FeatureCombine::Max),
            other => Err(format!("unknown feature combine '{other}' (sum|max)")),
        }
    }
}

/// How per-view results combine in multiview evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MultiviewMode {
    /// Mean of per-view prediction vectors, then argmax.
    Voting,
    /// Pointwise maximum of feature maps across viewpoints, then the head.
    Pooling,
    /// Learned 3x3x3 filtering over the (view, H, W) volume, then pooling.
    Filter3d,
}

impl fmt::Display for MultiviewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MultiviewMode::Voting => write!(f, "voting"),
            MultiviewMode::Pooling => write!(f, "pooling"),
            MultiviewMode::Filter3d => write!(f, "filter3d"),
        }
    }
}

impl FromStr for MultiviewMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "voting" => Ok(MultiviewMode::Voting),
            "pooling" => Ok(MultiviewMode::Pooling),
            "filter3d" => Ok(MultiviewMode::Filter3d),
            other => Err(format!("unknown multiview mode '{other}' (voting|pooling|filter3d)")),
        }
    }
}

/// Stream fusion and multiview settings carried by a model.
///
/// `layer_tag` names the merge point; only the final backbone feature map is
/// supported ("final"), matching the merge at the last convolutional map.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub feature_combine: FeatureCombine,
    pub layer_tag: String,
    pub multiview_mode: MultiviewMode,
    pub n_views: usize,
    /// Hard-label majority voting instead of softmax averaging (comparison switch).
    pub hard_voting: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            feature_combine: FeatureCombine::Sum,
            layer_tag: "final".into(),
            multiview_mode: MultiviewMode::Voting,
            n_views: 4,
            hard_voting: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(TensorError::Invalid("n_views must be >= 1".into()));
        }
        if self.layer_tag != "final" {
            return Err(TensorError::Invalid(format!(
                "unsupported fusion layer tag '{}': streams merge at the final backbone feature map",
                self.layer_tag
            )));
        }
        Ok(())
    }
}

/// I_delta = I_v - I_{v+delta}, no normalization. Plain tensor math: the
/// differential image is network input, not a differentiated quantity.
pub fn differential_image<T: Element>(i_v: &Tensor<T>, i_v_delta: &Tensor<T>) -> Result<Tensor<T>> {
    if i_v.shape() != i_v_delta.shape() {
        return Err(TensorError::Shape {
            op: "differential_image",
            detail: format!("{:?} vs {:?}", i_v.shape(), i_v_delta.shape()),
        });
    }
    let data = i_v
        .data()
        .iter()
        .zip(i_v_delta.data())
        .map(|(&a, &b)| a - b)
        .collect();
    Tensor::from_vec(i_v.shape().to_vec(), data)
}

/// Pointwise combination of two same-shape stream maps.
pub fn fuse_features<T: Element>(
    tape: &mut Tape<T>,
    x_a: Var,
    x_b: Var,
    mode: FeatureCombine,
) -> Result<Var> {
    match mode {
        FeatureCombine::Sum => tape.add(x_a, x_b),
        FeatureCombine::Max => tape.emax(x_a, x_b),
    }
}

/// Mean of per-view prediction vectors. Each vector must be a distribution
/// over the same classes. Terms are summed in value order per class, so the
/// result is independent of view ordering bit for bit.
pub fn mean_prediction<T: Element>(preds: &[Tensor<T>]) -> Result<Tensor<T>> {
    if preds.is_empty() {
        return Err(TensorError::Invalid("mean_prediction: empty view list".into()));
    }
    let k = preds[0].numel();
    for p in preds {
        if p.numel() != k {
            return Err(TensorError::Shape {
                op: "mean_prediction",
                detail: "class count mismatch across views".into(),
            });
        }
    }
    let inv = T::from_f64(1.0 / preds.len() as f64);
    let mut out = vec![T::zero(); k];
    let mut terms: Vec<T> = Vec::with_capacity(preds.len());
    for (j, slot) in out.iter_mut().enumerate() {
        terms.clear();
        terms.extend(preds.iter().map(|p| p.data()[j]));
        terms.sort_by(|a, b| a.total_ord(b));
        let mut acc = T::zero();
        for &t in &terms {
            acc = acc + t;
        }
        *slot = acc * inv;
    }
    Tensor::from_vec(vec![k], out)
}

/// Index of the largest entry; ties break to the lowest class index.
pub fn argmax<T: Element>(scores: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.data().iter().enumerate() {
        if v > scores.data()[best] {
            best = i;
        }
    }
    best
}

/// Voting combination: mean of softmax vectors, then argmax.
pub fn multiview_combine_predictions<T: Element>(preds: &[Tensor<T>]) -> Result<usize> {
    let mean = mean_prediction(preds)?;
    Ok(argmax(&mean))
}

/// Hard-label majority voting; ties break to the lowest class index.
pub fn multiview_hard_vote<T: Element>(preds: &[Tensor<T>]) -> Result<usize> {
    if preds.is_empty() {
        return Err(TensorError::Invalid("hard_vote: empty view list".into()));
    }
    let k = preds[0].numel();
    let mut counts = vec![0usize; k];
    for p in preds {
        counts[argmax(p)] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Pointwise maximum of stacked view maps `[V, N, D, H, W] -> [N, D, H, W]`.
pub fn multiview_pool_features<T: Element>(tape: &mut Tape<T>, stack: Var) -> Result<Var> {
    tape.view_max(stack)
}

/// Learned 3D filtering over the (view, H, W) volume followed by pointwise
/// maximum across viewpoints. `weights` is `[D, D, 3, 3, 3]` (full channel
/// mixing), `bias` is `[D]`.
pub fn view_filter3d<T: Element>(
    tape: &mut Tape<T>,
    stack: Var,
    weights: Var,
    bias: Var,
) -> Result<Var> {
    let ss = tape.shape(stack).to_vec();
    let sw = tape.shape(weights).to_vec();
    if ss.len() != 5 || sw.len() != 5 || sw[0] != sw[1] || ss[2] != sw[1] {
        return Err(TensorError::Shape {
            op: "view_filter3d",
            detail: format!("stack {ss:?} vs weights {sw:?} (D in == D out required)"),
        });
    }
    let filtered = tape.conv3d_views(stack, weights, bias)?;
    tape.view_max(filtered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::rng_for;
    use crate::tensor::gradcheck::{finite_difference_gradcheck, DEFAULT_STEP, LAYER_TOL};
    use proptest::prelude::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn differential_of_identical_views_is_zero() {
        let img = t64(&[1, 2, 2], &[0.2, 0.4, 0.6, 0.8]);
        let d = differential_image(&img, &img).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn differential_is_antisymmetric_exactly() {
        let mut rng = rng_for(4, &[0]);
        let a = Tensor::<f64>::rand_uniform(vec![2, 3, 3], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![2, 3, 3], 0.0, 1.0, &mut rng);
        let ab = differential_image(&a, &b).unwrap();
        let ba = differential_image(&b, &a).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert_eq!(x.to_bits(), (-y).to_bits());
        }
    }

    #[test]
    fn differential_hand_case() {
        let i_v = t64(&[1, 2, 2], &[2.0, 3.0, 5.0, 7.0]);
        let i_vd = t64(&[1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let d = differential_image(&i_v, &i_vd).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn differential_rejects_shape_mismatch() {
        let a = t64(&[1, 2, 2], &[0.0; 4]);
        let b = t64(&[1, 2, 3], &[0.0; 6]);
        assert!(differential_image(&a, &b).is_err());
    }

    #[test]
    fn sum_fusion_with_zero_stream_is_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 2, 2, 2], &[1.0, -2.0, 3.0, 0.0, 0.5, 0.25, -1.0, 2.0]), false);
        let z = tape.leaf(&Tensor::zeros(vec![1, 2, 2, 2]), false);
        let y = fuse_features(&mut tape, a, z, FeatureCombine::Sum).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn max_fusion_is_idempotent() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.0]), false);
        let y = fuse_features(&mut tape, a, a, FeatureCombine::Max).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn sum_fusion_commutes_bit_exactly() {
        let mut rng = rng_for(6, &[1]);
        let a = Tensor::<f64>::rand_uniform(vec![1, 2, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![1, 2, 2, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(&a, false);
        let bv = tape.leaf(&b, false);
        let ab = fuse_features(&mut tape, av, bv, FeatureCombine::Sum).unwrap();
        let ba = fuse_features(&mut tape, bv, av, FeatureCombine::Sum).unwrap();
        let (x, y) = (tape.value(ab).data(), tape.value(ba).data());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn sum_fusion_scales_linearly_with_power_of_two() {
        let mut rng = rng_for(6, &[2]);
        let a = Tensor::<f64>::rand_uniform(vec![1, 1, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![1, 1, 2, 2], -1.0, 1.0, &mut rng);
        let alpha = 2.0;
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(&a, false);
        let bv = tape.leaf(&b, false);
        let a2 = tape.scalar_mul(av, alpha).unwrap();
        let b2 = tape.scalar_mul(bv, alpha).unwrap();
        let fused_scaled = fuse_features(&mut tape, a2, b2, FeatureCombine::Sum).unwrap();
        let fused = fuse_features(&mut tape, av, bv, FeatureCombine::Sum).unwrap();
        let scaled_fused = tape.scalar_mul(fused, alpha).unwrap();
        let (x, y) = (tape.value(fused_scaled).data(), tape.value(scaled_fused).data());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn voting_single_view_is_argmax() {
        let p = t64(&[3], &[0.2, 0.5, 0.3]);
        assert_eq!(multiview_combine_predictions(&[p]).unwrap(), 1);
    }

    #[test]
    fn voting_tie_breaks_to_lowest_class() {
        let a = t64(&[2], &[0.6, 0.4]);
        let b = t64(&[2], &[0.4, 0.6]);
        assert_eq!(multiview_combine_predictions(&[a, b]).unwrap(), 0);
    }

    #[test]
    fn voting_rejects_empty_list() {
        assert!(multiview_combine_predictions::<f64>(&[]).is_err());
    }

    #[test]
    fn hard_vote_counts_labels() {
        let a = t64(&[3], &[0.9, 0.05, 0.05]);
        let b = t64(&[3], &[0.1, 0.8, 0.1]);
        let c = t64(&[3], &[0.05, 0.9, 0.05]);
        assert_eq!(multiview_hard_vote(&[a, b, c]).unwrap(), 1);
    }

    #[test]
    fn pool_of_single_view_is_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let stack = tape.stack_views(&[a]).unwrap();
        let y = multiview_pool_features(&mut tape, stack).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn pool_is_idempotent_under_duplication() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 4.0]), false);
        let once = tape.stack_views(&[a]).unwrap();
        let twice = tape.stack_views(&[a, a]).unwrap();
        let p1 = multiview_pool_features(&mut tape, once).unwrap();
        let p2 = multiview_pool_features(&mut tape, twice).unwrap();
        assert_eq!(tape.value(p1).data(), tape.value(p2).data());
    }

    #[test]
    fn pool_matches_loop_max_oracle() {
        let mut rng = rng_for(7, &[3]);
        let views: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::rand_uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = views.iter().map(|v| tape.leaf(v, false)).collect();
        let stack = tape.stack_views(&vars).unwrap();
        let pooled = multiview_pool_features(&mut tape, stack).unwrap();

        let flat: Vec<f64> = views.iter().flat_map(|v| v.data().to_vec()).collect();
        let expect = reference::view_max(&flat, 4, 24);
        assert_eq!(tape.value(pooled).data(), &expect[..]);
    }

    #[test]
    fn filter3d_with_center_delta_equals_plain_pooling() {
        // per-channel identity at the center tap reproduces the input stack
        let d = 3;
        let mut weights = Tensor::<f64>::zeros(vec![d, d, 3, 3, 3]);
        for c in 0..d {
            let center = ((((c * d + c) * 3) + 1) * 3 + 1) * 3 + 1;
            weights.data_mut()[center] = 1.0;
        }
        let bias = Tensor::<f64>::zeros(vec![d]);
        let mut rng = rng_for(9, &[4]);
        let views: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::rand_uniform(vec![1, d, 4, 4], -1.0, 1.0, &mut rng))
            .collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = views.iter().map(|v| tape.leaf(v, false)).collect();
        let stack = tape.stack_views(&vars).unwrap();
        let wv = tape.leaf(&weights, false);
        let bv = tape.leaf(&bias, false);
        let filtered = view_filter3d(&mut tape, stack, wv, bv).unwrap();
        let plain = multiview_pool_features(&mut tape, stack).unwrap();
        for (a, b) in tape.value(filtered).data().iter().zip(tape.value(plain).data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn filter3d_zero_weights_zero_bias_gives_zero() {
        let mut rng = rng_for(9, &[5]);
        let view = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(&view, false);
        let stack = tape.stack_views(&[v, v]).unwrap();
        let w = tape.leaf(&Tensor::zeros(vec![2, 2, 3, 3, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![2]), false);
        let y = view_filter3d(&mut tape, stack, w, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn filter3d_matches_nested_loop_oracle() {
        let mut rng = rng_for(10, &[6]);
        let (v, d, hw) = (4, 4, 5);
        let stack_t = Tensor::<f64>::rand_uniform(vec![v, 1, d, hw, hw], -1.0, 1.0, &mut rng);
        let weights = Tensor::<f64>::rand_uniform(vec![d, d, 3, 3, 3], -0.5, 0.5, &mut rng);
        let bias = Tensor::<f64>::rand_uniform(vec![d], -0.2, 0.2, &mut rng);

        let (conv, _) = reference::conv3d_views(
            stack_t.data(),
            stack_t.shape(),
            weights.data(),
            weights.shape(),
            bias.data(),
        );
        let expect = reference::view_max(&conv, v, d * hw * hw);

        let mut tape = Tape::new();
        let sv = tape.leaf(&stack_t, false);
        let wv = tape.leaf(&weights, false);
        let bv = tape.leaf(&bias, false);
        let y = view_filter3d(&mut tape, sv, wv, bv).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn filter3d_gradients_pass_finite_differences() {
        let mut rng = rng_for(13, &[7]);
        let stack_t = Tensor::<f64>::rand_uniform(vec![3, 1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let weights = Tensor::<f64>::rand_uniform(vec![2, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
        let bias = Tensor::<f64>::rand_uniform(vec![2], -0.2, 0.2, &mut rng);
        let probe = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let report = finite_difference_gradcheck(
            move |tape, vars| {
                let y = view_filter3d(tape, vars[0], vars[1], vars[2])?;
                let p = tape.leaf(&probe, false);
                let prod = tape.mul(y, p)?;
                tape.sum_all(prod)
            },
            &[
                ("stack".into(), stack_t),
                ("weights".into(), weights),
                ("bias".into(), bias),
            ],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(LAYER_TOL), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn fusion_config_rejects_non_final_layer_tag() {
        let cfg = FusionConfig {
            layer_tag: "conv2".into(),
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn voting_is_view_order_invariant(seed in 0u64..500) {
            let mut rng = rng_for(seed, &[42]);
            let k = 5usize;
            let preds: Vec<Tensor<f64>> = (0..4)
                .map(|_| {
                    let raw = Tensor::<f64>::rand_uniform(vec![k], 0.01, 1.0, &mut rng);
                    let sum: f64 = raw.data().iter().sum();
                    raw.map(|v| v / sum)
                })
                .collect();
            let base = multiview_combine_predictions(&preds).unwrap();
            let mut shuffled = preds.clone();
            shuffled.reverse();
            prop_assert_eq!(multiview_combine_predictions(&shuffled).unwrap(), base);
            let rotated: Vec<Tensor<f64>> = preds[1..].iter().chain(&preds[..1]).cloned().collect();
            prop_assert_eq!(multiview_combine_predictions(&rotated).unwrap(), base);
        }

        #[test]
        fn pooling_is_view_order_invariant(seed in 0u64..500) {
            let mut rng = rng_for(seed, &[43]);
            let views: Vec<Tensor<f64>> = (0..4)
                .map(|_| Tensor::rand_uniform(vec![1, 2, 2, 2], -1.0, 1.0, &mut rng))
                .collect();
            let run = |vs: &[Tensor<f64>]| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = vs.iter().map(|v| tape.leaf(v, false)).collect();
                let stack = tape.stack_views(&vars).unwrap();
                let pooled = multiview_pool_features(&mut tape, stack).unwrap();
                tape.value(pooled).data().to_vec()
            };
            let base = run(&views);
            let mut rev = views.clone();
            rev.reverse();
            let out = run(&rev);
            prop_assert!(base.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
