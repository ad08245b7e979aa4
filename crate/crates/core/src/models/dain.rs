//! Differential Angular Imaging Network: separate backbones for the image
//! and differential streams, fused at the final feature map, with the
//! original image path preserved. Two prediction heads: head A on the image
//! stream alone, head B on the fused map; the output averages both softmax
//! vectors and training sums both cross-entropies.

use crate::angular::fuse_features;
use crate::tensor::{Element, Result, Tape, TensorError, Var};

use super::backbone::Backbone;
use super::{
    apply_dropout, init_rng, maybe_add_view_filter, Activations, ArchTag, Architecture, Batch,
    Binding, ForwardCtx, Linear, ModelConfig, ParamGroup, ParamStore, ViewFilter,
};

pub struct Dain<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    rgb_backbone: Backbone,
    diff_backbone: Backbone,
    head_a: Linear,
    /// Head B has its own parameters unless `dain_share_heads` is set.
    head_b: Linear,
    view_filter: Option<ViewFilter>,
}

pub fn build<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Box<dyn Architecture<T>>> {
    let mut rng = init_rng(ArchTag::Dain, seed);
    let mut store = ParamStore::new();
    let rgb_backbone = Backbone::add(&mut store, "rgb.backbone", cfg.in_channels, &cfg.backbone, &mut rng)?;
    let diff_backbone = Backbone::add(&mut store, "diff.backbone", cfg.in_channels, &cfg.backbone, &mut rng)?;
    let d = cfg.backbone.out_channels();
    let head_a = Linear::add(&mut store, "head_a.fc", d, cfg.n_classes, ParamGroup::Classifier, &mut rng)?;
    let head_b = if cfg.dain_share_heads {
        Linear { w: head_a.w, b: head_a.b }
    } else {
        Linear::add(&mut store, "head_b.fc", d, cfg.n_classes, ParamGroup::Classifier, &mut rng)?
    };
    let view_filter = maybe_add_view_filter(&mut store, cfg, &mut rng)?;
    Ok(Box::new(Dain {
        cfg: cfg.clone(),
        store,
        rgb_backbone,
        diff_backbone,
        head_a,
        head_b,
        view_filter,
    }))
}

impl<T: Element> Architecture<T> for Dain<T> {
    fn tag(&self) -> ArchTag {
        ArchTag::Dain
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn view_filter(&self) -> Option<ViewFilter> {
        self.view_filter
    }

    fn stream_maps(&self, tape: &mut Tape<T>, bind: &Binding, batch: &Batch<T>) -> Result<Activations> {
        let diff = batch.diff.as_ref().ok_or_else(|| {
            TensorError::Invalid("dain requires a differential stream (I_delta) in the batch".into())
        })?;
        let rgb = tape.leaf(&batch.rgb, false);
        let dif = tape.leaf(diff, false);
        let rgb_map = self.rgb_backbone.forward(tape, bind, rgb)?;
        let diff_map = self.diff_backbone.forward(tape, bind, dif)?;
        let fused = fuse_features(tape, rgb_map, diff_map, self.cfg.fusion.feature_combine)?;
        Ok(Activations {
            primary: rgb_map,
            fused: Some(fused),
        })
    }

    fn heads(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        acts: &Activations,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Var>> {
        let fused = acts
            .fused
            .ok_or_else(|| TensorError::Invalid("dain heads need the fused stream".into()))?;
        let gap_a = tape.global_avg_pool(acts.primary)?;
        let da = apply_dropout(tape, gap_a, self.cfg.dropout, ctx)?;
        let logits_a = self.head_a.apply(tape, bind, da)?;

        let gap_b = tape.global_avg_pool(fused)?;
        let db = apply_dropout(tape, gap_b, self.cfg.dropout, ctx)?;
        let logits_b = self.head_b.apply(tape, bind, db)?;
        Ok(vec![logits_a, logits_b])
    }

    fn features(&self, tape: &mut Tape<T>, _bind: &Binding, acts: &Activations) -> Result<Var> {
        let fused = acts
            .fused
            .ok_or_else(|| TensorError::Invalid("dain features need the fused stream".into()))?;
        let gap_a = tape.global_avg_pool(acts.primary)?;
        let gap_b = tape.global_avg_pool(fused)?;
        tape.concat(&[gap_a, gap_b], 1)
    }

    fn feature_len(&self) -> usize {
        2 * self.cfg.backbone.out_channels()
    }
}
