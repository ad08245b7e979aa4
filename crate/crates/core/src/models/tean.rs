//! Texture Encoded Angular Network: the DAIN wiring with the image stream's
//! head replaced by DEP. The DEP embedding of the image map and an fc
//! reduction of the sum-fused map are concatenated and classified together.

use crate::angular::fuse_features;
use crate::tensor::{Element, Result, Tape, TensorError, Var};

use super::backbone::Backbone;
use super::dep::DepHead;
use super::{
    apply_dropout, init_rng, maybe_add_view_filter, Activations, ArchTag, Architecture, Batch,
    Binding, ForwardCtx, Linear, ModelConfig, ParamGroup, ParamStore, ViewFilter,
};

pub struct Tean<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    rgb_backbone: Backbone,
    diff_backbone: Backbone,
    dep_head: DepHead,
    angular_fc: Linear,
    classifier: Linear,
    view_filter: Option<ViewFilter>,
}

pub fn build<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Box<dyn Architecture<T>>> {
    let mut rng = init_rng(ArchTag::Tean, seed);
    let mut store = ParamStore::new();
    let rgb_backbone = Backbone::add(&mut store, "rgb.backbone", cfg.in_channels, &cfg.backbone, &mut rng)?;
    let diff_backbone = Backbone::add(&mut store, "diff.backbone", cfg.in_channels, &cfg.backbone, &mut rng)?;
    let d = cfg.backbone.out_channels();
    let dep_head = DepHead::add(&mut store, d, cfg.n_codewords, cfg.reduce_dim, cfg.embed_dim, &mut rng)?;
    let angular_fc = Linear::add(&mut store, "angular.fc", d, cfg.embed_dim, ParamGroup::Head, &mut rng)?;
    let classifier = Linear::add(
        &mut store,
        "classifier",
        2 * cfg.embed_dim,
        cfg.n_classes,
        ParamGroup::Classifier,
        &mut rng,
    )?;
    let view_filter = maybe_add_view_filter(&mut store, cfg, &mut rng)?;
    Ok(Box::new(Tean {
        cfg: cfg.clone(),
        store,
        rgb_backbone,
        diff_backbone,
        dep_head,
        angular_fc,
        classifier,
        view_filter,
    }))
}

impl<T: Element> Tean<T> {
    /// Concatenated [dep_embedding | angular_embedding] rows `[N, 2*embed]`.
    fn joint_features(&self, tape: &mut Tape<T>, bind: &Binding, acts: &Activations) -> Result<Var> {
        let fused = acts
            .fused
            .ok_or_else(|| TensorError::Invalid("tean needs the fused stream".into()))?;
        let dep_emb = self.dep_head.forward(tape, bind, acts.primary)?;
        let gap = tape.global_avg_pool(fused)?;
        let ang_emb = self.angular_fc.apply(tape, bind, gap)?;
        tape.concat(&[dep_emb, ang_emb], 1)
    }
}

impl<T: Element> Architecture<T> for Tean<T> {
    fn tag(&self) -> ArchTag {
        ArchTag::Tean
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
            TensorError::Invalid("tean requires a differential stream (I_delta) in the batch".into())
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
        let feats = self.joint_features(tape, bind, acts)?;
        let dropped = apply_dropout(tape, feats, self.cfg.dropout, ctx)?;
        Ok(vec![self.classifier.apply(tape, bind, dropped)?])
    }

    fn features(&self, tape: &mut Tape<T>, bind: &Binding, acts: &Activations) -> Result<Var> {
        self.joint_features(tape, bind, acts)
    }

    fn feature_len(&self) -> usize {
        2 * self.cfg.embed_dim
    }
}
