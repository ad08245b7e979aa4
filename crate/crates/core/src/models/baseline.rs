//! Baseline CNN: backbone -> global average pool -> classifier.

use crate::tensor::{Element, Result, Tape, Var};

use super::backbone::Backbone;
use super::{
    apply_dropout, init_rng, maybe_add_view_filter, Activations, ArchTag, Architecture, Batch,
    Binding, ForwardCtx, Linear, ModelConfig, ParamGroup, ParamStore, ViewFilter,
};

pub struct Baseline<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    classifier: Linear,
    view_filter: Option<ViewFilter>,
}

pub fn build<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Box<dyn Architecture<T>>> {
    let mut rng = init_rng(ArchTag::Baseline, seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::add(&mut store, "backbone", cfg.in_channels, &cfg.backbone, &mut rng)?;
    let classifier = Linear::add(
        &mut store,
        "classifier",
        cfg.backbone.out_channels(),
        cfg.n_classes,
        ParamGroup::Classifier,
        &mut rng,
    )?;
    let view_filter = maybe_add_view_filter(&mut store, cfg, &mut rng)?;
    Ok(Box::new(Baseline {
        cfg: cfg.clone(),
        store,
        backbone,
        classifier,
        view_filter,
    }))
}

impl<T: Element> Architecture<T> for Baseline<T> {
    fn tag(&self) -> ArchTag {
        ArchTag::Baseline
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
        let rgb = tape.leaf(&batch.rgb, false);
        let primary = self.backbone.forward(tape, bind, rgb)?;
        Ok(Activations { primary, fused: None })
    }

    fn heads(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        acts: &Activations,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Var>> {
        let pooled = tape.global_avg_pool(acts.primary)?;
        let dropped = apply_dropout(tape, pooled, self.cfg.dropout, ctx)?;
        Ok(vec![self.classifier.apply(tape, bind, dropped)?])
    }

    fn features(&self, tape: &mut Tape<T>, _bind: &Binding, acts: &Activations) -> Result<Var> {
        tape.global_avg_pool(acts.primary)
    }

    fn feature_len(&self) -> usize {
        self.cfg.backbone.out_channels()
    }
}
