//! Bilinear-CNN-style head: 1x1 channel reduction, location-wise outer
//! products sum-pooled over the grid, then a classifier. A single shared
//! stream provides both factors (f at each location with itself).

use crate::bilinear;
use crate::tensor::{Element, Result, Tape, Var};

use super::backbone::Backbone;
use super::{
    apply_dropout, init_rng, maybe_add_view_filter, Activations, ArchTag, Architecture, Batch,
    Binding, ForwardCtx, Linear, ModelConfig, ParamGroup, ParamId, ParamStore, Tensor, ViewFilter,
};

pub struct BilinearCnn<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    reduce_w: ParamId,
    reduce_b: ParamId,
    classifier: Linear,
    view_filter: Option<ViewFilter>,
}

pub fn build<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Box<dyn Architecture<T>>> {
    let mut rng = init_rng(ArchTag::BilinearCnn, seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::add(&mut store, "backbone", cfg.in_channels, &cfg.backbone, &mut rng)?;

    let d = cfg.backbone.out_channels();
    let bound = 1.0 / (d as f64).sqrt();
    let reduce_w = store.add(
        "reduce.weight",
        ParamGroup::Head,
        Tensor::rand_uniform(vec![cfg.reduce_dim, d, 1, 1], -bound, bound, &mut rng),
    )?;
    let reduce_b = store.add("reduce.bias", ParamGroup::Head, Tensor::zeros(vec![cfg.reduce_dim]))?;

    let classifier = Linear::add(
        &mut store,
        "classifier",
        cfg.reduce_dim * cfg.reduce_dim,
        cfg.n_classes,
        ParamGroup::Classifier,
        &mut rng,
    )?;
    let view_filter = maybe_add_view_filter(&mut store, cfg, &mut rng)?;
    Ok(Box::new(BilinearCnn {
        cfg: cfg.clone(),
        store,
        backbone,
        reduce_w,
        reduce_b,
        classifier,
        view_filter,
    }))
}

impl<T: Element> BilinearCnn<T> {
    fn pooled(&self, tape: &mut Tape<T>, bind: &Binding, acts: &Activations) -> Result<Var> {
        let reduced = tape.conv2d(acts.primary, bind.var(self.reduce_w), bind.var(self.reduce_b), 1, 0)?;
        bilinear::pooled_bilinear(tape, reduced)
    }
}

impl<T: Element> Architecture<T> for BilinearCnn<T> {
    fn tag(&self) -> ArchTag {
        ArchTag::BilinearCnn
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
        let pooled = self.pooled(tape, bind, acts)?;
        let dropped = apply_dropout(tape, pooled, self.cfg.dropout, ctx)?;
        Ok(vec![self.classifier.apply(tape, bind, dropped)?])
    }

    fn features(&self, tape: &mut Tape<T>, bind: &Binding, acts: &Activations) -> Result<Var> {
        self.pooled(tape, bind, acts)
    }

    fn feature_len(&self) -> usize {
        self.cfg.reduce_dim * self.cfg.reduce_dim
    }
}
