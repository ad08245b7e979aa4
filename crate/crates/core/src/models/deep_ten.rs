//! Deep-TEN-style head: 1x1 channel reduction, texture encoding with 32
//! codewords, L2 normalization, then a fully connected classifier.

use crate::encoding::{self, EncodingInit};
use crate::tensor::{Element, Result, Tape, Var};

use super::backbone::Backbone;
use super::{
    apply_dropout, init_rng, maybe_add_view_filter, Activations, ArchTag, Architecture, Batch,
    Binding, ForwardCtx, Linear, ModelConfig, ParamGroup, ParamId, ParamStore, Tensor, ViewFilter,
};

pub struct DeepTen<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    reduce_w: ParamId,
    reduce_b: ParamId,
    codewords: ParamId,
    smoothing: ParamId,
    classifier: Linear,
    view_filter: Option<ViewFilter>,
}

pub fn build<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Box<dyn Architecture<T>>> {
    let mut rng = init_rng(ArchTag::DeepTen, seed);
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

    let init = EncodingInit {
        n_codewords: cfg.deepten_codewords,
        dim: cfg.reduce_dim,
    };
    let codewords = store.add("encoding.codewords", ParamGroup::Head, init.codewords(&mut rng))?;
    let smoothing = store.add("encoding.smoothing", ParamGroup::Head, init.smoothing(&mut rng))?;

    let classifier = Linear::add(
        &mut store,
        "classifier",
        cfg.deepten_codewords * cfg.reduce_dim,
        cfg.n_classes,
        ParamGroup::Classifier,
        &mut rng,
    )?;
    let view_filter = maybe_add_view_filter(&mut store, cfg, &mut rng)?;
    Ok(Box::new(DeepTen {
        cfg: cfg.clone(),
        store,
        backbone,
        reduce_w,
        reduce_b,
        codewords,
        smoothing,
        classifier,
        view_filter,
    }))
}

impl<T: Element> DeepTen<T> {
    /// L2-normalized encoding vector [N, n_codewords * reduce_dim].
    fn encoded(&self, tape: &mut Tape<T>, bind: &Binding, acts: &Activations) -> Result<Var> {
        let reduced = tape.conv2d(acts.primary, bind.var(self.reduce_w), bind.var(self.reduce_b), 1, 0)?;
        encoding::encoding_forward(tape, reduced, bind.var(self.codewords), bind.var(self.smoothing))
    }
}

impl<T: Element> Architecture<T> for DeepTen<T> {
    fn tag(&self) -> ArchTag {
        ArchTag::DeepTen
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
        let enc = self.encoded(tape, bind, acts)?;
        let dropped = apply_dropout(tape, enc, self.cfg.dropout, ctx)?;
        Ok(vec![self.classifier.apply(tape, bind, dropped)?])
    }

    fn features(&self, tape: &mut Tape<T>, bind: &Binding, acts: &Activations) -> Result<Var> {
        self.encoded(tape, bind, acts)
    }

    fn feature_len(&self) -> usize {
        self.cfg.deepten_codewords * self.cfg.reduce_dim
    }
}
