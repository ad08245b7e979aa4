//! Deep Encoding Pooling network: the texture encoding layer and global
//! average pooling consume the backbone map jointly, their reductions are
//! combined by a bilinear model, and a final embedding feeds the classifier.

use rand::Rng;

use crate::encoding::{self, EncodingInit};
use crate::tensor::{Element, Result, Tape, Var};

use super::backbone::Backbone;
use super::{
    apply_dropout, init_rng, maybe_add_view_filter, Activations, ArchTag, Architecture, Batch,
    Binding, ForwardCtx, Linear, ModelConfig, ParamGroup, ParamId, ParamStore, ViewFilter,
};

/// The encoding-pooling-bilinear head, shared by DEP and TEAN.
///
/// featmap [N, D, H', W']
///   -> encoding (n codewords, L2-normalized)  -> fc1_1 -> a [N, reduce]
///   -> global average pool                    -> fc1_2 -> b [N, reduce]
///   -> outer(a, b) -> L2 -> fc2 -> embedding [N, embed]
pub struct DepHead {
    pub codewords: ParamId,
    pub smoothing: ParamId,
    fc1_1: Linear,
    fc1_2: Linear,
    fc2: Linear,
    n_codewords: usize,
}

impl DepHead {
    pub fn add<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        channels: usize,
        n_codewords: usize,
        reduce_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<DepHead> {
        let init = EncodingInit {
            n_codewords,
            dim: channels,
        };
        let codewords = store.add("encoding.codewords", ParamGroup::Head, init.codewords(rng))?;
        let smoothing = store.add("encoding.smoothing", ParamGroup::Head, init.smoothing(rng))?;
        let fc1_1 = Linear::add(store, "dep.fc1_1", n_codewords * channels, reduce_dim, ParamGroup::Head, rng)?;
        let fc1_2 = Linear::add(store, "dep.fc1_2", channels, reduce_dim, ParamGroup::Head, rng)?;
        let fc2 = Linear::add(store, "dep.fc2", reduce_dim * reduce_dim, embed_dim, ParamGroup::Head, rng)?;
        Ok(DepHead {
            codewords,
            smoothing,
            fc1_1,
            fc1_2,
            fc2,
            n_codewords,
        })
    }

    pub fn n_codewords(&self) -> usize {
        self.n_codewords
    }

    /// Embedding rows `[N, embed_dim]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bind: &Binding, featmap: Var) -> Result<Var> {
        let enc = encoding::encoding_forward(tape, featmap, bind.var(self.codewords), bind.var(self.smoothing))?;
        let gap = tape.global_avg_pool(featmap)?;
        let a = self.fc1_1.apply(tape, bind, enc)?;
        let b = self.fc1_2.apply(tape, bind, gap)?;
        let bil = tape.outer_rows(a, b)?;
        let bil = tape.l2_normalize_rows(bil)?;
        self.fc2.apply(tape, bind, bil)
    }
}

pub struct Dep<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    head: DepHead,
    classifier: Linear,
    view_filter: Option<ViewFilter>,
}

pub fn build<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Box<dyn Architecture<T>>> {
    let mut rng = init_rng(ArchTag::Dep, seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::add(&mut store, "backbone", cfg.in_channels, &cfg.backbone, &mut rng)?;
    let head = DepHead::add(
        &mut store,
        cfg.backbone.out_channels(),
        cfg.n_codewords,
        cfg.reduce_dim,
        cfg.embed_dim,
        &mut rng,
    )?;
    let classifier = Linear::add(
        &mut store,
        "classifier",
        cfg.embed_dim,
        cfg.n_classes,
        ParamGroup::Classifier,
        &mut rng,
    )?;
    let view_filter = maybe_add_view_filter(&mut store, cfg, &mut rng)?;
    Ok(Box::new(Dep {
        cfg: cfg.clone(),
        store,
        backbone,
        head,
        classifier,
        view_filter,
    }))
}

impl<T: Element> Architecture<T> for Dep<T> {
    fn tag(&self) -> ArchTag {
        ArchTag::Dep
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
        let emb = self.head.forward(tape, bind, acts.primary)?;
        let dropped = apply_dropout(tape, emb, self.cfg.dropout, ctx)?;
        Ok(vec![self.classifier.apply(tape, bind, dropped)?])
    }

    fn features(&self, tape: &mut Tape<T>, bind: &Binding, acts: &Activations) -> Result<Var> {
        self.head.forward(tape, bind, acts.primary)
    }

    fn feature_len(&self) -> usize {
        self.cfg.embed_dim
    }
}
