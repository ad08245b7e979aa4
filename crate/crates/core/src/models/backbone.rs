//! Small convolutional backbone standing in for a pretrained feature
//! extractor: conv -> relu -> (optional 2x2 max pool) per block.

use rand::Rng;

use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};

use super::{Binding, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlockCfg {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: bool,
}

/// Backbone layout. The default is three 3x3 blocks with 2x2 pooling,
/// ending in a 16-channel map (7x7 for 56x56 inputs). The final spatial
/// extent must stay >= 3 so that 3x3 view filtering is meaningful; this is
/// checked at forward time when the input size is known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub blocks: Vec<ConvBlockCfg>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let block = |out_channels| ConvBlockCfg {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            pool: true,
        };
        BackboneConfig {
            blocks: vec![block(8), block(12), block(16)],
        }
    }
}

impl BackboneConfig {
    /// Two narrow blocks, for finite-difference sweeps at toy width.
    pub fn tiny() -> Self {
        let block = |out_channels| ConvBlockCfg {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            pool: true,
        };
        BackboneConfig {
            blocks: vec![block(4), block(6)],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(TensorError::Invalid("backbone needs at least one block".into()));
        }
        for b in &self.blocks {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(TensorError::Invalid(format!("bad conv block {b:?}")));
            }
        }
        Ok(())
    }

    /// Compact form for the checkpoint header, e.g. `8k3s1p1m,12k3s1p1m`.
    pub fn to_compact(&self) -> String {
        self.blocks
            .iter()
            .map(|b| {
                format!(
                    "{}k{}s{}p{}{}",
                    b.out_channels,
                    b.kernel,
                    b.stride,
                    b.pad,
                    if b.pool { "m" } else { "" }
                )
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_compact(s: &str) -> Result<Self> {
        let bad = |detail: &str| TensorError::Invalid(format!("backbone spec '{s}': {detail}"));
        let mut blocks = Vec::new();
        for part in s.split(',') {
            let (part, pool) = match part.strip_suffix('m') {
                Some(rest) => (rest, true),
                None => (part, false),
            };
            let ki = part.find('k').ok_or_else(|| bad("missing k"))?;
            let si = part.find('s').ok_or_else(|| bad("missing s"))?;
            let pi = part.find('p').ok_or_else(|| bad("missing p"))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| bad("bad number"));
            blocks.push(ConvBlockCfg {
                out_channels: parse(&part[..ki])?,
                kernel: parse(&part[ki + 1..si])?,
                stride: parse(&part[si + 1..pi])?,
                pad: parse(&part[pi + 1..])?,
                pool,
            });
        }
        let cfg = BackboneConfig { blocks };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) struct Backbone {
    blocks: Vec<(ParamId, ParamId, ConvBlockCfg)>,
}

impl Backbone {
    /// Registers conv weights/biases under `{prefix}.block{i}.conv.*`.
    /// Weights are uniform (-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
    pub fn add<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Backbone> {
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut c_in = in_channels;
        for (i, b) in cfg.blocks.iter().enumerate() {
            let fan_in = c_in * b.kernel * b.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = store.add(
                format!("{prefix}.block{}.conv.weight", i + 1),
                ParamGroup::Backbone,
                Tensor::rand_uniform(
                    vec![b.out_channels, c_in, b.kernel, b.kernel],
                    -bound,
                    bound,
                    rng,
                ),
            )?;
            let bias = store.add(
                format!("{prefix}.block{}.conv.bias", i + 1),
                ParamGroup::Backbone,
                Tensor::zeros(vec![b.out_channels]),
            )?;
            blocks.push((w, bias, b.clone()));
            c_in = b.out_channels;
        }
        Ok(Backbone { blocks })
    }

    /// `[N, C, H, W]` image batch to the final feature map.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let mut cur = x;
        for (w, b, cfg) in &self.blocks {
            cur = tape.conv2d(cur, bind.var(*w), bind.var(*b), cfg.stride, cfg.pad)?;
            cur = tape.relu(cur)?;
            if cfg.pool {
                cur = tape.max_pool2d(cur, 2, 2)?;
            }
        }
        let shape = tape.shape(cur);
        if shape[2] < 3 || shape[3] < 3 {
            return Err(TensorError::Invalid(format!(
                "backbone output {shape:?} is smaller than 3x3; use a larger input or fewer blocks"
            )));
        }
        Ok(cur)
    }
}
