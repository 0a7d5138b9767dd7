//! Speech trunk: convolutional feature encoder (waveform -> latent frames) and
//! transformer context network (latent frames -> context vectors).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionMask, BlockCache, ConvLayer, LayerNorm, Linear, TransformerBlock};
use crate::numerics::ops::{Conv1d, ConvGeometry, Gelu, LayerNormOp};
use crate::numerics::params::join;
use crate::numerics::{Param, Parameterized, Real, Tensor};
use crate::parameterized;

/// Samples covered by one latent frame (25 ms at 16 kHz).
pub const RECEPTIVE_FIELD: usize = 400;
/// Hop between latent frames (20 ms at 16 kHz).
pub const FRAME_STRIDE: usize = 320;
pub const SAMPLE_RATE: u32 = 16_000;

/// Latent speech representations, `[frames, d_z]`.
pub type FrameSequence<T> = Tensor<T>;
/// Context representations, `[frames, d]`.
pub type ContextSequence<T> = Tensor<T>;

/// Number of latent frames produced for `num_samples` of audio.
pub fn frame_count(num_samples: usize) -> Result<usize> {
    if num_samples < RECEPTIVE_FIELD {
        return Err(Error::TooShort {
            samples: num_samples,
            min: RECEPTIVE_FIELD,
        });
    }
    Ok((num_samples - RECEPTIVE_FIELD) / FRAME_STRIDE + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv: Vec<ConvSpec>,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layerdrop: f64,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

/// The five-layer strided stack (total stride 320) at a given width.
pub fn conv_stack(channels: usize) -> Vec<ConvSpec> {
    [(10, 5), (7, 4), (7, 4), (2, 2), (2, 2)]
        .into_iter()
        .map(|(kernel, stride)| ConvSpec {
            channels,
            kernel,
            stride,
        })
        .collect()
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv: conv_stack(256),
            depth: 4,
            dim: 192,
            heads: 4,
            ffn_dim: 768,
            layerdrop: 0.1,
            pos_conv_kernel: 65,
            pos_conv_groups: 16,
        }
    }
}

impl EncoderConfig {
    /// A small trunk for smoke runs and tests.
    pub fn tiny() -> Self {
        Self {
            conv: conv_stack(32),
            depth: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            layerdrop: 0.0,
            pos_conv_kernel: 33,
            pos_conv_groups: 16,
        }
    }

    pub fn stride(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for c in &self.conv {
            rf += (c.kernel - 1) * jump;
            jump *= c.stride;
        }
        rf
    }

    pub fn feature_dim(&self) -> usize {
        self.conv.last().map(|c| c.channels).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv.is_empty() || self.conv.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return Err(Error::Config("conv stack must be non-empty with positive dims".into()));
        }
        if self.stride() != FRAME_STRIDE {
            return Err(Error::Config(format!(
                "conv strides compose to {}, expected {FRAME_STRIDE}",
                self.stride()
            )));
        }
        if self.receptive_field() != RECEPTIVE_FIELD {
            return Err(Error::Config(format!(
                "conv receptive field is {}, expected {RECEPTIVE_FIELD}",
                self.receptive_field()
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.pos_conv_kernel % 2 == 0 || self.pos_conv_groups == 0 || self.dim % self.pos_conv_groups != 0 {
            return Err(Error::Config(
                "positional conv needs an odd kernel and groups dividing dim".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.layerdrop) {
            return Err(Error::Config(format!("layerdrop {} outside [0, 1]", self.layerdrop)));
        }
        Ok(())
    }
}

/// Conv -> layer norm over channels -> GELU.
pub struct ConvBlock<T: Real> {
    pub conv: ConvLayer<T>,
    pub norm: LayerNorm<T>,
}

parameterized!(ConvBlock { params: [], children: [conv, norm] });

/// Waveform to latent frames.
pub struct FeatureEncoder<T: Real> {
    pub blocks: Vec<ConvBlock<T>>,
}

parameterized!(FeatureEncoder { params: [], children: [blocks] });

pub struct FeatureCache<T: Real> {
    layers: Vec<(Conv1d<T>, LayerNormOp<T>, Gelu<T>)>,
}

impl<T: Real> FeatureEncoder<T> {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut in_ch = 1;
        let blocks = config
            .conv
            .iter()
            .map(|c| {
                let geom = ConvGeometry {
                    in_channels: in_ch,
                    out_channels: c.channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: 0,
                    groups: 1,
                };
                in_ch = c.channels;
                ConvBlock {
                    conv: ConvLayer::new(geom, false, rng),
                    norm: LayerNorm::new(c.channels),
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, waveform: &[T]) -> Result<(FrameSequence<T>, FeatureCache<T>)> {
        let frames = frame_count(waveform.len())?;
        let mut x = Tensor::new(vec![waveform.len(), 1], waveform.to_vec())?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (c, conv) = block.conv.forward(&x)?;
            let (n, norm) = block.norm.forward(&c)?;
            let (a, act) = Gelu::forward(&n)?;
            layers.push((conv, norm, act));
            x = a;
        }
        debug_assert_eq!(x.rows(), frames);
        Ok((x, FeatureCache { layers }))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the waveform.
    pub fn backward(&mut self, cache: &FeatureCache<T>, grad: &Tensor<T>) -> Vec<T> {
        let mut g = grad.clone();
        for (block, (conv, norm, act)) in self.blocks.iter_mut().zip(&cache.layers).rev() {
            let gn = act.backward(&g);
            let gc = block.norm.backward(norm, &gn);
            g = block.conv.backward(conv, &gc);
        }
        g.into_data()
    }
}

/// Latent frames to context vectors.
pub struct ContextNetwork<T: Real> {
    pub proj: Linear<T>,
    pub pos_conv: ConvLayer<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub final_norm: LayerNorm<T>,
    pub layerdrop: f64,
}

parameterized!(ContextNetwork { params: [], children: [proj, pos_conv, blocks, final_norm] });

pub struct ContextCache<T: Real> {
    proj: crate::nn::LinearCache<T>,
    valid: usize,
    pos_conv: Conv1d<T>,
    pos_act: Gelu<T>,
    blocks: Vec<Option<BlockCache<T>>>,
    final_norm: LayerNormOp<T>,
}

impl<T: Real> ContextCache<T> {
    pub fn layers_executed(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_some()).count()
    }
}

impl<T: Real> ContextNetwork<T> {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let geom = ConvGeometry {
            in_channels: config.dim,
            out_channels: config.dim,
            kernel: config.pos_conv_kernel,
            stride: 1,
            padding: config.pos_conv_kernel / 2,
            groups: config.pos_conv_groups,
        };
        let mut pos_conv = ConvLayer::new(geom, true, rng);
        // Start the positional branch small so early training sees the raw features.
        pos_conv.weight.value.scale(T::lit(0.1));
        let blocks = (0..config.depth)
            .map(|_| TransformerBlock::new(config.dim, config.heads, config.ffn_dim, false, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj: Linear::new(config.feature_dim(), config.dim, rng),
            pos_conv,
            blocks,
            final_norm: LayerNorm::new(config.dim),
            layerdrop: config.layerdrop,
        })
    }

    /// Runs the context network over `frames`, of which only the first
    /// `valid` rows are real; the rest are padding and never influence the
    /// valid outputs.
    pub fn forward(
        &self,
        frames: &FrameSequence<T>,
        valid: usize,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(ContextSequence<T>, ContextCache<T>)> {
        if valid == 0 || valid > frames.rows() {
            return Err(Error::shape(
                "contextualize",
                format!("{valid} valid of {} frames", frames.rows()),
            ));
        }
        let (mut x, proj) = self.proj.forward(frames)?;
        for r in valid..x.rows() {
            x.row_mut(r).fill(T::zero());
        }
        let (p, pos_conv) = self.pos_conv.forward(&x)?;
        let (p, pos_act) = Gelu::forward(&p)?;
        x.add_assign(&p);
        let mask = AttentionMask {
            valid_keys: valid,
            causal: false,
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let skip = mode == Mode::Train && self.layerdrop > 0.0 && rng.random::<f64>() < self.layerdrop;
            if skip {
                blocks.push(None);
                continue;
            }
            let (y, cache) = block.forward(&x, mask, None)?;
            x = y;
            blocks.push(Some(cache));
        }
        let (c, final_norm) = self.final_norm.forward(&x)?;
        Ok((
            c,
            ContextCache {
                proj,
                valid,
                pos_conv,
                pos_act,
                blocks,
                final_norm,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the frames.
    pub fn backward(&mut self, cache: &ContextCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = self.final_norm.backward(&cache.final_norm, grad);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            if let Some(bc) = bc {
                g = block.backward(bc, &g).0;
            }
        }
        let gp = cache.pos_act.backward(&g);
        let mut gx = g;
        gx.add_assign(&self.pos_conv.backward(&cache.pos_conv, &gp));
        for r in cache.valid..gx.rows() {
            gx.row_mut(r).fill(T::zero());
        }
        self.proj.backward(&cache.proj, &gx)
    }
}

/// Feature encoder, learned mask embedding and context network.
pub struct Trunk<T: Real> {
    pub config: EncoderConfig,
    pub features: FeatureEncoder<T>,
    pub mask_emb: Param<T>,
    pub context: ContextNetwork<T>,
}

impl<T: Real> Parameterized<T> for Trunk<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.features.collect(&join(prefix, "features"), out);
        out.push((join(prefix, "mask_emb"), &self.mask_emb));
        self.context.collect(&join(prefix, "context"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.features.collect_mut(&join(prefix, "features"), out);
        out.push((join(prefix, "mask_emb"), &mut self.mask_emb));
        self.context.collect_mut(&join(prefix, "context"), out);
    }
}

impl<T: Real> Trunk<T> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let features = FeatureEncoder::new(&config, rng);
        let mask_emb = Param::uniform(&[config.feature_dim()], 1.0, rng);
        let context = ContextNetwork::new(&config, rng)?;
        Ok(Self {
            config,
            features,
            mask_emb,
            context,
        })
    }

    pub fn feature_encode(&self, waveform: &[T]) -> Result<FrameSequence<T>> {
        Ok(self.features.forward(waveform)?.0)
    }

    pub fn contextualize(
        &self,
        frames: &FrameSequence<T>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<ContextSequence<T>> {
        Ok(self.context.forward(frames, frames.rows(), mode, rng)?.0)
    }

    /// Copy of `frames` with the masked rows replaced by the mask embedding.
    pub fn apply_mask(&self, frames: &FrameSequence<T>, mask: &[bool]) -> FrameSequence<T> {
        let mut out = frames.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(self.mask_emb.value.data());
            }
        }
        out
    }

    /// Full forward pass used by the fine-tuning heads: waveform, optional
    /// span mask over frames, context output.
    pub fn forward(
        &self,
        waveform: &[T],
        mask: Option<&[bool]>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(ContextSequence<T>, TrunkCache<T>)> {
        let (frames, feature_cache) = self.features.forward(waveform)?;
        let input = match mask {
            Some(m) => self.apply_mask(&frames, m),
            None => frames,
        };
        let (ctx, context_cache) = self.context.forward(&input, input.rows(), mode, rng)?;
        Ok((
            ctx,
            TrunkCache {
                features: feature_cache,
                context: context_cache,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// Backward through the context network and mask substitution into the
    /// feature encoder. `extra_frame_grad` adds gradient that reached the
    /// unmasked frames through another path (the quantizer).
    pub fn backward(
        &mut self,
        cache: &TrunkCache<T>,
        grad_context: &Tensor<T>,
        extra_frame_grad: Option<&Tensor<T>>,
    ) {
        let mut gframes = self.backward_to_frames(cache, grad_context);
        if let Some(extra) = extra_frame_grad {
            gframes.add_assign(extra);
        }
        self.features.backward(&cache.features, &gframes);
    }

    /// Backward through the context network and mask substitution only;
    /// returns the gradient w.r.t. the feature encoder output.
    pub fn backward_to_frames(&mut self, cache: &TrunkCache<T>, grad_context: &Tensor<T>) -> Tensor<T> {
        let mut gframes = self.context.backward(&cache.context, grad_context);
        if let Some(mask) = &cache.mask {
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    let row = gframes.row(r).to_vec();
                    for (g, v) in self.mask_emb.grad.data_mut().iter_mut().zip(row) {
                        *g = *g + v;
                    }
                    gframes.row_mut(r).fill(T::zero());
                }
            }
        }
        gframes
    }
}

pub struct TrunkCache<T: Real> {
    pub features: FeatureCache<T>,
    pub context: ContextCache<T>,
    pub mask: Option<Vec<bool>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn frame_count_examples() {
        assert_eq!(frame_count(400).unwrap(), 1);
        assert_eq!(frame_count(720).unwrap(), 2);
        assert_eq!(frame_count(320_000).unwrap(), 999);
        assert!(matches!(frame_count(399), Err(Error::TooShort { .. })));
    }

    #[test]
    fn default_and_tiny_configs_validate() {
        EncoderConfig::default().validate().unwrap();
        EncoderConfig::tiny().validate().unwrap();
        assert_eq!(EncoderConfig::default().receptive_field(), 400);
    }

    #[test]
    fn conv_stack_output_matches_frame_count() {
        let cfg = EncoderConfig::tiny();
        for n in (400..4000).step_by(37) {
            let mut len = n;
            for c in &cfg.conv {
                len = (len - c.kernel) / c.stride + 1;
            }
            assert_eq!(len, frame_count(n).unwrap(), "n = {n}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = EncoderConfig::tiny();
        cfg.conv[0].kernel = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::tiny();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn constant_input_gives_identical_frames() {
        let mut rng = SeedTree::new(1).rng();
        let trunk = Trunk::<f64>::new(EncoderConfig::tiny(), &mut rng).unwrap();
        let z = trunk.feature_encode(&[0.0; 720]).unwrap();
        assert_eq!(z.rows(), 2);
        assert_eq!(z.row(0), z.row(1));
    }
}
