//! Trainable layers assembled from the primitives in [`crate::numerics::ops`].
//!
//! Layers own their parameters. `forward` borrows the layer immutably and
//! returns a cache; `backward` consumes a cache, accumulates parameter
//! gradients and returns the gradient w.r.t. the layer input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, Conv1d, ConvGeometry, EmbeddingLookup, Gelu, LayerNormOp, Softmax};
use crate::numerics::{Param, Real, Tensor};
use crate::parameterized;

pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

parameterized!(Linear { params: [weight, bias], children: [] });

pub struct LinearCache<T: Real> {
    input: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::uniform(&[inputs, outputs], bound, rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.inputs() {
            return Err(Error::shape(
                "linear",
                format!("input width {} != {}", x.cols(), self.inputs()),
            ));
        }
        let mut y = ops::matmul(x, &self.weight.value);
        let b = self.bias.value.data();
        for i in 0..y.rows() {
            for (o, &bv) in y.row_mut(i).iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        let y = self.apply(x)?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        ops::matmul_tn_acc(&mut self.weight.grad, &cache.input, gy);
        let gb = self.bias.grad.data_mut();
        for i in 0..gy.rows() {
            for (o, &g) in gb.iter_mut().zip(gy.row(i)) {
                *o = *o + g;
            }
        }
        ops::matmul_nt(gy, &self.weight.value)
    }
}

pub struct LayerNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

parameterized!(LayerNorm { params: [gamma, beta], children: [] });

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::ones(&[dim]),
            beta: Param::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormOp<T>)> {
        LayerNormOp::forward(x, &self.gamma.value, &self.beta.value)
    }

    pub fn backward(&mut self, cache: &LayerNormOp<T>, gy: &Tensor<T>) -> Tensor<T> {
        let (gx, gg, gb) = cache.backward(gy);
        self.gamma.grad.add_assign(&gg);
        self.beta.grad.add_assign(&gb);
        gx
    }
}

pub struct Embedding<T: Real> {
    pub table: Param<T>,
}

parameterized!(Embedding { params: [table], children: [] });

impl<T: Real> Embedding<T> {
    pub fn new(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: Param::normal(&[vocab, dim], 1.0 / (dim as f64).sqrt(), rng),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Result<(Tensor<T>, EmbeddingLookup)> {
        EmbeddingLookup::forward(&self.table.value, ids)
    }

    pub fn backward(&mut self, cache: &EmbeddingLookup, gy: &Tensor<T>) {
        let g = cache.backward(gy);
        self.table.grad.add_assign(&g);
    }
}

/// Convolution with optional bias over `[time, channels]` input.
pub struct ConvLayer<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Real> crate::numerics::Parameterized<T> for ConvLayer<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((crate::numerics::params::join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((crate::numerics::params::join(prefix, "bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((crate::numerics::params::join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((crate::numerics::params::join(prefix, "bias"), b));
        }
    }
}

impl<T: Real> ConvLayer<T> {
    pub fn new(geometry: ConvGeometry, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = geometry.kernel * geometry.in_channels / geometry.groups;
        // He-style init keeps activations alive through the GELU stack.
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::normal(&geometry.weight_shape(), std, rng),
            bias: bias.then(|| Param::zeros(&[geometry.out_channels])),
            geometry,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv1d<T>)> {
        Conv1d::forward(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.geometry,
        )
    }

    pub fn backward(&mut self, cache: &Conv1d<T>, gy: &Tensor<T>) -> Tensor<T> {
        let (gx, gw, gb) = cache.backward(gy);
        self.weight.grad.add_assign(&gw);
        if let Some(b) = &mut self.bias {
            b.grad.add_assign(&gb);
        }
        gx
    }
}

/// Multi-head scaled dot-product attention.
pub struct MultiHeadAttention<T: Real> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

parameterized!(MultiHeadAttention { params: [], children: [query, key, value, out] });

/// Which keys each query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    /// Keys at positions `>= valid_keys` are padding.
    pub valid_keys: usize,
    /// Query `i` may only see keys `<= i`.
    pub causal: bool,
}

impl AttentionMask {
    pub fn full(len: usize) -> Self {
        Self {
            valid_keys: len,
            causal: false,
        }
    }
}

pub struct AttentionCache<T: Real> {
    q_cache: LinearCache<T>,
    k_cache: LinearCache<T>,
    v_cache: LinearCache<T>,
    out_cache: LinearCache<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Softmax<T>>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide model dim {dim}"
            )));
        }
        Ok(Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            out: Linear::new(dim, dim, rng),
            heads,
        })
    }

    fn head_dim(&self) -> usize {
        self.query.outputs() / self.heads
    }

    pub fn forward(
        &self,
        xq: &Tensor<T>,
        xkv: &Tensor<T>,
        mask: AttentionMask,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (q, q_cache) = self.query.forward(xq)?;
        let (k, k_cache) = self.key.forward(xkv)?;
        let (v, v_cache) = self.value.forward(xkv)?;
        let (tq, tk) = (q.rows(), k.rows());
        if mask.valid_keys == 0 || mask.valid_keys > tk {
            return Err(Error::shape(
                "attention",
                format!("{} valid keys of {tk}", mask.valid_keys),
            ));
        }
        let d = q.cols();
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut ctx = Tensor::zeros(&[tq, d]);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut scores = Tensor::zeros(&[tq, tk]);
            T::gemm(
                tq,
                dh,
                tk,
                scale,
                &q.data()[h * dh..],
                d as isize,
                1,
                &k.data()[h * dh..],
                1,
                d as isize,
                T::zero(),
                scores.data_mut(),
                tk as isize,
                1,
            );
            for i in 0..tq {
                let row = scores.row_mut(i);
                let limit = if mask.causal {
                    mask.valid_keys.min(i + 1)
                } else {
                    mask.valid_keys
                };
                for s in row[limit..].iter_mut() {
                    *s = T::neg_infinity();
                }
            }
            let (p, sm) = Softmax::forward(&scores)?;
            T::gemm(
                tq,
                tk,
                dh,
                T::one(),
                p.data(),
                tk as isize,
                1,
                &v.data()[h * dh..],
                d as isize,
                1,
                T::zero(),
                &mut ctx.data_mut()[h * dh..],
                d as isize,
                1,
            );
            probs.push(sm);
        }
        let (y, out_cache) = self.out.forward(&ctx)?;
        Ok((
            y,
            AttentionCache {
                q_cache,
                k_cache,
                v_cache,
                out_cache,
                q,
                k,
                v,
                probs,
            },
        ))
    }

    /// Returns `(grad_query_input, grad_key_value_input)`.
    pub fn backward(&mut self, cache: &AttentionCache<T>, gy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let gctx = self.out.backward(&cache.out_cache, gy);
        let (tq, tk) = (cache.q.rows(), cache.k.rows());
        let d = cache.q.cols();
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut gq = Tensor::zeros(&[tq, d]);
        let mut gk = Tensor::zeros(&[tk, d]);
        let mut gv = Tensor::zeros(&[tk, d]);
        for h in 0..self.heads {
            let p = cache.probs[h].output();
            // grad_v[h] = p^T x gctx[h]
            T::gemm(
                tk,
                tq,
                dh,
                T::one(),
                p.data(),
                1,
                tk as isize,
                &gctx.data()[h * dh..],
                d as isize,
                1,
                T::zero(),
                &mut gv.data_mut()[h * dh..],
                d as isize,
                1,
            );
            // grad_p = gctx[h] x v[h]^T
            let mut gp = Tensor::zeros(&[tq, tk]);
            T::gemm(
                tq,
                dh,
                tk,
                T::one(),
                &gctx.data()[h * dh..],
                d as isize,
                1,
                &cache.v.data()[h * dh..],
                1,
                d as isize,
                T::zero(),
                gp.data_mut(),
                tk as isize,
                1,
            );
            let gs = cache.probs[h].backward(&gp);
            // grad_q[h] = scale * gs x k[h]
            T::gemm(
                tq,
                tk,
                dh,
                scale,
                gs.data(),
                tk as isize,
                1,
                &cache.k.data()[h * dh..],
                d as isize,
                1,
                T::zero(),
                &mut gq.data_mut()[h * dh..],
                d as isize,
                1,
            );
            // grad_k[h] = scale * gs^T x q[h]
            T::gemm(
                tk,
                tq,
                dh,
                scale,
                gs.data(),
                1,
                tk as isize,
                &cache.q.data()[h * dh..],
                d as isize,
                1,
                T::zero(),
                &mut gk.data_mut()[h * dh..],
                d as isize,
                1,
            );
        }
        let gxq = self.query.backward(&cache.q_cache, &gq);
        let mut gxkv = self.key.backward(&cache.k_cache, &gk);
        gxkv.add_assign(&self.value.backward(&cache.v_cache, &gv));
        (gxq, gxkv)
    }
}

pub struct FeedForward<T: Real> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

parameterized!(FeedForward { params: [], children: [up, down] });

pub struct FeedForwardCache<T: Real> {
    up: LinearCache<T>,
    act: Gelu<T>,
    down: LinearCache<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(dim, hidden, rng),
            down: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeedForwardCache<T>)> {
        let (h, up) = self.up.forward(x)?;
        let (a, act) = Gelu::forward(&h)?;
        let (y, down) = self.down.forward(&a)?;
        Ok((y, FeedForwardCache { up, act, down }))
    }

    pub fn backward(&mut self, cache: &FeedForwardCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let ga = self.down.backward(&cache.down, gy);
        let gh = cache.act.backward(&ga);
        self.up.backward(&cache.up, &gh)
    }
}

/// Pre-norm transformer block with optional cross-attention (decoder use).
pub struct TransformerBlock<T: Real> {
    pub attn_norm: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub cross: Option<(LayerNorm<T>, MultiHeadAttention<T>)>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Real> crate::numerics::Parameterized<T> for TransformerBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        use crate::numerics::params::join;
        self.attn_norm.collect(&join(prefix, "attn_norm"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        if let Some((n, a)) = &self.cross {
            n.collect(&join(prefix, "cross_norm"), out);
            a.collect(&join(prefix, "cross"), out);
        }
        self.ffn_norm.collect(&join(prefix, "ffn_norm"), out);
        self.ffn.collect(&join(prefix, "ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        use crate::numerics::params::join;
        self.attn_norm.collect_mut(&join(prefix, "attn_norm"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        if let Some((n, a)) = &mut self.cross {
            n.collect_mut(&join(prefix, "cross_norm"), out);
            a.collect_mut(&join(prefix, "cross"), out);
        }
        self.ffn_norm.collect_mut(&join(prefix, "ffn_norm"), out);
        self.ffn.collect_mut(&join(prefix, "ffn"), out);
    }
}

pub struct BlockCache<T: Real> {
    attn_norm: LayerNormOp<T>,
    attn: AttentionCache<T>,
    cross: Option<(LayerNormOp<T>, AttentionCache<T>)>,
    ffn_norm: LayerNormOp<T>,
    ffn: FeedForwardCache<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn new(
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        cross_attention: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(dim, heads, rng)?;
        let cross = if cross_attention {
            Some((LayerNorm::new(dim), MultiHeadAttention::new(dim, heads, rng)?))
        } else {
            None
        };
        Ok(Self {
            attn_norm: LayerNorm::new(dim),
            attn,
            cross,
            ffn_norm: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, ffn_dim, rng),
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        self_mask: AttentionMask,
        memory: Option<(&Tensor<T>, AttentionMask)>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (n1, attn_norm) = self.attn_norm.forward(x)?;
        let (a, attn) = self.attn.forward(&n1, &n1, self_mask)?;
        let mut h = x.clone();
        h.add_assign(&a);
        let cross = match (&self.cross, memory) {
            (Some((norm, xattn)), Some((mem, mem_mask))) => {
                let (nc, nc_cache) = norm.forward(&h)?;
                let (c, c_cache) = xattn.forward(&nc, mem, mem_mask)?;
                h.add_assign(&c);
                Some((nc_cache, c_cache))
            }
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "cross-attention memory supplied inconsistently with block layout".into(),
                ))
            }
        };
        let (n2, ffn_norm) = self.ffn_norm.forward(&h)?;
        let (f, ffn) = self.ffn.forward(&n2)?;
        h.add_assign(&f);
        Ok((
            h,
            BlockCache {
                attn_norm,
                attn,
                cross,
                ffn_norm,
                ffn,
            },
        ))
    }

    /// Returns `(grad_input, grad_memory)`.
    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        gy: &Tensor<T>,
    ) -> (Tensor<T>, Option<Tensor<T>>) {
        let mut gh = gy.clone();
        let gn2 = self.ffn.backward(&cache.ffn, gy);
        gh.add_assign(&self.ffn_norm.backward(&cache.ffn_norm, &gn2));
        let gmem = match (&mut self.cross, &cache.cross) {
            (Some((norm, xattn)), Some((nc_cache, c_cache))) => {
                let (gnc, gmem) = xattn.backward(c_cache, &gh);
                gh.add_assign(&norm.backward(nc_cache, &gnc));
                Some(gmem)
            }
            _ => None,
        };
        let (gq, gkv) = self.attn.backward(&cache.attn, &gh);
        let mut gn1 = gq;
        gn1.add_assign(&gkv);
        let mut gx = gh;
        gx.add_assign(&self.attn_norm.backward(&cache.attn_norm, &gn1));
        (gx, gmem)
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, i) = (idx / dim, idx % dim);
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
