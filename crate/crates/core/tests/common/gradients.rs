//! Central finite differences (f64) against every hand-written backward pass.

use super::*;
use crossling::datapipe::Batch;
use crossling::encoder::{FeatureEncoder, Mode, Trunk};
use crossling::heads::{mean_pool, Seq2SeqConfig, Seq2SeqModel};
use crossling::nn::{AttentionMask, Linear, MultiHeadAttention, TransformerBlock};
use crossling::numerics::ops::{
    Conv1d, ConvGeometry, Cosine, CrossEntropy, EmbeddingLookup, Gelu, LayerNormOp, LogSoftmax, MatMul, Softmax,
};
use crossling::numerics::{Parameterized, Tensor};
use crossling::pretrain::{forward_backward, ContrastiveConfig, MaskConfig, PretrainModel, StepSeeds};
use crossling::quantizer::{CodebookConfig, Quantizer};
use crossling::rng::SeedTree;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn rng(label: &str, i: u64) -> ChaCha8Rng {
    SeedTree::new(17).child(label).index(i).rng()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `f`'s analytic input gradients with central differences over
/// every coordinate of every input. `f` returns the scalar loss and one
/// gradient per input.
fn check_inputs(label: &str, inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>)) {
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len());
    for (k, g) in analytic.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let numeric: Vec<f64> = (0..xs[k].len())
            .map(|i| {
                let orig = xs[k].data()[i];
                let h = 1e-6 * orig.abs().max(1.0);
                xs[k].data_mut()[i] = orig + h;
                let up = f(&xs).0;
                xs[k].data_mut()[i] = orig - h;
                let down = f(&xs).0;
                xs[k].data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        let e = rel_err(g.data(), &numeric);
        assert!(e < TOL, "{label}: input {k} relative error {e:.3e}");
    }
}

fn assert_params(label: &str, res: &[(String, f64)]) {
    assert!(!res.is_empty(), "{label}: no parameters checked");
    for (n, e) in res.iter().filter(|(n, _)| !n.ends_with("key.bias")) {
        assert!(*e < TOL, "{label}: {n} relative error {e:.3e}");
    }
}

/// Attention scores are shift-invariant per query, so a key bias never
/// changes the output and its exact gradient is zero; finite differences
/// there measure only rounding noise.
fn assert_key_bias_grads_vanish<M: Parameterized<f64>>(label: &str, model: &M) {
    for (n, p) in model.named_params() {
        if n.ends_with("key.bias") {
            let norm = p.grad.sq_norm().sqrt();
            assert!(norm < 1e-12, "{label}: {n} gradient norm {norm:.3e}");
        }
    }
}

pub fn matmul() {
    for i in 0..INSTANCES {
        let mut r = rng("matmul", i);
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let proj = random_tensor(&[m, n], &mut r);
        let inputs = [random_tensor(&[m, k], &mut r), random_tensor(&[k, n], &mut r)];
        check_inputs("matmul", &inputs, |x| {
            let (y, c) = MatMul::forward(&x[0], &x[1]).unwrap();
            let (ga, gb) = c.backward(&proj);
            (dot(&y, &proj), vec![ga, gb])
        });
    }
}

pub fn conv1d_with_stride_padding_groups_and_bias() {
    for i in 0..INSTANCES {
        let mut r = rng("conv", i);
        let groups = r.random_range(1..3);
        let geom = ConvGeometry {
            in_channels: groups * r.random_range(1..3),
            out_channels: groups * r.random_range(1..3),
            kernel: r.random_range(1..4),
            stride: r.random_range(1..3),
            padding: r.random_range(0..2),
            groups,
        };
        let len = r.random_range(geom.kernel..geom.kernel + 5);
        let out_len = geom.output_len(len).unwrap();
        let proj = random_tensor(&[out_len, geom.out_channels], &mut r);
        let inputs = [
            random_tensor(&[len, geom.in_channels], &mut r),
            random_tensor(&geom.weight_shape(), &mut r),
            random_tensor(&[geom.out_channels], &mut r),
        ];
        check_inputs("conv1d", &inputs, |x| {
            let (y, c) = Conv1d::forward(&x[0], &x[1], Some(&x[2]), geom).unwrap();
            let (gx, gw, gb) = c.backward(&proj);
            (dot(&y, &proj), vec![gx, gw, gb])
        });
    }
}

pub fn layer_norm() {
    for i in 0..INSTANCES {
        let mut r = rng("ln", i);
        let (n, d) = (r.random_range(1..4), r.random_range(2..7));
        let proj = random_tensor(&[n, d], &mut r);
        let inputs = [random_tensor(&[n, d], &mut r), random_tensor(&[d], &mut r), random_tensor(&[d], &mut r)];
        check_inputs("layer_norm", &inputs, |x| {
            let (y, c) = LayerNormOp::forward(&x[0], &x[1], &x[2]).unwrap();
            let (gx, gg, gb) = c.backward(&proj);
            (dot(&y, &proj), vec![gx, gg, gb])
        });
    }
}

pub fn gelu() {
    for i in 0..INSTANCES {
        let mut r = rng("gelu", i);
        let shape = [r.random_range(1..4), r.random_range(1..6)];
        let proj = random_tensor(&shape, &mut r);
        let x = random_tensor(&shape, &mut r).map(|v| 3.0 * v);
        check_inputs("gelu", &[x], |x| {
            let (y, c) = Gelu::forward(&x[0]).unwrap();
            (dot(&y, &proj), vec![c.backward(&proj)])
        });
    }
}

pub fn softmax_and_log_softmax() {
    for i in 0..INSTANCES {
        let mut r = rng("softmax", i);
        let shape = [r.random_range(1..4), r.random_range(2..6)];
        let proj = random_tensor(&shape, &mut r);
        let x = random_tensor(&shape, &mut r).map(|v| 4.0 * v);
        check_inputs("softmax", &[x.clone()], |x| {
            let (y, c) = Softmax::forward(&x[0]).unwrap();
            (dot(&y, &proj), vec![c.backward(&proj)])
        });
        check_inputs("log_softmax", &[x], |x| {
            let (y, c) = LogSoftmax::forward(&x[0]).unwrap();
            (dot(&y, &proj), vec![c.backward(&proj)])
        });
    }
}

pub fn cosine() {
    for i in 0..INSTANCES {
        let mut r = rng("cosine", i);
        let d = r.random_range(2..8);
        let s: f64 = r.random_range(-2.0..2.0);
        let inputs = [random_tensor(&[d], &mut r), random_tensor(&[d], &mut r)];
        check_inputs("cosine", &inputs, |x| {
            let (y, c) = Cosine::forward(x[0].data(), x[1].data()).unwrap();
            let (ga, gb) = c.backward(s);
            (s * y, vec![Tensor::vector(ga), Tensor::vector(gb)])
        });
    }
}

pub fn embedding_lookup() {
    for i in 0..INSTANCES {
        let mut r = rng("embed", i);
        let (v, d, n) = (r.random_range(2..6), r.random_range(1..5), r.random_range(1..6));
        let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
        let proj = random_tensor(&[n, d], &mut r);
        check_inputs("embedding", &[random_tensor(&[v, d], &mut r)], |x| {
            let (y, c) = EmbeddingLookup::forward(&x[0], &ids).unwrap();
            (dot(&y, &proj), vec![c.backward(&proj)])
        });
    }
}

pub fn cross_entropy_with_smoothing_and_allowed_mask() {
    for i in 0..INSTANCES {
        let mut r = rng("ce", i);
        let (n, v) = (r.random_range(1..4), r.random_range(3..7));
        let mut allowed: Vec<bool> = (0..v).map(|_| r.random_bool(0.7)).collect();
        allowed[0] = true;
        let usable: Vec<usize> = (0..v).filter(|&k| allowed[k]).collect();
        let targets: Vec<usize> = (0..n).map(|_| usable[r.random_range(0..usable.len())]).collect();
        let smoothing = if i % 2 == 0 { 0.0 } else { r.random_range(0.0..0.3) };
        let mask = if i % 3 == 0 { None } else { Some(allowed.clone()) };
        let w: f64 = r.random_range(0.5..2.0);
        check_inputs("cross_entropy", &[random_tensor(&[n, v], &mut r)], |x| {
            let (loss, c) = CrossEntropy::forward(&x[0], &targets, smoothing, mask.as_deref()).unwrap();
            (w * loss, vec![c.backward(w)])
        });
    }
}

pub fn linear_layer() {
    for i in 0..INSTANCES {
        let mut r = rng("linear", i);
        let (n, a, b) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let mut lin = Linear::<f64>::new(a, b, &mut r);
        let x = random_tensor(&[n, a], &mut r);
        let proj = random_tensor(&[n, b], &mut r);
        let res = check_params(
            &mut lin,
            |_| true,
            8,
            &mut r,
            |m| dot(&m.apply(&x).unwrap(), &proj),
            |m| {
                m.zero_grad();
                let (_, c) = m.forward(&x).unwrap();
                m.backward(&c, &proj);
            },
        );
        assert_params("linear", &res);
        check_inputs("linear input", &[x.clone()], |x| {
            let mut l = Linear::<f64>::new(a, b, &mut rng("unused", 0));
            copy_params(&lin, &mut l);
            let (y, c) = l.forward(&x[0]).unwrap();
            (dot(&y, &proj), vec![l.backward(&c, &proj)])
        });
    }
}

pub fn attention_causal_and_padded() {
    for i in 0..INSTANCES {
        let mut r = rng("attn", i);
        let heads = r.random_range(1..3);
        let dim = heads * r.random_range(1..4);
        let (tq, tk) = (r.random_range(1..5), r.random_range(2..6));
        let causal = i % 2 == 1;
        let tk = if causal { tq.max(2) } else { tk };
        let mask = AttentionMask {
            valid_keys: if causal { tk } else { r.random_range(1..=tk) },
            causal,
        };
        let tq = if causal { tk } else { tq };
        let mut attn = MultiHeadAttention::<f64>::new(dim, heads, &mut r).unwrap();
        let xq = random_tensor(&[tq, dim], &mut r);
        let xkv = random_tensor(&[tk, dim], &mut r);
        let proj = random_tensor(&[tq, dim], &mut r);
        let res = check_params(
            &mut attn,
            |_| true,
            6,
            &mut r,
            |m| dot(&m.forward(&xq, &xkv, mask).unwrap().0, &proj),
            |m| {
                m.zero_grad();
                let (_, c) = m.forward(&xq, &xkv, mask).unwrap();
                m.backward(&c, &proj);
            },
        );
        assert_params("attention", &res);
        assert_key_bias_grads_vanish("attention", &attn);
        let frozen = MultiHeadAttention::<f64>::new(dim, heads, &mut r).unwrap();
        check_inputs("attention inputs", &[xq.clone(), xkv.clone()], |x| {
            let mut m = MultiHeadAttention::<f64>::new(dim, heads, &mut rng("unused", 0)).unwrap();
            copy_params(&frozen, &mut m);
            let (y, c) = m.forward(&x[0], &x[1], mask).unwrap();
            let (gq, gkv) = m.backward(&c, &proj);
            (dot(&y, &proj), vec![gq, gkv])
        });
    }
}

fn copy_params<M: Parameterized<f64>>(from: &M, to: &mut M) {
    let src = from.named_params();
    for ((_, d), (_, s)) in to.named_params_mut().into_iter().zip(src) {
        d.value = s.value.clone();
    }
}

pub fn transformer_block_with_cross_attention() {
    for i in 0..INSTANCES {
        let mut r = rng("block", i);
        let cross = i % 2 == 0;
        let (dim, heads, ffn) = (4, 2, 6);
        let (t, tm) = (r.random_range(1..4), r.random_range(1..4));
        let mut block = TransformerBlock::<f64>::new(dim, heads, ffn, cross, &mut r).unwrap();
        let x = random_tensor(&[t, dim], &mut r);
        let mem = random_tensor(&[tm, dim], &mut r);
        let proj = random_tensor(&[t, dim], &mut r);
        let self_mask = AttentionMask { valid_keys: t, causal: cross };
        let memory = cross.then(|| (&mem, AttentionMask::full(tm)));
        let res = check_params(
            &mut block,
            |_| true,
            4,
            &mut r,
            |m| dot(&m.forward(&x, self_mask, memory).unwrap().0, &proj),
            |m| {
                m.zero_grad();
                let (_, c) = m.forward(&x, self_mask, memory).unwrap();
                m.backward(&c, &proj);
            },
        );
        assert_params("transformer block", &res);
        assert_key_bias_grads_vanish("transformer block", &block);
        let frozen = block;
        check_inputs("transformer block inputs", &[x.clone(), mem.clone()], |xs| {
            let mut m = TransformerBlock::<f64>::new(dim, heads, ffn, cross, &mut rng("unused", 0)).unwrap();
            copy_params(&frozen, &mut m);
            let memory = cross.then(|| (&xs[1], AttentionMask::full(tm)));
            let (y, c) = m.forward(&xs[0], self_mask, memory).unwrap();
            let (gx, gm) = m.backward(&c, &proj);
            (dot(&y, &proj), vec![gx, gm.unwrap_or_else(|| Tensor::zeros(&[tm, dim]))])
        });
    }
}

/// A very small trunk: five conv layers of 4 channels, one 8-dim block.
pub fn feature_encoder() {
    for i in 0..INSTANCES {
        let mut r = rng("features", i);
        let cfg = micro_encoder();
        let mut fe = FeatureEncoder::<f64>::new(&cfg, &mut r);
        let n = 400 + 320 * r.random_range(0..3);
        let wave: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let frames = fe.forward(&wave).unwrap().0.rows();
        let proj = random_tensor(&[frames, 4], &mut r);
        let res = check_params(
            &mut fe,
            |_| true,
            3,
            &mut r,
            |m| dot(&m.forward(&wave).unwrap().0, &proj),
            |m| {
                m.zero_grad();
                let (_, c) = m.forward(&wave).unwrap();
                m.backward(&c, &proj);
            },
        );
        assert_params("feature encoder", &res);
        if i < 4 {
            let frozen = fe;
            check_inputs("feature encoder waveform", &[Tensor::vector(wave.clone())], |x| {
                let mut m = FeatureEncoder::<f64>::new(&cfg, &mut rng("unused", 0));
                copy_params(&frozen, &mut m);
                let (y, c) = m.forward(x[0].data()).unwrap();
                (dot(&y, &proj), vec![Tensor::vector(m.backward(&c, &proj))])
            });
        }
    }
}

pub fn trunk_with_mask_embedding() {
    for i in 0..INSTANCES {
        let mut r = rng("trunk", i);
        let mut trunk = Trunk::<f64>::new(micro_encoder(), &mut r).unwrap();
        let wave: Vec<f64> = (0..1680).map(|_| r.random_range(-1.0..1.0)).collect();
        let frames = 5;
        let mask: Vec<bool> = (0..frames).map(|_| r.random_bool(0.4)).collect();
        let proj = random_tensor(&[frames, 8], &mut r);
        let res = check_params(
            &mut trunk,
            |_| true,
            3,
            &mut r,
            |m| dot(&m.forward(&wave, Some(&mask), Mode::Eval, &mut rng("unused", 0)).unwrap().0, &proj),
            |m| {
                m.zero_grad();
                let (_, c) = m.forward(&wave, Some(&mask), Mode::Eval, &mut rng("unused", 0)).unwrap();
                m.backward(&c, &proj, None);
            },
        );
        assert_params("trunk", &res);
        assert_key_bias_grads_vanish("trunk", &trunk);
    }
}

pub fn quantizer_straight_through_matches_soft_relaxation() {
    // Hard codes are piecewise constant, so the straight-through gradient is
    // checked against the loss it differentiates: the tempered soft
    // assignment times the codebook, plus a smooth term on the clean probabilities.
    for i in 0..INSTANCES {
        let mut r = rng("quantizer", i);
        let cfg = CodebookConfig {
            groups: r.random_range(1..3),
            entries: r.random_range(2..5),
            dim: 4,
            ..Default::default()
        };
        let (g, v) = (cfg.groups, cfg.entries);
        let ed = cfg.entry_dim();
        let (n, d) = (r.random_range(1..4), 3);
        let mut q = Quantizer::<f64>::new(d, cfg.clone(), &mut r).unwrap();
        let frames = random_tensor(&[n, d], &mut r);
        let noise = random_tensor(&[n, g * v], &mut r);
        let tau = r.random_range(0.5..2.0);
        let gv = random_tensor(&[n, g * ed], &mut r);
        let gp = random_tensor(&[n, g * v], &mut r);
        let soft_loss = |q: &Quantizer<f64>, x: &Tensor<f64>| {
            let (t, _) = q.quantize_with_noise(x, Some(&noise), tau).unwrap();
            let mut l = dot(&t.probs, &gp);
            for row in 0..n {
                for grp in 0..g {
                    for k in 0..v {
                        let a = t.assignments.row(row)[grp * v + k];
                        let e = q.codebook.value.row(grp * v + k);
                        let gq = &gv.row(row)[grp * ed..(grp + 1) * ed];
                        l += a * e.iter().zip(gq).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            l
        };
        let (_, cache) = q.quantize_with_noise(&frames, Some(&noise), tau).unwrap();
        let res = check_params(
            &mut q,
            |n| n.starts_with("proj"),
            6,
            &mut r,
            |m| soft_loss(m, &frames),
            |m| {
                m.zero_grad();
                m.backward(&cache, &gv, Some(&gp));
            },
        );
        assert_params("quantizer projection", &res);
        let frozen = q;
        check_inputs("quantizer frames", &[frames.clone()], |x| {
            let mut m = Quantizer::<f64>::new(d, cfg.clone(), &mut rng("unused", 0)).unwrap();
            copy_params(&frozen, &mut m);
            let (_, c) = m.quantize_with_noise(&x[0], Some(&noise), tau).unwrap();
            (soft_loss(&m, &x[0]), vec![m.backward(&c, &gv, Some(&gp))])
        });
    }
}

pub fn composed_contrastive_and_diversity_loss() {
    // Everything upstream of the straight-through estimator (feature encoder,
    // quantizer projection) only sees the diversity term under finite
    // differences; those are covered by the quantizer check above.
    for i in 0..INSTANCES {
        let seeds = SeedTree::new(100 + i);
        let mut r = seeds.child("init").rng();
        let cb = CodebookConfig { groups: 2, entries: 4, dim: 8, ..Default::default() };
        let mut model = PretrainModel::<f64>::new(micro_encoder(), cb, &mut r).unwrap();
        let len = 3200 + 320 * r.random_range(0..4);
        let waves: Vec<Vec<f32>> = (0..2).map(|_| (0..len).map(|_| r.random_range(-0.5..0.5)).collect()).collect();
        let batch = Batch {
            ids: vec!["a".into(), "b".into()],
            lengths: vec![len, len - 320],
            waveforms: waves,
            languages: vec!["x".into(); 2],
            corpora: vec!["c".into(); 2],
            transcripts: vec![None; 2],
            targets: None,
        };
        let obj = ContrastiveConfig {
            k: 4,
            diversity_weight: r.random_range(0.05..1.0),
            ..Default::default()
        };
        let mask = MaskConfig { p_start: 0.3, span: 2 };
        let ss = StepSeeds::new(&seeds, 0);
        let temp = r.random_range(0.5..2.0);
        let res = check_params(
            &mut model,
            |n| !n.starts_with("trunk.features") && !n.starts_with("quantizer.proj"),
            2,
            &mut r,
            |m| forward_backward(m, &batch, &obj, &mask, temp, &ss, false).unwrap().total,
            |m| {
                m.zero_grad();
                forward_backward(m, &batch, &obj, &mask, temp, &ss, true).unwrap();
            },
        );
        assert_params("composed loss", &res);
        assert_key_bias_grads_vanish("composed loss", &model);
    }
}

pub fn seq2seq_decoder_and_bridge() {
    for i in 0..INSTANCES {
        let mut r = rng("seq2seq", i);
        let trunk = Trunk::<f64>::new(micro_encoder(), &mut r).unwrap();
        let cfg = Seq2SeqConfig {
            depth: 1,
            dim: 4,
            heads: 2,
            ffn_dim: 6,
            ..Default::default()
        };
        let vocab = 7;
        let mut model = Seq2SeqModel::<f64>::new(trunk, &cfg, vocab, &[], &SeedTree::new(i)).unwrap();
        let ctx = random_tensor(&[r.random_range(1..4), 8], &mut r);
        let tokens: Vec<usize> = (0..r.random_range(1..5)).map(|_| r.random_range(0..vocab)).collect();
        let proj = random_tensor(&[tokens.len(), vocab], &mut r);
        let res = check_params(
            &mut model,
            |n| !n.starts_with("trunk"),
            4,
            &mut r,
            |m| dot(&m.decode_forward(&ctx, &tokens).unwrap().0, &proj),
            |m| {
                m.zero_grad();
                let (_, c) = m.decode_forward(&ctx, &tokens).unwrap();
                m.decode_backward(&c, &proj);
            },
        );
        assert_params("seq2seq decoder", &res);
        assert_key_bias_grads_vanish("seq2seq decoder", &model);
        let frozen = model;
        check_inputs("seq2seq context", &[ctx.clone()], |x| {
            let t = Trunk::<f64>::new(micro_encoder(), &mut rng("unused", 0)).unwrap();
            let mut m = Seq2SeqModel::<f64>::new(t, &cfg, vocab, &[], &SeedTree::new(0)).unwrap();
            copy_params(&frozen, &mut m);
            let (y, c) = m.decode_forward(&x[0], &tokens).unwrap();
            (dot(&y, &proj), vec![m.decode_backward(&c, &proj)])
        });
    }
}

pub fn mean_pool_then_classify() {
    for i in 0..INSTANCES {
        let mut r = rng("pool", i);
        let (t, d, c) = (r.random_range(1..6), r.random_range(1..5), r.random_range(2..5));
        let lin = Linear::<f64>::new(d, c, &mut r);
        let target = r.random_range(0..c);
        check_inputs("mean pool + linear + cross entropy", &[random_tensor(&[t, d], &mut r)], |x| {
            let mut l = Linear::<f64>::new(d, c, &mut rng("unused", 0));
            copy_params(&lin, &mut l);
            let (logits, lc) = l.forward(&mean_pool(&x[0])).unwrap();
            let (loss, ce) = CrossEntropy::forward(&logits, &[target], 0.0, None).unwrap();
            let gp = l.backward(&lc, &ce.backward(1.0));
            let g = Tensor::from_fn(&[t, d], |k| gp.data()[k % d] / t as f64);
            (loss, vec![g])
        });
    }
}
