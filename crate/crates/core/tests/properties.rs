//! Property tests for the invariants of each component.

use crossling::ctc::{ctc_loss, min_frames};
use crossling::datapipe::temperature_distribution;
use crossling::encoder::{EncoderConfig, Mode, Trunk};
use crossling::metrics::{corpus_bleu, error_rate, Unit};
use crossling::numerics::ops::{CrossEntropy, LogSoftmax, Softmax};
use crossling::numerics::{adam_step, AdamState, ScheduleSpec, Tensor};
use crossling::pretrain::{contrastive_loss, sample_mask};
use crossling::quantizer::{codebook_perplexity, diversity_loss, CodebookConfig, Mode as QMode, Quantizer};
use crossling::rng::SeedTree;
use proptest::prelude::*;
use rand::Rng;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 2usize..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in dims().prop_flat_map(|(r, c)| matrix(r, c, 30.0))) {
        let (p, _) = Softmax::forward(&x).unwrap();
        for r in 0..p.rows() {
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lr_is_continuous_at_stage_boundaries(
        peak in 1e-5f64..1e-2,
        total in 20u64..5000,
        warm in 0.01f64..0.5,
        tri in any::<bool>(),
    ) {
        let spec = if tri {
            ScheduleSpec::tri_stage(peak, total)
        } else {
            ScheduleSpec::poly(peak, ((total as f64 * warm) as u64).max(1), total)
        };
        // Every piece is linear, so extrapolating two points on each side
        // gives the one-sided limits exactly (up to rounding).
        let (boundaries, shortest) = match &spec {
            ScheduleSpec::TriStage { stages, .. } => {
                let t = total as f64;
                (vec![stages[0] * t, (stages[0] + stages[1]) * t], stages.iter().cloned().fold(1.0, f64::min) * t)
            }
            ScheduleSpec::PolyWarmup { warmup_updates, .. } => {
                let w = *warmup_updates as f64;
                (vec![w], w.min(total as f64 - w))
            }
        };
        let h = shortest / 4.0;
        for b in boundaries {
            let left = 2.0 * spec.at(b - h) - spec.at(b - 2.0 * h);
            let right = 2.0 * spec.at(b + h) - spec.at(b + 2.0 * h);
            prop_assert!((left - right).abs() < 1e-12 * peak, "boundary {b}: {left} vs {right}");
            prop_assert!((spec.at(b) - right).abs() < 1e-12 * peak);
        }
    }

    #[test]
    fn adam_step_is_deterministic(
        p in matrix(3, 4, 2.0),
        g in matrix(3, 4, 2.0),
        lr in 0.0f64..0.1,
    ) {
        let run = || {
            let mut x = p.clone();
            let mut s = AdamState::new(&[3, 4], 0.9, 0.98, 1e-6);
            for _ in 0..3 {
                adam_step(&mut x, &g, &mut s, lr).unwrap();
            }
            (x, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(sa.m.data(), sb.m.data());
        prop_assert!(sa.v.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn temperature_distribution_is_scale_invariant(
        q in prop::collection::vec(0.1f64..1e4, 1..8),
        alpha in 0.0f64..=1.0,
        c in 1e-3f64..1e3,
    ) {
        let a = temperature_distribution(&q, alpha).unwrap();
        let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
        let b = temperature_distribution(&scaled, alpha).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_alpha_interpolates(a in 1.0f64..1e3, ratio in 1.01f64..100.0) {
        let q = [a * ratio, a];
        let p = |alpha| temperature_distribution(&q, alpha).unwrap()[0];
        prop_assert!(p(0.0) < p(0.5) && p(0.5) < p(1.0));
    }

    #[test]
    fn diversity_is_zero_exactly_for_uniform_usage(
        g in 1usize..4,
        v in 2usize..10,
        logits in prop::collection::vec(-3.0f64..3.0, 40),
    ) {
        let uniform = Tensor::full(&[g, v], 1.0 / v as f64);
        prop_assert!(diversity_loss(&uniform).unwrap().0.abs() < 1e-9);
        let raw = Tensor::from_fn(&[g, v], |i| logits[i % logits.len()]);
        let (usage, _) = Softmax::forward(&raw).unwrap();
        let spread = (0..g).any(|r| {
            let row = usage.row(r);
            row.iter().cloned().fold(0.0, f64::max) - row.iter().cloned().fold(1.0, f64::min) > 1e-3
        });
        let d = diversity_loss(&usage).unwrap().0;
        prop_assert!(d >= -1e-12);
        if spread {
            prop_assert!(d > 1e-9);
        }
        // Soft perplexity and diversity are two views of the same quantity.
        let gv = (g * v) as f64;
        prop_assert!((codebook_perplexity(&usage) - gv * (1.0 - d)).abs() < 1e-9 * gv);
    }

    #[test]
    fn temperature_is_monotone_and_floored(
        start in 0.5f64..4.0,
        floor_frac in 0.05f64..1.0,
        decay in 0.9f64..=1.0,
        step in 0u64..100_000,
    ) {
        let c = CodebookConfig { temp_start: start, temp_floor: start * floor_frac, temp_decay: decay, ..Default::default() };
        let (a, b) = (c.temperature_at(step), c.temperature_at(step + 1));
        prop_assert!(b <= a);
        prop_assert!(b >= c.temp_floor);
    }

    #[test]
    fn quantize_is_reproducible_and_one_hot(seed in any::<u64>(), n in 1usize..6) {
        let cfg = CodebookConfig { groups: 2, entries: 5, dim: 6, ..Default::default() };
        let seeds = SeedTree::new(seed);
        let q = Quantizer::<f64>::new(4, cfg, &mut seeds.child("init").rng()).unwrap();
        let x = Tensor::from_fn(&[n, 4], |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
        let (a, _) = q.quantize(&x, QMode::Train, 1.5, &mut seeds.child("q").rng()).unwrap();
        let (b, _) = q.quantize(&x, QMode::Train, 1.5, &mut seeds.child("q").rng()).unwrap();
        prop_assert_eq!(a.vectors.data(), b.vectors.data());
        prop_assert_eq!(&a.choices, &b.choices);
        for t in 0..n {
            prop_assert_eq!(a.choices[t].len(), 2);
            for grp in 0..2 {
                let p = &a.probs.row(t)[grp * 5..(grp + 1) * 5];
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let e = q.codebook.value.row(grp * 5 + a.choices[t][grp]);
                prop_assert_eq!(&a.vectors.row(t)[grp * 3..(grp + 1) * 3], e);
            }
        }
    }

    #[test]
    fn contrastive_loss_bounds_and_distractor_order(
        c in prop::collection::vec(-1.0f64..1.0, 4),
        q in prop::collection::vec(-1.0f64..1.0, 4),
        ds in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8),
        kappa in 0.05f64..1.0,
        rot in 0usize..8,
    ) {
        prop_assume!(c.iter().any(|x| x.abs() > 1e-3) && q.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(ds.iter().all(|d| d.iter().any(|x| x.abs() > 1e-3)));
        let refs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
        let l = contrastive_loss(&c, &q, &refs, kappa).unwrap();
        prop_assert!(l >= 0.0);
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        rotated.reverse();
        prop_assert_eq!(l, contrastive_loss(&c, &q, &rotated, kappa).unwrap());
        // All candidates equal to the target: every similarity is the same.
        let same: Vec<&[f64]> = vec![q.as_slice(); refs.len()];
        let flat = contrastive_loss(&c, &q, &same, kappa).unwrap();
        prop_assert!((flat - ((refs.len() + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_spans_cover_every_masked_position(len in 1usize..200, p in 0.0f64..=1.0, span in 1usize..15, seed in any::<u64>()) {
        let m = sample_mask(len, p, span, &mut SeedTree::new(seed).rng()).unwrap();
        prop_assert_eq!(m.len(), len);
        // A masked position must be within `span` of a run start; runs are unions of
        // spans so every maximal run has length >= min(span, distance to the end).
        let mut i = 0;
        while i < len {
            if m.mask[i] {
                let start = i;
                while i < len && m.mask[i] {
                    i += 1;
                }
                prop_assert!(i - start >= span.min(len - start));
            } else {
                i += 1;
            }
        }
        if p == 0.0 {
            prop_assert_eq!(m.count(), 0);
        }
        if p == 1.0 {
            prop_assert_eq!(m.count(), len);
        }
    }

    #[test]
    fn ctc_posteriors_sum_to_one_per_frame(
        t in 1usize..10,
        v in 2usize..5,
        seed in any::<u64>(),
        len in 0usize..4,
    ) {
        let mut rng = SeedTree::new(seed).rng();
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
        prop_assume!(min_frames(&target) <= t);
        let logits = Tensor::from_fn(&[t, v], |_| rng.random_range(-3.0..3.0));
        let lp = LogSoftmax::forward(&logits).unwrap().0;
        let out = ctc_loss(&lp, &target).unwrap();
        prop_assert!(out.nll >= 0.0);
        // d nll / d lp[t, v] = -posterior occupancy; occupancies sum to one per frame.
        for r in 0..t {
            let s: f64 = out.grad.row(r).iter().sum();
            prop_assert!((s + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothed_loss_bounded_below_by_target_entropy(
        logits in dims().prop_flat_map(|(r, c)| matrix(r, c, 5.0)),
        eps in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let (n, w) = (logits.rows(), logits.cols());
        let mut rng = SeedTree::new(seed).rng();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..w)).collect();
        let (loss, _) = CrossEntropy::forward(&logits, &targets, eps, None).unwrap();
        let hi = 1.0 - eps + eps / w as f64;
        let lo = eps / w as f64;
        let h = -(hi * hi.ln() + if lo > 0.0 { (w - 1) as f64 * lo * lo.ln() } else { 0.0 });
        prop_assert!(loss >= h - 1e-9, "loss {loss} below entropy {h}");
    }

    #[test]
    fn error_rate_of_identity_and_relabeling(
        words in prop::collection::vec(prop::collection::vec(0u8..6, 0..8), 1..6),
        hyp in prop::collection::vec(prop::collection::vec(0u8..6, 0..8), 1..6),
        shift in 1u8..6,
    ) {
        prop_assume!(words.len() == hyp.len() && words.iter().any(|w| !w.is_empty()));
        let render = |s: &Vec<u8>, k: u8| s.iter().map(|&c| format!("w{}", (c + k) % 6)).collect::<Vec<_>>().join(" ");
        let refs: Vec<String> = words.iter().map(|w| render(w, 0)).collect();
        let hyps: Vec<String> = hyp.iter().map(|w| render(w, 0)).collect();
        prop_assert_eq!(error_rate(&refs, &refs, Unit::Word).unwrap().rate, 0.0);
        let a = error_rate(&refs, &hyps, Unit::Word).unwrap();
        let refs2: Vec<String> = words.iter().map(|w| render(w, shift)).collect();
        let hyps2: Vec<String> = hyp.iter().map(|w| render(w, shift)).collect();
        let b = error_rate(&refs2, &hyps2, Unit::Word).unwrap();
        prop_assert_eq!(a.rate, b.rate);
        prop_assert_eq!(a.substitutions + a.deletions + a.insertions, b.substitutions + b.deletions + b.insertions);
        prop_assert!(a.rate >= 0.0);
    }

    #[test]
    fn bleu_ignores_sentence_order(
        pairs in prop::collection::vec((prop::collection::vec(0u8..5, 1..10), prop::collection::vec(0u8..5, 1..10)), 1..6),
        rot in 0usize..6,
    ) {
        let s = |v: &Vec<u8>| v.iter().map(|c| format!("t{c}")).collect::<Vec<_>>().join(" ");
        let refs: Vec<String> = pairs.iter().map(|p| s(&p.0)).collect();
        let hyps: Vec<String> = pairs.iter().map(|p| s(&p.1)).collect();
        let a = corpus_bleu(&refs, &hyps).unwrap();
        let k = rot % refs.len();
        let mut r2 = refs.clone();
        let mut h2 = hyps.clone();
        r2.rotate_left(k);
        h2.rotate_left(k);
        r2.reverse();
        h2.reverse();
        let b = corpus_bleu(&r2, &h2).unwrap();
        prop_assert!((a.bleu - b.bleu).abs() < 1e-9);
        prop_assert!(a.precisions.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!(a.brevity_penalty > 0.0 && a.brevity_penalty <= 1.0);
    }
}

fn micro_trunk(seed: u64) -> Trunk<f32> {
    let mut cfg = EncoderConfig::tiny();
    cfg.depth = 1;
    Trunk::new(cfg, &mut SeedTree::new(seed).rng()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn padding_does_not_change_valid_outputs(seed in any::<u64>(), frames in 3usize..12, pad in 1usize..6) {
        let trunk = micro_trunk(seed);
        let mut rng = SeedTree::new(seed).child("x").rng();
        let x = Tensor::<f32>::from_fn(&[frames, 32], |_| rng.random_range(-1.0..1.0));
        let mut padded = Tensor::<f32>::zeros(&[frames + pad, 32]);
        for r in 0..frames {
            padded.row_mut(r).copy_from_slice(x.row(r));
        }
        for r in frames..frames + pad {
            padded.row_mut(r).fill(rng.random_range(-5.0..5.0));
        }
        let mut unused = SeedTree::new(0).rng();
        let (a, _) = trunk.context.forward(&x, frames, Mode::Eval, &mut unused).unwrap();
        let (b, _) = trunk.context.forward(&padded, frames, Mode::Eval, &mut unused).unwrap();
        for r in 0..frames {
            for (u, w) in a.row(r).iter().zip(b.row(r)) {
                prop_assert!((u - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mask_substitution_leaves_unmasked_frames_bit_identical(seed in any::<u64>(), p in 0.0f64..0.6) {
        let trunk = micro_trunk(seed);
        let mut rng = SeedTree::new(seed).child("w").rng();
        let wave: Vec<f32> = (0..3200).map(|_| rng.random_range(-0.5..0.5)).collect();
        let frames = trunk.feature_encode(&wave).unwrap();
        let m = sample_mask(frames.rows(), p, 3, &mut rng).unwrap();
        let masked = trunk.apply_mask(&frames, &m.mask);
        for r in 0..frames.rows() {
            if m.mask[r] {
                prop_assert_eq!(masked.row(r), trunk.mask_emb.value.data());
            } else {
                prop_assert_eq!(masked.row(r), frames.row(r));
            }
        }
    }
}

#[test]
fn items_are_encoded_independently_and_eval_is_thread_safe() {
    let trunk = micro_trunk(3);
    let mut rng = SeedTree::new(4).rng();
    let waves: Vec<Vec<f32>> = (0..3).map(|i| (0..2000 + 320 * i).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    let encode = |w: &[f32]| {
        let f = trunk.feature_encode(w).unwrap();
        trunk.contextualize(&f, Mode::Eval, &mut SeedTree::new(0).rng()).unwrap()
    };
    let forward: Vec<Tensor<f32>> = waves.iter().map(|w| encode(w)).collect();
    let reversed: Vec<Tensor<f32>> = waves.iter().rev().map(|w| encode(w)).collect();
    for (a, b) in forward.iter().zip(reversed.iter().rev()) {
        assert_eq!(a.data(), b.data());
    }
    let threaded: Vec<Tensor<f32>> = std::thread::scope(|s| {
        let handles: Vec<_> = waves.iter().map(|w| s.spawn(|| encode(w))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (a, b) in forward.iter().zip(&threaded) {
        assert_eq!(a.data(), b.data());
    }
}
