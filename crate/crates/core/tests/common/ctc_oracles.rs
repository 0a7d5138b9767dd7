//! CTC loss and prefix beam search checked against exhaustive enumeration
//! of alignment paths.

use std::collections::HashMap;

use crossling::ctc::{beam_decode, ctc_loss, min_frames, Fusion, NgramLm, Vocabulary};
use crossling::numerics::ops::LogSoftmax;
use crossling::numerics::Tensor;
use crossling::rng::SeedTree;
use crossling::Error;
use rand::Rng;

fn lse(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Log probability of every collapsed sequence, summed over all `V^T` paths.
fn enumerate(lp: &Tensor<f64>) -> HashMap<Vec<usize>, f64> {
    let (t, v) = (lp.rows(), lp.cols());
    let mut acc: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut path = vec![0usize; t];
    loop {
        let score: f64 = path.iter().enumerate().map(|(i, &c)| lp.row(i)[c]).sum();
        acc.entry(collapse(&path)).or_default().push(score);
        let mut i = 0;
        loop {
            if i == t {
                return acc.into_iter().map(|(k, v)| (k, lse(v))).collect();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn random_log_probs(t: usize, v: usize, scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let logits = Tensor::from_fn(&[t, v], |_| scale * rng.random_range(-1.0..1.0));
    LogSoftmax::forward(&logits).unwrap().0
}

pub fn ctc_loss_matches_brute_force_and_finite_differences() {
    let seeds = SeedTree::new(5).child("ctc-loss");
    let mut feasible = 0;
    let mut i = 0;
    while feasible < 200 {
        let mut rng = seeds.index(i).rng();
        i += 1;
        let t = rng.random_range(1..=8);
        let v = rng.random_range(2..=4);
        let len = rng.random_range(0..=t.min(5));
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
        let lp = random_log_probs(t, v, 3.0, &mut rng);
        let paths = enumerate(&lp);
        if min_frames(&target) > t {
            assert!(matches!(ctc_loss(&lp, &target), Err(Error::InfeasibleAlignment { .. })));
            assert!(!paths.contains_key(&target));
            continue;
        }
        feasible += 1;
        let out = ctc_loss(&lp, &target).unwrap();
        let exact = -paths[&target];
        assert!(
            (out.nll - exact).abs() < 1e-10,
            "case {i}: nll {} vs enumeration {exact} (T={t}, V={v}, target {target:?})",
            out.nll
        );
        // Gradient w.r.t. the log-probability inputs, each treated as free.
        let h = 1e-5;
        let mut x = lp.clone();
        for k in 0..x.len() {
            let orig = x.data()[k];
            x.data_mut()[k] = orig + h;
            let up = ctc_loss(&x, &target).unwrap().nll;
            x.data_mut()[k] = orig - h;
            let down = ctc_loss(&x, &target).unwrap().nll;
            x.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = out.grad.data()[k];
            assert!((fd - an).abs() < 1e-6, "case {i}: d/dlp[{k}] analytic {an} vs numeric {fd}");
        }
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::new(["<blank>", "|", "a", "b"].map(String::from).to_vec()).unwrap()
}

const ARPA: &str = "\\data\\
ngram 1=7
ngram 2=3

\\1-grams:
-1.0 <s> -0.3
-1.2 </s>
-2.0 <unk>
-0.7 a -0.2
-0.9 b -0.25
-1.5 ab -0.1
-1.8 ba

\\2-grams:
-0.2 <s> a
-0.5 a b
-0.4 ab a

\\end\\
";

fn lm() -> NgramLm {
    NgramLm::parse(ARPA).unwrap()
}

pub fn exhaustive_beam_finds_the_most_probable_collapsed_sequence() {
    let v = vocab();
    let seeds = SeedTree::new(6).child("decoder");
    for i in 0..120 {
        let mut rng = seeds.index(i).rng();
        let t = rng.random_range(1..=6);
        let lp = random_log_probs(t, v.len(), 2.5, &mut rng);
        let exact = enumerate(&lp);
        let (best_seq, best) = exact
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, p)| (k.clone(), *p))
            .unwrap();
        let width = v.len().pow(t as u32);
        let hyp = beam_decode(&lp, &v, Fusion::NONE, width).unwrap();
        assert!(
            (hyp.acoustic() - best).abs() < 1e-9,
            "lattice {i}: beam {} vs exact {best}",
            hyp.acoustic()
        );
        assert!((hyp.acoustic() - exact[&hyp.tokens]).abs() < 1e-9);
        let runner_up = exact
            .iter()
            .filter(|(k, _)| **k != best_seq)
            .map(|(_, p)| *p)
            .fold(f64::NEG_INFINITY, f64::max);
        if best - runner_up > 1e-9 {
            assert_eq!(hyp.tokens, best_seq, "lattice {i}");
        }
    }
}

pub fn zero_weight_fusion_is_a_no_op() {
    let v = vocab();
    let lm = lm();
    let seeds = SeedTree::new(7).child("no-op");
    for i in 0..100 {
        let mut rng = seeds.index(i).rng();
        let t = rng.random_range(1..=10);
        let lp = random_log_probs(t, v.len(), 2.5, &mut rng);
        for width in [1, 2, 5, 50] {
            let plain = beam_decode(&lp, &v, Fusion::NONE, width).unwrap();
            let fused = beam_decode(
                &lp,
                &v,
                Fusion {
                    lm: Some(&lm),
                    lambda: 0.0,
                    beta: 0.0,
                },
                width,
            )
            .unwrap();
            assert_eq!(plain.tokens, fused.tokens, "lattice {i} width {width}");
            assert_eq!(plain.score, fused.score);
            assert_eq!(plain.acoustic(), fused.acoustic());
        }
    }
}

pub fn word_bonus_never_reduces_the_word_count() {
    let v = vocab();
    let lm = lm();
    let seeds = SeedTree::new(8).child("bonus");
    for i in 0..60 {
        let mut rng = seeds.index(i).rng();
        let t = rng.random_range(2..=6);
        let lp = random_log_probs(t, v.len(), 2.0, &mut rng);
        let width = v.len().pow(t as u32);
        let lambda = rng.random_range(0.0..1.0);
        let mut prev = 0;
        for k in 0..12 {
            let beta = -3.0 + 0.5 * k as f64;
            let h = beam_decode(&lp, &v, Fusion { lm: Some(&lm), lambda, beta }, width).unwrap();
            assert!(h.word_count >= prev, "lattice {i}: beta {beta} gave {} words after {prev}", h.word_count);
            prev = h.word_count;
        }
    }
}
