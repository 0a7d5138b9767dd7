//! A dev set whose word error rate over the 5x5 (lambda, beta) grid has a
//! single minimum, built from four hand-made lattices. Each lattice pits the
//! reference against one competitor and is decoded correctly only on one
//! side of a line in the (lambda, beta) plane.

use crossling::ctc::{beam_decode, tune_lm, Fusion, NgramLm, SearchSpace, Vocabulary};
use crossling::metrics::{error_rate, Unit};
use crossling::numerics::Tensor;
use crossling::rng::SeedTree;

pub const LAMBDAS: [f64; 5] = [0.0, 1.25, 2.5, 3.75, 5.0];
pub const BETAS: [f64; 5] = [-5.0, -2.5, 0.0, 2.5, 5.0];
pub const OPTIMUM: (f64, f64) = (2.5, 0.0);

const SYMBOLS: [&str; 7] = ["<blank>", "|", "a", "b", "c", "d", "e"];
const EPS: f64 = 1e-6;

// log10 unigrams: a and e are a natural-log unit more likely than b and d;
// "cc" costs exactly as much as "c c".
const ARPA: &str = "\\data\\
ngram 1=8

\\1-grams:
-99 <s>
-0.5 </s>
-1.0 a
-1.4342944819 b
-0.7 c
-1.4 cc
-1.4342944819 d
-1.0 e

\\end\\
";

fn vocab() -> Vocabulary {
    Vocabulary::new(SYMBOLS.iter().map(|s| s.to_string()).collect()).unwrap()
}

/// One frame that is `choices` (symbol, relative log weight) up to EPS mass
/// on every other symbol.
fn frame(choices: &[(&str, f64)]) -> Vec<f64> {
    let rest = EPS * (SYMBOLS.len() - choices.len()) as f64;
    let z: f64 = choices.iter().map(|c| c.1.exp()).sum();
    SYMBOLS
        .iter()
        .map(|s| match choices.iter().find(|c| c.0 == *s) {
            Some(c) => ((1.0 - rest) * c.1.exp() / z).ln(),
            None => EPS.ln(),
        })
        .collect()
}

fn lattice(frames: Vec<Vec<f64>>) -> Tensor<f64> {
    let t = frames.len();
    Tensor::matrix(t, SYMBOLS.len(), frames.concat()).unwrap()
}

/// (log probs, reference transcript).
pub fn dev_set() -> Vec<(Tensor<f64>, &'static str)> {
    let delim = || frame(&[("|", 0.0)]);
    let c = || frame(&[("c", 0.0)]);
    vec![
        // Acoustics favour b by 1.875 nats; the LM favours a by one nat per
        // unit of lambda: correct iff lambda > 1.875.
        (lattice(vec![frame(&[("a", 0.0), ("b", 1.875)]), delim()]), "a"),
        // Acoustics favour d by 3.125 nats; the LM favours e: correct iff
        // lambda < 3.125.
        (lattice(vec![frame(&[("d", 3.125), ("e", 0.0)]), delim()]), "d"),
        // "c c" against "cc" at equal LM cost: the split is 1.25 nats more
        // likely, so it wins iff beta > -1.25.
        (lattice(vec![c(), frame(&[("|", 1.25), ("<blank>", 0.0)]), c(), delim()]), "c c"),
        // Same pair, the merged word 1.25 nats more likely: correct iff
        // beta < 1.25.
        (lattice(vec![c(), frame(&[("|", 0.0), ("<blank>", 1.25)]), c(), delim()]), "cc"),
    ]
}

pub fn lm() -> NgramLm {
    NgramLm::parse(ARPA).unwrap()
}

pub fn dev_wer(set: &[(Tensor<f64>, &str)], lm: &NgramLm, lambda: f64, beta: f64) -> f64 {
    let v = vocab();
    let hyps: Vec<String> = set
        .iter()
        .map(|(lp, _)| {
            let h = beam_decode(lp, &v, Fusion { lm: Some(lm), lambda, beta }, 16).unwrap();
            v.decode(&h.tokens)
        })
        .collect();
    let refs: Vec<&str> = set.iter().map(|s| s.1).collect();
    let hyps: Vec<&str> = hyps.iter().map(String::as_str).collect();
    error_rate(&refs, &hyps, Unit::Word).unwrap().rate
}

/// Checks that the grid has a unique minimum at OPTIMUM, then counts how
/// many of 100 seeded 500-trial searches find it.
pub fn grid_recovery() -> String {
    let set = dev_set();
    let lm = lm();
    let mut table = Vec::new();
    for &l in &LAMBDAS {
        for &b in &BETAS {
            table.push((l, b, dev_wer(&set, &lm, l, b)));
        }
    }
    let best = table.iter().map(|t| t.2).fold(f64::INFINITY, f64::min);
    let minimizers: Vec<(f64, f64)> = table.iter().filter(|t| t.2 == best).map(|t| (t.0, t.1)).collect();
    assert_eq!(minimizers, vec![OPTIMUM], "grid error rates {table:?}");

    let space = SearchSpace::Grid { lambdas: LAMBDAS.to_vec(), betas: BETAS.to_vec() };
    let seeds = SeedTree::new(17).child("tune");
    let hits = (0..100)
        .filter(|&rep| {
            let r = tune_lm(&space, 500, &mut seeds.index(rep).rng(), |l, b| Ok(dev_wer(&set, &lm, l, b))).unwrap();
            (r.lambda, r.beta) == OPTIMUM
        })
        .count();
    assert!(hits >= 99, "recovered the minimizer in {hits}/100 searches");
    format!("minimizer {OPTIMUM:?} recovered in {hits}/100 searches; grid minimum {best:.3}")
}
