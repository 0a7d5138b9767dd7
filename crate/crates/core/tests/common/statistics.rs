//! Monte-Carlo checks of the sampler and span masking against their
//! closed forms. Each returns a short summary and panics on failure.

use crossling::datapipe::{CorpusSpec, SamplerSpec};
use crossling::pretrain::sample_mask;
use crossling::rng::SeedTree;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 100_000;

fn random_spec(rng: &mut impl Rng) -> SamplerSpec {
    let corpora = (0..rng.random_range(1..=3))
        .map(|c| CorpusSpec {
            id: format!("c{c}"),
            languages: (0..rng.random_range(1..=4))
                .map(|l| (format!("l{c}{l}"), rng.random_range(10.0..1000.0)))
                .collect(),
        })
        .collect();
    SamplerSpec {
        corpora,
        alpha_language: rng.random_range(0.0..1.0),
        alpha_corpus: rng.random_range(0.0..1.0),
    }
}

/// Pearson chi-square p-value of `counts` against `probs`.
fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    if probs.len() < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((probs.len() - 1) as f64).unwrap().cdf(stat)
}

fn draw_counts(spec: &SamplerSpec, rng: &mut impl Rng) -> Vec<usize> {
    let sampler = spec.sampler().unwrap();
    let mut counts = vec![0; spec.joint().unwrap().len()];
    for _ in 0..DRAWS {
        let (c, l) = sampler.sample(rng);
        counts[spec.flat_index(c, l)] += 1;
    }
    counts
}

pub fn sampler_chi_square() -> String {
    let seeds = SeedTree::new(11).child("sampler");
    let mut worst: f64 = 1.0;
    for i in 0..6 {
        let spec = random_spec(&mut seeds.child("spec").index(i).rng());
        let counts = draw_counts(&spec, &mut seeds.child("draws").index(i).rng());
        let p = chi_square_p(&counts, &spec.joint().unwrap());
        assert!(p >= 0.01, "spec {i} ({} cells): chi-square p = {p:.4}", counts.len());
        worst = worst.min(p);
    }
    format!("6 specs x {DRAWS} draws, smallest p = {worst:.3}")
}

pub fn worked_example() -> String {
    let spec = SamplerSpec {
        corpora: vec![
            CorpusSpec {
                id: "A".into(),
                languages: vec![("l1".into(), 400.0), ("l2".into(), 100.0)],
            },
            CorpusSpec {
                id: "B".into(),
                languages: vec![("l3".into(), 100.0)],
            },
        ],
        alpha_language: 0.5,
        alpha_corpus: 0.5,
    };
    let counts = draw_counts(&spec, &mut SeedTree::new(12).rng());
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / DRAWS as f64).collect();
    for (f, want) in freq.iter().zip([0.4606, 0.2303, 0.3091]) {
        assert!((f - want).abs() <= 0.01, "empirical {freq:?}");
    }
    format!("empirical ({:.4}, {:.4}, {:.4})", freq[0], freq[1], freq[2])
}

pub const MASK_SETTINGS: [(f64, usize); 3] = [(0.065, 10), (0.15, 5), (0.02, 20)];

pub fn masking_coverage() -> String {
    let seeds = SeedTree::new(13).child("mask");
    let mut parts = Vec::new();
    for (k, &(p, m)) in MASK_SETTINGS.iter().enumerate() {
        let mut rng = seeds.index(k as u64).rng();
        let trials = 10_000;
        let mean = (0..trials)
            .map(|_| sample_mask(1000, p, m, &mut rng).unwrap().fraction())
            .sum::<f64>()
            / trials as f64;
        let expected = 1.0 - (1.0 - p).powi(m as i32);
        assert!(
            (mean - expected).abs() <= 0.01,
            "p_start {p}, span {m}: masked fraction {mean:.4}, closed form {expected:.4}"
        );
        parts.push(format!("({p}, {m}): {mean:.4} vs {expected:.4}"));
    }
    parts.join("; ")
}
