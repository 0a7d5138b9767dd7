//! Gumbel-softmax product quantization of latent frames, and the codebook
//! diversity penalty.
//!
//! Each of `groups` codebooks holds `entries` vectors of width
//! `dim / groups`. A frame is projected to `groups * entries` logits; per
//! group one entry is selected and the selections are concatenated. Training
//! selects with Gumbel noise and passes gradients straight through the soft
//! assignment; evaluation takes the plain argmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearCache};
use crate::numerics::{Param, Real, Tensor};
use crate::parameterized;

pub use crate::encoder::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub groups: usize,
    pub entries: usize,
    /// Width of a quantized vector (all groups concatenated).
    pub dim: usize,
    pub temp_start: f64,
    pub temp_floor: f64,
    /// Multiplicative temperature decay per update.
    pub temp_decay: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            entries: 64,
            dim: 128,
            temp_start: 2.0,
            temp_floor: 0.5,
            temp_decay: 0.9995,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.entries < 2 {
            return Err(Error::Config("codebooks need G >= 1 and V >= 2".into()));
        }
        if self.dim == 0 || self.dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "quantized dim {} not divisible by {} groups",
                self.dim, self.groups
            )));
        }
        if !(self.temp_floor > 0.0 && self.temp_start >= self.temp_floor) {
            return Err(Error::Config("temperatures must satisfy 0 < floor <= start".into()));
        }
        if !(self.temp_decay > 0.0 && self.temp_decay <= 1.0) {
            return Err(Error::Config("temperature decay must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Annealed Gumbel temperature after `step` updates.
    pub fn temperature_at(&self, step: u64) -> f64 {
        let decayed = self.temp_start * self.temp_decay.powf(step as f64);
        decayed.max(self.temp_floor)
    }

    pub fn entry_dim(&self) -> usize {
        self.dim / self.groups
    }
}

/// Output of [`Quantizer::quantize`].
#[derive(Clone, Debug)]
pub struct QuantizedTargets<T: Real> {
    /// `[frames, dim]`: concatenation of one hard-selected entry per group.
    pub vectors: Tensor<T>,
    /// `[frames, groups * entries]`: soft assignment (Gumbel-softmax in
    /// training, plain softmax in evaluation).
    pub assignments: Tensor<T>,
    /// `[frames, groups * entries]`: noise-free softmax of the logits, the
    /// quantity averaged into codebook usage.
    pub probs: Tensor<T>,
    /// Selected entry per frame and group.
    pub choices: Vec<Vec<usize>>,
    /// `[groups, entries]`: usage averaged over all frames of this call.
    pub usage: Tensor<T>,
}

pub struct Quantizer<T: Real> {
    pub config: CodebookConfig,
    pub proj: Linear<T>,
    /// `[groups * entries, dim / groups]`.
    pub codebook: Param<T>,
}

parameterized!(Quantizer { params: [codebook], children: [proj] });

pub struct QuantizerCache<T: Real> {
    proj: LinearCache<T>,
    assignments: Tensor<T>,
    probs: Tensor<T>,
    choices: Vec<Vec<usize>>,
    temperature: T,
}

fn softmax_into<T: Real>(src: &[T], scale: T, dst: &mut [T]) {
    let m = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = ((s - m) * scale).exp();
        z = z + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / z;
    }
}

fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel draws, `[rows, cols]`.
pub fn gumbel_noise<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(&[rows, cols], |_| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        T::lit(-(-u.ln()).ln())
    })
}

impl<T: Real> Quantizer<T> {
    pub fn new(input_dim: usize, config: CodebookConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let gv = config.groups * config.entries;
        let mut proj = Linear::new(input_dim, gv, rng);
        // Unit-variance weights make the initial code choice depend on the
        // input rather than on the Gumbel noise.
        proj.weight = Param::normal(&[input_dim, gv], 1.0, rng);
        proj.bias.value.fill(T::zero());
        let codebook = Param::uniform(&[gv, config.entry_dim()], 1.0, rng);
        Ok(Self {
            config,
            proj,
            codebook,
        })
    }

    pub fn quantize(
        &self,
        frames: &Tensor<T>,
        mode: Mode,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<(QuantizedTargets<T>, QuantizerCache<T>)> {
        let noise = match mode {
            Mode::Train => Some(gumbel_noise(
                frames.rows(),
                self.config.groups * self.config.entries,
                rng,
            )),
            Mode::Eval => None,
        };
        self.quantize_with_noise(frames, noise.as_ref(), temperature)
    }

    /// Quantization with explicit Gumbel noise (`None` = evaluation mode).
    pub fn quantize_with_noise(
        &self,
        frames: &Tensor<T>,
        noise: Option<&Tensor<T>>,
        temperature: f64,
    ) -> Result<(QuantizedTargets<T>, QuantizerCache<T>)> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidInput(format!("temperature {temperature} must be positive")));
        }
        let (logits, proj) = self.proj.forward(frames)?;
        logits.check_finite("quantizer logits")?;
        let (g, v) = (self.config.groups, self.config.entries);
        let n = logits.rows();
        if let Some(nz) = noise {
            if nz.shape() != logits.shape() {
                return Err(Error::shape("quantize", "noise shape"));
            }
        }
        let tau = match noise {
            Some(_) => T::lit(temperature),
            None => T::one(),
        };
        let ed = self.config.entry_dim();
        let mut vectors = Tensor::zeros(&[n, self.config.dim]);
        let mut assignments = Tensor::zeros(&[n, g * v]);
        let mut probs = Tensor::zeros(&[n, g * v]);
        let mut usage = Tensor::zeros(&[g, v]);
        let mut choices = Vec::with_capacity(n);
        let mut perturbed = vec![T::zero(); v];
        for t in 0..n {
            let mut pick = Vec::with_capacity(g);
            for grp in 0..g {
                let span = grp * v..(grp + 1) * v;
                let l = &logits.row(t)[span.clone()];
                softmax_into(l, T::one(), &mut probs.row_mut(t)[span.clone()]);
                match noise {
                    Some(nz) => {
                        for ((p, &x), &e) in perturbed.iter_mut().zip(l).zip(&nz.row(t)[span.clone()]) {
                            *p = x + e;
                        }
                    }
                    None => perturbed.copy_from_slice(l),
                }
                softmax_into(&perturbed, T::one() / tau, &mut assignments.row_mut(t)[span.clone()]);
                let idx = argmax(&perturbed);
                pick.push(idx);
                vectors.row_mut(t)[grp * ed..(grp + 1) * ed]
                    .copy_from_slice(self.codebook.value.row(grp * v + idx));
            }
            choices.push(pick);
        }
        if n > 0 {
            let inv = T::one() / T::from_usize(n).unwrap();
            for t in 0..n {
                for (u, &p) in usage.data_mut().iter_mut().zip(probs.row(t)) {
                    *u = *u + p * inv;
                }
            }
        }
        let targets = QuantizedTargets {
            vectors,
            assignments: assignments.clone(),
            probs: probs.clone(),
            choices: choices.clone(),
            usage,
        };
        Ok((
            targets,
            QuantizerCache {
                proj,
                assignments,
                probs,
                choices,
                temperature: tau,
            },
        ))
    }

    /// Gradient w.r.t. the logits given `grad_vectors` (through the soft
    /// assignment, straight-through) and an optional `grad_probs` on the
    /// noise-free probabilities (from the diversity penalty).
    pub fn logits_grad(
        &self,
        cache: &QuantizerCache<T>,
        grad_vectors: &Tensor<T>,
        grad_probs: Option<&Tensor<T>>,
    ) -> Tensor<T> {
        let (g, v) = (self.config.groups, self.config.entries);
        let ed = self.config.entry_dim();
        let n = cache.assignments.rows();
        let mut gl = Tensor::zeros(&[n, g * v]);
        let mut gy = vec![T::zero(); v];
        for t in 0..n {
            for grp in 0..g {
                let gq = &grad_vectors.row(t)[grp * ed..(grp + 1) * ed];
                for (k, slot) in gy.iter_mut().enumerate() {
                    let entry = self.codebook.value.row(grp * v + k);
                    *slot = entry.iter().zip(gq).map(|(&a, &b)| a * b).sum();
                }
                let y = &cache.assignments.row(t)[grp * v..(grp + 1) * v];
                let dot: T = y.iter().zip(&gy).map(|(&a, &b)| a * b).sum();
                let out = &mut gl.row_mut(t)[grp * v..(grp + 1) * v];
                for k in 0..v {
                    out[k] = y[k] * (gy[k] - dot) / cache.temperature;
                }
                if let Some(gp) = grad_probs {
                    let p = &cache.probs.row(t)[grp * v..(grp + 1) * v];
                    let gpr = &gp.row(t)[grp * v..(grp + 1) * v];
                    let dot: T = p.iter().zip(gpr).map(|(&a, &b)| a * b).sum();
                    for k in 0..v {
                        out[k] = out[k] + p[k] * (gpr[k] - dot);
                    }
                }
            }
        }
        gl
    }

    /// Accumulates codebook and projection gradients; returns the gradient
    /// w.r.t. the input frames.
    pub fn backward(
        &mut self,
        cache: &QuantizerCache<T>,
        grad_vectors: &Tensor<T>,
        grad_probs: Option<&Tensor<T>>,
    ) -> Tensor<T> {
        let (v, ed) = (self.config.entries, self.config.entry_dim());
        for (t, pick) in cache.choices.iter().enumerate() {
            for (grp, &idx) in pick.iter().enumerate() {
                let gq = &grad_vectors.row(t)[grp * ed..(grp + 1) * ed];
                for (o, &gv) in self.codebook.grad.row_mut(grp * v + idx).iter_mut().zip(gq) {
                    *o = *o + gv;
                }
            }
        }
        let gl = self.logits_grad(cache, grad_vectors, grad_probs);
        self.proj.backward(&cache.proj, &gl)
    }
}

/// Exponentiated entropy (perplexity) of each usage row, summed over groups.
pub fn codebook_perplexity<T: Real>(usage: &Tensor<T>) -> f64 {
    (0..usage.rows())
        .map(|g| {
            let h: f64 = usage
                .row(g)
                .iter()
                .map(|&p| p.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            h.exp()
        })
        .sum()
}

/// `(G*V - sum_g exp(H(usage_g))) / (G*V)` and its gradient w.r.t. `usage`.
pub fn diversity_loss<T: Real>(usage: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (g, v) = (usage.rows(), usage.cols());
    if usage.shape().len() != 2 || g == 0 || v == 0 {
        return Err(Error::shape("diversity_loss", format!("{:?}", usage.shape())));
    }
    let gv = (g * v) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(usage.shape());
    for grp in 0..g {
        let row = usage.row(grp);
        let s: f64 = row.iter().map(|p| p.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| p.as_f64() < 0.0) {
            return Err(Error::InvalidInput(format!(
                "usage row {grp} is not a probability vector (sum {s})"
            )));
        }
        let h: f64 = row
            .iter()
            .map(|p| p.as_f64())
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        let perplexity = h.exp();
        total += perplexity;
        for (o, &p) in grad.row_mut(grp).iter_mut().zip(row) {
            let lp = p.as_f64().max(1e-12).ln();
            *o = T::lit(perplexity * (lp + 1.0) / gv);
        }
    }
    Ok(((gv - total) / gv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn uniform_usage_has_zero_penalty() {
        let u = Tensor::<f64>::full(&[2, 4], 0.25);
        let (l, _) = diversity_loss(&u).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn one_hot_usage_penalty() {
        let mut u = Tensor::<f64>::zeros(&[2, 4]);
        u.row_mut(0)[1] = 1.0;
        u.row_mut(1)[3] = 1.0;
        let (l, _) = diversity_loss(&u).unwrap();
        assert!((l - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_usage() {
        let u = Tensor::<f64>::full(&[1, 4], 0.3);
        assert!(diversity_loss(&u).is_err());
    }

    #[test]
    fn temperature_schedule_is_monotone_with_floor() {
        let c = CodebookConfig::default();
        let mut prev = c.temperature_at(0);
        assert_eq!(prev, 2.0);
        for s in 1..10_000 {
            let t = c.temperature_at(s);
            assert!(t <= prev && t >= c.temp_floor);
            prev = t;
        }
        assert_eq!(prev, 0.5);
    }

    #[test]
    fn eval_mode_selects_argmax_entries() {
        let mut rng = SeedTree::new(3).rng();
        let cfg = CodebookConfig {
            groups: 2,
            entries: 4,
            dim: 6,
            ..CodebookConfig::default()
        };
        let q = Quantizer::<f64>::new(5, cfg, &mut rng).unwrap();
        let frames = Tensor::from_fn(&[7, 5], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        let (out, _) = q.quantize(&frames, Mode::Eval, 1.0, &mut rng).unwrap();
        let logits = q.proj.apply(&frames).unwrap();
        for t in 0..7 {
            for grp in 0..2 {
                let l = &logits.row(t)[grp * 4..grp * 4 + 4];
                let best = argmax(l);
                assert_eq!(out.choices[t][grp], best);
                assert_eq!(
                    &out.vectors.row(t)[grp * 3..grp * 3 + 3],
                    q.codebook.value.row(grp * 4 + best)
                );
            }
        }
    }
}
