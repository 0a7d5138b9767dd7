use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug)]
pub struct CtcOutput<T: Real> {
    pub nll: f64,
    /// `d nll / d log_probs`, `[frames, vocab]`.
    pub grad: Tensor<T>,
}

/// Negative log-likelihood of `target` under per-frame log distributions
/// `log_probs` (`[frames, vocab]`, blank = 0), with its gradient w.r.t.
/// `log_probs`. Computed in f64 in the log domain.
pub fn ctc_loss<T: Real>(log_probs: &Tensor<T>, target: &[usize]) -> Result<CtcOutput<T>> {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    if log_probs.shape().len() != 2 || vocab < 2 {
        return Err(Error::shape("ctc_loss", format!("{:?}", log_probs.shape())));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == 0 || c >= vocab) {
        return Err(Error::InvalidInput(format!("target token {bad} outside 1..{vocab}")));
    }
    if log_probs.data().iter().any(|x| x.is_nan() || *x == T::infinity()) {
        return Err(Error::NonFinite("ctc log_probs".into()));
    }
    let required = min_frames(target);
    if frames < required.max(1) {
        return Err(Error::InfeasibleAlignment { frames, required });
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { 0 } else { target[s / 2] };
    let lp = |t: usize, s: usize| log_probs.row(t)[label(s)].as_f64();
    let ninf = f64::NEG_INFINITY;
    // Skip transition s-2 -> s allowed for labels that differ from the one two back.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_likelihood = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_likelihood == ninf {
        return Err(Error::InfeasibleAlignment { frames, required });
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    // alpha and beta both include frame t's emission, so the posterior of
    // state s at t is alpha + beta - lp - log_likelihood.
    let mut grad = Tensor::zeros(&[frames, vocab]);
    let mut acc = vec![ninf; vocab];
    for t in 0..frames {
        acc.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                acc[label(s)] = lse2(acc[label(s)], ab - lp(t, s));
            }
        }
        for (g, &a) in grad.row_mut(t).iter_mut().zip(&acc) {
            *g = T::lit(-(a - log_likelihood).exp());
        }
    }
    Ok(CtcOutput {
        nll: -log_likelihood,
        grad,
    })
}
