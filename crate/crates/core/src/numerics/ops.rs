//! Differentiable primitives.
//!
//! Each primitive is a small struct: `forward` computes the output and returns
//! the struct holding whatever the backward pass needs, and `backward` maps an
//! upstream gradient to exact analytic gradients for every input. Matrices are
//! row-major; sequences are time-major (`[time, channels]`).

use crate::error::{Error, Result};

use super::real::Real;
use super::tensor::Tensor;

fn check_inputs<T: Real>(op: &'static str, inputs: &[&Tensor<T>]) -> Result<()> {
    for t in inputs {
        if !t.data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("{op} input")));
        }
    }
    Ok(())
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `a [m,k] x b [k,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), k, "matmul inner dims");
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}

/// `out += a^T [k,m] x g [m,n]`.
pub fn matmul_tn_acc<T: Real>(out: &mut Tensor<T>, a: &Tensor<T>, g: &Tensor<T>) {
    let (m, k) = (a.rows(), a.cols());
    let n = g.cols();
    assert_eq!(g.rows(), m);
    assert_eq!(out.len(), k * n);
    T::gemm(
        k,
        m,
        n,
        T::one(),
        a.data(),
        1,
        k as isize,
        g.data(),
        n as isize,
        1,
        T::one(),
        out.data_mut(),
        n as isize,
        1,
    );
}

/// `g [m,n] x b^T` where `b` is `[k,n]`; result `[m,k]`.
pub fn matmul_nt<T: Real>(g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (g.rows(), g.cols());
    let k = b.rows();
    assert_eq!(b.cols(), n);
    let mut out = Tensor::zeros(&[m, k]);
    T::gemm(
        m,
        n,
        k,
        T::one(),
        g.data(),
        n as isize,
        1,
        b.data(),
        1,
        n as isize,
        T::zero(),
        out.data_mut(),
        k as isize,
        1,
    );
    out
}

pub struct MatMul<T: Real> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Real> MatMul<T> {
    pub fn forward(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (_, k) = dims2("matmul", a)?;
        let (k2, _) = dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        check_inputs("matmul", &[a, b])?;
        Ok((
            matmul(a, b),
            Self {
                a: a.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn backward(&self, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let ga = matmul_nt(g, &self.b);
        let mut gb = Tensor::zeros(self.b.shape());
        matmul_tn_acc(&mut gb, &self.a, g);
        (ga, gb)
    }
}

/// Geometry of a 1-D convolution over a time-major `[len, in_channels]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Weight layout: `[groups * kernel * group_in, group_out]`, row index
    /// `g * kernel * group_in + j * group_in + c`.
    pub fn weight_shape(&self) -> [usize; 2] {
        [self.groups * self.kernel * self.group_in(), self.group_out()]
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.stride == 0
            || self.kernel == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::shape("conv1d", format!("invalid geometry {self:?}")));
        }
        Ok(())
    }
}

pub struct Conv1d<T: Real> {
    geom: ConvGeometry,
    /// Zero-padded input `[len + 2 * padding, in_channels]`.
    padded: Tensor<T>,
    weight: Tensor<T>,
    in_len: usize,
    out_len: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn forward(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeometry,
    ) -> Result<(Tensor<T>, Self)> {
        geom.validate()?;
        let (len, cin) = dims2("conv1d", x)?;
        if cin != geom.in_channels {
            return Err(Error::shape(
                "conv1d",
                format!("input has {cin} channels, expected {}", geom.in_channels),
            ));
        }
        if weight.shape() != geom.weight_shape() {
            return Err(Error::shape(
                "conv1d",
                format!("weight {:?}, expected {:?}", weight.shape(), geom.weight_shape()),
            ));
        }
        if let Some(b) = bias {
            if b.len() != geom.out_channels {
                return Err(Error::shape("conv1d", "bias length"));
            }
        }
        let out_len = geom
            .output_len(len)
            .ok_or_else(|| Error::shape("conv1d", format!("input length {len} < kernel")))?;
        check_inputs("conv1d", &[x, weight])?;

        let padded = if geom.padding == 0 {
            x.clone()
        } else {
            let mut p = Tensor::zeros(&[len + 2 * geom.padding, cin]);
            p.data_mut()[geom.padding * cin..(geom.padding + len) * cin].copy_from_slice(x.data());
            p
        };

        let cout = geom.out_channels;
        let mut out = Tensor::zeros(&[out_len, cout]);
        if let Some(b) = bias {
            for t in 0..out_len {
                out.row_mut(t).copy_from_slice(b.data());
            }
        }
        let op = Self {
            geom,
            padded,
            weight: weight.clone(),
            in_len: len,
            out_len,
        };
        let (kg, gout) = (geom.kernel * geom.group_in(), geom.group_out());
        for g in 0..geom.groups {
            let w = &weight.data()[g * kg * gout..(g + 1) * kg * gout];
            let c = &mut out.data_mut()[g * gout..];
            if geom.groups == 1 {
                // Each receptive window is a contiguous slice of the padded input.
                T::gemm(
                    out_len,
                    kg,
                    gout,
                    T::one(),
                    op.padded.data(),
                    (geom.stride * cin) as isize,
                    1,
                    w,
                    gout as isize,
                    1,
                    T::one(),
                    c,
                    cout as isize,
                    1,
                );
            } else {
                let cols = op.im2col(g);
                T::gemm(
                    out_len,
                    kg,
                    gout,
                    T::one(),
                    &cols,
                    kg as isize,
                    1,
                    w,
                    gout as isize,
                    1,
                    T::one(),
                    c,
                    cout as isize,
                    1,
                );
            }
        }
        Ok((out, op))
    }

    fn im2col(&self, g: usize) -> Vec<T> {
        let geom = self.geom;
        let (gin, cin) = (geom.group_in(), geom.in_channels);
        let kg = geom.kernel * gin;
        let mut cols = vec![T::zero(); self.out_len * kg];
        let src = self.padded.data();
        for t in 0..self.out_len {
            for j in 0..geom.kernel {
                let s = (t * geom.stride + j) * cin + g * gin;
                let d = t * kg + j * gin;
                cols[d..d + gin].copy_from_slice(&src[s..s + gin]);
            }
        }
        cols
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&self, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let geom = self.geom;
        let (cin, cout) = (geom.in_channels, geom.out_channels);
        let (gin, gout) = (geom.group_in(), geom.group_out());
        let kg = geom.kernel * gin;
        assert_eq!(g.shape(), [self.out_len, cout]);

        let mut gbias = Tensor::zeros(&[cout]);
        for t in 0..self.out_len {
            for (b, &v) in gbias.data_mut().iter_mut().zip(g.row(t)) {
                *b = *b + v;
            }
        }

        let mut gw = Tensor::zeros(self.weight.shape().to_vec().as_slice());
        let mut gpad = Tensor::<T>::zeros(self.padded.shape());
        let mut gcols = vec![T::zero(); self.out_len * kg];
        for grp in 0..geom.groups {
            let w = &self.weight.data()[grp * kg * gout..(grp + 1) * kg * gout];
            let gslice = &g.data()[grp * gout..];
            let owned_cols;
            let (cols, rs): (&[T], usize) = if geom.groups == 1 {
                (self.padded.data(), geom.stride * cin)
            } else {
                owned_cols = self.im2col(grp);
                (&owned_cols, kg)
            };
            // grad_weight[group] += cols^T x g[group]
            T::gemm(
                kg,
                self.out_len,
                gout,
                T::one(),
                cols,
                1,
                rs as isize,
                gslice,
                cout as isize,
                1,
                T::one(),
                &mut gw.data_mut()[grp * kg * gout..(grp + 1) * kg * gout],
                gout as isize,
                1,
            );
            // grad_cols = g[group] x w^T
            T::gemm(
                self.out_len,
                gout,
                kg,
                T::one(),
                gslice,
                cout as isize,
                1,
                w,
                1,
                gout as isize,
                T::zero(),
                &mut gcols,
                kg as isize,
                1,
            );
            let dst = gpad.data_mut();
            for t in 0..self.out_len {
                let row = &gcols[t * kg..(t + 1) * kg];
                if geom.groups == 1 {
                    let base = t * geom.stride * cin;
                    for (d, &v) in dst[base..base + kg].iter_mut().zip(row) {
                        *d = *d + v;
                    }
                } else {
                    for j in 0..geom.kernel {
                        let base = (t * geom.stride + j) * cin + grp * gin;
                        for (d, &v) in dst[base..base + gin].iter_mut().zip(&row[j * gin..]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
        let gx = if geom.padding == 0 {
            gpad
        } else {
            let p = geom.padding;
            Tensor::new(
                vec![self.in_len, cin],
                gpad.data()[p * cin..(p + self.in_len) * cin].to_vec(),
            )
            .expect("conv grad shape")
        };
        (gx, gw, gbias)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
pub struct LayerNormOp<T: Real> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Tensor<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNormOp<T> {
    pub fn forward(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let d = x.cols();
        if gamma.len() != d || beta.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("feature dim {d}, gamma {}, beta {}", gamma.len(), beta.len()),
            ));
        }
        check_inputs("layer_norm", &[x, gamma, beta])?;
        let n = x.rows();
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            inv_std.push(rs);
            let nrow = normalized.row_mut(i);
            for (o, &v) in nrow.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let nrow = normalized.row(i).to_vec();
            for (((o, &h), &gm), &bt) in out
                .row_mut(i)
                .iter_mut()
                .zip(&nrow)
                .zip(gamma.data())
                .zip(beta.data())
            {
                *o = h * gm + bt;
            }
        }
        Ok((
            out,
            Self {
                normalized,
                inv_std,
                gamma: gamma.clone(),
            },
        ))
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)`.
    pub fn backward(&self, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let d = self.normalized.cols();
        let n = self.normalized.rows();
        let dt = T::from_usize(d).unwrap();
        let mut gx = Tensor::zeros(self.normalized.shape());
        let mut ggamma = Tensor::zeros(&[d]);
        let mut gbeta = Tensor::zeros(&[d]);
        let mut gh = vec![T::zero(); d];
        for i in 0..n {
            let xh = self.normalized.row(i);
            let gr = g.row(i);
            let mut sum_gh = T::zero();
            let mut sum_ghx = T::zero();
            for j in 0..d {
                ggamma.data_mut()[j] = ggamma.data()[j] + gr[j] * xh[j];
                gbeta.data_mut()[j] = gbeta.data()[j] + gr[j];
                gh[j] = gr[j] * self.gamma.data()[j];
                sum_gh = sum_gh + gh[j];
                sum_ghx = sum_ghx + gh[j] * xh[j];
            }
            let scale = self.inv_std[i] / dt;
            for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                *o = scale * (dt * gh[j] - sum_gh - xh[j] * sum_ghx);
            }
        }
        (gx, ggamma, gbeta)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub struct Gelu<T: Real> {
    input: Tensor<T>,
}

impl<T: Real> Gelu<T> {
    pub fn forward(x: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        check_inputs("gelu", &[x])?;
        Ok((x.map(gelu_scalar), Self { input: x.clone() }))
    }

    pub fn backward(&self, g: &Tensor<T>) -> Tensor<T> {
        let mut out = g.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.input.data()) {
            *o = *o * gelu_grad_scalar(x);
        }
        out
    }
}

/// Numerically stable log-sum-exp over a slice; `-inf` when all entries are `-inf`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

fn softmax_row<T: Real>(src: &[T], dst: &mut [T]) {
    let m = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = if s == T::neg_infinity() { T::zero() } else { (s - m).exp() };
        z = z + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / z;
    }
}

/// Row-wise softmax. Entries equal to `-inf` act as masked positions.
pub struct Softmax<T: Real> {
    output: Tensor<T>,
}

impl<T: Real> Softmax<T> {
    pub fn forward(x: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        if x.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            softmax_row(x.row(i), out.row_mut(i));
        }
        Ok((out.clone(), Self { output: out }))
    }

    pub fn from_output(output: Tensor<T>) -> Self {
        Self { output }
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn backward(&self, g: &Tensor<T>) -> Tensor<T> {
        let mut gx = Tensor::zeros(self.output.shape());
        for i in 0..self.output.rows() {
            let y = self.output.row(i);
            let gr = g.row(i);
            let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((o, &yi), &gi) in gx.row_mut(i).iter_mut().zip(y).zip(gr) {
                *o = yi * (gi - dot);
            }
        }
        gx
    }
}

pub struct LogSoftmax<T: Real> {
    probs: Tensor<T>,
}

impl<T: Real> LogSoftmax<T> {
    pub fn forward(x: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        check_inputs("log_softmax", &[x])?;
        let mut out = Tensor::zeros(x.shape());
        let mut probs = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            let lse = log_sum_exp(x.row(i));
            for ((o, p), &v) in out.row_mut(i).iter_mut().zip(probs.row_mut(i)).zip(x.row(i)) {
                *o = v - lse;
                *p = o.exp();
            }
        }
        Ok((out, Self { probs }))
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn backward(&self, g: &Tensor<T>) -> Tensor<T> {
        let mut gx = g.clone();
        for i in 0..g.rows() {
            let s: T = g.row(i).iter().copied().sum();
            for (o, &p) in gx.row_mut(i).iter_mut().zip(self.probs.row(i)) {
                *o = *o - p * s;
            }
        }
        gx
    }
}

/// Cosine similarity of two vectors.
#[derive(Clone, Debug)]
pub struct Cosine<T: Real> {
    a: Vec<T>,
    b: Vec<T>,
    norm_a: T,
    norm_b: T,
    value: T,
}

impl<T: Real> Cosine<T> {
    pub fn forward(a: &[T], b: &[T]) -> Result<(T, Self)> {
        if a.len() != b.len() {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{} vs {}", a.len(), b.len()),
            ));
        }
        if !a.iter().chain(b).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("cosine_similarity input".into()));
        }
        let norm_a = a.iter().map(|&x| x * x).sum::<T>().sqrt();
        let norm_b = b.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm_a == T::zero() || norm_b == T::zero() {
            return Err(Error::InvalidInput(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        let value = dot / (norm_a * norm_b);
        Ok((
            value,
            Self {
                a: a.to_vec(),
                b: b.to_vec(),
                norm_a,
                norm_b,
                value,
            },
        ))
    }

    /// Adds `g * d cos / d a` and `g * d cos / d b` into the given buffers.
    pub fn backward_into(&self, g: T, ga: &mut [T], gb: &mut [T]) {
        let inv = T::one() / (self.norm_a * self.norm_b);
        let sa = self.value / (self.norm_a * self.norm_a);
        let sb = self.value / (self.norm_b * self.norm_b);
        for i in 0..self.a.len() {
            ga[i] = ga[i] + g * (self.b[i] * inv - self.a[i] * sa);
            gb[i] = gb[i] + g * (self.a[i] * inv - self.b[i] * sb);
        }
    }

    pub fn backward(&self, g: T) -> (Vec<T>, Vec<T>) {
        let mut ga = vec![T::zero(); self.a.len()];
        let mut gb = vec![T::zero(); self.b.len()];
        self.backward_into(g, &mut ga, &mut gb);
        (ga, gb)
    }
}

pub struct EmbeddingLookup {
    ids: Vec<usize>,
    vocab: usize,
}

impl EmbeddingLookup {
    pub fn forward<T: Real>(table: &Tensor<T>, ids: &[usize]) -> Result<(Tensor<T>, Self)> {
        let (v, d) = dims2("embedding_lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        Ok((
            out,
            Self {
                ids: ids.to_vec(),
                vocab: v,
            },
        ))
    }

    pub fn backward<T: Real>(&self, g: &Tensor<T>) -> Tensor<T> {
        let d = g.cols();
        let mut gt = Tensor::zeros(&[self.vocab, d]);
        for (r, &id) in self.ids.iter().enumerate() {
            for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                *o = *o + v;
            }
        }
        gt
    }
}

/// Mean cross-entropy over rows against integer targets, with optional label
/// smoothing spread uniformly over the allowed classes. Classes outside
/// `allowed` receive zero probability.
pub struct CrossEntropy<T: Real> {
    probs: Tensor<T>,
    targets: Vec<usize>,
    smoothing: T,
    allowed: Vec<bool>,
}

impl<T: Real> CrossEntropy<T> {
    pub fn forward(
        logits: &Tensor<T>,
        targets: &[usize],
        smoothing: f64,
        allowed: Option<&[bool]>,
    ) -> Result<(T, Self)> {
        let (n, v) = dims2("cross_entropy", logits)?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidInput(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        check_inputs("cross_entropy", &[logits])?;
        let allowed = allowed.map(|a| a.to_vec()).unwrap_or_else(|| vec![true; v]);
        if allowed.len() != v {
            return Err(Error::shape("cross_entropy", "class mask length"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v || !allowed[t]) {
            return Err(Error::InvalidInput(format!("target class {t} not allowed")));
        }
        let w = allowed.iter().filter(|&&a| a).count();
        let eps = T::lit(smoothing);
        let uniform = eps / T::from_usize(w).unwrap();
        let mut probs = Tensor::zeros(&[n, v]);
        let mut loss = T::zero();
        let mut masked = vec![T::zero(); v];
        for i in 0..n {
            for ((m, &x), &a) in masked.iter_mut().zip(logits.row(i)).zip(&allowed) {
                *m = if a { x } else { T::neg_infinity() };
            }
            let lse = log_sum_exp(&masked);
            for (c, p) in probs.row_mut(i).iter_mut().enumerate() {
                if allowed[c] {
                    let lp = masked[c] - lse;
                    *p = lp.exp();
                    let q = if c == targets[i] {
                        T::one() - eps + uniform
                    } else {
                        uniform
                    };
                    if q > T::zero() {
                        loss = loss - q * lp;
                    }
                }
            }
        }
        let loss = loss / T::from_usize(n).unwrap();
        Ok((
            loss,
            Self {
                probs,
                targets: targets.to_vec(),
                smoothing: eps,
                allowed,
            },
        ))
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    /// Gradient of the mean loss w.r.t. logits, scaled by `g`.
    pub fn backward(&self, g: T) -> Tensor<T> {
        let n = self.probs.rows();
        let w = self.allowed.iter().filter(|&&a| a).count();
        let uniform = self.smoothing / T::from_usize(w).unwrap();
        let scale = g / T::from_usize(n).unwrap();
        let mut gl = Tensor::zeros(self.probs.shape());
        for i in 0..n {
            for (c, o) in gl.row_mut(i).iter_mut().enumerate() {
                if !self.allowed[c] {
                    continue;
                }
                let q = if c == self.targets[i] {
                    T::one() - self.smoothing + uniform
                } else {
                    uniform
                };
                *o = scale * (self.probs.row(i)[c] - q);
            }
        }
        gl
    }
}
