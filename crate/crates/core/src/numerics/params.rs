use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::tensor::Tensor;

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(Tensor::full(shape, T::one()))
    }

    /// Normal init with standard deviation `std`.
    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self::new(Tensor::from_fn(shape, |_| T::lit(dist.sample(rng))))
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        Self::new(Tensor::from_fn(shape, |_| {
            T::lit(rng.random_range(-bound..=bound))
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named parameter traversal used by optimizers and checkpoints.
///
/// Names are dotted paths built from `prefix`; traversal order is fixed and
/// identical between the shared and mutable variants.
pub trait Parameterized<T: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real, P: Parameterized<T>> Parameterized<T> for Vec<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, p) in self.iter().enumerate() {
            p.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Parameterized`] for a struct by listing its `Param` fields and
/// its nested `Parameterized` fields.
#[macro_export]
macro_rules! parameterized {
    ($ty:ident { params: [$($p:ident),* $(,)?], children: [$($c:ident),* $(,)?] }) => {
        impl<T: $crate::numerics::Real> $crate::numerics::Parameterized<T> for $ty<T> {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::numerics::Param<T>)>,
            ) {
                $(out.push(($crate::numerics::params::join(prefix, stringify!($p)), &self.$p));)*
                $(self.$c.collect(&$crate::numerics::params::join(prefix, stringify!($c)), out);)*
            }

            fn collect_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::numerics::Param<T>)>,
            ) {
                $(out.push(($crate::numerics::params::join(prefix, stringify!($p)), &mut self.$p));)*
                $(self.$c.collect_mut(&$crate::numerics::params::join(prefix, stringify!($c)), out);)*
            }
        }
    };
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [(String, &mut Param<T>)], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|&g| g.as_f64() * g.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let s = T::lit(max_norm / total);
        for (_, p) in params.iter_mut() {
            p.grad.scale(s);
        }
    }
    total
}
