//! Flat vector-space view over parameter containers, used by the
//! meta-learner's update rules and by the finite-difference checks.

use crate::error::{Result, TmagError};
use crate::linalg::Matrix;

pub trait ParamVec: Clone {
    /// Same shape, all zeros.
    fn zeros_like(&self) -> Self;
    /// `self += a · x`
    fn axpy(&mut self, a: f64, x: &Self);
    fn dot(&self, other: &Self) -> f64;
    fn scale(&mut self, a: f64);
    /// Visit every scalar in a fixed order.
    fn for_each_scalar(&self, f: &mut dyn FnMut(f64));
    /// Mutable visit in the same order as [`ParamVec::for_each_scalar`].
    fn for_each_scalar_mut(&mut self, f: &mut dyn FnMut(&mut f64));

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.for_each_scalar(&mut |v| m = m.max(v.abs()));
        m
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_scalar(&mut |v| ok &= v.is_finite());
        ok
    }

    fn len(&self) -> usize {
        let mut n = 0;
        self.for_each_scalar(&mut |_| n += 1);
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_scalar(&mut |v| out.push(v));
        out
    }
}

impl ParamVec for Vec<f64> {
    fn zeros_like(&self) -> Self {
        vec![0.0; self.len()]
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        crate::linalg::axpy(self, a, x);
    }

    fn dot(&self, other: &Self) -> f64 {
        crate::linalg::dot(self, other)
    }

    fn scale(&mut self, a: f64) {
        self.iter_mut().for_each(|v| *v *= a);
    }

    fn for_each_scalar(&self, f: &mut dyn FnMut(f64)) {
        self.iter().for_each(|&v| f(v));
    }

    fn for_each_scalar_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.iter_mut().for_each(f);
    }
}

impl ParamVec for Matrix {
    fn zeros_like(&self) -> Self {
        Matrix::zeros(self.rows(), self.cols())
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        Matrix::axpy(self, a, x);
    }

    fn dot(&self, other: &Self) -> f64 {
        crate::linalg::dot(self.as_slice(), other.as_slice())
    }

    fn scale(&mut self, a: f64) {
        Matrix::scale(self, a);
    }

    fn for_each_scalar(&self, f: &mut dyn FnMut(f64)) {
        self.as_slice().iter().for_each(|&v| f(v));
    }

    fn for_each_scalar_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.as_mut_slice().iter_mut().for_each(f);
    }
}

/// A differentiable scalar function of a parameter container.
pub trait Objective<P: ParamVec> {
    fn loss(&self, p: &P) -> Result<f64>;
    /// Loss and gradient at `p`.
    fn gradient(&self, p: &P) -> Result<(f64, P)>;
}

/// Default central-difference step for a Hessian-vector product at `p`.
pub fn hvp_eps<P: ParamVec>(p: &P, scale: f64) -> f64 {
    scale * (1.0 + p.max_abs())
}

/// `H v` by central differencing the gradient along `v / ‖v‖`, rescaled by `‖v‖`.
/// A zero `v` gives a zero result without evaluating the gradient.
pub fn hvp<P: ParamVec, O: Objective<P> + ?Sized>(obj: &O, p: &P, v: &P, eps: f64) -> Result<P> {
    let nv = v.norm();
    if nv == 0.0 {
        return Ok(p.zeros_like());
    }
    if !(eps > 0.0) {
        return Err(TmagError::Usage(format!("hvp step {eps} must be positive")));
    }
    let mut plus = p.clone();
    plus.axpy(eps / nv, v);
    let mut minus = p.clone();
    minus.axpy(-eps / nv, v);
    let (_, mut gp) = obj.gradient(&plus)?;
    let (_, gm) = obj.gradient(&minus)?;
    gp.axpy(-1.0, &gm);
    gp.scale(nv / (2.0 * eps));
    Ok(gp)
}

/// `½ θᵀ diag(h) θ`: a closed-form objective for checking update rules.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub diag: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(diag: Vec<f64>) -> Self {
        Self { diag }
    }
}

impl Objective<Vec<f64>> for QuadraticObjective {
    fn loss(&self, p: &Vec<f64>) -> Result<f64> {
        Ok(0.5 * p.iter().zip(&self.diag).map(|(x, h)| h * x * x).sum::<f64>())
    }

    fn gradient(&self, p: &Vec<f64>) -> Result<(f64, Vec<f64>)> {
        let g = p.iter().zip(&self.diag).map(|(x, h)| h * x).collect();
        Ok((self.loss(p)?, g))
    }
}
