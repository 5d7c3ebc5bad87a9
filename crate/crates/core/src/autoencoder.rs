//! Attribute autoencoder: `z = ReLU(W1 x + b1)`, `x_r = ReLU(W2 z + b2)`,
//! trained by full-batch gradient descent on squared reconstruction error
//! plus L2 weight decay.

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeTable, AttributeVector};
use crate::error::{Result, TmagError};
use crate::linalg::{relu, Matrix};
use crate::params::ParamVec;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    /// `d_z × d_x`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_x × d_z`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl AutoencoderParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(d_x: usize, d_z: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            w1: Matrix::xavier(d_z, d_x, rng),
            b1: vec![0.0; d_z],
            w2: Matrix::xavier(d_x, d_z, rng),
            b2: vec![0.0; d_x],
        }
    }

    pub fn zeros(d_x: usize, d_z: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_z, d_x),
            b1: vec![0.0; d_z],
            w2: Matrix::zeros(d_x, d_z),
            b2: vec![0.0; d_x],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w1.rows()
    }

    /// Squared L2 norm of all parameters, biases included when `with_biases`.
    pub fn squared_norm(&self, with_biases: bool) -> f64 {
        let mut s = self.w1.squared_norm() + self.w2.squared_norm();
        if with_biases {
            s += self.b1.iter().chain(&self.b2).map(|v| v * v).sum::<f64>();
        }
        s
    }

    /// Pre-activation `W1 x + b1` for a binary sparse input.
    pub fn encoder_preactivation(&self, x: &AttributeVector) -> Result<Vec<f64>> {
        if let Some(&last) = x.active.last() {
            if last >= self.input_dim() {
                return Err(TmagError::DimensionMismatch {
                    what: "attribute vector",
                    expected: self.input_dim(),
                    got: last + 1,
                });
            }
        }
        let cols = self.input_dim();
        let w = self.w1.as_slice();
        Ok(self
            .b1
            .iter()
            .enumerate()
            .map(|(r, b)| b + x.active.iter().map(|&j| w[r * cols + j]).sum::<f64>())
            .collect())
    }

    /// Latent codes for every row of `table`.
    pub fn encode_table(&self, table: &AttributeTable) -> Result<Matrix> {
        if table.width != self.input_dim() {
            return Err(TmagError::DimensionMismatch {
                what: "attribute table width",
                expected: self.input_dim(),
                got: table.width,
            });
        }
        let rows: Vec<Vec<f64>> = table
            .rows
            .par_iter()
            .map(|x| encode_sparse(self, x))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(rows.len() * self.latent_dim());
        rows.iter().for_each(|r| data.extend_from_slice(r));
        Matrix::from_vec(rows.len(), self.latent_dim(), data)
    }
}

impl ParamVec for AutoencoderParams {
    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.latent_dim())
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        self.w1.axpy(a, &x.w1);
        self.b1.axpy(a, &x.b1);
        self.w2.axpy(a, &x.w2);
        self.b2.axpy(a, &x.b2);
    }

    fn dot(&self, o: &Self) -> f64 {
        self.w1.dot(&o.w1) + self.b1.dot(&o.b1) + self.w2.dot(&o.w2) + self.b2.dot(&o.b2)
    }

    fn scale(&mut self, a: f64) {
        ParamVec::scale(&mut self.w1, a);
        ParamVec::scale(&mut self.b1, a);
        ParamVec::scale(&mut self.w2, a);
        ParamVec::scale(&mut self.b2, a);
    }

    fn for_each_scalar(&self, f: &mut dyn FnMut(f64)) {
        self.w1.for_each_scalar(f);
        self.b1.for_each_scalar(f);
        self.w2.for_each_scalar(f);
        self.b2.for_each_scalar(f);
    }

    fn for_each_scalar_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.w1.for_each_scalar_mut(f);
        self.b1.for_each_scalar_mut(f);
        self.w2.for_each_scalar_mut(f);
        self.b2.for_each_scalar_mut(f);
    }
}

/// `z = ReLU(W1 x + b1)` for a dense input.
pub fn encode(p: &AutoencoderParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != p.input_dim() {
        return Err(TmagError::DimensionMismatch {
            what: "encoder input",
            expected: p.input_dim(),
            got: x.len(),
        });
    }
    Ok(p.w1
        .matvec(x)
        .into_iter()
        .zip(&p.b1)
        .map(|(h, b)| relu(h + b))
        .collect())
}

pub fn encode_sparse(p: &AutoencoderParams, x: &AttributeVector) -> Result<Vec<f64>> {
    Ok(p.encoder_preactivation(x)?.into_iter().map(relu).collect())
}

/// `x_r = ReLU(W2 z + b2)`.
pub fn decode(p: &AutoencoderParams, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != p.latent_dim() {
        return Err(TmagError::DimensionMismatch {
            what: "decoder input",
            expected: p.latent_dim(),
            got: z.len(),
        });
    }
    Ok(p.w2
        .matvec(z)
        .into_iter()
        .zip(&p.b2)
        .map(|(o, b)| relu(o + b))
        .collect())
}

/// Fixed-size chunks so that the gradient reduction order never depends on
/// the thread count.
const CHUNK: usize = 128;

/// `Σ ‖x − x_r‖² + λ‖W‖²`, with gradient when `want_grad`.
fn loss_and_grad(
    p: &AutoencoderParams,
    x: &AttributeTable,
    lambda: f64,
    reg_biases: bool,
    want_grad: bool,
) -> Result<(f64, Option<AutoencoderParams>)> {
    if x.width != p.input_dim() {
        return Err(TmagError::DimensionMismatch {
            what: "attribute table width",
            expected: p.input_dim(),
            got: x.width,
        });
    }
    let d_x = p.input_dim();
    let partials: Vec<(f64, Option<AutoencoderParams>)> = x
        .rows
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<_> {
            let mut loss = 0.0;
            let mut g = want_grad.then(|| p.zeros_like());
            for row in chunk {
                let h = p.encoder_preactivation(row)?;
                let z: Vec<f64> = h.iter().map(|&v| relu(v)).collect();
                let o: Vec<f64> = p
                    .w2
                    .matvec(&z)
                    .into_iter()
                    .zip(&p.b2)
                    .map(|(v, b)| v + b)
                    .collect();
                let target = row.to_dense(d_x);
                let mut d_o = vec![0.0; d_x];
                for j in 0..d_x {
                    let r = target[j] - relu(o[j]);
                    loss += r * r;
                    if o[j] > 0.0 {
                        d_o[j] = -2.0 * r;
                    }
                }
                if let Some(g) = g.as_mut() {
                    g.w2.add_outer(1.0, &d_o, &z);
                    g.b2.axpy(1.0, &d_o);
                    let d_latent = p.w2.matvec_t(&d_o);
                    for (k, &v) in d_latent.iter().enumerate() {
                        if h[k] > 0.0 {
                            g.b1[k] += v;
                            let wrow = g.w1.row_mut(k);
                            for &j in &row.active {
                                wrow[j] += v;
                            }
                        }
                    }
                }
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;

    let mut loss = lambda * p.squared_norm(reg_biases);
    let mut grad = want_grad.then(|| p.zeros_like());
    for (l, g) in partials {
        loss += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.axpy(1.0, &g);
        }
    }
    if let Some(g) = grad.as_mut() {
        g.w1.axpy(2.0 * lambda, &p.w1);
        g.w2.axpy(2.0 * lambda, &p.w2);
        if reg_biases {
            g.b1.axpy(2.0 * lambda, &p.b1);
            g.b2.axpy(2.0 * lambda, &p.b2);
        }
    }
    Ok((loss, grad))
}

/// Reconstruction loss over `x` plus `λ‖W‖²`.
pub fn ae_loss(p: &AutoencoderParams, x: &AttributeTable, lambda: f64, reg_biases: bool) -> Result<f64> {
    Ok(loss_and_grad(p, x, lambda, reg_biases, false)?.0)
}

/// Loss and analytic gradient (ReLU subgradient 0 at 0).
pub fn ae_gradient(
    p: &AutoencoderParams,
    x: &AttributeTable,
    lambda: f64,
    reg_biases: bool,
) -> Result<(f64, AutoencoderParams)> {
    let (l, g) = loss_and_grad(p, x, lambda, reg_biases, true)?;
    Ok((l, g.expect("gradient requested")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub latent_dim: usize,
    pub lambda: f64,
    pub lr: f64,
    pub max_epochs: usize,
    /// Relative loss change over [`CONVERGENCE_WINDOW`] epochs below which training stops.
    pub tol: f64,
    pub reg_biases: bool,
    pub seed: u64,
    /// Distinguishes the user and item autoencoders' init streams.
    pub stream: u64,
}

pub const CONVERGENCE_WINDOW: usize = 5;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub losses: Vec<f64>,
    pub halvings: usize,
    pub converged: bool,
}

/// Full-batch gradient descent with step halving whenever a step would
/// increase the loss, so the loss sequence is non-increasing.
pub fn train_autoencoder(x: &AttributeTable, cfg: &AeTrainConfig) -> Result<(AutoencoderParams, AeTrainReport)> {
    if cfg.latent_dim == 0 {
        return Err(TmagError::Usage("autoencoder latent dim must be >= 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(TmagError::Usage("autoencoder learning rate must be positive".into()));
    }
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_AE, cfg.stream]);
    let mut p = AutoencoderParams::init(x.width, cfg.latent_dim, &mut r);
    let (mut loss, mut grad) = ae_gradient(&p, x, cfg.lambda, cfg.reg_biases)?;
    if !loss.is_finite() {
        return Err(TmagError::numeric(format!("autoencoder initial loss is {loss}")));
    }
    let mut report = AeTrainReport {
        losses: vec![loss],
        halvings: 0,
        converged: false,
    };
    let mut lr = cfg.lr;
    for epoch in 0..cfg.max_epochs {
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = p.clone();
            cand.axpy(-lr, &grad);
            let (l, g) = ae_gradient(&cand, x, cfg.lambda, cfg.reg_biases)?;
            if !l.is_finite() || !g.is_finite() {
                debug!("epoch {epoch}: non-finite candidate loss at lr {lr}, halving");
            } else if l <= loss {
                accepted = Some((cand, l, g));
                break;
            }
            lr *= 0.5;
            report.halvings += 1;
        }
        let Some((cand, l, g)) = accepted else {
            if !loss.is_finite() {
                return Err(TmagError::numeric(format!(
                    "autoencoder loss diverged at epoch {epoch} (loss {loss}, lr {lr})"
                )));
            }
            // no descent step found at any scale: stationary point
            report.converged = true;
            break;
        };
        p = cand;
        loss = l;
        grad = g;
        report.losses.push(loss);
        lr = (lr * 1.1).min(cfg.lr);

        let n = report.losses.len();
        if n > CONVERGENCE_WINDOW {
            let before = report.losses[n - 1 - CONVERGENCE_WINDOW];
            let rel = (before - loss) / before.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.tol {
                report.converged = true;
                break;
            }
        }
    }
    Ok((p, report))
}
