//! Training objectives: closed-form Gaussian KL, Bernoulli log-likelihood,
//! and the ELBO / weighted-KL / capacity-targeted losses built from them.
//!
//! Conventions: KL is batch-averaged per latent (nats per sample), the
//! reconstruction log-likelihood is summed over pixels and batch-averaged,
//! and every loss is the minimization form.

use serde::{Deserialize, Serialize};

use crate::nnkernel::{Graph, KernelError, NodeId, Real, Result};
use crate::vae_model::GaussianPosterior;

/// Objective selector with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    Elbo,
    Beta,
    Capacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    /// KL weight; must be 1 in elbo mode.
    pub beta: f64,
    /// Capacity-deviation weight for capacity mode.
    pub gamma: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mode: ObjectiveMode::Elbo,
            beta: 1.0,
            gamma: 1000.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(KernelError::InvalidArgument(format!(
                "beta {} must be positive",
                self.beta
            )));
        }
        if matches!(self.mode, ObjectiveMode::Elbo) && self.beta != 1.0 {
            return Err(KernelError::InvalidArgument(
                "elbo mode requires beta = 1".into(),
            ));
        }
        if matches!(self.mode, ObjectiveMode::Capacity)
            && (!self.gamma.is_finite() || self.gamma <= 0.0)
        {
            return Err(KernelError::InvalidArgument(format!(
                "gamma {} must be positive in capacity mode",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Graph nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Scalar loss to minimize.
    pub total: NodeId,
    /// Scalar reconstruction log-likelihood (nats/sample).
    pub loglik: NodeId,
    /// Per-latent KL vector (nats/sample).
    pub kl_per_latent: NodeId,
    /// Scalar total KL (nats/sample).
    pub kl_total: NodeId,
}

/// Scalar values extracted from [`LossNodes`] after the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub loglik: f64,
    pub kl_total: f64,
    pub kl_per_latent: Vec<f64>,
}

impl LossNodes {
    pub fn materialize<T: Real>(&self, g: &Graph<T>) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            total: g.scalar_value(self.total)?,
            loglik: g.scalar_value(self.loglik)?,
            kl_total: g.scalar_value(self.kl_total)?,
            kl_per_latent: g
                .value(self.kl_per_latent)
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        })
    }
}

/// Per-latent KL of a diagonal Gaussian posterior against the unit Gaussian
/// prior, batch-averaged: `0.5 * (mu^2 + sigma^2 - 1 - 2 log sigma)`.
pub fn gaussian_kl<T: Real>(g: &mut Graph<T>, post: &GaussianPosterior) -> Result<NodeId> {
    let mu_sq = g.square(post.mu)?;
    let two_logsig = g.scale(post.log_sigma, T::c(2.0))?;
    let var = g.exp(two_logsig)?;
    let sum = g.add(mu_sq, var)?;
    let lin = g.add_scalar(two_logsig, T::one())?;
    let inner = g.sub(sum, lin)?;
    let per_latent = g.mean_axis0(inner)?;
    g.scale(per_latent, T::c(0.5))
}

/// Bernoulli log-likelihood of targets under pixel logits: per-sample sum
/// over pixels, batch mean. Stable form
/// `-(softplus(-l) * t + softplus(l) * (1 - t))`.
pub fn bernoulli_loglik<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let t_shape = g.value(target).shape().to_vec();
    if g.value(logits).shape() != t_shape.as_slice() {
        return Err(KernelError::Shape {
            op: "bernoulli_loglik",
            lhs: g.value(logits).shape().to_vec(),
            rhs: t_shape,
        });
    }
    if !g
        .value(target)
        .data()
        .iter()
        .all(|v| *v >= T::zero() && *v <= T::one())
    {
        return Err(KernelError::InvalidArgument(
            "bernoulli targets must lie in [0,1]".into(),
        ));
    }
    let batch = t_shape[0];
    let neg_l = g.neg(logits)?;
    let sp_neg = g.softplus(neg_l)?;
    let sp_pos = g.softplus(logits)?;
    let on = g.mul(sp_neg, target)?;
    let one_minus_t = {
        let neg_t = g.neg(target)?;
        g.add_scalar(neg_t, T::one())?
    };
    let off = g.mul(sp_pos, one_minus_t)?;
    let nll = g.add(on, off)?;
    let total = g.sum(nll)?;
    g.scale(total, T::c(-1.0 / batch as f64))
}

/// ELBO in minimization form: `total = -loglik + sum(kl)`.
pub fn elbo_loss<T: Real>(
    g: &mut Graph<T>,
    loglik: NodeId,
    kl_per_latent: NodeId,
) -> Result<LossNodes> {
    beta_loss(g, loglik, kl_per_latent, 1.0)
}

/// Weighted-KL objective: `total = -loglik + beta * sum(kl)`.
pub fn beta_loss<T: Real>(
    g: &mut Graph<T>,
    loglik: NodeId,
    kl_per_latent: NodeId,
    beta: f64,
) -> Result<LossNodes> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(KernelError::InvalidArgument(format!(
            "beta {beta} must be positive"
        )));
    }
    let kl_total = g.sum(kl_per_latent)?;
    let neg_ll = g.neg(loglik)?;
    let weighted = g.scale(kl_total, T::c(beta))?;
    let total = g.add(neg_ll, weighted)?;
    Ok(LossNodes {
        total,
        loglik,
        kl_per_latent,
        kl_total,
    })
}

/// Capacity-targeted objective:
/// `total = -loglik + gamma * |sum(kl) - c|`, subgradient 0 at the kink.
pub fn capacity_loss<T: Real>(
    g: &mut Graph<T>,
    loglik: NodeId,
    kl_per_latent: NodeId,
    gamma: f64,
    c: f64,
) -> Result<LossNodes> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(KernelError::InvalidArgument(format!(
            "gamma {gamma} must be positive"
        )));
    }
    if !c.is_finite() || c < 0.0 {
        return Err(KernelError::InvalidArgument(format!(
            "capacity target {c} must be non-negative"
        )));
    }
    let kl_total = g.sum(kl_per_latent)?;
    let shifted = g.add_scalar(kl_total, T::c(-c))?;
    let dev = g.abs(shifted)?;
    let penalty = g.scale(dev, T::c(gamma))?;
    let neg_ll = g.neg(loglik)?;
    let total = g.add(neg_ll, penalty)?;
    Ok(LossNodes {
        total,
        loglik,
        kl_per_latent,
        kl_total,
    })
}

/// Builds the objective selected by `cfg` at capacity target `c`.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ObjectiveConfig,
    loglik: NodeId,
    kl_per_latent: NodeId,
    c: f64,
) -> Result<LossNodes> {
    match cfg.mode {
        ObjectiveMode::Elbo => elbo_loss(g, loglik, kl_per_latent),
        ObjectiveMode::Beta => beta_loss(g, loglik, kl_per_latent, cfg.beta),
        ObjectiveMode::Capacity => capacity_loss(g, loglik, kl_per_latent, cfg.gamma, c),
    }
}
