//! Ground-truth-factor generator: known factors pass through learnable-scale,
//! learnable-noise Gaussian channels into a decoder, trained with the
//! capacity-targeted objective. Per-factor KL then shows how the capacity
//! budget is allocated across factors as it grows.

use rand_chacha::ChaCha8Rng;

use crate::nnkernel::{
    Graph, KernelError, NodeId, ParamId, ParamStore, Real, Result, Tensor,
};
use crate::synthdata::FactorSpec;
use crate::vae_model::{Decoder, ModelConfig, LOG_SIGMA_MAX, LOG_SIGMA_MIN};

/// Initial channel scale; small so every channel starts near zero capacity.
const INIT_SCALE: f64 = 0.1;

/// One learnable `(scale, noise)` pair per ground-truth factor.
#[derive(Debug, Clone, Copy)]
pub struct FactorChannels {
    pub scale: ParamId,
    pub log_noise: ParamId,
    n_factors: usize,
}

impl FactorChannels {
    pub fn new<T: Real>(store: &mut ParamStore<T>, n_factors: usize) -> Result<Self> {
        if n_factors == 0 {
            return Err(KernelError::InvalidArgument(
                "factor channels need at least one factor".into(),
            ));
        }
        let scale = store.add(
            "channels.scale",
            Tensor::filled(&[n_factors], T::c(INIT_SCALE)),
        )?;
        let log_noise = store.add("channels.log_noise", Tensor::zeros(&[n_factors]))?;
        Ok(FactorChannels {
            scale,
            log_noise,
            n_factors,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    fn noise_std<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<NodeId> {
        let raw = g.param(store, self.log_noise)?;
        let clamped = g.clamp(raw, T::c(LOG_SIGMA_MIN), T::c(LOG_SIGMA_MAX))?;
        g.exp(clamped)
    }
}

/// Channel outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct FactorEncoding {
    /// Channel means `s_i * f_i`, `[batch, n_factors]`.
    pub mu: NodeId,
    /// Noisy samples `mu + t_i * eps_i`.
    pub z: NodeId,
}

/// Maps one factor value to `[-1, 1]`. Index-coded factors (shape, rotation)
/// map by grid position; continuous factors map affinely over their value
/// range. Single-point grids collapse to 0.
fn normalize_one(spec: &FactorSpec, factor: usize, value: f32) -> crate::synthdata::Result<f32> {
    let grid = &spec.grids()[factor];
    let k = grid.len();
    let idx = spec.index_of(factor, value)?;
    if k == 1 {
        return Ok(0.0);
    }
    let name = spec.names()[factor].as_str();
    if name == "shape" || name == "rotation" {
        Ok((idx as f32 / (k - 1) as f32) * 2.0 - 1.0)
    } else {
        let (lo, hi) = (grid[0], grid[k - 1]);
        Ok((value - lo) / (hi - lo) * 2.0 - 1.0)
    }
}

/// Normalizes one factor vector against its spec.
pub fn normalize_factors(
    values: &[f32],
    spec: &FactorSpec,
) -> crate::synthdata::Result<Vec<f32>> {
    if values.len() != spec.n_factors() {
        return Err(crate::synthdata::DataError::InvalidArgument(format!(
            "{} factor values for {} factors",
            values.len(),
            spec.n_factors()
        )));
    }
    values
        .iter()
        .enumerate()
        .map(|(f, &v)| normalize_one(spec, f, v))
        .collect()
}

/// `z_i = s_i * f_i + t_i * eps_i` with gradients to the scales and noises.
pub fn channel_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    channels: &FactorChannels,
    fnorm: NodeId,
    eps: NodeId,
) -> Result<FactorEncoding> {
    let s = g.param(store, channels.scale)?;
    let mu = g.row_mul(fnorm, s)?;
    let t = channels.noise_std(g, store)?;
    let noise = g.row_mul(eps, t)?;
    let z = g.add(mu, noise)?;
    Ok(FactorEncoding { mu, z })
}

/// Per-factor KL against the unit Gaussian prior, batch-averaged:
/// `0.5 * (mean((s_i f_i)^2) + t_i^2 - 1 - 2 log t_i)`.
pub fn per_factor_kl<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    channels: &FactorChannels,
    fnorm: NodeId,
) -> Result<NodeId> {
    let s = g.param(store, channels.scale)?;
    let mu = g.row_mul(fnorm, s)?;
    let mu_sq = g.square(mu)?;
    let mean_mu_sq = g.mean_axis0(mu_sq)?;
    let raw = g.param(store, channels.log_noise)?;
    let log_t = g.clamp(raw, T::c(LOG_SIGMA_MIN), T::c(LOG_SIGMA_MAX))?;
    let two_log_t = g.scale(log_t, T::c(2.0))?;
    let t_sq = g.exp(two_log_t)?;
    let sum = g.add(mean_mu_sq, t_sq)?;
    let lin = g.add_scalar(two_log_t, T::one())?;
    let inner = g.sub(sum, lin)?;
    g.scale(inner, T::c(0.5))
}

/// Channels plus the convolutional decoder that reconstructs images from
/// noisy factor codes.
#[derive(Debug, Clone)]
pub struct FactorGenerator {
    pub channels: FactorChannels,
    pub decoder: Decoder,
    image_cfg: ModelConfig,
}

impl FactorGenerator {
    /// `cfg` carries the image dimensions and decoder widths; its
    /// `n_latents` field is ignored in favour of the factor count.
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        n_factors: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let channels = FactorChannels::new(store, n_factors)?;
        let decoder = Decoder::new(cfg, n_factors, "dec", store, rng)?;
        Ok(FactorGenerator {
            channels,
            decoder,
            image_cfg: cfg.clone(),
        })
    }

    pub fn image_cfg(&self) -> &ModelConfig {
        &self.image_cfg
    }

    /// One forward pass: encodes normalized factors through the noisy
    /// channels and decodes pixel logits.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fnorm: NodeId,
        eps: NodeId,
    ) -> Result<(FactorEncoding, NodeId)> {
        let enc = channel_forward(g, store, &self.channels, fnorm, eps)?;
        let logits = self.decoder.forward(g, store, enc.z)?;
        Ok((enc, logits))
    }
}
