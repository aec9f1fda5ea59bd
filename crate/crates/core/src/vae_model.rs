//! Encoder, reparametrised sampling, and decoder.
//!
//! The conv architecture follows the reference stack: four 32-channel 4x4
//! stride-2 convolutions, two 256-unit dense layers, and a dense head
//! emitting the mean and log standard deviation of the latent Gaussians;
//! the decoder mirrors it with transposed convolutions and emits Bernoulli
//! logits. The dense variant flattens the image through the same dense
//! trunk and serves the blob experiments.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nnkernel::{
    init::glorot_uniform, Graph, KernelError, NodeId, ParamId, ParamStore, Real, Result, Tensor,
};

/// Clamp bounds for the posterior log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;

const CONV_CHANNELS: usize = 32;
const CONV_KERNEL: usize = 4;
const CONV_STRIDE: usize = 2;
const CONV_LAYERS: usize = 4;
/// Spatial reduction across the conv stack (stride 2, four layers).
const CONV_FACTOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    #[serde(default = "default_latents")]
    pub n_latents: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_latents() -> usize {
    10
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latents < 1 {
            return Err(KernelError::InvalidArgument(
                "n_latents must be at least 1".into(),
            ));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(KernelError::InvalidArgument(format!(
                "degenerate input dims {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(KernelError::InvalidArgument(
                "hidden widths must be non-empty and positive".into(),
            ));
        }
        if self.arch == Architecture::Conv
            && (self.height % CONV_FACTOR != 0 || self.width % CONV_FACTOR != 0)
        {
            return Err(KernelError::InvalidArgument(format!(
                "conv architecture needs input dims divisible by {CONV_FACTOR} \
                 for four stride-2 layers, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn conv_spatial(&self) -> (usize, usize) {
        (self.height / CONV_FACTOR, self.width / CONV_FACTOR)
    }
}

/// Per-latent posterior parameters, `[batch, n_latents]` each.
/// `log_sigma` is clamped to `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: NodeId,
    pub log_sigma: NodeId,
}

/// A reparametrised draw `z = mu + sigma * eps` and the noise that made it.
#[derive(Debug, Clone, Copy)]
pub struct LatentSample {
    pub z: NodeId,
    pub eps: NodeId,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
}

impl DenseLayer {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            glorot_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(DenseLayer { w, b })
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        g.dense(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    k: ParamId,
    b: ParamId,
}

impl ConvLayer {
    fn conv<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let fan_in = c_in * CONV_KERNEL * CONV_KERNEL;
        let fan_out = c_out * CONV_KERNEL * CONV_KERNEL;
        let k = store.add(
            format!("{name}.k"),
            glorot_uniform(
                rng,
                &[c_out, c_in, CONV_KERNEL, CONV_KERNEL],
                fan_in,
                fan_out,
            ),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(ConvLayer { k, b })
    }

    fn deconv<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let fan_in = c_in * CONV_KERNEL * CONV_KERNEL;
        let fan_out = c_out * CONV_KERNEL * CONV_KERNEL;
        let k = store.add(
            format!("{name}.k"),
            glorot_uniform(
                rng,
                &[c_in, c_out, CONV_KERNEL, CONV_KERNEL],
                fan_in,
                fan_out,
            ),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(ConvLayer { k, b })
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<ConvLayer>,
    fcs: Vec<DenseLayer>,
    head: DenseLayer,
}

/// Decoder stack; also used standalone by the ground-truth factor generator.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: ModelConfig,
    input_dim: usize,
    fcs: Vec<DenseLayer>,
    deconvs: Vec<ConvLayer>,
    head: Option<DenseLayer>,
}

impl Decoder {
    /// Builds a decoder mapping `input_dim` latents to images of `cfg`'s
    /// dimensions; parameter names are prefixed with `prefix`.
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        input_dim: usize,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut fcs = Vec::new();
        let mut deconvs = Vec::new();
        let mut head = None;
        match cfg.arch {
            Architecture::Conv => {
                let (h0, w0) = cfg.conv_spatial();
                let mut dims: Vec<usize> = vec![input_dim];
                dims.extend(&cfg.hidden);
                dims.push(CONV_CHANNELS * h0 * w0);
                for (i, pair) in dims.windows(2).enumerate() {
                    fcs.push(DenseLayer::new(
                        store,
                        rng,
                        &format!("{prefix}.fc{i}"),
                        pair[0],
                        pair[1],
                    )?);
                }
                for i in 0..CONV_LAYERS {
                    let c_out = if i + 1 == CONV_LAYERS {
                        cfg.channels
                    } else {
                        CONV_CHANNELS
                    };
                    deconvs.push(ConvLayer::deconv(
                        store,
                        rng,
                        &format!("{prefix}.deconv{i}"),
                        CONV_CHANNELS,
                        c_out,
                    )?);
                }
            }
            Architecture::Dense => {
                let mut dims: Vec<usize> = vec![input_dim];
                dims.extend(&cfg.hidden);
                for (i, pair) in dims.windows(2).enumerate() {
                    fcs.push(DenseLayer::new(
                        store,
                        rng,
                        &format!("{prefix}.fc{i}"),
                        pair[0],
                        pair[1],
                    )?);
                }
                head = Some(DenseLayer::new(
                    store,
                    rng,
                    &format!("{prefix}.head"),
                    *cfg.hidden.last().expect("validated non-empty"),
                    cfg.image_len(),
                )?);
            }
        }
        Ok(Decoder {
            cfg: cfg.clone(),
            input_dim,
            fcs,
            deconvs,
            head,
        })
    }

    /// Maps latents `[batch, input_dim]` to logits `[batch, C, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
    ) -> Result<NodeId> {
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.input_dim {
            return Err(KernelError::Shape {
                op: "decode",
                lhs: zs,
                rhs: vec![0, self.input_dim],
            });
        }
        let batch = zs[0];
        let mut h = z;
        match self.cfg.arch {
            Architecture::Conv => {
                for layer in &self.fcs {
                    h = layer.forward(g, store, h)?;
                    h = g.relu(h)?;
                }
                let (h0, w0) = self.cfg.conv_spatial();
                h = g.reshape(h, &[batch, CONV_CHANNELS, h0, w0])?;
                for (i, layer) in self.deconvs.iter().enumerate() {
                    let k = g.param(store, layer.k)?;
                    let b = g.param(store, layer.b)?;
                    h = g.conv2d_transpose(h, k, b, CONV_STRIDE)?;
                    if i + 1 != self.deconvs.len() {
                        h = g.relu(h)?;
                    }
                }
                Ok(h)
            }
            Architecture::Dense => {
                for layer in &self.fcs {
                    h = layer.forward(g, store, h)?;
                    h = g.relu(h)?;
                }
                let head = self.head.as_ref().expect("dense decoder has a head");
                h = head.forward(g, store, h)?;
                g.reshape(
                    h,
                    &[batch, self.cfg.channels, self.cfg.height, self.cfg.width],
                )
            }
        }
    }
}

/// Full encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub cfg: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
}

impl VaeModel {
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut fcs = Vec::new();
        let trunk_in = match cfg.arch {
            Architecture::Conv => {
                let mut c_in = cfg.channels;
                for i in 0..CONV_LAYERS {
                    convs.push(ConvLayer::conv(
                        store,
                        rng,
                        &format!("enc.conv{i}"),
                        c_in,
                        CONV_CHANNELS,
                    )?);
                    c_in = CONV_CHANNELS;
                }
                let (h0, w0) = cfg.conv_spatial();
                CONV_CHANNELS * h0 * w0
            }
            Architecture::Dense => cfg.image_len(),
        };
        let mut dims = vec![trunk_in];
        dims.extend(&cfg.hidden);
        for (i, pair) in dims.windows(2).enumerate() {
            fcs.push(DenseLayer::new(
                store,
                rng,
                &format!("enc.fc{i}"),
                pair[0],
                pair[1],
            )?);
        }
        let head = DenseLayer::new(
            store,
            rng,
            "enc.head",
            *cfg.hidden.last().expect("validated non-empty"),
            2 * cfg.n_latents,
        )?;
        let decoder = Decoder::new(cfg, cfg.n_latents, "dec", store, rng)?;
        Ok(VaeModel {
            cfg: cfg.clone(),
            encoder: Encoder { convs, fcs, head },
            decoder,
        })
    }

    /// Posterior parameters for an image batch `[batch, C, H, W]`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<GaussianPosterior> {
        let xs = g.value(x).shape().to_vec();
        let want = [self.cfg.channels, self.cfg.height, self.cfg.width];
        if xs.len() != 4 || xs[1..] != want {
            return Err(KernelError::Shape {
                op: "encode",
                lhs: xs,
                rhs: want.to_vec(),
            });
        }
        let batch = xs[0];
        let mut h = x;
        match self.cfg.arch {
            Architecture::Conv => {
                for layer in &self.encoder.convs {
                    let k = g.param(store, layer.k)?;
                    let b = g.param(store, layer.b)?;
                    h = g.conv2d(h, k, b, CONV_STRIDE)?;
                    h = g.relu(h)?;
                }
                let (h0, w0) = self.cfg.conv_spatial();
                h = g.reshape(h, &[batch, CONV_CHANNELS * h0 * w0])?;
            }
            Architecture::Dense => {
                h = g.reshape(h, &[batch, self.cfg.image_len()])?;
            }
        }
        for layer in &self.encoder.fcs {
            h = layer.forward(g, store, h)?;
            h = g.relu(h)?;
        }
        let stats = self.encoder.head.forward(g, store, h)?;
        let mu = g.narrow_cols(stats, 0, self.cfg.n_latents)?;
        let raw = g.narrow_cols(stats, self.cfg.n_latents, self.cfg.n_latents)?;
        let log_sigma = g.clamp(raw, T::c(LOG_SIGMA_MIN), T::c(LOG_SIGMA_MAX))?;
        Ok(GaussianPosterior { mu, log_sigma })
    }

    /// `z = mu + exp(log_sigma) * eps`; gradients flow to the posterior
    /// parameters, never to the noise.
    pub fn reparameterize<T: Real>(
        &self,
        g: &mut Graph<T>,
        post: &GaussianPosterior,
        eps: NodeId,
    ) -> Result<LatentSample> {
        let sigma = g.exp(post.log_sigma)?;
        let scaled = g.mul(sigma, eps)?;
        let z = g.add(post.mu, scaled)?;
        Ok(LatentSample { z, eps })
    }

    /// Maps latents to pixel logits; Bernoulli probabilities are
    /// `sigmoid(logits)`, fused into the likelihood for stability.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
    ) -> Result<NodeId> {
        self.decoder.forward(g, store, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    fn blob_cfg() -> ModelConfig {
        ModelConfig {
            arch: Architecture::Dense,
            n_latents: 10,
            channels: 1,
            height: 32,
            width: 32,
            hidden: vec![256, 256],
        }
    }

    fn build(cfg: &ModelConfig) -> (VaeModel, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = stream(7, domain::INIT, 0);
        let model = VaeModel::new(cfg, &mut store, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn encode_shape_contract() {
        let (model, store) = build(&blob_cfg());
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[64, 1, 32, 32], 0.25)).unwrap();
        let post = model.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.value(post.mu).shape(), &[64, 10]);
        assert_eq!(g.value(post.log_sigma).shape(), &[64, 10]);
    }

    #[test]
    fn fresh_model_respects_log_sigma_clamp() {
        let (model, store) = build(&blob_cfg());
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[4, 1, 32, 32], 0.9)).unwrap();
        let post = model.encode(&mut g, &store, x).unwrap();
        assert!(g.value(post.mu).all_finite());
        for &ls in g.value(post.log_sigma).data() {
            assert!((LOG_SIGMA_MIN as f32..=LOG_SIGMA_MAX as f32).contains(&ls));
        }
    }

    #[test]
    fn identical_inputs_give_identical_posterior_rows() {
        let (model, store) = build(&blob_cfg());
        let mut g = Graph::new();
        let mut data = vec![0.0f32; 2 * 1024];
        for i in 0..1024 {
            let v = (i % 7) as f32 / 7.0;
            data[i] = v;
            data[1024 + i] = v;
        }
        let x = g
            .constant(Tensor::from_vec(&[2, 1, 32, 32], data).unwrap())
            .unwrap();
        let post = model.encode(&mut g, &store, x).unwrap();
        let mu = g.value(post.mu).data();
        assert_eq!(&mu[..10], &mu[10..20]);
    }

    #[test]
    fn reparameterize_is_exact() {
        let (model, _) = build(&blob_cfg());
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_vec(&[1, 1], vec![2.0f32]).unwrap()).unwrap();
        let log_sigma = g
            .constant(Tensor::from_vec(&[1, 1], vec![0.5f32.ln()]).unwrap())
            .unwrap();
        let post = GaussianPosterior { mu, log_sigma };
        let eps = g.constant(Tensor::from_vec(&[1, 1], vec![1.0f32]).unwrap()).unwrap();
        let s = model.reparameterize(&mut g, &post, eps).unwrap();
        assert!((g.value(s.z).data()[0] - 2.5).abs() < 1e-7);

        let eps0 = g.constant(Tensor::from_vec(&[1, 1], vec![0.0f32]).unwrap()).unwrap();
        let s0 = model.reparameterize(&mut g, &post, eps0).unwrap();
        assert_eq!(g.value(s0.z).data()[0], 2.0);
    }

    #[test]
    fn decode_shape_contract_dense_and_conv() {
        let (model, store) = build(&blob_cfg());
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[64, 10])).unwrap();
        let logits = model.decode(&mut g, &store, z).unwrap();
        assert_eq!(g.value(logits).shape(), &[64, 1, 32, 32]);

        let conv_cfg = ModelConfig {
            arch: Architecture::Conv,
            ..blob_cfg()
        };
        let (model, store) = build(&conv_cfg);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 1, 32, 32], 0.5)).unwrap();
        let post = model.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.value(post.mu).shape(), &[2, 10]);
        let z = g.constant(Tensor::zeros(&[2, 10])).unwrap();
        let logits = model.decode(&mut g, &store, z).unwrap();
        assert_eq!(g.value(logits).shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn conv_arch_rejects_indivisible_dims() {
        let cfg = ModelConfig {
            arch: Architecture::Conv,
            height: 24,
            width: 24,
            ..blob_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decode_is_continuous_in_z() {
        let (model, store) = build(&blob_cfg());
        let decode_at = |delta: f32| {
            let mut g = Graph::new();
            let mut z = vec![0.3f32; 10];
            z[4] += delta;
            let z = g.constant(Tensor::from_vec(&[1, 10], z).unwrap()).unwrap();
            let out = model.decode(&mut g, &store, z).unwrap();
            g.value(out).data().to_vec()
        };
        let base = decode_at(0.0);
        let mut prev = f32::INFINITY;
        for delta in [0.1, 0.01, 0.001] {
            let moved = decode_at(delta);
            let norm: f32 = moved
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt();
            assert!(norm < prev);
            prev = norm;
        }
        assert!(prev < 1e-2);
    }
}
