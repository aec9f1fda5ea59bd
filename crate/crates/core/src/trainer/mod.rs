//! Training orchestration: batching, seeding, stepping, logging, and
//! checkpointing for the VAE and factor-generator experiments.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    Experiment, ModelSection, ObjectiveSection, ResolvedConfig, ScheduleSection, TrainConfig,
    DEFAULT_BATCH, DEFAULT_GAMMA, DEFAULT_LEARNING_RATE, DEFAULT_LOG_EVERY,
};

use crate::factor_generator::{normalize_factors, FactorGenerator};
use crate::nnkernel::checkpoint::{self, CheckpointError};
use crate::nnkernel::{Adam, Graph, KernelError, ParamStore, Tensor};
use crate::objectives::{self, LossBreakdown, ObjectiveConfig};
use crate::rng::{domain, stream};
use crate::synthdata::{read_dataset, DataError, Dataset};
use crate::vae_model::{ModelConfig, VaeModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric failure at iteration {iteration}: {source}")]
    Numeric {
        iteration: u64,
        source: KernelError,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Per-step scalars logged to the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Completed training steps (1-based).
    pub iteration: u64,
    pub loss: f64,
    pub loglik: f64,
    pub kl_total: f64,
    /// Per-latent (VAE) or per-factor (generator) KL, nats/sample.
    pub per_latent: Vec<f64>,
    /// Capacity target at this step; 0 outside capacity mode.
    pub c: f64,
    pub seconds: f64,
}

/// Model hyperparameters stored as a JSON sidecar next to each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSidecar {
    pub experiment: Experiment,
    pub model: ModelConfig,
    pub n_latents: usize,
    pub factor_names: Option<Vec<String>>,
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics_path: PathBuf,
    pub factor_metrics_path: Option<PathBuf>,
    pub checkpoint_path: PathBuf,
    pub records: Vec<MetricsRecord>,
}

enum ModelKind {
    Vae(VaeModel),
    Generator(FactorGenerator),
}

/// A checkpoint re-hydrated into a model plus parameter store.
pub struct LoadedRun {
    pub sidecar: RunSidecar,
    pub store: ParamStore<f32>,
    model: ModelKind,
}

impl LoadedRun {
    pub fn vae(&self) -> Option<&VaeModel> {
        match &self.model {
            ModelKind::Vae(m) => Some(m),
            _ => None,
        }
    }

    pub fn generator(&self) -> Option<&FactorGenerator> {
        match &self.model {
            ModelKind::Generator(m) => Some(m),
            _ => None,
        }
    }
}

fn gather_images(ds: &Dataset, idx: &[usize]) -> Tensor<f32> {
    let n = ds.image_len();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        data.extend_from_slice(ds.image(i));
    }
    Tensor::from_vec(&[idx.len(), ds.channels, ds.height, ds.width], data)
        .expect("gathered batch matches shape")
}

fn gather_rows(flat: &[f32], width: usize, idx: &[usize]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&flat[i * width..(i + 1) * width]);
    }
    Tensor::from_vec(&[idx.len(), width], data).expect("gathered batch matches shape")
}

fn normal_noise(seed: u64, iter: u64, rows: usize, cols: usize) -> Tensor<f32> {
    let mut rng = stream(seed, domain::NOISE, iter);
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("noise matches shape")
}

/// One VAE training step: forward with a single posterior sample, backward,
/// Adam update.
pub fn vae_step(
    model: &VaeModel,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    objective: &ObjectiveConfig,
    x: Tensor<f32>,
    eps: Tensor<f32>,
    c: f64,
) -> std::result::Result<LossBreakdown, KernelError> {
    let mut g = Graph::new();
    let xn = g.constant(x)?;
    let post = model.encode(&mut g, store, xn)?;
    let epsn = g.constant(eps)?;
    let sample = model.reparameterize(&mut g, &post, epsn)?;
    let logits = model.decode(&mut g, store, sample.z)?;
    let loglik = objectives::bernoulli_loglik(&mut g, logits, xn)?;
    let kl = objectives::gaussian_kl(&mut g, &post)?;
    let nodes = objectives::build_loss(&mut g, objective, loglik, kl, c)?;
    let breakdown = nodes.materialize(&g)?;
    g.backward(nodes.total, store)?;
    opt.step(store)?;
    Ok(breakdown)
}

/// One factor-generator step under the capacity-targeted objective.
pub fn generator_step(
    gen: &FactorGenerator,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    objective: &ObjectiveConfig,
    fnorm: Tensor<f32>,
    x: Tensor<f32>,
    eps: Tensor<f32>,
    c: f64,
) -> std::result::Result<LossBreakdown, KernelError> {
    let mut g = Graph::new();
    let fn_node = g.constant(fnorm)?;
    let eps_node = g.constant(eps)?;
    let (_, logits) = gen.forward(&mut g, store, fn_node, eps_node)?;
    let xn = g.constant(x)?;
    let loglik = objectives::bernoulli_loglik(&mut g, logits, xn)?;
    let kl = crate::factor_generator::per_factor_kl(&mut g, store, &gen.channels, fn_node)?;
    let nodes = objectives::build_loss(&mut g, objective, loglik, kl, c)?;
    let breakdown = nodes.materialize(&g)?;
    g.backward(nodes.total, store)?;
    opt.step(store)?;
    Ok(breakdown)
}

fn metrics_header(n: usize) -> String {
    let kls: Vec<String> = (0..n).map(|i| format!("kl_{i}")).collect();
    format!("iter,loss,loglik,kl_total,C,{},seconds", kls.join(","))
}

fn metrics_row(r: &MetricsRecord) -> String {
    let kls: Vec<String> = r.per_latent.iter().map(|v| v.to_string()).collect();
    format!(
        "{},{},{},{},{},{},{}",
        r.iteration,
        r.loss,
        r.loglik,
        r.kl_total,
        r.c,
        kls.join(","),
        r.seconds
    )
}

/// Runs a configured experiment from scratch.
pub fn run(cfg: &ResolvedConfig) -> Result<RunOutput> {
    run_inner(cfg, None, |_| {})
}

/// Resumes from a checkpoint written by an identical configuration; the
/// continuation reproduces the original run exactly.
pub fn resume(cfg: &ResolvedConfig, ckpt: &Path) -> Result<RunOutput> {
    run_inner(cfg, Some(ckpt), |_| {})
}

/// Like [`run`]/[`resume`] but invokes `progress` once per logged record.
pub fn run_with_progress(
    cfg: &ResolvedConfig,
    resume_from: Option<&Path>,
    progress: impl FnMut(&MetricsRecord),
) -> Result<RunOutput> {
    run_inner(cfg, resume_from, progress)
}

fn run_inner(
    cfg: &ResolvedConfig,
    resume_from: Option<&Path>,
    mut progress: impl FnMut(&MetricsRecord),
) -> Result<RunOutput> {
    let dataset = read_dataset(&cfg.dataset)?;
    if cfg.batch_size > dataset.len() {
        return Err(TrainError::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let resolved_toml = toml::to_string_pretty(cfg)
        .map_err(|e| TrainError::Config(format!("cannot serialize config: {e}")))?;
    std::fs::write(cfg.out_dir.join("config.toml"), resolved_toml)?;

    let mut store = ParamStore::new();
    let mut init_rng = stream(cfg.seed, domain::INIT, 0);
    let factor_names: Option<Vec<String>> = match cfg.experiment {
        Experiment::Generator => Some(dataset.spec.names().to_vec()),
        Experiment::Vae => None,
    };
    let model = match cfg.experiment {
        Experiment::Vae => ModelKind::Vae(VaeModel::new(&cfg.model, &mut store, &mut init_rng)?),
        Experiment::Generator => ModelKind::Generator(FactorGenerator::new(
            &cfg.model,
            dataset.spec.n_factors(),
            &mut store,
            &mut init_rng,
        )?),
    };
    let n_latents = match &model {
        ModelKind::Vae(_) => cfg.model.n_latents,
        ModelKind::Generator(g) => g.channels.n_factors(),
    };
    let sidecar = RunSidecar {
        experiment: cfg.experiment,
        model: cfg.model.clone(),
        n_latents,
        factor_names: factor_names.clone(),
    };

    // normalized factor matrix for generator batches
    let fnorm_all: Option<Vec<f32>> = match cfg.experiment {
        Experiment::Generator => {
            let mut flat = Vec::with_capacity(dataset.len() * dataset.spec.n_factors());
            for i in 0..dataset.len() {
                flat.extend(normalize_factors(&dataset.factors(i), &dataset.spec)?);
            }
            Some(flat)
        }
        Experiment::Vae => None,
    };

    let mut opt = Adam::new(&store, cfg.learning_rate as f32);
    let mut seed = cfg.seed;
    let mut start_iter = 0u64;
    if let Some(path) = resume_from {
        let ckpt = checkpoint::load(path)?;
        store.load_values(&ckpt.params)?;
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        if let (Some((m, v)), Some(step)) = (ckpt.adam_moments(&names), ckpt.adam_step()) {
            opt.restore(step, m, v)?;
        }
        if let Some(s) = ckpt.rng_seed() {
            seed = s;
        }
        start_iter = ckpt.iteration().ok_or_else(|| {
            TrainError::Config(format!("checkpoint {path:?} lacks an iteration block"))
        })?;
        if start_iter >= cfg.iterations {
            return Err(TrainError::Config(format!(
                "checkpoint is at iteration {start_iter}, config stops at {}",
                cfg.iterations
            )));
        }
    }

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{}", metrics_header(n_latents))?;

    let mut factor_metrics: Option<BufWriter<File>> = None;
    let factor_metrics_path = factor_names.as_ref().map(|_| cfg.out_dir.join("factor_kl.csv"));
    if let (Some(path), Some(names)) = (&factor_metrics_path, &factor_names) {
        let mut w = BufWriter::new(File::create(path)?);
        let cols: Vec<String> = names.iter().map(|n| format!("kl_{n}")).collect();
        writeln!(w, "step,C,total_kl,{},recon_loglik", cols.join(","))?;
        factor_metrics = Some(w);
    }

    let start = Instant::now();
    let mut records = Vec::new();
    let mut ema_kl: Option<Vec<f64>> = None;
    let mut final_ckpt = cfg.out_dir.join("ckpt_final.capk");

    for iter in start_iter..cfg.iterations {
        let c = cfg.capacity_at(iter);
        let mut batch_rng = stream(seed, domain::BATCH, iter);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..dataset.len()))
            .collect();
        let x = gather_images(&dataset, &idx);
        let eps = normal_noise(seed, iter, cfg.batch_size, n_latents);

        let breakdown = match &model {
            ModelKind::Vae(m) => vae_step(m, &mut store, &mut opt, &cfg.objective, x, eps, c),
            ModelKind::Generator(gen) => {
                let fnorm = gather_rows(
                    fnorm_all.as_ref().expect("generator has factors"),
                    dataset.spec.n_factors(),
                    &idx,
                );
                generator_step(gen, &mut store, &mut opt, &cfg.objective, fnorm, x, eps, c)
            }
        }
        .map_err(|source| TrainError::Numeric {
            iteration: iter,
            source,
        })?;

        // smoothed per-factor KL for the generator log
        if factor_metrics.is_some() {
            match &mut ema_kl {
                None => ema_kl = Some(breakdown.kl_per_latent.clone()),
                Some(ema) => {
                    for (e, &v) in ema.iter_mut().zip(&breakdown.kl_per_latent) {
                        *e = 0.99 * *e + 0.01 * v;
                    }
                }
            }
        }

        let done = iter + 1;
        if done % cfg.log_every == 0 || done == cfg.iterations {
            let record = MetricsRecord {
                iteration: done,
                loss: breakdown.total,
                loglik: breakdown.loglik,
                kl_total: breakdown.kl_total,
                per_latent: breakdown.kl_per_latent.clone(),
                c,
                seconds: start.elapsed().as_secs_f64(),
            };
            if !record.loss.is_finite()
                || !record.loglik.is_finite()
                || record.per_latent.iter().any(|v| !v.is_finite())
            {
                return Err(TrainError::Numeric {
                    iteration: iter,
                    source: KernelError::NonFinite { op: "metrics" },
                });
            }
            writeln!(metrics, "{}", metrics_row(&record))?;
            metrics.flush()?;
            if let (Some(w), Some(ema)) = (&mut factor_metrics, &ema_kl) {
                let cols: Vec<String> = ema.iter().map(|v| v.to_string()).collect();
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    done,
                    c,
                    breakdown.kl_total,
                    cols.join(","),
                    breakdown.loglik
                )?;
                w.flush()?;
            }
            progress(&record);
            records.push(record);
        }

        if done == cfg.iterations || done % cfg.checkpoint_every == 0 {
            let path = if done == cfg.iterations {
                final_ckpt.clone()
            } else {
                cfg.out_dir.join(format!("ckpt_{done}.capk"))
            };
            checkpoint::save(&path, &store, Some(&opt), seed, done)?;
            let sidecar_json = serde_json::to_string_pretty(&sidecar)
                .map_err(|e| TrainError::Config(format!("cannot serialize sidecar: {e}")))?;
            std::fs::write(format!("{}.json", path.display()), sidecar_json)?;
            if done == cfg.iterations {
                final_ckpt = path;
            }
        }
    }

    Ok(RunOutput {
        metrics_path,
        factor_metrics_path,
        checkpoint_path: final_ckpt,
        records,
    })
}

/// Rebuilds the model described by a checkpoint's JSON sidecar and loads the
/// stored parameter values into it.
pub fn load_run(ckpt_path: &Path) -> Result<LoadedRun> {
    let sidecar_path = format!("{}.json", ckpt_path.display());
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| {
        TrainError::Config(format!("cannot read model sidecar {sidecar_path:?}: {e}"))
    })?;
    let sidecar: RunSidecar = serde_json::from_str(&text)
        .map_err(|e| TrainError::Config(format!("sidecar {sidecar_path:?}: {e}")))?;
    let mut store = ParamStore::new();
    // registration order fixes names/shapes; values are overwritten below
    let mut rng = stream(0, domain::INIT, 0);
    let model = match sidecar.experiment {
        Experiment::Vae => ModelKind::Vae(VaeModel::new(&sidecar.model, &mut store, &mut rng)?),
        Experiment::Generator => ModelKind::Generator(FactorGenerator::new(
            &sidecar.model,
            sidecar.n_latents,
            &mut store,
            &mut rng,
        )?),
    };
    let ckpt = checkpoint::load(ckpt_path)?;
    store.load_values(&ckpt.params)?;
    Ok(LoadedRun {
        sidecar,
        store,
        model,
    })
}

/// Average reconstruction log-likelihood (nats/sample) of a trained VAE over
/// a whole dataset, using a single seeded posterior draw per image.
pub fn reconstruction_loglik(
    model: &VaeModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    seed: u64,
) -> Result<f64> {
    let batch = 256.min(dataset.len());
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut start = 0usize;
    let mut counter = 0u64;
    while start < dataset.len() {
        let idx: Vec<usize> = (start..(start + batch).min(dataset.len())).collect();
        let x = gather_images(dataset, &idx);
        let eps = normal_noise(seed, counter, idx.len(), model.cfg.n_latents);
        let mut g = Graph::new();
        let xn = g.constant(x)?;
        let post = model.encode(&mut g, store, xn)?;
        let epsn = g.constant(eps)?;
        let sample = model.reparameterize(&mut g, &post, epsn)?;
        let logits = model.decode(&mut g, store, sample.z)?;
        let ll = objectives::bernoulli_loglik(&mut g, logits, xn)?;
        total += g.scalar_value(ll)? * idx.len() as f64;
        count += idx.len();
        start += batch;
        counter += 1;
    }
    Ok(total / count as f64)
}
