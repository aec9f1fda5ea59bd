//! Analysis artifacts: latent traversals, KL-based latent ordering, position
//! tuning heatmaps, capacity-allocation curves, and factor alignment scores.

mod render;

use std::path::Path;

use thiserror::Error;

pub use render::{
    heatmap_grid_png, heatmap_to_rgb, image_grid_png, GridImage, TRAVERSAL_LO, TRAVERSAL_HI,
};

use crate::nnkernel::{Graph, KernelError, ParamStore, Tensor};
use crate::objectives;
use crate::synthdata::{DataError, Dataset};
use crate::vae_model::VaeModel;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv format error at line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiagError>;

/// Posterior mean rows for the given dataset indices, `[len, n_latents]`
/// flattened row-major.
pub fn posterior_means(
    model: &VaeModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<f32>> {
    let latents = model.cfg.n_latents;
    let mut out = Vec::with_capacity(indices.len() * latents);
    for chunk in indices.chunks(256) {
        let mut data = Vec::with_capacity(chunk.len() * dataset.image_len());
        for &i in chunk {
            data.extend_from_slice(dataset.image(i));
        }
        let x = Tensor::from_vec(
            &[chunk.len(), dataset.channels, dataset.height, dataset.width],
            data,
        )?;
        let mut g = Graph::new();
        let xn = g.constant(x)?;
        let post = model.encode(&mut g, store, xn)?;
        out.extend_from_slice(g.value(post.mu).data());
    }
    Ok(out)
}

/// Per-latent KL averaged over the given dataset indices.
pub fn average_kl(
    model: &VaeModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(DiagError::InvalidArgument(
            "average_kl needs a non-empty sample".into(),
        ));
    }
    let latents = model.cfg.n_latents;
    let mut acc = vec![0.0f64; latents];
    let mut seen = 0usize;
    for chunk in indices.chunks(256) {
        let mut data = Vec::with_capacity(chunk.len() * dataset.image_len());
        for &i in chunk {
            data.extend_from_slice(dataset.image(i));
        }
        let x = Tensor::from_vec(
            &[chunk.len(), dataset.channels, dataset.height, dataset.width],
            data,
        )?;
        let mut g = Graph::new();
        let xn = g.constant(x)?;
        let post = model.encode(&mut g, store, xn)?;
        let kl = objectives::gaussian_kl(&mut g, &post)?;
        for (a, v) in acc.iter_mut().zip(g.value(kl).data()) {
            *a += *v as f64 * chunk.len() as f64;
        }
        seen += chunk.len();
    }
    for a in &mut acc {
        *a /= seen as f64;
    }
    Ok(acc)
}

/// Latent indices sorted by average KL, high to low; ties break by latent
/// index ascending (stable).
pub fn kl_ordering(kls: &[f64]) -> Result<Vec<usize>> {
    if kls.is_empty() {
        return Err(DiagError::InvalidArgument(
            "kl_ordering needs a non-empty sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..kls.len()).collect();
    order.sort_by(|&a, &b| kls[b].partial_cmp(&kls[a]).expect("finite KLs"));
    Ok(order)
}

/// Evenly spaced traversal values in `[-3, 3]`.
pub fn traversal_values(n: usize) -> Vec<f32> {
    crate::synthdata::linspace(TRAVERSAL_LO, TRAVERSAL_HI, n)
}

/// Decodes a row of reconstructions obtained by substituting each traversal
/// value into one latent coordinate of the seed image's posterior mean.
/// Returned images are sigmoid probabilities, one `[C*H*W]` buffer per value.
pub fn latent_traversal(
    model: &VaeModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    seed_index: usize,
    latent_index: usize,
    values: &[f32],
) -> Result<Vec<Vec<f32>>> {
    let latents = model.cfg.n_latents;
    if latent_index >= latents {
        return Err(DiagError::InvalidArgument(format!(
            "latent index {latent_index} out of range for {latents} latents"
        )));
    }
    if seed_index >= dataset.len() {
        return Err(DiagError::InvalidArgument(format!(
            "seed index {seed_index} out of range for dataset of {}",
            dataset.len()
        )));
    }
    let mu = posterior_means(model, store, dataset, &[seed_index])?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut z = mu.clone();
        z[latent_index] = v;
        let mut g = Graph::new();
        let zn = g.constant(Tensor::from_vec(&[1, latents], z)?)?;
        let logits = model.decode(&mut g, store, zn)?;
        let probs = g.sigmoid(logits)?;
        rows.push(g.value(probs).data().to_vec());
    }
    Ok(rows)
}

/// Reconstruction (sigmoid of decoded posterior mean) of one dataset image.
pub fn reconstruct_mean(
    model: &VaeModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    index: usize,
) -> Result<Vec<f32>> {
    let latents = model.cfg.n_latents;
    let mu = posterior_means(model, store, dataset, &[index])?;
    let mut g = Graph::new();
    let zn = g.constant(Tensor::from_vec(&[1, latents], mu)?)?;
    let logits = model.decode(&mut g, store, zn)?;
    let probs = g.sigmoid(logits)?;
    Ok(g.value(probs).data().to_vec())
}

/// Per-latent 2D maps of inferred posterior means over a blob position grid:
/// entry `(i, j)` of map `k` is latent `k`'s mean for the blob at `(x_i, y_j)`.
pub fn position_tuning_heatmap(
    model: &VaeModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
) -> Result<Vec<TuningHeatmap>> {
    let names = dataset.spec.names();
    if names != ["x", "y"] {
        return Err(DiagError::InvalidArgument(format!(
            "position tuning needs a dataset with exactly two position factors, got {names:?}"
        )));
    }
    let (kx, ky) = (dataset.spec.cardinality(0), dataset.spec.cardinality(1));
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mu = posterior_means(model, store, dataset, &indices)?;
    let latents = model.cfg.n_latents;
    let mut maps = Vec::with_capacity(latents);
    for k in 0..latents {
        let mut values = Vec::with_capacity(kx * ky);
        for i in 0..kx {
            for j in 0..ky {
                values.push(mu[(i * ky + j) * latents + k]);
            }
        }
        maps.push(TuningHeatmap {
            rows: kx,
            cols: ky,
            values,
        });
    }
    Ok(maps)
}

/// One latent's position tuning map.
#[derive(Debug, Clone)]
pub struct TuningHeatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl TuningHeatmap {
    pub fn value_range(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Parsed metrics CSV: step/iteration, capacity, log-likelihood, and every
/// `kl_*` column by name.
#[derive(Debug, Clone)]
pub struct CurveData {
    pub step: Vec<f64>,
    pub c: Vec<f64>,
    pub loglik: Vec<f64>,
    pub kl_total: Vec<f64>,
    pub kl: Vec<(String, Vec<f64>)>,
}

/// Reads a trainer or generator metrics CSV into aligned series.
pub fn capacity_curves(path: &Path) -> Result<CurveData> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DiagError::Format {
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &[&str]| cols.iter().position(|c| name.contains(c));
    let step_col = find(&["iter", "step"]).ok_or(DiagError::Format {
        line: 1,
        detail: "missing iter/step column".into(),
    })?;
    let c_col = find(&["C"]).ok_or(DiagError::Format {
        line: 1,
        detail: "missing C column".into(),
    })?;
    let ll_col = find(&["loglik", "recon_loglik"]).ok_or(DiagError::Format {
        line: 1,
        detail: "missing loglik column".into(),
    })?;
    let kl_total_col = find(&["kl_total", "total_kl"]);
    let kl_cols: Vec<(usize, String)> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("kl_") && **c != "kl_total")
        .map(|(i, c)| (i, c.to_string()))
        .collect();

    let mut data = CurveData {
        step: Vec::new(),
        c: Vec::new(),
        loglik: Vec::new(),
        kl_total: Vec::new(),
        kl: kl_cols
            .iter()
            .map(|(_, name)| (name.clone(), Vec::new()))
            .collect(),
    };
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(DiagError::Format {
                line: lineno + 1,
                detail: format!("{} fields, header has {}", fields.len(), cols.len()),
            });
        }
        let parse = |idx: usize| -> Result<f64> {
            fields[idx].parse().map_err(|e| DiagError::Format {
                line: lineno + 1,
                detail: format!("column {:?}: {e}", cols[idx]),
            })
        };
        data.step.push(parse(step_col)?);
        data.c.push(parse(c_col)?);
        data.loglik.push(parse(ll_col)?);
        if let Some(i) = kl_total_col {
            data.kl_total.push(parse(i)?);
        }
        for ((i, _), (_, series)) in kl_cols.iter().zip(&mut data.kl) {
            series.push(parse(*i)?);
        }
    }
    Ok(data)
}

/// Writes gnuplot-friendly plot data: per-factor KL against capacity and
/// against reconstruction log-likelihood.
pub fn write_curves(data: &CurveData, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let names: Vec<&str> = data.kl.iter().map(|(n, _)| n.as_str()).collect();
    let mut by_c = format!("C,{}\n", names.join(","));
    let mut by_ll = format!("loglik,{}\n", names.join(","));
    for row in 0..data.step.len() {
        let kls: Vec<String> = data.kl.iter().map(|(_, s)| s[row].to_string()).collect();
        by_c.push_str(&format!("{},{}\n", data.c[row], kls.join(",")));
        by_ll.push_str(&format!("{},{}\n", data.loglik[row], kls.join(",")));
    }
    std::fs::write(out_dir.join("kl_vs_capacity.csv"), by_c)?;
    std::fs::write(out_dir.join("kl_vs_loglik.csv"), by_ll)?;
    Ok(())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; defined as 0 when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal-length series");
    if a.is_empty() {
        return 0.0;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

/// |Spearman| matrix between latents and factors plus a greedy one-to-one
/// matching by descending correlation.
#[derive(Debug, Clone)]
pub struct AlignmentScore {
    /// `matrix[latent][factor] = |rho|`.
    pub matrix: Vec<Vec<f64>>,
    /// `(latent, factor, |rho|)`, one entry per matched pair.
    pub matching: Vec<(usize, usize, f64)>,
    pub factor_names: Vec<String>,
}

/// Correlates posterior means with ground-truth factor values over (a
/// deterministic subsample of) the dataset.
pub fn factor_alignment_score(
    model: &VaeModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    max_samples: usize,
) -> Result<AlignmentScore> {
    if dataset.is_empty() || max_samples == 0 {
        return Err(DiagError::InvalidArgument(
            "alignment needs a non-empty sample".into(),
        ));
    }
    let stride = (dataset.len() / max_samples).max(1);
    let indices: Vec<usize> = (0..dataset.len()).step_by(stride).collect();
    let latents = model.cfg.n_latents;
    let factors = dataset.spec.n_factors();
    let mu = posterior_means(model, store, dataset, &indices)?;

    let mut factor_vals = vec![Vec::with_capacity(indices.len()); factors];
    for &i in &indices {
        for (f, v) in dataset.factors(i).iter().enumerate() {
            factor_vals[f].push(*v as f64);
        }
    }
    let mut matrix = vec![vec![0.0f64; factors]; latents];
    for k in 0..latents {
        let latent: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(row, _)| mu[row * latents + k] as f64)
            .collect();
        for f in 0..factors {
            matrix[k][f] = spearman(&latent, &factor_vals[f]).abs();
        }
    }

    let mut matching = Vec::new();
    let mut used_latents = vec![false; latents];
    let mut used_factors = vec![false; factors];
    for _ in 0..latents.min(factors) {
        let mut best = (0usize, 0usize, -1.0f64);
        for k in 0..latents {
            for f in 0..factors {
                if !used_latents[k] && !used_factors[f] && matrix[k][f] > best.2 {
                    best = (k, f, matrix[k][f]);
                }
            }
        }
        if best.2 < 0.0 {
            break;
        }
        used_latents[best.0] = true;
        used_factors[best.1] = true;
        matching.push(best);
    }
    Ok(AlignmentScore {
        matrix,
        matching,
        factor_names: dataset.spec.names().to_vec(),
    })
}

/// Intensity-weighted centroid `(row, col)` of an image in pixel units;
/// channels are summed. Returns the image center when fully black.
pub fn image_centroid(pixels: &[f32], channels: usize, height: usize, width: usize) -> (f64, f64) {
    let mut mass = 0.0f64;
    let mut mr = 0.0f64;
    let mut mc = 0.0f64;
    for ch in 0..channels {
        for r in 0..height {
            for c in 0..width {
                let v = pixels[(ch * height + r) * width + c] as f64;
                mass += v;
                mr += v * r as f64;
                mc += v * c as f64;
            }
        }
    }
    if mass == 0.0 {
        ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0)
    } else {
        (mr / mass, mc / mass)
    }
}
