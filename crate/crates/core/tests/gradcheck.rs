//! Finite-difference gradient oracle.
//!
//! Every differentiable op, and several full models, are checked against
//! central differences in f64 (h = 1e-4, relative tolerance 1e-4, with a
//! small absolute floor for near-zero coordinates). The numeric side only
//! re-runs the recorded forward pass, so it is independent of the backward
//! implementation it certifies.

use capvae::factor_generator::{channel_forward, per_factor_kl, FactorChannels, FactorGenerator};
use capvae::nnkernel::{Graph, NodeId, ParamStore, Tensor};
use capvae::objectives;
use capvae::rng::{domain, stream};
use capvae::vae_model::{Architecture, GaussianPosterior, ModelConfig, VaeModel};
use rand::Rng;

const H: f64 = 1e-4;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;
const MIN_COORDS: usize = 32;

/// Samples in [-2, 2] resampling away from relu kinks at 0.
fn sample_inputs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() >= 1e-3 {
                break v;
            }
        })
        .collect()
}

fn positive_inputs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.1..2.0)).collect()
}

/// Checks analytic gradients of every parameter in `store` against central
/// finite differences of the scalar produced by `build`.
///
/// `build` receives an attempt index that selects the (fixed) input draw.
/// A coordinate that disagrees is retried under fresh inputs: relu kinks
/// straddled by the +-h step are input-specific, while a backward bug
/// disagrees on every draw.
fn gradcheck_attempts<F>(store: &mut ParamStore<f64>, build: F, label: &str, attempts: usize)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, usize) -> NodeId,
{
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut rng = stream(0xFD, domain::DIAG, 0);
    let mut checked = 0usize;
    for &pid in &ids {
        let n = store.value(pid).len();
        let coords: Vec<usize> = if n <= MIN_COORDS {
            (0..n).collect()
        } else {
            (0..MIN_COORDS).map(|_| rng.gen_range(0..n)).collect()
        };
        for &j in &coords {
            let mut last_err = String::new();
            let mut ok = false;
            for attempt in 0..attempts {
                store.zero_grads();
                let mut g = Graph::new();
                let loss = build(&mut g, store, attempt);
                g.backward(loss, store).expect("backward");
                let a = store.grad(pid).data()[j];

                let orig = store.value(pid).data()[j];
                store.value_mut(pid).data_mut()[j] = orig + H;
                let mut gp = Graph::new();
                let lp = build(&mut gp, store, attempt);
                let fp = gp.scalar_value(lp).unwrap();
                store.value_mut(pid).data_mut()[j] = orig - H;
                let mut gm = Graph::new();
                let lm = build(&mut gm, store, attempt);
                let fm = gm.scalar_value(lm).unwrap();
                store.value_mut(pid).data_mut()[j] = orig;

                let numeric = (fp - fm) / (2.0 * H);
                let err = (a - numeric).abs();
                let bound = ATOL + RTOL * a.abs().max(numeric.abs());
                if err <= bound {
                    ok = true;
                    break;
                }
                last_err = format!(
                    "{label}: coord {j} of param {pid:?}: analytic {a} vs numeric {numeric} \
                     (err {err:.3e}, attempt {attempt})"
                );
            }
            assert!(ok, "{last_err}");
            checked += 1;
        }
    }
    assert!(checked >= 1, "{label}: no coordinates checked");
}

/// Single-input form: one fixed draw, no retries.
fn gradcheck<F>(store: &mut ParamStore<f64>, build: F, label: &str)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
{
    gradcheck_attempts(store, |g, s, _| build(g, s), label, 1);
}

/// Single-parameter helper: loss = sum(f(x) * weights).
fn check_unary(label: &str, init: Vec<f64>, f: impl Fn(&mut Graph<f64>, NodeId) -> NodeId) {
    let n = init.len();
    let mut store = ParamStore::new();
    let x = store
        .add("x", Tensor::from_vec(&[n], init).unwrap())
        .unwrap();
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.11 * i as f64).collect();
    gradcheck(
        &mut store,
        |g, s| {
            let xn = g.param(s, x).unwrap();
            let y = f(g, xn);
            let w = g
                .constant(Tensor::from_vec(&[n], weights.clone()).unwrap())
                .unwrap();
            let prod = g.mul(y, w).unwrap();
            g.sum(prod).unwrap()
        },
        label,
    );
}

#[test]
fn unary_ops_match_finite_differences() {
    let mut rng = stream(1, domain::DIAG, 1);
    let xs = sample_inputs(&mut rng, 40);
    check_unary("relu", xs.clone(), |g, x| g.relu(x).unwrap());
    check_unary("sigmoid", xs.clone(), |g, x| g.sigmoid(x).unwrap());
    check_unary("softplus", xs.clone(), |g, x| g.softplus(x).unwrap());
    check_unary("exp", xs.clone(), |g, x| g.exp(x).unwrap());
    check_unary("abs", xs.clone(), |g, x| g.abs(x).unwrap());
    check_unary("neg", xs.clone(), |g, x| g.neg(x).unwrap());
    check_unary("square", xs.clone(), |g, x| g.square(x).unwrap());
    check_unary("scale", xs.clone(), |g, x| g.scale(x, -1.7).unwrap());
    check_unary("add_scalar", xs.clone(), |g, x| g.add_scalar(x, 2.5).unwrap());
    check_unary("log", positive_inputs(&mut rng, 40), |g, x| g.log(x).unwrap());
    // clamp checked away from its bounds (kinks)
    check_unary("clamp", xs, |g, x| g.clamp(x, -3.0, 3.0).unwrap());
}

#[test]
fn binary_and_broadcast_ops_match_finite_differences() {
    let mut rng = stream(2, domain::DIAG, 2);
    let (b, n) = (3usize, 4usize);
    let a0 = sample_inputs(&mut rng, b * n);
    let b0 = sample_inputs(&mut rng, b * n);
    let v0 = sample_inputs(&mut rng, n);

    for (label, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("row_mul", 3),
        ("row_add", 4),
    ] {
        let mut store = ParamStore::new();
        let pa = store
            .add("a", Tensor::from_vec(&[b, n], a0.clone()).unwrap())
            .unwrap();
        let pb = if op < 3 {
            store
                .add("b", Tensor::from_vec(&[b, n], b0.clone()).unwrap())
                .unwrap()
        } else {
            store
                .add("b", Tensor::from_vec(&[n], v0.clone()).unwrap())
                .unwrap()
        };
        gradcheck(
            &mut store,
            |g, s| {
                let x = g.param(s, pa).unwrap();
                let y = g.param(s, pb).unwrap();
                let z = match op {
                    0 => g.add(x, y).unwrap(),
                    1 => g.sub(x, y).unwrap(),
                    2 => g.mul(x, y).unwrap(),
                    3 => g.row_mul(x, y).unwrap(),
                    _ => g.row_add(x, y).unwrap(),
                };
                let sq = g.square(z).unwrap();
                g.sum(sq).unwrap()
            },
            label,
        );
    }

    // mul with a repeated operand accumulates both paths
    let mut store = ParamStore::new();
    let pa = store
        .add("a", Tensor::from_vec(&[b, n], a0).unwrap())
        .unwrap();
    gradcheck(
        &mut store,
        |g, s| {
            let x = g.param(s, pa).unwrap();
            let z = g.mul(x, x).unwrap();
            g.sum(z).unwrap()
        },
        "mul_self",
    );
}

#[test]
fn reductions_and_shapes_match_finite_differences() {
    let mut rng = stream(3, domain::DIAG, 3);
    let (b, n) = (4usize, 6usize);
    let init = sample_inputs(&mut rng, b * n);
    for (label, which) in [
        ("sum", 0usize),
        ("mean", 1),
        ("mean_axis0", 2),
        ("narrow_cols", 3),
        ("reshape", 4),
    ] {
        let mut store = ParamStore::new();
        let pa = store
            .add("a", Tensor::from_vec(&[b, n], init.clone()).unwrap())
            .unwrap();
        gradcheck(
            &mut store,
            |g, s| {
                let x = g.param(s, pa).unwrap();
                match which {
                    0 => {
                        let sq = g.square(x).unwrap();
                        g.sum(sq).unwrap()
                    }
                    1 => {
                        let sq = g.square(x).unwrap();
                        g.mean(sq).unwrap()
                    }
                    2 => {
                        let m = g.mean_axis0(x).unwrap();
                        let sq = g.square(m).unwrap();
                        g.sum(sq).unwrap()
                    }
                    3 => {
                        let cols = g.narrow_cols(x, 1, 3).unwrap();
                        let sq = g.square(cols).unwrap();
                        g.sum(sq).unwrap()
                    }
                    _ => {
                        let r = g.reshape(x, &[n, b]).unwrap();
                        let sq = g.square(r).unwrap();
                        g.sum(sq).unwrap()
                    }
                }
            },
            label,
        );
    }
}

#[test]
fn dense_and_conv_ops_match_finite_differences() {
    let mut rng = stream(4, domain::DIAG, 4);
    // dense
    let (b, i, o) = (3usize, 5usize, 4usize);
    let mut store = ParamStore::new();
    let x = store
        .add("x", Tensor::from_vec(&[b, i], sample_inputs(&mut rng, b * i)).unwrap())
        .unwrap();
    let w = store
        .add("w", Tensor::from_vec(&[i, o], sample_inputs(&mut rng, i * o)).unwrap())
        .unwrap();
    let bias = store
        .add("b", Tensor::from_vec(&[o], sample_inputs(&mut rng, o)).unwrap())
        .unwrap();
    gradcheck(
        &mut store,
        |g, s| {
            let xn = g.param(s, x).unwrap();
            let wn = g.param(s, w).unwrap();
            let bn = g.param(s, bias).unwrap();
            let y = g.dense(xn, wn, bn).unwrap();
            let sq = g.square(y).unwrap();
            g.sum(sq).unwrap()
        },
        "dense",
    );

    // conv2d, odd input so the ceil/padding paths are exercised
    let (b, cin, cout, h, wdim) = (2usize, 2usize, 3usize, 5usize, 5usize);
    let mut store = ParamStore::new();
    let x = store
        .add(
            "x",
            Tensor::from_vec(&[b, cin, h, wdim], sample_inputs(&mut rng, b * cin * h * wdim))
                .unwrap(),
        )
        .unwrap();
    let k = store
        .add(
            "k",
            Tensor::from_vec(&[cout, cin, 4, 4], sample_inputs(&mut rng, cout * cin * 16))
                .unwrap(),
        )
        .unwrap();
    let bias = store
        .add("b", Tensor::from_vec(&[cout], sample_inputs(&mut rng, cout)).unwrap())
        .unwrap();
    gradcheck(
        &mut store,
        |g, s| {
            let xn = g.param(s, x).unwrap();
            let kn = g.param(s, k).unwrap();
            let bn = g.param(s, bias).unwrap();
            let y = g.conv2d(xn, kn, bn, 2).unwrap();
            let sq = g.square(y).unwrap();
            g.sum(sq).unwrap()
        },
        "conv2d",
    );

    // conv2d_transpose
    let (b, cin, cout, h, wdim) = (2usize, 3usize, 2usize, 3usize, 3usize);
    let mut store = ParamStore::new();
    let x = store
        .add(
            "x",
            Tensor::from_vec(&[b, cin, h, wdim], sample_inputs(&mut rng, b * cin * h * wdim))
                .unwrap(),
        )
        .unwrap();
    let k = store
        .add(
            "k",
            Tensor::from_vec(&[cin, cout, 4, 4], sample_inputs(&mut rng, cin * cout * 16))
                .unwrap(),
        )
        .unwrap();
    let bias = store
        .add("b", Tensor::from_vec(&[cout], sample_inputs(&mut rng, cout)).unwrap())
        .unwrap();
    gradcheck(
        &mut store,
        |g, s| {
            let xn = g.param(s, x).unwrap();
            let kn = g.param(s, k).unwrap();
            let bn = g.param(s, bias).unwrap();
            let y = g.conv2d_transpose(xn, kn, bn, 2).unwrap();
            let sq = g.square(y).unwrap();
            g.sum(sq).unwrap()
        },
        "conv2d_transpose",
    );
}

#[test]
fn reparameterization_gradients_are_exact() {
    // dz/dmu = 1 and dz/dlog_sigma = sigma * eps, via finite differences
    let n = 6usize;
    let mut rng = stream(5, domain::DIAG, 5);
    let eps0 = sample_inputs(&mut rng, n);
    let mut store = ParamStore::new();
    let mu = store
        .add("mu", Tensor::from_vec(&[1, n], sample_inputs(&mut rng, n)).unwrap())
        .unwrap();
    let ls = store
        .add(
            "log_sigma",
            Tensor::from_vec(&[1, n], (0..n).map(|i| -0.5 + 0.2 * i as f64).collect()).unwrap(),
        )
        .unwrap();
    gradcheck(
        &mut store,
        |g, s| {
            let mu_n = g.param(s, mu).unwrap();
            let ls_n = g.param(s, ls).unwrap();
            let sigma = g.exp(ls_n).unwrap();
            let eps = g
                .constant(Tensor::from_vec(&[1, n], eps0.clone()).unwrap())
                .unwrap();
            let scaled = g.mul(sigma, eps).unwrap();
            let z = g.add(mu_n, scaled).unwrap();
            let sq = g.square(z).unwrap();
            g.sum(sq).unwrap()
        },
        "reparameterize",
    );

    // analytic identities on a fresh graph
    let mut g = Graph::new();
    store.zero_grads();
    let mu_n = g.param(&store, mu).unwrap();
    let ls_n = g.param(&store, ls).unwrap();
    let sigma = g.exp(ls_n).unwrap();
    let eps = g
        .constant(Tensor::from_vec(&[1, n], eps0.clone()).unwrap())
        .unwrap();
    let scaled = g.mul(sigma, eps).unwrap();
    let z = g.add(mu_n, scaled).unwrap();
    let loss = g.sum(z).unwrap();
    g.backward(loss, &mut store).unwrap();
    for j in 0..n {
        assert!((store.grad(mu).data()[j] - 1.0).abs() < 1e-12);
        let sigma_j = store.value(ls).data()[j].exp();
        assert!((store.grad(ls).data()[j] - sigma_j * eps0[j]).abs() < 1e-10);
    }
}

#[test]
fn beta_kl_gradient_scales_linearly_in_beta() {
    let n = 4usize;
    let grad_for = |beta: f64| -> Vec<f64> {
        let mut store = ParamStore::new();
        let mu = store
            .add(
                "mu",
                Tensor::from_vec(&[1, n], vec![0.7, -0.3, 1.1, 0.4]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::new();
        let mu_n = g.param(&store, mu).unwrap();
        let ls = g.constant(Tensor::zeros(&[1, n])).unwrap();
        let post = GaussianPosterior {
            mu: mu_n,
            log_sigma: ls,
        };
        let kl = objectives::gaussian_kl(&mut g, &post).unwrap();
        let loglik = g.constant(Tensor::scalar(-10.0)).unwrap();
        let nodes = objectives::beta_loss(&mut g, loglik, kl, beta).unwrap();
        g.backward(nodes.total, &mut store).unwrap();
        store.grad(mu).data().to_vec()
    };
    let g1 = grad_for(1.0);
    let g150 = grad_for(150.0);
    for (&a, &b) in g1.iter().zip(&g150) {
        assert!((b - 150.0 * a).abs() < 1e-9 * b.abs().max(1.0));
    }
}

fn tiny_vae(cfg: &ModelConfig, seed: u64) -> (VaeModel, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, domain::INIT, 0);
    let model = VaeModel::new(cfg, &mut store, &mut rng).unwrap();
    (model, store)
}

fn vae_elbo_loss(
    model: &VaeModel,
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    eps: &Tensor<f64>,
) -> NodeId {
    let xn = g.constant(x.clone()).unwrap();
    let post = model.encode(g, store, xn).unwrap();
    let epsn = g.constant(eps.clone()).unwrap();
    let sample = model.reparameterize(g, &post, epsn).unwrap();
    let logits = model.decode(g, store, sample.z).unwrap();
    let loglik = objectives::bernoulli_loglik(g, logits, xn).unwrap();
    let kl = objectives::gaussian_kl(g, &post).unwrap();
    let nodes = objectives::beta_loss(g, loglik, kl, 2.0).unwrap();
    nodes.total
}

/// Input draws for the full-model checks, one per retry attempt.
fn vae_inputs(seed: u64, batch: usize, pixels: usize, latents: usize, attempts: usize)
    -> Vec<(Tensor<f64>, Tensor<f64>)>
{
    (0..attempts as u64)
        .map(|a| {
            let mut rng = stream(seed, domain::DIAG, a);
            let x = Tensor::from_vec(
                &[batch, 1, (pixels as f64).sqrt() as usize, (pixels as f64).sqrt() as usize],
                (0..batch * pixels).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let eps = Tensor::from_vec(
                &[batch, latents],
                (0..batch * latents).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )
            .unwrap();
            (x, eps)
        })
        .collect()
}

#[test]
fn full_dense_vae_matches_finite_differences() {
    // the tiny 8x8-input, 4-latent model
    let cfg = ModelConfig {
        arch: Architecture::Dense,
        n_latents: 4,
        channels: 1,
        height: 8,
        width: 8,
        hidden: vec![16, 16],
    };
    let (model, mut store) = tiny_vae(&cfg, 21);
    let inputs = vae_inputs(22, 2, 64, 4, 3);
    gradcheck_attempts(
        &mut store,
        |g, s, a| {
            let (x, eps) = &inputs[a];
            vae_elbo_loss(&model, g, s, x, eps)
        },
        "dense_vae",
        3,
    );
}

#[test]
fn full_conv_vae_matches_finite_differences() {
    let cfg = ModelConfig {
        arch: Architecture::Conv,
        n_latents: 3,
        channels: 1,
        height: 16,
        width: 16,
        hidden: vec![12, 12],
    };
    let (model, mut store) = tiny_vae(&cfg, 31);
    let inputs = vae_inputs(32, 2, 256, 3, 4);
    gradcheck_attempts(
        &mut store,
        |g, s, a| {
            let (x, eps) = &inputs[a];
            vae_elbo_loss(&model, g, s, x, eps)
        },
        "conv_vae",
        4,
    );
}

#[test]
fn factor_channels_match_finite_differences() {
    // through the channel + per-factor KL + capacity penalty path
    let n_factors = 3usize;
    let batch = 4usize;
    let mut store = ParamStore::new();
    let channels = FactorChannels::new(&mut store, n_factors).unwrap();
    *store.value_mut(channels.scale) =
        Tensor::from_vec(&[n_factors], vec![0.6, 1.2, 0.3]).unwrap();
    *store.value_mut(channels.log_noise) =
        Tensor::from_vec(&[n_factors], vec![-0.3, 0.1, -1.0]).unwrap();
    let mut rng = stream(44, domain::DIAG, 0);
    let fnorm = Tensor::from_vec(
        &[batch, n_factors],
        (0..batch * n_factors)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let eps = Tensor::from_vec(
        &[batch, n_factors],
        (0..batch * n_factors)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect(),
    )
    .unwrap();
    gradcheck(
        &mut store,
        |g, s| {
            let f = g.constant(fnorm.clone()).unwrap();
            let e = g.constant(eps.clone()).unwrap();
            let enc = channel_forward(g, s, &channels, f, e).unwrap();
            let kl = per_factor_kl(g, s, &channels, f).unwrap();
            let z_sq = g.square(enc.z).unwrap();
            let recon_proxy = g.sum(z_sq).unwrap();
            let nodes =
                objectives::capacity_loss(g, recon_proxy, kl, 100.0, 5.0).unwrap();
            nodes.total
        },
        "factor_channels",
    );
}

#[test]
fn full_generator_matches_finite_differences() {
    let cfg = ModelConfig {
        arch: Architecture::Conv,
        n_latents: 3,
        channels: 1,
        height: 16,
        width: 16,
        hidden: vec![10],
    };
    let mut store = ParamStore::new();
    let mut rng = stream(55, domain::INIT, 0);
    let gen = FactorGenerator::new(&cfg, 3, &mut store, &mut rng).unwrap();
    let inputs: Vec<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> = (0..4u64)
        .map(|a| {
            let mut drng = stream(56, domain::DIAG, a);
            let fnorm = Tensor::from_vec(
                &[2, 3],
                (0..6).map(|_| drng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let eps = Tensor::from_vec(
                &[2, 3],
                (0..6).map(|_| drng.gen_range(-1.5..1.5)).collect(),
            )
            .unwrap();
            let x = Tensor::from_vec(
                &[2, 1, 16, 16],
                (0..2 * 256).map(|_| drng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            (fnorm, eps, x)
        })
        .collect();
    gradcheck_attempts(
        &mut store,
        |g, s, a| {
            let (fnorm, eps, x) = &inputs[a];
            let f = g.constant(fnorm.clone()).unwrap();
            let e = g.constant(eps.clone()).unwrap();
            let (_, logits) = gen.forward(g, s, f, e).unwrap();
            let xn = g.constant(x.clone()).unwrap();
            let loglik = objectives::bernoulli_loglik(g, logits, xn).unwrap();
            let kl = per_factor_kl(g, s, &gen.channels, f).unwrap();
            let nodes = objectives::capacity_loss(g, loglik, kl, 50.0, 2.0).unwrap();
            nodes.total
        },
        "full_generator",
        4,
    );
}
