//! Hierarchical latent module.
//!
//! L diagonal-Gaussian latent layers whose time extent shrinks by the scale
//! factor at each level. Posteriors come from strided views of the raw input
//! window; priors flow top-down, each conditioned on the parent latent at the
//! covering coarse step and on the transformer state pooled to the same scale.
//! The bottom latent, together with h, parameterizes the reconstruction of x.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{concat, Var};
use crate::error::{HtvError, Result};
use crate::model::{Activation, HtpgmIdx, ModelConfig};
use crate::tensor::Tensor;

/// Diagonal Gaussian over a [T_i, K] (or [T, V]) block.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl<'t> GaussianParams<'t> {
    pub fn new(mu: Var<'t>, sigma: Var<'t>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(HtvError::Dimension(format!(
                "gaussian mu {:?} vs sigma {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.mu.shape()
    }
}

/// Everything the latent module produced for one window.
#[derive(Debug, Clone)]
pub struct LatentStack<'t> {
    pub posteriors: Vec<GaussianParams<'t>>,
    pub priors: Vec<GaussianParams<'t>>,
    pub samples: Vec<Var<'t>>,
    pub z_sum: Var<'t>,
}

/// Repeats the last row of `x` until it has `rows` rows.
fn pad_rows<'t>(x: Var<'t>, rows: usize) -> Result<Var<'t>> {
    let t = x.shape()[0];
    if rows == t {
        return Ok(x);
    }
    let last = x.slice(0, t - 1..t)?;
    let mut parts = vec![x];
    parts.extend(std::iter::repeat_n(last, rows - t));
    concat(&parts, 0)
}

/// Folds `kernel` consecutive rows into one: [T, C] → [ceil(T/kernel), kernel·C].
/// A matmul on the result is a 1-D convolution with kernel = stride = `kernel`.
pub fn strided_view<'t>(x: Var<'t>, kernel: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let out_len = s[0].div_ceil(kernel);
    pad_rows(x, out_len * kernel)?.reshape(&[out_len, kernel * s[1]])
}

/// Parameter-free average pooling by `scale` along time (last row replicated
/// to fill the final block).
pub fn avg_pool<'t>(h: Var<'t>, scale: usize) -> Result<Var<'t>> {
    let s = h.shape();
    let out_len = s[0].div_ceil(scale);
    pad_rows(h, out_len * scale)?
        .reshape(&[out_len, scale, s[1]])?
        .mean_axis(1, false)
}

/// h pooled to every layer's time extent: [h¹ = h, h², …, h^L].
pub fn pooled_ladder<'t>(h: Var<'t>, cfg: &ModelConfig) -> Result<Vec<Var<'t>>> {
    let mut out = vec![h];
    for _ in 1..cfg.layers {
        let next = avg_pool(*out.last().expect("non-empty"), cfg.scale)?;
        out.push(next);
    }
    Ok(out)
}

/// Multi-scale inference network on the raw (un-normalized) window.
///
/// μ^i = f(C^i_μ(x_i) + b^i_μ), σ^i = softplus(f(C^i_σ(x_i) + b^i_σ)), where
/// x_i is x folded with stride s^(i−1).
pub fn infer_posteriors<'t>(
    x_raw: Var<'t>,
    p: &[Var<'t>],
    idx: &HtpgmIdx,
    cfg: &ModelConfig,
) -> Result<Vec<GaussianParams<'t>>> {
    let t = x_raw.shape()[0];
    let required = cfg.scale.checked_pow(cfg.layers as u32 - 1).unwrap_or(usize::MAX);
    if t < required {
        return Err(HtvError::HierarchyTooDeep { input_len: t, required });
    }
    let f = cfg.activation;
    let mut out = Vec::with_capacity(cfg.layers);
    for (i, layer) in idx.layers.iter().enumerate() {
        let xi = strided_view(x_raw, cfg.scale.pow(i as u32))?;
        let mu = f.apply(xi.matmul(p[layer.c_mu])?.add(p[layer.b_mu])?);
        let sigma = f.apply(xi.matmul(p[layer.c_sigma])?.add(p[layer.b_sigma])?).softplus();
        out.push(GaussianParams::new(mu, sigma)?);
    }
    Ok(out)
}

/// z = μ + σ ⊙ η.
pub fn reparameterize<'t>(g: &GaussianParams<'t>, eta: &Tensor) -> Result<Var<'t>> {
    let tape = g.mu.tape();
    g.mu.add(g.sigma.mul(tape.constant(eta.clone()))?)
}

/// Draws η ~ N(0, I) with the given shape.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn sample_reparameterized<'t>(g: &GaussianParams<'t>, rng: &mut impl Rng) -> Result<Var<'t>> {
    let eta = standard_normal(&g.shape(), rng);
    reparameterize(g, &eta)
}

/// Top-down priors. Layer L: N(f(W^L h^L), I). Layer i < L: mean
/// f(W_z z^{i+1}[parent(t)] + W_h h^i[t]) with parent(t) = floor(t·T_{i+1}/T_i),
/// scale softplus(ρ^i) shared across time.
pub fn compute_priors<'t>(
    samples: &[Var<'t>],
    h: Var<'t>,
    p: &[Var<'t>],
    idx: &HtpgmIdx,
    cfg: &ModelConfig,
) -> Result<Vec<GaussianParams<'t>>> {
    if samples.len() != cfg.layers {
        return Err(HtvError::Dimension(format!(
            "{} latent samples for {} layers",
            samples.len(),
            cfg.layers
        )));
    }
    let tape = h.tape();
    let hs = pooled_ladder(h, cfg)?;
    let f = cfg.activation;
    let mut priors = Vec::with_capacity(cfg.layers);
    for (i, layer) in idx.layers.iter().enumerate() {
        let ti = samples[i].shape()[0];
        if hs[i].shape()[0] != ti {
            return Err(HtvError::Dimension(format!(
                "layer {i}: latent has {ti} steps, pooled h has {}",
                hs[i].shape()[0]
            )));
        }
        let hterm = hs[i].matmul(p[layer.w_h])?;
        let k = hterm.shape()[1];
        let prior = match (layer.w_z, layer.rho) {
            (Some(w_z), Some(rho)) => {
                let parent = samples[i + 1].nearest_interpolate(0, ti)?;
                let mu = f.apply(parent.matmul(p[w_z])?.add(hterm)?);
                let sigma = tape.constant(Tensor::ones(&[ti, k])).mul(p[rho].softplus())?;
                GaussianParams::new(mu, sigma)?
            }
            _ => {
                let mu = f.apply(hterm);
                GaussianParams::new(mu, tape.constant(Tensor::ones(&[ti, k])))?
            }
        };
        priors.push(prior);
    }
    Ok(priors)
}

/// x ~ N(μ¹, diag(σˣ)) with μ¹ = f(W_z z¹ + W_h h)·W_o + b_o and
/// σˣ = softplus(ρˣ) per channel.
pub fn reconstruction_params<'t>(
    z1: Var<'t>,
    h: Var<'t>,
    p: &[Var<'t>],
    idx: &HtpgmIdx,
    activation: Activation,
) -> Result<GaussianParams<'t>> {
    let hidden = activation.apply(z1.matmul(p[idx.recon_wz])?.add(h.matmul(p[idx.recon_wh])?)?);
    let mu = hidden.matmul(p[idx.recon_wo])?.add(p[idx.recon_bo])?;
    let ones = h.tape().constant(Tensor::ones(&mu.shape()));
    let sigma = ones.mul(p[idx.recon_rho].softplus())?;
    GaussianParams::new(mu, sigma)
}

/// Closed-form KL(q ‖ p) between diagonal Gaussians, summed over all cells.
pub fn kl_gaussian<'t>(q: &GaussianParams<'t>, p: &GaussianParams<'t>) -> Result<Var<'t>> {
    if q.shape() != p.shape() {
        return Err(HtvError::Dimension(format!(
            "kl between {:?} and {:?}",
            q.shape(),
            p.shape()
        )));
    }
    let log_ratio = p.sigma.log()?.sub(q.sigma.log()?)?;
    let num = q.sigma.square().add(q.mu.sub(p.mu)?.square())?;
    let quad = num.div(p.sigma.square().scale(2.0))?;
    Ok(log_ratio.add(quad)?.add_scalar(-0.5).sum())
}

/// −ln N(x; μ, σ²) summed over all cells.
pub fn gaussian_nll<'t>(x: Var<'t>, g: &GaussianParams<'t>) -> Result<Var<'t>> {
    let z = x.sub(g.mu)?.div(g.sigma)?;
    Ok(z.square()
        .scale(0.5)
        .add(g.sigma.log()?)?
        .add_scalar(0.5 * (2.0 * PI).ln())
        .sum())
}

/// ln N(x; μ, σ²) summed, on plain tensors.
pub fn gaussian_log_density(x: &Tensor, mu: &Tensor, sigma: &Tensor) -> f64 {
    let c = 0.5 * (2.0 * PI).ln();
    x.data()
        .iter()
        .zip(mu.data())
        .zip(sigma.data())
        .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2) - s.ln() - c)
        .sum()
}

/// z_sum = Σ_i nearest_interpolate(z_i, T).
pub fn fuse_latents<'t>(samples: &[Var<'t>], target_len: usize) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for z in samples {
        let up = z.nearest_interpolate(0, target_len)?;
        acc = Some(match acc {
            None => up,
            Some(a) => a.add(up)?,
        });
    }
    acc.ok_or_else(|| HtvError::Dimension("fuse_latents needs at least one layer".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{HtvModel, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(t: usize, layers: usize) -> HtvModel {
        let mut cfg = ModelConfig::new(t, 2, 2, 4, 2, layers);
        cfg.scale = 2;
        HtvModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn ramp(t: usize, v: usize) -> Tensor {
        Tensor::new(&[t, v], (0..t * v).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn posterior_time_dims() {
        for (t, l, dims) in [(4, 1, vec![4]), (8, 3, vec![8, 4, 2]), (7, 3, vec![7, 4, 2])] {
            let m = model(t, l);
            let tape = Tape::new();
            let p = m.params.register(&tape);
            let post = infer_posteriors(tape.constant(ramp(t, 2)), &p, &m.layout.htpgm, &m.config).unwrap();
            let got: Vec<usize> = post.iter().map(|g| g.shape()[0]).collect();
            assert_eq!(got, dims);
            assert!(post.iter().all(|g| g.sigma.value().data().iter().all(|&s| s > 0.0)));
        }
    }

    #[test]
    fn zero_weights_give_ln2_posterior_scale() {
        let mut m = model(8, 3);
        m.fill_params(0.0, &[]);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let post = infer_posteriors(tape.constant(ramp(8, 2)), &p, &m.layout.htpgm, &m.config).unwrap();
        for g in post {
            assert!(g.mu.value().data().iter().all(|&x| x == 0.0));
            assert!(g.sigma.value().data().iter().all(|&s| (s - 2f64.ln()).abs() < 1e-15));
        }
    }

    #[test]
    fn too_deep_hierarchy_rejected() {
        let m = model(8, 3);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let err = infer_posteriors(tape.constant(ramp(3, 2)), &p, &m.layout.htpgm, &m.config);
        assert!(matches!(err, Err(HtvError::HierarchyTooDeep { .. })));
    }

    #[test]
    fn deterministic_limit_and_seeded_samples() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::new(&[2, 1], vec![1.0, -2.0]).unwrap());
        let tiny = tape.constant(Tensor::full(&[2, 1], 1e-300));
        let g = GaussianParams::new(mu, tiny).unwrap();
        let z = sample_reparameterized(&g, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(z.value(), mu.value());

        let g = GaussianParams::new(mu, tape.constant(Tensor::ones(&[2, 1]))).unwrap();
        let a = sample_reparameterized(&g, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .value();
        let b = sample_reparameterized(&g, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .value();
        assert_eq!(a, b);
    }

    #[test]
    fn priors_degenerate_and_zero_weight_cases() {
        let mut m = model(8, 1);
        m.fill_params(0.0, &[]);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let z = vec![tape.constant(Tensor::ones(&[8, 4]))];
        let h = tape.constant(ramp(8, 4));
        let pri = compute_priors(&z, h, &p, &m.layout.htpgm, &m.config).unwrap();
        assert_eq!(pri.len(), 1);
        assert!(pri[0].sigma.value().data().iter().all(|&s| s == 1.0));
        assert!(pri[0].mu.value().data().iter().all(|&x| x == 0.0));

        let mut m = model(8, 3);
        m.fill_params(0.0, &["prior_rho"]);
        let p = m.params.register(&tape);
        let z: Vec<Var> = [8, 4, 2]
            .iter()
            .map(|&t| tape.constant(Tensor::ones(&[t, 4])))
            .collect();
        let pri = compute_priors(&z, h, &p, &m.layout.htpgm, &m.config).unwrap();
        for g in &pri {
            assert!(g.mu.value().data().iter().all(|&x| x == 0.0));
            assert!(g.sigma.value().data().iter().all(|&s| (s - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn prior_parent_is_index_oracle() {
        // L=2, s=2, T=4: identity prior weights expose which parent feeds each step.
        let mut cfg = ModelConfig::new(4, 1, 1, 2, 1, 2);
        cfg.activation = Activation::Relu;
        let mut m = HtvModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.fill_params(0.0, &["prior_rho"]);
        *m.params.get_mut("htpgm.l0.prior_wz").unwrap() = Tensor::eye(2);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let z2 = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = vec![tape.constant(Tensor::zeros(&[4, 2])), tape.constant(z2.clone())];
        let h = tape.constant(Tensor::zeros(&[4, 2]));
        let pri = compute_priors(&z, h, &p, &m.layout.htpgm, &m.config).unwrap();
        let mu = pri[0].mu.value();
        for t in 0..4 {
            let parent = t * 2 / 4;
            assert_eq!(mu.row(t), z2.row(parent));
        }
    }

    #[test]
    fn reconstruction_zero_weights() {
        let mut m = model(8, 2);
        m.fill_params(0.0, &["recon_rho"]);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let g = reconstruction_params(
            tape.constant(ramp(8, 4)),
            tape.constant(ramp(8, 4)),
            &p,
            &m.layout.htpgm,
            Activation::Tanh,
        )
        .unwrap();
        assert_eq!(g.shape(), vec![8, 2]);
        assert!(g.mu.value().data().iter().all(|&x| x == 0.0));
        assert!(g.sigma.value().data().iter().all(|&s| (s - 1.0).abs() < 1e-15));
    }

    #[test]
    fn recon_scale_positive_for_extreme_rho() {
        let tape = Tape::new();
        for rho in [-700.0, -30.0, 0.0, 30.0] {
            assert!(tape.scalar(rho).softplus().item() > 0.0);
        }
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let q = GaussianParams::new(c(0.3), c(1.7)).unwrap();
        assert!(kl_gaussian(&q, &q).unwrap().item().abs() < 1e-15);
        let q = GaussianParams::new(c(1.0), c(1.0)).unwrap();
        let p = GaussianParams::new(c(0.0), c(1.0)).unwrap();
        assert!((kl_gaussian(&q, &p).unwrap().item() - 0.5).abs() < 1e-15);
        let bad = GaussianParams::new(tape.constant(Tensor::zeros(&[2])), tape.constant(Tensor::ones(&[2]))).unwrap();
        assert!(kl_gaussian(&q, &bad).is_err());
    }

    #[test]
    fn fuse_examples() {
        let tape = Tape::new();
        let z1 = tape.constant(ramp(4, 3));
        assert_eq!(fuse_latents(&[z1], 4).unwrap().value(), z1.value());
        let z = [
            tape.constant(Tensor::ones(&[4, 3])),
            tape.constant(Tensor::ones(&[2, 3])),
        ];
        assert_eq!(fuse_latents(&z, 4).unwrap().value(), Tensor::full(&[4, 3], 2.0));
        let z = [
            tape.constant(Tensor::zeros(&[4, 3])),
            tape.constant(Tensor::zeros(&[1, 3])),
        ];
        assert_eq!(fuse_latents(&z, 4).unwrap().value(), Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn avg_pool_replicates_tail() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(&[3, 1], vec![1.0, 3.0, 5.0]).unwrap());
        assert_eq!(avg_pool(h, 2).unwrap().value().data(), &[2.0, 5.0]);
    }
}
