//! The training objective, forecasting path and evaluation metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{encode, forecast_head};
use crate::data::SeriesWindow;
use crate::error::{HtvError, Result};
use crate::htpgm::{
    compute_priors, fuse_latents, gaussian_nll, infer_posteriors, kl_gaussian, reconstruction_params, reparameterize,
    standard_normal, GaussianParams, LatentStack,
};
use crate::model::{HtvModel, Objective};
use crate::stationarization::{apply_stats, denormalize_inverse, normalize, StationStats};
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How latent samples are drawn during a forward pass.
pub enum Sampling<'a, R: Rng> {
    /// One reparameterized draw per layer.
    Random(&'a mut R),
    /// z = posterior mean.
    Mean,
    /// Caller-supplied η per layer.
    Given(&'a [Tensor]),
}

/// Objective terms in nats. `total` is what the optimizer minimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub pred_nll: f64,
    pub kl_per_layer: Vec<f64>,
    pub total: f64,
    pub gamma: f64,
    /// 1 for the combined objective, 0 for prediction only.
    pub recon_weight: f64,
    pub kl_weight: f64,
}

impl LossBreakdown {
    pub fn kl_sum(&self) -> f64 {
        self.kl_per_layer.iter().sum()
    }

    /// Weighted recombination of the terms.
    pub fn recombined(&self) -> f64 {
        self.recon_weight * self.recon_nll + self.gamma * self.pred_nll + self.kl_weight * self.kl_sum()
    }

    /// Elementwise mean of several breakdowns.
    pub fn average(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mean = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            recon_nll: mean(&|b| b.recon_nll),
            pred_nll: mean(&|b| b.pred_nll),
            kl_per_layer: (0..first.kl_per_layer.len())
                .map(|i| mean(&|b| b.kl_per_layer[i]))
                .collect(),
            total: mean(&|b| b.total),
            gamma: first.gamma,
            recon_weight: first.recon_weight,
            kl_weight: first.kl_weight,
        })
    }
}

pub struct StepOutput<'t> {
    pub loss: LossBreakdown,
    /// Scalar node of `loss.total`, ready for `backward`.
    pub total: Var<'t>,
    /// De-normalized forecast [H, V].
    pub y: Tensor,
    /// Normalized forecast node [H, V].
    pub y_prime: Var<'t>,
    pub latents: LatentStack<'t>,
    pub stats: StationStats,
}

fn finite(v: f64, term: &str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HtvError::Divergence {
            term: term.to_string(),
            step,
        })
    }
}

fn draw<'t, R: Rng>(posteriors: &[GaussianParams<'t>], sampling: &mut Sampling<'_, R>) -> Result<Vec<Var<'t>>> {
    posteriors
        .iter()
        .enumerate()
        .map(|(i, g)| match sampling {
            Sampling::Mean => Ok(g.mu),
            Sampling::Random(rng) => reparameterize(g, &standard_normal(&g.shape(), *rng)),
            Sampling::Given(noise) => {
                let eta = noise
                    .get(i)
                    .ok_or_else(|| HtvError::Dimension(format!("no noise supplied for layer {i}")))?;
                if eta.shape() != g.shape().as_slice() {
                    return Err(HtvError::Dimension(format!(
                        "layer {i} noise {:?} vs posterior {:?}",
                        eta.shape(),
                        g.shape()
                    )));
                }
                reparameterize(g, eta)
            }
        })
        .collect()
}

fn check_window(model: &HtvModel, w: &SeriesWindow) -> Result<()> {
    let c = &model.config;
    if w.x.shape() != [c.input_len, c.channels] || w.target.shape() != [c.horizon, c.channels] {
        return Err(HtvError::Dimension(format!(
            "window x {:?} / target {:?} does not fit T={}, H={}, V={}",
            w.x.shape(),
            w.target.shape(),
            c.input_len,
            c.horizon,
            c.channels
        )));
    }
    Ok(())
}

/// One full pass over a window, in this order: normalize, posteriors on raw
/// x and sampling, latent fusion, encoder, priors and reconstruction, head,
/// de-normalization, prediction likelihood.
///
/// Reconstruction models the normalized window x′, the same scale the
/// prediction term lives on. `step` only labels divergence errors.
pub fn forward_step<'t, R: Rng>(
    tape: &'t Tape,
    p: &[Var<'t>],
    model: &HtvModel,
    window: &SeriesWindow,
    mut sampling: Sampling<'_, R>,
    step: usize,
) -> Result<StepOutput<'t>> {
    check_window(model, window)?;
    let cfg = &model.config;
    let idx = &model.layout;

    let (x_prime, stats) = normalize(&window.x, cfg.eps)?;
    let target_prime = apply_stats(&window.target, &stats)?;

    let posteriors = infer_posteriors(tape.constant(window.x.clone()), p, &idx.htpgm, cfg)?;
    let samples = draw(&posteriors, &mut sampling)?;
    let z_sum = fuse_latents(&samples, cfg.input_len)?;

    let state = encode(
        tape,
        &x_prime,
        &window.input_time_features(),
        Some(z_sum),
        p,
        &idx.backbone,
        cfg,
    )?;

    let priors = compute_priors(&samples, state.h, p, &idx.htpgm, cfg)?;
    let recon = reconstruction_params(samples[0], state.h, p, &idx.htpgm, cfg.activation)?;
    let recon_nll = gaussian_nll(tape.constant(x_prime), &recon)?;
    let kls = posteriors
        .iter()
        .zip(&priors)
        .map(|(q, pr)| kl_gaussian(q, pr))
        .collect::<Result<Vec<_>>>()?;

    let y_prime = forecast_head(state.h, p, &idx.backbone, cfg.horizon, cfg.channels)?;
    let y = denormalize_inverse(&y_prime.value(), &stats)?;
    let pred_nll = y_prime
        .sub(tape.constant(target_prime))?
        .square()
        .scale(0.5)
        .add_scalar(HALF_LN_2PI)
        .sum();

    let (w_r, w_kl) = match cfg.objective {
        Objective::Combined => (1.0, 1.0),
        Objective::Prediction => (0.0, 0.0),
    };
    let mut total = pred_nll.scale(cfg.gamma);
    if w_r != 0.0 {
        total = total.add(recon_nll.scale(w_r))?;
    }
    if w_kl != 0.0 {
        for kl in &kls {
            total = total.add(kl.scale(w_kl))?;
        }
    }

    let loss = LossBreakdown {
        recon_nll: finite(recon_nll.item(), "recon", step)?,
        pred_nll: finite(pred_nll.item(), "pred", step)?,
        kl_per_layer: kls
            .iter()
            .enumerate()
            .map(|(i, k)| finite(k.item(), &format!("kl[{i}]"), step))
            .collect::<Result<_>>()?,
        total: finite(total.item(), "total", step)?,
        gamma: cfg.gamma,
        recon_weight: w_r,
        kl_weight: w_kl,
    };
    Ok(StepOutput {
        loss,
        total,
        y,
        y_prime,
        latents: LatentStack {
            posteriors,
            priors,
            samples,
            z_sum,
        },
        stats,
    })
}

/// Sampling-free forecast: latents at their posterior means. Returns the
/// de-normalized [H, V] forecast and the window statistics used.
pub fn predict(model: &HtvModel, x: &Tensor, time_features: &Tensor) -> Result<(Tensor, StationStats)> {
    let cfg = &model.config;
    if x.shape() != [cfg.input_len, cfg.channels] {
        return Err(HtvError::Dimension(format!(
            "input window {:?}, expected [{}, {}]",
            x.shape(),
            cfg.input_len,
            cfg.channels
        )));
    }
    let tape = Tape::new();
    let p = model.params.register_frozen(&tape);
    let (x_prime, stats) = normalize(x, cfg.eps)?;
    let z_sum = if cfg.alpha != 0.0 {
        let posteriors = infer_posteriors(tape.constant(x.clone()), &p, &model.layout.htpgm, cfg)?;
        let means: Vec<Var> = posteriors.iter().map(|g| g.mu).collect();
        Some(fuse_latents(&means, cfg.input_len)?)
    } else {
        None
    };
    let tf = time_features.slice_rows(0, cfg.input_len)?;
    let state = encode(&tape, &x_prime, &tf, z_sum, &p, &model.layout.backbone, cfg)?;
    let y_prime = forecast_head(state.h, &p, &model.layout.backbone, cfg.horizon, cfg.channels)?;
    Ok((denormalize_inverse(&y_prime.value(), &stats)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Mean squared and absolute error over every cell of every pair.
pub fn metrics<'a>(pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>) -> Result<Metrics> {
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (y, target) in pairs {
        if y.shape() != target.shape() {
            return Err(HtvError::Dimension(format!(
                "forecast {:?} vs target {:?}",
                y.shape(),
                target.shape()
            )));
        }
        for (a, b) in y.data().iter().zip(target.data()) {
            se += (a - b).powi(2);
            ae += (a - b).abs();
        }
        n += y.len();
    }
    if n == 0 {
        return Err(HtvError::EmptyDataset("no forecast/target pairs".into()));
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

/// Model metrics on a split, using posterior means.
pub fn evaluate(model: &HtvModel, windows: &[SeriesWindow]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(HtvError::EmptyDataset("evaluation split has no windows".into()));
    }
    let preds = windows
        .iter()
        .map(|w| predict(model, &w.x, &w.time_features).map(|(y, _)| y))
        .collect::<Result<Vec<_>>>()?;
    metrics(preds.iter().zip(windows.iter().map(|w| &w.target)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Repeat the last observed value.
    Persistence,
    /// Repeat the last full season of the given period.
    SeasonalNaive(usize),
}

impl Baseline {
    pub fn forecast(&self, x: &Tensor, horizon: usize) -> Result<Tensor> {
        let (t, v) = (x.rows(), x.cols());
        let src = |h: usize| -> Result<usize> {
            match *self {
                Baseline::Persistence => Ok(t - 1),
                Baseline::SeasonalNaive(period) => {
                    if period == 0 || period > t {
                        return Err(HtvError::Window(format!(
                            "seasonal period {period} needs at least that many input steps, got {t}"
                        )));
                    }
                    Ok(t - period + h % period)
                }
            }
        };
        let mut data = Vec::with_capacity(horizon * v);
        for h in 0..horizon {
            data.extend_from_slice(x.row(src(h)?));
        }
        Tensor::new(&[horizon, v], data)
    }
}

pub fn evaluate_baseline(baseline: Baseline, windows: &[SeriesWindow]) -> Result<Metrics> {
    let preds = windows
        .iter()
        .map(|w| baseline.forecast(&w.x, w.target.rows()))
        .collect::<Result<Vec<_>>>()?;
    metrics(preds.iter().zip(windows.iter().map(|w| &w.target)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_windows, SynthSpec};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(objective: Objective, gamma: f64) -> (HtvModel, SeriesWindow) {
        let mut cfg = ModelConfig::new(8, 4, 2, 4, 2, 2);
        cfg.objective = objective;
        cfg.gamma = gamma;
        let model = HtvModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let series = generate_synthetic(&SynthSpec::benchmark(2, 40, 9)).unwrap();
        let w = make_windows(&series, 8, 4, 1).unwrap().remove(5);
        (model, w)
    }

    fn run(model: &HtvModel, w: &SeriesWindow, seed: u64) -> LossBreakdown {
        let tape = Tape::new();
        let p = model.params.register(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        forward_step(&tape, &p, model, w, Sampling::Random(&mut rng), 0)
            .unwrap()
            .loss
    }

    #[test]
    fn decomposition_identity() {
        for gamma in [0.0, 0.5, 1.0, 5.0] {
            let (m, w) = setup(Objective::Combined, gamma);
            let l = run(&m, &w, 1);
            assert!((l.total - l.recombined()).abs() < 1e-12);
            assert!((l.total - (l.recon_nll + gamma * l.pred_nll + l.kl_sum())).abs() < 1e-12);
            assert!(l.kl_per_layer.iter().all(|k| *k >= 0.0));
        }
    }

    #[test]
    fn gamma_zero_is_pure_vae() {
        let (m, w) = setup(Objective::Combined, 0.0);
        let l = run(&m, &w, 1);
        assert!((l.total - (l.recon_nll + l.kl_sum())).abs() < 1e-12);
    }

    #[test]
    fn prediction_only_weights() {
        let (m, w) = setup(Objective::Prediction, 2.0);
        let l = run(&m, &w, 1);
        assert_eq!((l.recon_weight, l.kl_weight), (0.0, 0.0));
        assert!(l.recon_nll > 0.0);
        assert!((l.total - 2.0 * l.pred_nll).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_closed_form_kl() {
        let (mut m, w) = setup(Objective::Combined, 1.0);
        m.fill_params(0.0, &["rho"]);
        let l = run(&m, &w, 4);
        let k = m.config.latent_width() as f64;
        let ln2 = 2f64.ln();
        let per_cell = (1.0 / ln2).ln() + ln2 * ln2 / 2.0 - 0.5;
        for (ti, kl) in m.config.time_dims().iter().zip(&l.kl_per_layer) {
            assert!((kl - *ti as f64 * k * per_cell).abs() < 1e-12, "{kl}");
        }
    }

    #[test]
    fn seeded_runs_match() {
        let (m, w) = setup(Objective::Combined, 1.0);
        assert_eq!(run(&m, &w, 8), run(&m, &w, 8));
        assert_ne!(run(&m, &w, 8), run(&m, &w, 9));
    }

    #[test]
    fn nan_names_the_term() {
        let (m, mut w) = setup(Objective::Combined, 1.0);
        w.target.data_mut()[0] = f64::NAN;
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match forward_step(&tape, &p, &m, &w, Sampling::Random(&mut rng), 17) {
            Err(HtvError::Divergence { term, step }) => {
                assert_eq!(term, "pred");
                assert_eq!(step, 17);
            }
            other => panic!("{:?}", other.map(|o| o.loss)),
        }
    }

    #[test]
    fn mean_sampling_matches_predict() {
        let (m, w) = setup(Objective::Combined, 1.0);
        let tape = Tape::new();
        let p = m.params.register_frozen(&tape);
        let out = forward_step::<ChaCha8Rng>(&tape, &p, &m, &w, Sampling::Mean, 0).unwrap();
        let (y, stats) = predict(&m, &w.x, &w.time_features).unwrap();
        assert_eq!(out.y, y);
        assert_eq!(out.stats, stats);
    }

    #[test]
    fn metric_examples() {
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(metrics([(&z, &z)]).unwrap(), Metrics { mse: 0.0, mae: 0.0 });
        let one = Tensor::ones(&[2, 3]);
        assert_eq!(metrics([(&one, &z)]).unwrap(), Metrics { mse: 1.0, mae: 1.0 });
        let y = Tensor::new(&[2, 1], vec![1.0, -3.0]).unwrap();
        let t = Tensor::zeros(&[2, 1]);
        assert_eq!(metrics([(&y, &t)]).unwrap(), Metrics { mse: 5.0, mae: 2.0 });
        assert!(matches!(metrics(std::iter::empty()), Err(HtvError::EmptyDataset(_))));
    }

    #[test]
    fn evaluate_is_repeatable() {
        let (m, _) = setup(Objective::Combined, 1.0);
        let series = generate_synthetic(&SynthSpec::benchmark(2, 40, 9)).unwrap();
        let ws = make_windows(&series, 8, 4, 3).unwrap();
        let a = evaluate(&m, &ws).unwrap();
        let b = evaluate(&m, &ws).unwrap();
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());
        assert!(a.mae <= a.mse.sqrt() + 1e-15);
        assert!(matches!(evaluate(&m, &[]), Err(HtvError::EmptyDataset(_))));
    }

    #[test]
    fn baseline_forecasts() {
        let x = Tensor::new(&[4, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(Baseline::Persistence.forecast(&x, 3).unwrap().data(), &[4., 4., 4.]);
        assert_eq!(
            Baseline::SeasonalNaive(2).forecast(&x, 5).unwrap().data(),
            &[3., 4., 3., 4., 3.]
        );
        assert!(Baseline::SeasonalNaive(5).forecast(&x, 1).is_err());
    }
}
