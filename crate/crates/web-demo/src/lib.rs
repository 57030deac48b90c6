//! Browser front end for the forecaster: a small synthetic dataset, an
//! in-page training loop and forecast/latent views.
//!
//! [`Session`] holds all state and is plain Rust so it can be tested natively;
//! [`Demo`] is the thin `wasm_bindgen` wrapper the page talks to.

use htv_core::autodiff::Tape;
use htv_core::data::{
    calendar_features, chrono_split, generate_synthetic, DatasetSplit, Series, SeriesWindow, SynthSpec,
};
use htv_core::htpgm::{fuse_latents, infer_posteriors};
use htv_core::model::{HtvModel, ModelConfig};
use htv_core::objective::{evaluate, evaluate_baseline, predict, Baseline};
use htv_core::optim::{clip_global_norm, Adam, AdamConfig};
use htv_core::rng::{Seeds, Stream};
use htv_core::stationarization::normalize;
use htv_core::train::batch_gradient;
use htv_core::{HtvError, Result, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const CHANNELS: usize = 3;
pub const LENGTH: usize = 720;
pub const INPUT_LEN: usize = 48;
pub const HORIZON: usize = 24;
const STRIDE: usize = 4;
const BATCH: usize = 8;
const CLIP: f64 = 10.0;

pub struct Session {
    pub series: Series,
    pub split: DatasetSplit,
    pub model: HtvModel,
    adam: Adam,
    shuffle: ChaCha8Rng,
    sampling: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub losses: Vec<f64>,
}

impl Session {
    pub fn new(seed: u64, regime_scale: f64, layers: usize) -> Result<Self> {
        let mut spec = SynthSpec::benchmark(CHANNELS, LENGTH, seed);
        spec.regime_scales = vec![regime_scale];
        let series = generate_synthetic(&spec)?;
        let split = chrono_split(&series, (0.7, 0.1, 0.2), INPUT_LEN, HORIZON, STRIDE)?;
        let mut cfg = ModelConfig::new(INPUT_LEN, HORIZON, CHANNELS, 8, 2, layers);
        cfg.d_ff = 32;
        let seeds = Seeds::new(seed);
        let model = HtvModel::new(cfg, &mut seeds.stream(Stream::Init))?;
        let adam = Adam::new(
            AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            model.params.tensors(),
        );
        Ok(Self {
            order: (0..split.train.len()).collect(),
            series,
            split,
            model,
            adam,
            shuffle: seeds.stream(Stream::Shuffle),
            sampling: seeds.stream(Stream::Sampling),
            cursor: usize::MAX,
            losses: Vec::new(),
        })
    }

    /// Fusion weight used from the next step on. Parameters are kept, so the
    /// slider can be moved mid-training.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.model.config.alpha = alpha;
    }

    /// Runs `steps` minibatch updates and returns the last step's loss.
    pub fn train(&mut self, steps: usize) -> Result<f64> {
        for _ in 0..steps {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.shuffle);
                self.cursor = 0;
            }
            let end = (self.cursor + BATCH).min(self.order.len());
            let batch: Vec<&SeriesWindow> = self.order[self.cursor..end]
                .iter()
                .map(|&i| &self.split.train[i])
                .collect();
            self.cursor = end;
            let step = self.losses.len();
            let (loss, mut grads) = batch_gradient(&self.model, &batch, &mut self.sampling, step)?;
            clip_global_norm(&mut grads, CLIP);
            self.adam.update(self.model.params.tensors_mut(), &grads)?;
            self.losses.push(loss.total);
        }
        Ok(self.losses.last().copied().unwrap_or(f64::NAN))
    }

    fn window(&self, origin: usize) -> Result<(Tensor, Tensor)> {
        if origin < INPUT_LEN || origin + HORIZON > self.series.len() {
            return Err(HtvError::Range(format!(
                "origin {origin} outside [{INPUT_LEN}, {}]",
                self.series.len() - HORIZON
            )));
        }
        let x = self.series.values.slice_rows(origin - INPUT_LEN, origin)?;
        let rows: Vec<Vec<f64>> = self.series.timestamps[origin - INPUT_LEN..origin + HORIZON]
            .iter()
            .map(|t| calendar_features(t).to_vec())
            .collect();
        Ok((x, Tensor::from_rows(&rows)?))
    }

    /// Normalized input window, row-major [T, V].
    pub fn stationarize(&self, origin: usize) -> Result<Vec<f64>> {
        let (x, _) = self.window(origin)?;
        Ok(normalize(&x, self.model.config.eps)?.0.into_data())
    }

    /// Forecast for the H steps after `origin`, row-major [H, V].
    pub fn forecast(&self, origin: usize) -> Result<Vec<f64>> {
        let (x, tf) = self.window(origin)?;
        Ok(predict(&self.model, &x, &tf)?.0.into_data())
    }

    /// Channel-averaged posterior mean of each latent layer, upsampled to T,
    /// followed by the fused sum: (L + 1) rows of T values.
    pub fn latents(&self, origin: usize) -> Result<Vec<f64>> {
        let (x, _) = self.window(origin)?;
        let cfg = &self.model.config;
        let tape = Tape::new();
        let p = self.model.params.register_frozen(&tape);
        let posts = infer_posteriors(tape.constant(x), &p, &self.model.layout.htpgm, cfg)?;
        let means: Vec<_> = posts.iter().map(|g| g.mu).collect();
        let mut rows: Vec<_> = means
            .iter()
            .map(|m| fuse_latents(&[*m], cfg.input_len))
            .collect::<Result<_>>()?;
        rows.push(fuse_latents(&means, cfg.input_len)?);
        Ok(rows
            .iter()
            .flat_map(|r| {
                let v = r.value();
                (0..v.rows())
                    .map(move |t| v.row(t).iter().sum::<f64>() / v.cols() as f64)
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// Test MAE of the model, persistence and seasonal naive.
    pub fn scores(&self) -> Result<[f64; 3]> {
        Ok([
            evaluate(&self.model, &self.split.test)?.mae,
            evaluate_baseline(Baseline::Persistence, &self.split.test)?.mae,
            evaluate_baseline(Baseline::SeasonalNaive(24), &self.split.test)?.mae,
        ])
    }
}

fn js(e: HtvError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, regime_scale: f64, layers: usize) -> std::result::Result<Demo, JsError> {
        Session::new(seed as u64, regime_scale, layers)
            .map(|session| Demo { session })
            .map_err(js)
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn length(&self) -> usize {
        self.session.series.len()
    }

    pub fn input_len(&self) -> usize {
        INPUT_LEN
    }

    pub fn horizon(&self) -> usize {
        HORIZON
    }

    pub fn layers(&self) -> usize {
        self.session.model.config.layers
    }

    /// Index of the first test target, for placing the default origin.
    pub fn test_start(&self) -> usize {
        self.session.split.boundaries.1
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.session.series.values.column(c)
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.session.set_alpha(alpha);
    }

    pub fn steps(&self) -> usize {
        self.session.losses.len()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.session.losses.clone()
    }

    pub fn train(&mut self, steps: usize) -> std::result::Result<f64, JsError> {
        self.session.train(steps).map_err(js)
    }

    pub fn stationarize(&self, origin: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.session.stationarize(origin).map_err(js)
    }

    pub fn forecast(&self, origin: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.session.forecast(origin).map_err(js)
    }

    pub fn latents(&self, origin: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.session.latents(origin).map_err(js)
    }

    pub fn scores(&self) -> std::result::Result<Vec<f64>, JsError> {
        self.session.scores().map(|s| s.to_vec()).map_err(js)
    }
}
