//! Model configuration, the flat parameter store and its named layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{HtvError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Which ELBO terms carry weight during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Reconstruction + γ·prediction + KL.
    Combined,
    /// γ·prediction only; reconstruction and KL are computed but weighted 0.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub time_features: usize,
    /// Number of latent layers L.
    pub layers: usize,
    /// Time-dimension shrink factor s between latent layers.
    pub scale: usize,
    /// Model width d; also the latent width K of every layer.
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ffn_hidden: usize,
    /// Hidden width of the forecasting MLP.
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub activation: Activation,
    pub alpha: f64,
    pub gamma: f64,
    pub objective: Objective,
    /// Floor on the normalization σ.
    pub eps: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Defaults for the derived widths: d_k = d/m, d_ff = ffn = 2d.
    pub fn new(input_len: usize, horizon: usize, channels: usize, d_model: usize, heads: usize, layers: usize) -> Self {
        Self {
            input_len,
            horizon,
            channels,
            time_features: 4,
            layers,
            scale: 2,
            d_model,
            heads,
            d_k: (d_model / heads.max(1)).max(1),
            ffn_hidden: 2 * d_model,
            d_ff: 2 * d_model,
            encoder_layers: 1,
            activation: Activation::Tanh,
            alpha: 1.0,
            gamma: 1.0,
            objective: Objective::Combined,
            eps: crate::stationarization::DEFAULT_EPS,
            ln_eps: 1e-12,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.d_model
    }

    /// T_1 = T, T_{i+1} = ceil(T_i / s).
    pub fn time_dims(&self) -> Vec<usize> {
        time_ladder(self.input_len, self.scale, self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("layers", self.layers),
            ("scale", self.scale),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("ffn_hidden", self.ffn_hidden),
            ("d_ff", self.d_ff),
            ("encoder_layers", self.encoder_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(HtvError::config(field, "must be at least 1"));
            }
        }
        if self.input_len < 2 {
            return Err(HtvError::config("input_len", "must be at least 2"));
        }
        let required = self.scale.checked_pow(self.layers as u32 - 1).unwrap_or(usize::MAX);
        if self.input_len < required {
            return Err(HtvError::HierarchyTooDeep {
                input_len: self.input_len,
                required,
            });
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(HtvError::config("alpha", "must be finite and >= 0"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(HtvError::config("gamma", "must be finite and >= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(HtvError::config("eps", "must be > 0"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(HtvError::config("ln_eps", "must be > 0"));
        }
        Ok(())
    }
}

pub fn time_ladder(input_len: usize, scale: usize, layers: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(layers);
    let mut t = input_len;
    for _ in 0..layers {
        dims.push(t);
        t = t.div_ceil(scale);
    }
    dims
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(HtvError::Dimension(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant (no gradient).
    pub fn register_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// uniform(−1/√fan_in, 1/√fan_in) with fan_in = second-to-last extent.
    Uniform,
    Zeros,
    Const(f64),
}

/// softplus(ρ) = 1.
pub const UNIT_SOFTPLUS: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone)]
pub struct LatentLayerIdx {
    pub c_mu: usize,
    pub b_mu: usize,
    pub c_sigma: usize,
    pub b_sigma: usize,
    /// Prior mean weights from the parent latent; `None` on the top layer.
    pub w_z: Option<usize>,
    pub w_h: usize,
    /// Prior log-scale; `None` on the top layer whose prior scale is fixed at 1.
    pub rho: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct HtpgmIdx {
    pub layers: Vec<LatentLayerIdx>,
    pub recon_wz: usize,
    pub recon_wh: usize,
    pub recon_wo: usize,
    pub recon_bo: usize,
    pub recon_rho: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub ln_gain: usize,
    pub ln_bias: usize,
}

#[derive(Debug, Clone)]
pub struct BackboneIdx {
    pub w_value: usize,
    pub w_time: usize,
    pub encoders: Vec<EncoderIdx>,
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub htpgm: HtpgmIdx,
    pub backbone: BackboneIdx,
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    pub fn build(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let (v, d, k) = (cfg.channels, cfg.d_model, cfg.latent_width());

        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            let kernel = cfg.scale.pow(i as u32);
            let top = i + 1 == cfg.layers;
            layers.push(LatentLayerIdx {
                c_mu: add(format!("htpgm.l{i}.c_mu"), vec![kernel * v, k], Init::Uniform),
                b_mu: add(format!("htpgm.l{i}.b_mu"), vec![k], Init::Zeros),
                c_sigma: add(format!("htpgm.l{i}.c_sigma"), vec![kernel * v, k], Init::Uniform),
                b_sigma: add(format!("htpgm.l{i}.b_sigma"), vec![k], Init::Zeros),
                w_z: (!top).then(|| add(format!("htpgm.l{i}.prior_wz"), vec![k, k], Init::Uniform)),
                w_h: add(format!("htpgm.l{i}.prior_wh"), vec![d, k], Init::Uniform),
                rho: (!top).then(|| add(format!("htpgm.l{i}.prior_rho"), vec![k], Init::Const(UNIT_SOFTPLUS))),
            });
        }
        let htpgm = HtpgmIdx {
            layers,
            recon_wz: add("htpgm.recon_wz".into(), vec![k, k], Init::Uniform),
            recon_wh: add("htpgm.recon_wh".into(), vec![d, k], Init::Uniform),
            recon_wo: add("htpgm.recon_wo".into(), vec![k, v], Init::Uniform),
            recon_bo: add("htpgm.recon_bo".into(), vec![v], Init::Zeros),
            recon_rho: add("htpgm.recon_rho".into(), vec![v], Init::Const(UNIT_SOFTPLUS)),
        };

        let w_value = add("backbone.w_value".into(), vec![v, d], Init::Uniform);
        let w_time = add("backbone.w_time".into(), vec![cfg.time_features, d], Init::Uniform);
        let mut encoders = Vec::new();
        for j in 0..cfg.encoder_layers {
            let (m, dk, f) = (cfg.heads, cfg.d_k, cfg.ffn_hidden);
            encoders.push(EncoderIdx {
                wq: add(format!("backbone.enc{j}.wq"), vec![m, d, dk], Init::Uniform),
                wk: add(format!("backbone.enc{j}.wk"), vec![m, d, dk], Init::Uniform),
                wv: add(format!("backbone.enc{j}.wv"), vec![m, d, dk], Init::Uniform),
                wo: add(format!("backbone.enc{j}.wo"), vec![m, dk, d], Init::Uniform),
                ffn_w1: add(format!("backbone.enc{j}.ffn_w1"), vec![d, f], Init::Uniform),
                ffn_b1: add(format!("backbone.enc{j}.ffn_b1"), vec![f], Init::Zeros),
                ffn_w2: add(format!("backbone.enc{j}.ffn_w2"), vec![f, d], Init::Uniform),
                ffn_b2: add(format!("backbone.enc{j}.ffn_b2"), vec![d], Init::Zeros),
                ln_gain: add(format!("backbone.enc{j}.ln_gain"), vec![d], Init::Const(1.0)),
                ln_bias: add(format!("backbone.enc{j}.ln_bias"), vec![d], Init::Zeros),
            });
        }
        let backbone = BackboneIdx {
            w_value,
            w_time,
            encoders,
            head_w1: add("head.w1".into(), vec![cfg.input_len * d, cfg.d_ff], Init::Uniform),
            head_b1: add("head.b1".into(), vec![cfg.d_ff], Init::Zeros),
            head_w2: add("head.w2".into(), vec![cfg.d_ff, cfg.horizon * v], Init::Uniform),
            head_b2: add("head.b2".into(), vec![cfg.horizon * v], Init::Zeros),
        };
        Self { htpgm, backbone, specs }
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.0.clone()).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.specs.iter().map(|s| s.1.clone()).collect()
    }

    fn initialize(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let tensors = self
            .specs
            .iter()
            .map(|(_, shape, init)| match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Const(c) => Tensor::full(shape, *c),
                Init::Uniform => {
                    let fan_in = shape[shape.len() - 2] as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shape")
                }
            })
            .collect();
        ParamSet::new(self.names(), tensors).expect("layout names")
    }

    /// Lists every tensor whose name or shape disagrees with this layout.
    pub fn incompatibilities(&self, params: &ParamSet) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, shape, _) in &self.specs {
            match params.get(name) {
                None => problems.push(format!("{name}: missing")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{name}: expected {shape:?}, found {:?}", t.shape()))
                }
                _ => {}
            }
        }
        for name in params.names() {
            if !self.specs.iter().any(|s| &s.0 == name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        problems
    }
}

/// Configuration, layout and parameter values of one forecaster.
#[derive(Debug, Clone)]
pub struct HtvModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamSet,
}

impl HtvModel {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        let params = layout.initialize(rng);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        let problems = layout.incompatibilities(&params);
        if !problems.is_empty() {
            return Err(HtvError::CheckpointIncompatible(problems));
        }
        // reorder into layout order
        let tensors = layout
            .names()
            .iter()
            .map(|n| params.get(n).cloned().expect("checked"))
            .collect();
        let params = ParamSet::new(layout.names(), tensors)?;
        Ok(Self { config, layout, params })
    }

    /// Sets every parameter to `value` except those whose name contains one of
    /// `keep`.
    pub fn fill_params(&mut self, value: f64, keep: &[&str]) {
        for (name, t) in self.params.names.iter().zip(self.params.tensors.iter_mut()) {
            if !keep.iter().any(|k| name.contains(k)) {
                t.data_mut().iter_mut().for_each(|x| *x = value);
            }
        }
    }
}
