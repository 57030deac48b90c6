//! Transformer encoder with latent fusion and the one-shot MLP forecaster.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{BackboneIdx, EncoderIdx, ModelConfig};
use crate::tensor::Tensor;

/// Fixed sinusoidal encoding: sin on even feature indices, cos on odd ones.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for j in 0..d {
            let freq = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            pe.set(pos, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Intermediate tensors of one backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneState<'t> {
    pub embedded: Var<'t>,
    pub fused: Var<'t>,
    /// Attention output O of the first encoder layer.
    pub attention_out: Var<'t>,
    /// Per-head attention weights of the first encoder layer, [m, T, T].
    pub attention: Var<'t>,
    pub h: Var<'t>,
}

/// x′·W_value + calendar·W_time + PE.
pub fn embed<'t>(x_prime: Var<'t>, time_features: Var<'t>, p: &[Var<'t>], idx: &BackboneIdx) -> Result<Var<'t>> {
    let t = x_prime.shape()[0];
    let d = p[idx.w_value].shape()[1];
    let pe = x_prime.tape().constant(positional_encoding(t, d));
    x_prime
        .matmul(p[idx.w_value])?
        .add(time_features.matmul(p[idx.w_time])?)?
        .add(pe)
}

/// u = embedded + α·z_sum, followed by multi-head scaled dot-product
/// attention. Returns (O, attention weights [m, T, T]).
///
/// The concat-then-project form con(H_1..H_m)·W_O is computed as
/// Σ_i H_i·W_O^i with W_O stored as [m, d_k, d].
pub fn fused_attention<'t>(
    embedded: Var<'t>,
    z_sum: Option<Var<'t>>,
    alpha: f64,
    p: &[Var<'t>],
    enc: &EncoderIdx,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let u = match z_sum {
        Some(z) if alpha != 0.0 => embedded.add(z.scale(alpha))?,
        _ => embedded,
    };
    let (o, attn) = multi_head_attention(u, p, enc)?;
    Ok((o, attn, u))
}

fn multi_head_attention<'t>(u: Var<'t>, p: &[Var<'t>], enc: &EncoderIdx) -> Result<(Var<'t>, Var<'t>)> {
    let dk = p[enc.wq].shape()[2];
    // [T, d] · [m, d, dk] → [m, T, dk]
    let q = u.matmul(p[enc.wq])?;
    let k = u.matmul(p[enc.wk])?;
    let v = u.matmul(p[enc.wv])?;
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (dk as f64).sqrt());
    let attn = scores.softmax(2)?;
    let heads = attn.matmul(v)?;
    let o = heads.matmul(p[enc.wo])?.sum_axis(0, false)?;
    Ok((o, attn))
}

/// LayerNorm over the feature axis with learnable gain and bias.
pub fn layer_norm<'t>(a: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let mean = a.mean_axis(1, true)?;
    let var = a.variance(1, true, true)?;
    let normed = a.sub(mean)?.div(var.add_scalar(eps).sqrt()?)?;
    normed.mul(gain)?.add(bias)
}

/// h = LayerNorm(O + W₂·relu(W₁·O + b₁) + b₂).
pub fn feed_forward<'t>(o: Var<'t>, p: &[Var<'t>], enc: &EncoderIdx, ln_eps: f64) -> Result<Var<'t>> {
    let inner = o.matmul(p[enc.ffn_w1])?.add(p[enc.ffn_b1])?.relu();
    let out = inner.matmul(p[enc.ffn_w2])?.add(p[enc.ffn_b2])?;
    layer_norm(o.add(out)?, p[enc.ln_gain], p[enc.ln_bias], ln_eps)
}

/// Flattens h and emits all H steps at once: [T·d] → d_ff → [H, V].
pub fn forecast_head<'t>(
    h: Var<'t>,
    p: &[Var<'t>],
    idx: &BackboneIdx,
    horizon: usize,
    channels: usize,
) -> Result<Var<'t>> {
    let flat: usize = h.shape().iter().product();
    h.reshape(&[1, flat])?
        .matmul(p[idx.head_w1])?
        .add(p[idx.head_b1])?
        .relu()
        .matmul(p[idx.head_w2])?
        .add(p[idx.head_b2])?
        .reshape(&[horizon, channels])
}

/// Embedding, fused attention and feed-forward for every encoder layer. The
/// latent sum enters only the first layer.
pub fn encode<'t>(
    tape: &'t Tape,
    x_prime: &Tensor,
    time_features: &Tensor,
    z_sum: Option<Var<'t>>,
    p: &[Var<'t>],
    idx: &BackboneIdx,
    cfg: &ModelConfig,
) -> Result<BackboneState<'t>> {
    let embedded = embed(
        tape.constant(x_prime.clone()),
        tape.constant(time_features.clone()),
        p,
        idx,
    )?;
    let mut first = None;
    let mut x = embedded;
    for (j, enc) in idx.encoders.iter().enumerate() {
        let z = if j == 0 { z_sum } else { None };
        let (o, attn, fused) = fused_attention(x, z, cfg.alpha, p, enc)?;
        if first.is_none() {
            first = Some((o, attn, fused));
        }
        x = feed_forward(o, p, enc, cfg.ln_eps)?;
    }
    let (attention_out, attention, fused) = first.expect("at least one encoder layer");
    Ok(BackboneState {
        embedded,
        fused,
        attention_out,
        attention,
        h: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HtvModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(t: usize, d: usize, m: usize) -> HtvModel {
        let cfg = ModelConfig::new(t, 3, 2, d, m, 1);
        HtvModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn wave(t: usize, c: usize, phase: f64) -> Tensor {
        Tensor::new(&[t, c], (0..t * c).map(|i| (i as f64 * 0.7 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn positional_encoding_at_zero() {
        let pe = positional_encoding(3, 6);
        assert_eq!(pe.row(0), &[0., 1., 0., 1., 0., 1.]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn embedding_decomposes() {
        let mut m = model(5, 4, 2);
        m.fill_params(0.0, &[]);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let e = embed(
            tape.constant(wave(5, 2, 0.)),
            tape.constant(wave(5, 4, 1.)),
            &p,
            &m.layout.backbone,
        )
        .unwrap();
        assert_eq!(e.value(), positional_encoding(5, 4));

        let m = model(5, 4, 2);
        let p = m.params.register(&tape);
        let zeros_tf = tape.constant(Tensor::zeros(&[5, 4]));
        let pe = positional_encoding(5, 4);
        let x = wave(5, 2, 0.3);
        let e1 = embed(tape.constant(x.clone()), zeros_tf, &p, &m.layout.backbone)
            .unwrap()
            .value();
        let e2 = embed(tape.constant(x.map(|v| 2.0 * v)), zeros_tf, &p, &m.layout.backbone)
            .unwrap()
            .value();
        for i in 0..e1.len() {
            let (a, b) = (e1.data()[i] - pe.data()[i], e2.data()[i] - pe.data()[i]);
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_count_mismatch_is_dimension_error() {
        let m = model(5, 4, 2);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let r = embed(
            tape.constant(wave(5, 2, 0.)),
            tape.constant(wave(5, 3, 0.)),
            &p,
            &m.layout.backbone,
        );
        assert!(matches!(r, Err(crate::HtvError::Dimension(_))));
    }

    #[test]
    fn alpha_zero_ignores_latents() {
        let m = model(6, 4, 2);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let emb = tape.constant(wave(6, 4, 0.));
        let enc = &m.layout.backbone.encoders[0];
        let (a, _, _) = fused_attention(emb, Some(tape.constant(wave(6, 4, 5.))), 0.0, &p, enc).unwrap();
        let (b, _, _) =
            fused_attention(emb, Some(tape.constant(wave(6, 4, -9.).map(|x| 1e6 * x))), 0.0, &p, enc).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let m = model(7, 4, 2);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let (_, attn, _) = fused_attention(
            tape.constant(wave(7, 4, 0.)),
            Some(tape.constant(wave(7, 4, 1.))),
            0.5,
            &p,
            &m.layout.backbone.encoders[0],
        )
        .unwrap();
        let a = attn.value();
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention() {
        let m = model(2, 4, 2);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let enc = &m.layout.backbone.encoders[0];
        let u = tape.constant(wave(1, 4, 0.2));
        let (o, attn, _) = fused_attention(u, None, 0.0, &p, enc).unwrap();
        assert_eq!(attn.value().data(), &[1.0, 1.0]);
        let expected = u
            .matmul(p[enc.wv])
            .unwrap()
            .matmul(p[enc.wo])
            .unwrap()
            .sum_axis(0, false)
            .unwrap();
        assert!(o.value().max_abs_diff(&expected.value()) < 1e-15);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut cfg = ModelConfig::new(5, 1, 1, 3, 1, 1);
        cfg.d_k = 3;
        let mut m = HtvModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        m.fill_params(0.0, &["wv", "wo"]);
        *m.params.get_mut("backbone.enc0.wo").unwrap() = Tensor::eye(3).reshape(&[1, 3, 3]).unwrap();
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let enc = &m.layout.backbone.encoders[0];
        let u = tape.constant(wave(5, 3, 0.4));
        let (o, _, _) = fused_attention(u, None, 0.0, &p, enc).unwrap();
        let v = u.matmul(p[enc.wv]).unwrap().reshape(&[5, 3]).unwrap().value();
        let o = o.value();
        for j in 0..3 {
            let mean = v.column(j).iter().sum::<f64>() / 5.0;
            for t in 0..5 {
                assert!((o.at(t, j) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn head_permutation_symmetry() {
        let m = model(6, 4, 2);
        let mut swapped = m.clone();
        for name in ["wq", "wk", "wv", "wo"] {
            let t = m.params.get(&format!("backbone.enc0.{name}")).unwrap();
            let half = t.len() / 2;
            let mut d = t.data()[half..].to_vec();
            d.extend_from_slice(&t.data()[..half]);
            *swapped.params.get_mut(&format!("backbone.enc0.{name}")).unwrap() = Tensor::new(t.shape(), d).unwrap();
        }
        let tape = Tape::new();
        let u = tape.constant(wave(6, 4, 0.9));
        let pa = m.params.register(&tape);
        let pb = swapped.params.register(&tape);
        let enc = &m.layout.backbone.encoders[0];
        let (a, _, _) = fused_attention(u, None, 0.0, &pa, enc).unwrap();
        let (b, _, _) = fused_attention(u, None, 0.0, &pb, enc).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-14);
    }

    #[test]
    fn residual_only_feed_forward_is_layer_norm() {
        let mut m = model(4, 4, 2);
        m.fill_params(0.0, &["ln_gain"]);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let o = tape.constant(wave(4, 4, 0.1).map(|x| 3.0 * x + 1.0));
        let h = feed_forward(o, &p, &m.layout.backbone.encoders[0], 1e-12)
            .unwrap()
            .value();
        for r in 0..4 {
            let row = h.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn head_shapes_and_bias() {
        for (d, heads) in [(4, 1), (4, 2), (6, 3)] {
            let m = model(5, d, heads);
            let tape = Tape::new();
            let p = m.params.register(&tape);
            let y = forecast_head(tape.constant(wave(5, d, 0.)), &p, &m.layout.backbone, 3, 2).unwrap();
            assert_eq!(y.shape(), vec![3, 2]);
        }
        let mut m = model(5, 4, 2);
        m.fill_params(0.0, &["head.b2"]);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let y = forecast_head(tape.constant(wave(5, 4, 0.)), &p, &m.layout.backbone, 3, 2).unwrap();
        assert_eq!(y.value().data(), m.params.get("head.b2").unwrap().data());
    }

    #[test]
    fn head_selects_coordinate() {
        // H=1, V=1: route h[2, 1] through one hidden unit with unit weights.
        let mut cfg = ModelConfig::new(3, 1, 1, 2, 1, 1);
        cfg.d_ff = 2;
        let mut m = HtvModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.fill_params(0.0, &[]);
        m.params.get_mut("head.w1").unwrap().set(2 * 2 + 1, 0, 1.0);
        m.params.get_mut("head.w2").unwrap().set(0, 0, 1.0);
        let tape = Tape::new();
        let p = m.params.register(&tape);
        let h = Tensor::new(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let y = forecast_head(tape.constant(h), &p, &m.layout.backbone, 1, 1).unwrap();
        assert_eq!(y.value().data(), &[0.6]);
    }
}
