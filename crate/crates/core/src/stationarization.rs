//! Per-window series stationarization.
//!
//! Each input window is z-scored per channel with its own mean and biased
//! standard deviation; forecasts are mapped back with the same statistics.

use serde::{Deserialize, Serialize};

use crate::error::{HtvError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel statistics of one input window, in series units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStats {
    pub mu: Vec<f64>,
    /// Floored at the normalization epsilon.
    pub sigma: Vec<f64>,
}

impl StationStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.channels() {
            return Err(HtvError::Dimension(format!(
                "series has {channels} channels, stats have {}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Z-scores `x` ([T, V]) along time. σ is `max(sqrt(biased var), eps)`.
pub fn normalize(x: &Tensor, eps: f64) -> Result<(Tensor, StationStats)> {
    if x.rank() != 2 {
        return Err(HtvError::Dimension(format!(
            "normalize expects [T, V], got {:?}",
            x.shape()
        )));
    }
    let (t, v) = (x.rows(), x.cols());
    if t < 2 {
        return Err(HtvError::WindowTooShort { needed: 2, got: t });
    }
    if !(eps > 0.0) {
        return Err(HtvError::Domain(format!("eps must be positive, got {eps}")));
    }
    let mut mu = vec![0.0; v];
    let mut sigma = vec![0.0; v];
    for c in 0..v {
        let col = x.column(c);
        let m = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|y| (y - m).powi(2)).sum::<f64>() / t as f64;
        mu[c] = m;
        sigma[c] = var.sqrt().max(eps);
    }
    let mut out = x.clone();
    for r in 0..t {
        for c in 0..v {
            out.set(r, c, (x.at(r, c) - mu[c]) / sigma[c]);
        }
    }
    Ok((out, StationStats { mu, sigma }))
}

/// Algebraic inverse of [`normalize`]: y = σ ⊙ y′ + μ. This is what the
/// forecasting pipeline uses.
pub fn denormalize_inverse(y_prime: &Tensor, stats: &StationStats) -> Result<Tensor> {
    stats.check(y_prime.cols())?;
    let mut y = y_prime.clone();
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            y.set(r, c, stats.sigma[c] * y_prime.at(r, c) + stats.mu[c]);
        }
    }
    Ok(y)
}

/// The alternative form y = σ ⊙ (y′ + μ), which shifts before scaling. It does
/// not invert [`normalize`] unless σ = 1; kept for comparison only.
pub fn denormalize_shift_first(y_prime: &Tensor, stats: &StationStats) -> Result<Tensor> {
    stats.check(y_prime.cols())?;
    let mut y = y_prime.clone();
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            y.set(r, c, stats.sigma[c] * (y_prime.at(r, c) + stats.mu[c]));
        }
    }
    Ok(y)
}

/// Maps a raw target window into the normalized space of its input window.
pub fn apply_stats(x: &Tensor, stats: &StationStats) -> Result<Tensor> {
    stats.check(x.cols())?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            out.set(r, c, (x.at(r, c) - stats.mu[c]) / stats.sigma[c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn ramp_channel() {
        let (xp, stats) = normalize(&col(&[1., 2., 3.]), DEFAULT_EPS).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!((stats.mu[0] - 2.0).abs() < 1e-15);
        assert!((stats.sigma[0] - s).abs() < 1e-15);
        for (a, b) in xp.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((xp.data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn constant_channel_hits_eps_floor() {
        let (xp, stats) = normalize(&col(&[5., 5., 5.]), 1e-5).unwrap();
        assert_eq!(xp.data(), &[0., 0., 0.]);
        assert_eq!(stats.sigma[0], 1e-5);
    }

    #[test]
    fn standardized_input_is_fixed_point() {
        let x = col(&[-1., 1., -1., 1.]);
        let (xp, _) = normalize(&x, DEFAULT_EPS).unwrap();
        assert!(xp.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn short_window_rejected() {
        assert!(matches!(
            normalize(&col(&[1.]), DEFAULT_EPS),
            Err(HtvError::WindowTooShort { .. })
        ));
    }

    #[test]
    fn denormalize_examples() {
        let stats = StationStats {
            mu: vec![2.0],
            sigma: vec![3.0],
        };
        assert_eq!(denormalize_shift_first(&col(&[0.]), &stats).unwrap().data(), &[6.]);
        let unit = StationStats {
            mu: vec![0.0],
            sigma: vec![1.0],
        };
        let y = col(&[0.3, -2.0]);
        assert_eq!(denormalize_inverse(&y, &unit).unwrap(), y);
        assert_eq!(denormalize_shift_first(&y, &unit).unwrap(), y);
        assert!(denormalize_inverse(&Tensor::zeros(&[2, 2]), &unit).is_err());
    }

    fn window() -> impl Strategy<Value = Tensor> {
        (2usize..20, 1usize..4).prop_flat_map(|(t, v)| {
            prop::collection::vec(-50.0f64..50.0, t * v).prop_map(move |d| Tensor::new(&[t, v], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip(x in window()) {
            let (xp, stats) = normalize(&x, DEFAULT_EPS).unwrap();
            let back = denormalize_inverse(&xp, &stats).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-9);
            prop_assert!(stats.sigma.iter().all(|&s| s >= DEFAULT_EPS));
        }

        #[test]
        fn affine_equivariance(x in window(), a in 0.1f64..10.0, b in -100.0f64..100.0) {
            let (xp, stats) = normalize(&x, DEFAULT_EPS).unwrap();
            // skip windows near the eps floor, where equivariance is broken by design
            prop_assume!(stats.sigma.iter().all(|&s| s > 1e-3));
            let (yp, _) = normalize(&x.map(|v| a * v + b), DEFAULT_EPS).unwrap();
            prop_assert!(yp.max_abs_diff(&xp) < 1e-8);
        }

        #[test]
        fn zero_mean_unit_std(x in window()) {
            let (xp, stats) = normalize(&x, DEFAULT_EPS).unwrap();
            for c in 0..x.cols() {
                let col = xp.column(c);
                let n = col.len() as f64;
                let m = col.iter().sum::<f64>() / n;
                prop_assert!(m.abs() < 1e-10);
                if stats.sigma[c] > 1e-3 {
                    let var = col.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n;
                    prop_assert!((var.sqrt() - 1.0).abs() < 1e-8);
                }
            }
        }
    }
}
