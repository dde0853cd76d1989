//! Device-side transmit pipeline: normalize, dither-quantize, scale.

use crate::lattice::{DitherVector, LatticeSpec};
use crate::{Error, Result};

/// Standard deviation substituted for constant updates.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub device_id: usize,
    pub delta_w: Vec<f64>,
}

/// Zero-mean, unit-variance update plus the `(mean, std)` side information
/// the device reports to the server over an error-free link.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedUpdate {
    pub w_hat: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl NormalizedUpdate {
    /// Stand-in for a constant update: all-zero `w_hat`, `std = SIGMA_FLOOR`.
    pub fn degenerate(mean: f64, len: usize) -> Self {
        Self {
            w_hat: vec![0.0; len],
            mean,
            std: SIGMA_FLOOR,
        }
    }

    /// `σ·ŵ + ϑ·1`.
    pub fn reconstruct(&self) -> Vec<f64> {
        self.w_hat.iter().map(|v| self.std * v + self.mean).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmitSignal {
    pub x: Vec<f64>,
    pub quantized_point: Vec<f64>,
    pub dither: DitherVector,
}

/// Normalize with the sample mean and population standard deviation.
pub fn normalize_update(u: &LocalUpdate) -> Result<NormalizedUpdate> {
    let s = u.delta_w.len();
    if s < 2 {
        return Err(Error::config(format!("update length must be at least 2, got {s}")));
    }
    if u.delta_w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local update"));
    }
    let mean = u.delta_w.iter().sum::<f64>() / s as f64;
    let var = u.delta_w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
    let std = var.sqrt();
    if std == 0.0 || u.delta_w.iter().all(|&v| v == u.delta_w[0]) {
        return Err(Error::DegenerateUpdate {
            len: s,
            value: u.delta_w[0],
        });
    }
    Ok(NormalizedUpdate {
        w_hat: u.delta_w.iter().map(|v| (v - mean) / std).collect(),
        mean,
        std,
    })
}

/// `Q_Λ(ŵ + d)` block by block.
pub fn dithered_quantize(nu: &NormalizedUpdate, lattice: &LatticeSpec, dither: &DitherVector) -> Result<Vec<f64>> {
    if dither.len() != nu.w_hat.len() {
        return Err(Error::dim("dither length", nu.w_hat.len(), dither.len()));
    }
    if dither.block_dim != lattice.block_dim() {
        return Err(Error::dim(
            "dither block dimension",
            lattice.block_dim(),
            dither.block_dim,
        ));
    }
    let shifted: Vec<f64> = nu.w_hat.iter().zip(&dither.values).map(|(w, d)| w + d).collect();
    lattice.quantize(&shifted)
}

/// Amplitude gain `√(P / (1 + 2σ_q²))`.
pub fn transmit_gain(power: f64, second_moment: f64) -> f64 {
    (power / (1.0 + 2.0 * second_moment)).sqrt()
}

pub fn scale_for_transmit(
    quantized_point: Vec<f64>,
    dither: DitherVector,
    power: f64,
    second_moment: f64,
) -> Result<TransmitSignal> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::config(format!("transmit power must be positive, got {power}")));
    }
    let gain = transmit_gain(power, second_moment);
    Ok(TransmitSignal {
        x: quantized_point.iter().map(|v| gain * v).collect(),
        quantized_point,
        dither,
    })
}

/// Full device pipeline for an already normalized update.
pub fn encode(
    nu: &NormalizedUpdate,
    lattice: &LatticeSpec,
    dither: DitherVector,
    power: f64,
    second_moment: f64,
) -> Result<TransmitSignal> {
    let point = dithered_quantize(nu, lattice, &dither)?;
    scale_for_transmit(point, dither, power, second_moment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SimRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normalize_small_example() {
        let nu = normalize_update(&LocalUpdate {
            device_id: 0,
            delta_w: vec![1.0, 2.0, 3.0],
        })
        .unwrap();
        assert!((nu.mean - 2.0).abs() < 1e-15);
        assert!((nu.std.powi(2) - 2.0 / 3.0).abs() < 1e-15);
        let r = 1.5f64.sqrt();
        for (got, want) in nu.w_hat.iter().zip([-r, 0.0, r]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_update_is_degenerate() {
        let err = normalize_update(&LocalUpdate {
            device_id: 1,
            delta_w: vec![0.3; 5],
        })
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateUpdate { len: 5, .. }));
        let nu = NormalizedUpdate::degenerate(0.3, 5);
        assert_eq!(nu.std, SIGMA_FLOOR);
        assert!(nu.w_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_update_rejected() {
        assert!(normalize_update(&LocalUpdate {
            device_id: 0,
            delta_w: vec![1.0]
        })
        .is_err());
    }

    #[test]
    fn gaussian_update_moments_and_roundtrip() {
        let mut rng = SimRng::seed_from_u64(11);
        let delta_w: Vec<f64> = (0..1000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                3.0 + 0.2 * z
            })
            .collect();
        let nu = normalize_update(&LocalUpdate {
            device_id: 0,
            delta_w: delta_w.clone(),
        })
        .unwrap();
        let s = nu.w_hat.len() as f64;
        let m = nu.w_hat.iter().sum::<f64>() / s;
        let v = nu.w_hat.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s;
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-9);
        for (a, b) in nu.reconstruct().iter().zip(&delta_w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_identity_example() {
        let l = LatticeSpec::identity(1.0).unwrap();
        let nu = NormalizedUpdate {
            w_hat: vec![0.2],
            mean: 0.0,
            std: 1.0,
        };
        let d = DitherVector {
            values: vec![0.4],
            block_dim: 1,
        };
        assert_eq!(dithered_quantize(&nu, &l, &d).unwrap(), vec![1.0]);
    }

    #[test]
    fn lattice_point_is_fixed_with_zero_dither() {
        let l = LatticeSpec::e8(0.5).unwrap();
        let w: Vec<f64> = [
            1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, -0.5, -0.5,
        ]
        .iter()
        .map(|v| v * 0.5)
        .collect();
        assert!(l.contains(&w, 1e-9));
        let nu = NormalizedUpdate {
            w_hat: w.clone(),
            mean: 0.0,
            std: 1.0,
        };
        let d = DitherVector {
            values: vec![0.0; 16],
            block_dim: 8,
        };
        assert_eq!(dithered_quantize(&nu, &l, &d).unwrap(), w);
    }

    #[test]
    fn dither_mismatch_rejected() {
        let l = LatticeSpec::hexagonal(1.0).unwrap();
        let nu = NormalizedUpdate {
            w_hat: vec![0.0; 4],
            mean: 0.0,
            std: 1.0,
        };
        let d = DitherVector {
            values: vec![0.0; 2],
            block_dim: 2,
        };
        assert!(dithered_quantize(&nu, &l, &d).is_err());
    }

    #[test]
    fn transmit_gain_examples() {
        assert!((transmit_gain(1.0, 0.5) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(transmit_gain(4.0, 0.0), 2.0);
        let d = DitherVector {
            values: vec![0.0; 2],
            block_dim: 1,
        };
        let t = scale_for_transmit(vec![1.0, -2.0], d.clone(), 4.0, 0.0).unwrap();
        assert_eq!(t.x, vec![2.0, -4.0]);
        assert!(scale_for_transmit(vec![1.0, 1.0], d, 0.0, 0.1).is_err());
    }
}
