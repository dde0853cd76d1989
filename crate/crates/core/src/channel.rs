//! Block-fading multi-antenna multiple-access channel.
//!
//! Entry `h_mk = g·e^{jφ}` links device `k` to antenna `m`. The receiver works
//! with the real form `[Re(Hᶜ); Im(Hᶜ)]` of size `2M × K`, and the received
//! block is `Y = H·X + Z` with i.i.d. `N(0, σ_z²)` noise on every real entry.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which quantity follows the exponential law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingLaw {
    /// `|h|² ~ Exp` (Rayleigh amplitude).
    PowerGain,
    /// `|h| ~ Exp`.
    Amplitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub antennas: usize,
    pub devices: usize,
    /// Linear `P / σ_z²`.
    pub snr: f64,
    /// Per-dimension transmit power `P`.
    pub power: f64,
    pub fading_law: FadingLaw,
    /// Mean of the exponential law (numpy `scale`).
    pub fading_scale: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            antennas: 30,
            devices: 30,
            snr: 10.0,
            power: 1.0,
            fading_law: FadingLaw::PowerGain,
            fading_scale: 5.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.devices == 0 {
            return Err(Error::config("channel needs at least one antenna and one device"));
        }
        for (name, v) in [
            ("snr", self.snr),
            ("power", self.power),
            ("fading_scale", self.fading_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("channel.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        self.power / self.snr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `(re, im)` pairs, `M × K`.
    pub h_complex: DMatrix<(f64, f64)>,
    /// `2M × K`: real parts over imaginary parts.
    pub h_real: DMatrix<f64>,
}

impl ChannelRealization {
    pub fn from_complex(h_complex: DMatrix<(f64, f64)>) -> Self {
        let (m, k) = h_complex.shape();
        let h_real = DMatrix::from_fn(2 * m, k, |r, c| {
            if r < m {
                h_complex[(r, c)].0
            } else {
                h_complex[(r - m, c)].1
            }
        });
        Self { h_complex, h_real }
    }

    /// Realization given directly in real form (no complex view).
    pub fn from_real(h_real: DMatrix<f64>) -> Result<Self> {
        if !h_real.nrows().is_multiple_of(2) {
            return Err(Error::config("real channel matrix needs an even number of rows"));
        }
        let m = h_real.nrows() / 2;
        let h_complex = DMatrix::from_fn(m, h_real.ncols(), |r, c| (h_real[(r, c)], h_real[(r + m, c)]));
        Ok(Self { h_complex, h_real })
    }

    pub fn antennas(&self) -> usize {
        self.h_complex.nrows()
    }

    pub fn devices(&self) -> usize {
        self.h_complex.ncols()
    }
}

pub fn sample_channel<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> Result<ChannelRealization> {
    cfg.validate()?;
    let exp = Exp::new(1.0 / cfg.fading_scale).map_err(|e| Error::config(e.to_string()))?;
    let mut h = DMatrix::from_element(cfg.antennas, cfg.devices, (0.0, 0.0));
    // column-major fill keeps the draw order fixed: device by device
    for k in 0..cfg.devices {
        for m in 0..cfg.antennas {
            let e: f64 = exp.sample(rng);
            let gain = match cfg.fading_law {
                FadingLaw::PowerGain => e.sqrt(),
                FadingLaw::Amplitude => e,
            };
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            h[(m, k)] = (gain * phase.cos(), gain * phase.sin());
        }
    }
    Ok(ChannelRealization::from_complex(h))
}

/// `Y = H·X + Z` where `X` is `K × s` and `Z` has variance `noise_var`.
pub fn propagate<R: Rng + ?Sized>(
    h: &ChannelRealization,
    x: &DMatrix<f64>,
    noise_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if x.nrows() != h.devices() {
        return Err(Error::dim("transmit matrix rows", h.devices(), x.nrows()));
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::config(format!(
            "noise variance must be non-negative, got {noise_var}"
        )));
    }
    let mut y = &h.h_real * x;
    if noise_var > 0.0 {
        let normal = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::config(e.to_string()))?;
        for v in y.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(y)
}

/// Transmit rows stacked into a `K × s` matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = rows.len();
    let s = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != s) {
        return Err(Error::dim("transmit row length", s, bad.len()));
    }
    Ok(DMatrix::from_fn(k, s, |r, c| rows[r][c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SimRng;
    use rand::SeedableRng;

    #[test]
    fn real_form_stacks_re_over_im() {
        let hc = DMatrix::from_element(1, 1, (1.0, 2.0));
        let h = ChannelRealization::from_complex(hc);
        assert_eq!(h.h_real, DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        let back = ChannelRealization::from_real(h.h_real.clone()).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn noiseless_single_device() {
        let h = ChannelRealization::from_real(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let x = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
        let mut rng = SimRng::seed_from_u64(0);
        let y = propagate(&h, &x, 0.0, &mut rng).unwrap();
        assert_eq!(y.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, -1.0, 2.0]);
        assert!(y.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn superposition_of_two_devices() {
        let h = ChannelRealization::from_real(DMatrix::from_row_slice(
            4,
            2,
            &[0.3, -1.0, 0.7, 0.2, -0.4, 0.9, 1.1, 0.5],
        ))
        .unwrap();
        let x1 = [1.0, 2.0];
        let x2 = [-0.5, 0.25];
        let x = stack_rows(&[x1.to_vec(), x2.to_vec()]).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        let y = propagate(&h, &x, 0.0, &mut rng).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                let want = h.h_real[(r, 0)] * x1[c] + h.h_real[(r, 1)] * x2[c];
                assert!((y[(r, c)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = ChannelConfig {
            antennas: 2,
            devices: 3,
            ..Default::default()
        };
        let mut rng = SimRng::seed_from_u64(0);
        let h = sample_channel(&cfg, &mut rng).unwrap();
        assert_eq!(h.h_real.shape(), (4, 3));
        let x = DMatrix::zeros(2, 5);
        assert!(propagate(&h, &x, 0.1, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_realization() {
        let cfg = ChannelConfig::default();
        let a = sample_channel(&cfg, &mut SimRng::seed_from_u64(9)).unwrap();
        let b = sample_channel(&cfg, &mut SimRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config() {
        let cfg = ChannelConfig {
            snr: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
