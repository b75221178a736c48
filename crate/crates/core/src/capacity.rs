//! Log-distance path loss and the resulting per-round uplink bit budget.
//!
//! `PL = A + 10 γ log₁₀(d/d₀) + Z` with `A = 20 log₁₀(4π d₀ f_c / c)` and
//! `Z ~ N(0, σ²)` in dB. The SNR is `P_S - PL` and a device can send
//! `T_up W log₂(1 + SNR_lin)` bits per round.

use alloc::vec::Vec;
use core::f64::consts::{LN_10, PI};

use crate::rng::{derive_seed, tag, Stream};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum CapacityError {
    #[error("distance {distance} m is below the reference distance {reference} m")]
    TooClose { distance: f64, reference: f64 },
    #[error("distance range [{0}, {1}] m is empty")]
    EmptyRange(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossModel {
    pub carrier_hz: f64,
    pub exponent: f64,
    pub reference_m: f64,
    /// Standard deviation of the shadowing term, in dB.
    pub shadow_sigma_db: f64,
    pub bandwidth_hz: f64,
    pub slot_s: f64,
    /// `P_S` in dB.
    pub scale_db: f64,
}

impl Default for PathLossModel {
    /// 2.4 GHz, exponent 4, `d₀ = 100` m, `σ² = 8.7` dB², 1 MHz, 1 ms, with
    /// `P_S` set for a 10 dB mean SNR over distances uniform in 100–1000 m.
    fn default() -> Self {
        let mut m = Self {
            carrier_hz: 2.4e9,
            exponent: 4.0,
            reference_m: 100.0,
            shadow_sigma_db: libm::sqrt(8.7),
            bandwidth_hz: 1e6,
            slot_s: 1e-3,
            scale_db: 0.0,
        };
        m.scale_db = m.calibrated_scale(10.0, 100.0, 1000.0).expect("valid default range");
        m
    }
}

impl PathLossModel {
    pub fn intercept_db(&self) -> f64 {
        20.0 * libm::log10(4.0 * PI * self.reference_m * self.carrier_hz / SPEED_OF_LIGHT)
    }

    pub fn path_loss_db(&self, distance_m: f64, shadow_db: f64) -> Result<f64, CapacityError> {
        if distance_m < self.reference_m {
            return Err(CapacityError::TooClose { distance: distance_m, reference: self.reference_m });
        }
        Ok(self.intercept_db() + 10.0 * self.exponent * libm::log10(distance_m / self.reference_m) + shadow_db)
    }

    /// Bits per round for a given distance and shadowing draw.
    pub fn capacity_bits(&self, distance_m: f64, shadow_db: f64) -> Result<f64, CapacityError> {
        let snr_db = self.scale_db - self.path_loss_db(distance_m, shadow_db)?;
        let snr = libm::pow(10.0, snr_db / 10.0);
        Ok(self.slot_s * self.bandwidth_hz * libm::log2(1.0 + snr))
    }

    /// Draws the shadowing term from `stream` and returns whole bits.
    pub fn capacity_from_pathloss(&self, distance_m: f64, stream: &mut Stream) -> Result<usize, CapacityError> {
        let z = self.shadow_sigma_db * stream.gaussian();
        Ok(self.capacity_bits(distance_m, z)? as usize)
    }

    /// `P_S` such that the mean SNR without shadowing, over distances uniform
    /// on `[d_min, d_max]`, equals `mean_snr_db`.
    pub fn calibrated_scale(&self, mean_snr_db: f64, d_min: f64, d_max: f64) -> Result<f64, CapacityError> {
        if !(d_max > d_min) {
            return Err(CapacityError::EmptyRange(d_min, d_max));
        }
        if d_min < self.reference_m {
            return Err(CapacityError::TooClose { distance: d_min, reference: self.reference_m });
        }
        // E[log10(d/d0)] for d ~ U[a, b].
        let d0 = self.reference_m;
        let antiderivative = |d: f64| d * (libm::log(d / d0) - 1.0);
        let mean_log10 = (antiderivative(d_max) - antiderivative(d_min)) / ((d_max - d_min) * LN_10);
        Ok(mean_snr_db + self.intercept_db() + 10.0 * self.exponent * mean_log10)
    }

    /// Places `devices` uniformly in `[d_min, d_max]` and returns each one's
    /// bit budget, one shadowing draw per device.
    pub fn place_devices(
        &self,
        devices: usize,
        d_min: f64,
        d_max: f64,
        seed: u64,
    ) -> Result<Vec<usize>, CapacityError> {
        if !(d_max > d_min) {
            return Err(CapacityError::EmptyRange(d_min, d_max));
        }
        (0..devices)
            .map(|k| {
                let mut s = Stream::new(derive_seed(seed, tag::PLACEMENT, k as u64, 0, 0));
                let d = d_min + (d_max - d_min) * s.uniform();
                self.capacity_from_pathloss(d, &mut s)
            })
            .collect()
    }
}
