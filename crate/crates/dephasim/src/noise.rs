//! Synthetic stationary detuning processes with known spectra.
//!
//! Both processes here have the exponential autocorrelation
//! `<delta(0) delta(tau)> = sigma^2 exp(-|tau| / tau_c)` and therefore the
//! two-sided Lorentzian spectral density
//!
//! ```text
//! G(f) = 2 sigma^2 tau_c / (1 + (2 pi f tau_c)^2)
//! ```
//!
//! (in rad^2/s^2 per Hz, so integral over the full frequency axis is
//! sigma^2). They serve as ground truth for the spectral estimator, the
//! overlap-integral predictions, and the stochastic Bloch evolution: same
//! spectrum, different higher-order statistics, so agreement across both is
//! evidence the pipeline depends on the spectrum alone in the Gaussian
//! regime.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A synthetic detuning process, sampled exactly at uniform steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "snake_case")]
pub enum SyntheticNoise {
    /// Gaussian diffusion with exponential memory. Discretized with the
    /// exact one-step transition, so sampled statistics are correct at any
    /// step size.
    OrnsteinUhlenbeck { sigma_rad_s: f64, tau_c_s: f64 },
    /// Piecewise-constant value redrawn from N(0, sigma^2) at Poisson times
    /// with mean rate `rate_hz`. Non-Gaussian as a process (finite samples
    /// mix discrete jump counts) but with the same Lorentzian spectrum as
    /// [`SyntheticNoise::OrnsteinUhlenbeck`] for tau_c = 1 / rate.
    PoissonRedraw { sigma_rad_s: f64, rate_hz: f64 },
}

impl SyntheticNoise {
    pub fn variance(&self) -> f64 {
        match self {
            Self::OrnsteinUhlenbeck { sigma_rad_s, .. }
            | Self::PoissonRedraw { sigma_rad_s, .. } => sigma_rad_s * sigma_rad_s,
        }
    }

    /// Correlation time in seconds.
    pub fn correlation_time(&self) -> f64 {
        match self {
            Self::OrnsteinUhlenbeck { tau_c_s, .. } => *tau_c_s,
            Self::PoissonRedraw { rate_hz, .. } => 1.0 / rate_hz,
        }
    }

    /// (G(0), corner frequency) of the two-sided Lorentzian spectrum:
    /// G(0) = 2 sigma^2 tau_c in rad^2/s, corner f_c = 1 / (2 pi tau_c) Hz.
    pub fn lorentzian_params(&self) -> (f64, f64) {
        let tau_c = self.correlation_time();
        (2.0 * self.variance() * tau_c, 1.0 / (2.0 * PI * tau_c))
    }

    /// Two-sided spectral density at frequency `f` (Hz), in rad^2/s.
    pub fn psd(&self, f: f64) -> f64 {
        let (g0, fc) = self.lorentzian_params();
        g0 / (1.0 + (f / fc).powi(2))
    }

    /// One stationary realization sampled at `n_steps` uniform steps of
    /// `dt` seconds (values at t = 0, dt, ..., (n_steps - 1) dt), rad/s.
    pub fn sample_trace(
        &self,
        dt: f64,
        n_steps: usize,
        rng: &mut (impl Rng + ?Sized),
    ) -> Vec<f64> {
        assert!(dt > 0.0 && n_steps > 0, "need dt > 0 and n_steps > 0");
        let mut out = Vec::with_capacity(n_steps);
        match *self {
            Self::OrnsteinUhlenbeck {
                sigma_rad_s,
                tau_c_s,
            } => {
                let normal = Normal::new(0.0, 1.0).unwrap();
                let rho = (-dt / tau_c_s).exp();
                let kick = sigma_rad_s * (1.0 - rho * rho).sqrt();
                let mut x = sigma_rad_s * normal.sample(rng);
                out.push(x);
                for _ in 1..n_steps {
                    x = rho * x + kick * normal.sample(rng);
                    out.push(x);
                }
            }
            Self::PoissonRedraw { sigma_rad_s, rate_hz } => {
                // Redraw with the exact per-step survival probability, so the
                // sampled autocorrelation is exp(-rate * |k| dt) at any dt.
                let normal = Normal::new(0.0, sigma_rad_s).unwrap();
                let survive = (-rate_hz * dt).exp();
                let mut x = normal.sample(rng);
                out.push(x);
                for _ in 1..n_steps {
                    if rng.random::<f64>() > survive {
                        x = normal.sample(rng);
                    }
                    out.push(x);
                }
            }
        }
        out
    }
}

/// Exact coherence of free evolution under a Gaussian process with
/// exponential memory (sigma in rad/s, times in s):
///
/// ```text
/// C(t) = exp(-sigma^2 tau_c^2 (t/tau_c - 1 + e^{-t/tau_c}))
/// ```
///
/// Limits: quasi-static `exp(-sigma^2 t^2 / 2)` for t << tau_c, and
/// motionally narrowed `exp(-sigma^2 tau_c t)` for t >> tau_c.
pub fn gaussian_memory_coherence(sigma_rad_s: f64, tau_c_s: f64, t: f64) -> f64 {
    let x = t / tau_c_s;
    // Expanded form for small x to avoid cancellation in x - 1 + e^{-x}.
    let bracket = if x < 1e-4 {
        x * x / 2.0 - x * x * x / 6.0
    } else {
        x - 1.0 + (-x).exp()
    };
    (-sigma_rad_s * sigma_rad_s * tau_c_s * tau_c_s * bracket).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lagged_autocorr(traces: &[Vec<f64>], lag: usize) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut count = 0.0;
        for tr in traces {
            for i in 0..tr.len() - lag {
                num += tr[i] * tr[i + lag];
                count += 1.0;
            }
            for &v in tr {
                den += v * v;
            }
        }
        (num / count) / (den / traces.iter().map(|t| t.len() as f64).sum::<f64>())
    }

    #[test]
    fn ou_autocorrelation_is_exponential() {
        let noise = SyntheticNoise::OrnsteinUhlenbeck {
            sigma_rad_s: 50.0,
            tau_c_s: 0.02,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dt = 0.002;
        let traces: Vec<Vec<f64>> = (0..200).map(|_| noise.sample_trace(dt, 400, &mut rng)).collect();
        for lag in [1usize, 5, 10] {
            let expect = (-(lag as f64) * dt / 0.02).exp();
            let got = lagged_autocorr(&traces, lag);
            assert!(
                (got - expect).abs() < 0.03,
                "lag {lag}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn redraw_autocorrelation_matches_ou() {
        let noise = SyntheticNoise::PoissonRedraw {
            sigma_rad_s: 50.0,
            rate_hz: 50.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dt = 0.002;
        let traces: Vec<Vec<f64>> = (0..200).map(|_| noise.sample_trace(dt, 400, &mut rng)).collect();
        for lag in [1usize, 5, 10] {
            let expect = (-(lag as f64) * dt * 50.0).exp();
            let got = lagged_autocorr(&traces, lag);
            assert!(
                (got - expect).abs() < 0.04,
                "lag {lag}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn stationary_variance_is_sigma_squared() {
        for noise in [
            SyntheticNoise::OrnsteinUhlenbeck {
                sigma_rad_s: 30.0,
                tau_c_s: 0.01,
            },
            SyntheticNoise::PoissonRedraw {
                sigma_rad_s: 30.0,
                rate_hz: 100.0,
            },
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut sum_sq = 0.0;
            let mut n = 0.0;
            for _ in 0..300 {
                for v in noise.sample_trace(0.001, 200, &mut rng) {
                    sum_sq += v * v;
                    n += 1.0;
                }
            }
            let var = sum_sq / n;
            assert_relative_eq!(var, 900.0, max_relative = 0.05);
        }
    }

    #[test]
    fn psd_integrates_to_variance() {
        let noise = SyntheticNoise::OrnsteinUhlenbeck {
            sigma_rad_s: 40.0,
            tau_c_s: 0.005,
        };
        // integral over full axis = 2 * integral over f >= 0; Lorentzian
        // tail beyond f_max adds g0 * fc * (pi/2 - atan(fmax/fc)).
        let (g0, fc) = noise.lorentzian_params();
        let n = 200_000;
        let f_max = 2.0e5;
        let df = f_max / n as f64;
        let mut half: f64 = (1..n)
            .map(|i| noise.psd(i as f64 * df))
            .sum::<f64>()
            * df;
        half += 0.5 * (noise.psd(0.0) + noise.psd(f_max)) * df;
        let tail = g0 * fc * (PI / 2.0 - (f_max / fc).atan());
        assert_relative_eq!(2.0 * (half + tail), 1600.0, max_relative = 1e-3);
    }

    #[test]
    fn coherence_limits() {
        let (sigma, tau_c) = (100.0, 0.01);
        // Quasi-static limit.
        let t = 1e-4;
        assert_relative_eq!(
            gaussian_memory_coherence(sigma, tau_c, t),
            (-sigma * sigma * t * t / 2.0).exp(),
            max_relative = 1e-2
        );
        // Narrowed limit: ln C ~ -sigma^2 tau_c t for t >> tau_c.
        let t = 0.5;
        let got = gaussian_memory_coherence(sigma, tau_c, t).ln();
        let expect = -sigma * sigma * tau_c * (t - tau_c);
        assert_relative_eq!(got, expect, max_relative = 1e-6);
    }
}
