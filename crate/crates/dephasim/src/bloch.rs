//! Stochastic Bloch-vector evolution: brute-force ground truth for the
//! overlap-integral predictions.
//!
//! One realization evolves a unit Bloch vector under the rotating-frame
//! equation dM/dt = f(t) x M with effective field
//!
//! ```text
//! f(t) = (Omega cos phi, Omega sin phi, delta(t))   [rad/s]
//! ```
//!
//! where Omega = 2 pi f0 is the drive and delta(t) a sampled detuning trace.
//! The detuning is piecewise constant over trace steps, so each step is an
//! exact axis-angle rotation (no integration error beyond the sampling of
//! delta itself); the norm is preserved to rounding.
//!
//! Ensemble coherence is the modulus of the complex mean of the two
//! components transverse to the relevant axis: (u, v) for free evolution and
//! pulse trains (transverse to z), (u, w) for a drive about the y axis. The
//! modulus removes the deterministic rotation common to all realizations and
//! keeps only the loss of phase alignment across the ensemble.

use crate::error::{Error, Result};
use crate::numeric::{linear_fit, LinearFit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Unit Bloch vector (u, v, w) = (x, y, z) components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl BlochState {
    /// Equal superposition pointing along +x, the standard initial state.
    pub fn along_x() -> Self {
        Self { u: 1.0, v: 0.0, w: 0.0 }
    }

    pub fn norm(&self) -> f64 {
        (self.u * self.u + self.v * self.v + self.w * self.w).sqrt()
    }

    /// Exact rotation around `axis` (need not be normalized) by
    /// `angle = |axis| * dt` when used for a time step; here the caller
    /// passes the full rotation vector (rad).
    pub fn rotate(&mut self, rx: f64, ry: f64, rz: f64) {
        let angle = (rx * rx + ry * ry + rz * rz).sqrt();
        if angle < 1e-300 {
            return;
        }
        let (nx, ny, nz) = (rx / angle, ry / angle, rz / angle);
        let (s, c) = angle.sin_cos();
        let dot = nx * self.u + ny * self.v + nz * self.w;
        let (cx, cy, cz) = (
            ny * self.w - nz * self.v,
            nz * self.u - nx * self.w,
            nx * self.v - ny * self.u,
        );
        self.u = self.u * c + cx * s + nx * dot * (1.0 - c);
        self.v = self.v * c + cy * s + ny * dot * (1.0 - c);
        self.w = self.w * c + cz * s + nz * dot * (1.0 - c);
    }

    /// Instantaneous rotation by `area` radians about the equatorial axis at
    /// `phase` (0 = x, pi/2 = y): an ideal control pulse.
    pub fn apply_pulse(&mut self, phase: f64, area: f64) {
        let (s, c) = phase.sin_cos();
        self.rotate(c * area, s * area, 0.0);
    }
}

/// Evolve one realization under a constant resonant drive and a sampled
/// detuning trace, recording the state after each step count listed in
/// `checkpoint_steps` (sorted ascending; 0 records the initial state).
/// `delta` must cover the largest checkpoint.
pub fn evolve_with_drive(
    delta: &[f64],
    dt: f64,
    rabi_hz: f64,
    drive_phase: f64,
    initial: BlochState,
    checkpoint_steps: &[usize],
) -> Result<Vec<BlochState>> {
    validate_checkpoints(delta.len(), dt, checkpoint_steps)?;
    // The per-step rotation treats drive and detuning as simultaneous constant
    // fields; that is only faithful when a step covers a small fraction of a
    // Rabi cycle. Trace sampling adequacy for the noise itself is the
    // producer's precondition.
    if rabi_hz.abs() * dt > 0.05 {
        return Err(Error::precondition(format!(
            "dt = {dt:.3e} s too coarse for a {rabi_hz:.3} Hz drive; need dt <= 1/(20 rabi)"
        )));
    }
    let omega = 2.0 * std::f64::consts::PI * rabi_hz;
    let (sp, cp) = drive_phase.sin_cos();
    let (ox, oy) = (omega * cp * dt, omega * sp * dt);
    let mut state = initial;
    let mut out = Vec::with_capacity(checkpoint_steps.len());
    let mut next = 0;
    if checkpoint_steps.first() == Some(&0) {
        out.push(state);
        next = 1;
    }
    for (k, &d) in delta.iter().enumerate() {
        state.rotate(ox, oy, d * dt);
        let done = k + 1;
        while next < checkpoint_steps.len() && checkpoint_steps[next] == done {
            out.push(state);
            next += 1;
        }
        if next == checkpoint_steps.len() {
            break;
        }
    }
    Ok(out)
}

/// Evolve one realization under an ideal pi-pulse train: free precession
/// about z between pulses, instantaneous pi rotations at the listed steps.
/// `pulses` holds (step index, pulse phase); the pulse fires after that many
/// steps of free evolution. Checkpoints as in [`evolve_with_drive`].
pub fn evolve_pulse_train(
    delta: &[f64],
    dt: f64,
    pulses: &[(usize, f64)],
    initial: BlochState,
    checkpoint_steps: &[usize],
) -> Result<Vec<BlochState>> {
    validate_checkpoints(delta.len(), dt, checkpoint_steps)?;
    if pulses.windows(2).any(|w| w[0].0 > w[1].0) {
        return Err(Error::invalid("pulse steps must be sorted ascending"));
    }
    let mut state = initial;
    let mut out = Vec::with_capacity(checkpoint_steps.len());
    let mut next_cp = 0;
    let mut next_pulse = 0;
    if checkpoint_steps.first() == Some(&0) {
        out.push(state);
        next_cp = 1;
    }
    while next_pulse < pulses.len() && pulses[next_pulse].0 == 0 {
        state.apply_pulse(pulses[next_pulse].1, std::f64::consts::PI);
        next_pulse += 1;
    }
    for (k, &d) in delta.iter().enumerate() {
        // Free precession around z: (u + iv) -> e^{i delta dt} (u + iv).
        let (s, c) = (d * dt).sin_cos();
        let (u, v) = (state.u, state.v);
        state.u = u * c - v * s;
        state.v = u * s + v * c;
        let done = k + 1;
        while next_pulse < pulses.len() && pulses[next_pulse].0 == done {
            state.apply_pulse(pulses[next_pulse].1, std::f64::consts::PI);
            next_pulse += 1;
        }
        while next_cp < checkpoint_steps.len() && checkpoint_steps[next_cp] == done {
            out.push(state);
            next_cp += 1;
        }
        if next_cp == checkpoint_steps.len() {
            break;
        }
    }
    Ok(out)
}

fn validate_checkpoints(n_steps: usize, dt: f64, checkpoints: &[usize]) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints requested"));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("checkpoints must be strictly increasing"));
    }
    if *checkpoints.last().unwrap() > n_steps {
        return Err(Error::precondition(format!(
            "checkpoint at step {} exceeds trace length {}",
            checkpoints.last().unwrap(),
            n_steps
        )));
    }
    Ok(())
}

/// Coherence of an ensemble: |mean(a) + i mean(b)| over realizations, where
/// (a, b) are the two components transverse to the relevant axis.
pub fn ensemble_coherence(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let (sa, sb) = pairs
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    ((sa / n).powi(2) + (sb / n).powi(2)).sqrt()
}

/// Coherence with a bootstrap standard error (resampling realizations with
/// replacement; fixed internal stream so results are reproducible).
pub fn ensemble_coherence_with_err(pairs: &[(f64, f64)], n_boot: usize) -> (f64, f64) {
    let c = ensemble_coherence(pairs);
    if pairs.len() < 2 || n_boot < 2 {
        return (c, 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b007_57a9);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut resample = Vec::with_capacity(pairs.len());
    for _ in 0..n_boot {
        resample.clear();
        for _ in 0..pairs.len() {
            resample.push(pairs[rng.random_range(0..pairs.len())]);
        }
        let cb = ensemble_coherence(&resample);
        sum += cb;
        sum_sq += cb * cb;
    }
    let mean = sum / n_boot as f64;
    let var = (sum_sq / n_boot as f64 - mean * mean).max(0.0);
    (c, (var * n_boot as f64 / (n_boot as f64 - 1.0)).sqrt())
}

/// An exponential-decay rate fitted to coherence-versus-time data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub rate_per_s: f64,
    pub rate_uncertainty: f64,
    /// Fitted C(0); near 1 for clean exponentials.
    pub amplitude: f64,
    pub chi2_per_dof: f64,
    pub n_used: usize,
    /// True when chi2/dof > 4: the decay is visibly non-exponential over the
    /// fitted window and the rate should be treated with suspicion.
    pub poor_fit: bool,
}

/// Weighted straight-line fit of ln C against t. Points with C <= 0 or with
/// C below 3 sigma of zero are excluded (their logarithm is dominated by the
/// estimator floor); at least 3 usable points are required.
pub fn fit_decay_rate(times: &[f64], coherence: &[f64], stderr: &[f64]) -> Result<RateFit> {
    if times.len() != coherence.len() || times.len() != stderr.len() {
        return Err(Error::invalid("mismatched fit input lengths"));
    }
    let mut xs = Vec::with_capacity(times.len());
    let mut ys = Vec::with_capacity(times.len());
    let mut ws = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let (c, s) = (coherence[i], stderr[i]);
        if c <= 0.0 || c <= 3.0 * s {
            continue;
        }
        xs.push(times[i]);
        ys.push(c.ln());
        // sigma_lnC = sigma_C / C; zero stderr means equal weights.
        let sigma = if s > 0.0 { s / c } else { 1.0 };
        ws.push(1.0 / (sigma * sigma));
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "only {} usable coherence points for a rate fit (need >= 3)",
            xs.len()
        )));
    }
    let fit: LinearFit = linear_fit(&xs, &ys, Some(&ws))?;
    let chi2_per_dof = fit.chi2_per_dof();
    Ok(RateFit {
        rate_per_s: -fit.slope,
        rate_uncertainty: fit.slope_err,
        amplitude: fit.intercept.exp(),
        chi2_per_dof,
        n_used: xs.len(),
        poor_fit: chi2_per_dof > 4.0,
    })
}
