//! Monte-Carlo collisional bath: atoms moving in a trap, elastic collisions
//! redrawing their velocities, and the resulting differential-light-shift
//! detuning traces.
//!
//! Each atom carries an independent, stream-addressed RNG, so trace `i` is a
//! pure function of `(config, seed, i)` regardless of how many threads run
//! the simulation or in which order atoms are evaluated.
//!
//! The detuning of atom `i` is
//! `delta_i(t) = eta * (U(r_i(t)) - <U>) / hbar`,
//! where `U` is the trapping potential, `<U>` its thermal ensemble average
//! (3/2 kT for a harmonic trap), and `eta` the relative differential shift
//! between the two clock states.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::bloch::{
    ensemble_coherence_with_err, evolve_pulse_train, evolve_with_drive, fit_decay_rate,
    BlochState, RateFit,
};
use crate::error::{Error, Result};
use crate::filter::{validate_pulse_times, FrequencyGrid};
use crate::noise::SyntheticNoise;
use crate::numeric::interp_clamped;
use crate::overlap::{BathSpectrum, SpectrumOrigin};
use crate::waveform::ControlWaveform;

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant (J/K).
pub const KB: f64 = 1.380_649e-23;
/// Mass of a rubidium-87 atom (kg).
pub const RB87_MASS_KG: f64 = 1.443_160_6e-25;
/// Default relative differential light shift between the clock states.
pub const DEFAULT_DIFFERENTIAL_SHIFT: f64 = 6.6e-5;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Rb D2 line, used for the dipole-potential depth of the optical trap.
const RB_D2_WAVELENGTH_M: f64 = 780.241_209e-9;
const RB_D2_LINEWIDTH_RAD_S: f64 = 2.0 * PI * 6.066_6e6;

/// Atoms per parallel work block. Blocks are a fixed partition of the atom
/// index range and partial results merge in block order, so every reduction
/// is independent of the number of worker threads.
const ATOM_BLOCK: usize = 32;

/// Bootstrap resamples used for coherence standard errors.
const N_BOOTSTRAP: usize = 200;

/// Shape of the trapping potential.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialShape {
    /// Ideal harmonic confinement with two degenerate radial axes (x, y)
    /// and one axial axis (z), at the frequencies given in [`TrapConfig`].
    Harmonic,
    /// Two identical Gaussian beams of waist `waist_m` crossing in the x-y
    /// plane at `crossing_angle_rad`, each carrying `power_w` at
    /// `wavelength_m` (red of the D2 line). Beam divergence is neglected,
    /// valid while the thermal cloud is much smaller than the Rayleigh
    /// range. Trap frequencies follow from the beam parameters; the
    /// `radial_hz`/`axial_hz` fields are ignored for this shape.
    CrossedGaussian {
        waist_m: f64,
        power_w: f64,
        wavelength_m: f64,
        crossing_angle_rad: f64,
    },
}

impl Default for PotentialShape {
    fn default() -> Self {
        PotentialShape::Harmonic
    }
}

/// Trap and atom parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapConfig {
    /// Radial trap frequency (Hz); both radial axes are degenerate.
    #[serde(default)]
    pub radial_hz: f64,
    /// Axial trap frequency (Hz).
    #[serde(default)]
    pub axial_hz: f64,
    /// Ensemble temperature (K).
    pub temperature_k: f64,
    /// Atomic mass (kg).
    #[serde(default = "default_mass")]
    pub atom_mass_kg: f64,
    /// Relative differential shift eta of the clock transition: the detuning
    /// is eta * U / hbar for trap potential U.
    #[serde(default = "default_shift")]
    pub differential_shift_ratio: f64,
    #[serde(default)]
    pub shape: PotentialShape,
}

fn default_mass() -> f64 {
    RB87_MASS_KG
}

fn default_shift() -> f64 {
    DEFAULT_DIFFERENTIAL_SHIFT
}

impl TrapConfig {
    /// Harmonic trap for rubidium-87 with the default differential shift.
    pub fn harmonic(radial_hz: f64, axial_hz: f64, temperature_k: f64) -> Self {
        TrapConfig {
            radial_hz,
            axial_hz,
            temperature_k,
            atom_mass_kg: RB87_MASS_KG,
            differential_shift_ratio: DEFAULT_DIFFERENTIAL_SHIFT,
            shape: PotentialShape::Harmonic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_k > 0.0 && self.temperature_k.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.atom_mass_kg > 0.0 && self.atom_mass_kg.is_finite()) {
            return Err(Error::invalid("atom mass must be positive"));
        }
        if !(self.differential_shift_ratio > 0.0 && self.differential_shift_ratio.is_finite()) {
            return Err(Error::invalid("differential shift ratio must be positive"));
        }
        match self.shape {
            PotentialShape::Harmonic => {
                if !(self.radial_hz > 0.0 && self.axial_hz > 0.0) {
                    return Err(Error::invalid(
                        "harmonic trap needs positive radial and axial frequencies",
                    ));
                }
            }
            PotentialShape::CrossedGaussian {
                waist_m,
                power_w,
                wavelength_m,
                crossing_angle_rad,
            } => {
                if !(waist_m > 0.0 && power_w > 0.0 && wavelength_m > 0.0) {
                    return Err(Error::invalid(
                        "crossed-beam trap needs positive waist, power and wavelength",
                    ));
                }
                if !(crossing_angle_rad > 0.0 && crossing_angle_rad < PI) {
                    return Err(Error::invalid("crossing angle must lie in (0, pi)"));
                }
                if wavelength_m <= RB_D2_WAVELENGTH_M {
                    return Err(Error::invalid(
                        "trap light must be red-detuned of the D2 line to confine",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Single-beam trap depth (J) for the crossed-beam shape.
    fn beam_depth(&self) -> Result<f64> {
        match self.shape {
            PotentialShape::Harmonic => Err(Error::invalid(
                "beam depth is only defined for the crossed-beam shape",
            )),
            PotentialShape::CrossedGaussian {
                waist_m,
                power_w,
                wavelength_m,
                ..
            } => {
                let omega_line = 2.0 * PI * SPEED_OF_LIGHT / RB_D2_WAVELENGTH_M;
                let omega_laser = 2.0 * PI * SPEED_OF_LIGHT / wavelength_m;
                let detuning = (omega_laser - omega_line).abs();
                let peak_intensity = 2.0 * power_w / (PI * waist_m * waist_m);
                Ok(3.0 * PI * SPEED_OF_LIGHT * SPEED_OF_LIGHT / (2.0 * omega_line.powi(3))
                    * (RB_D2_LINEWIDTH_RAD_S / detuning)
                    * peak_intensity)
            }
        }
    }

    /// Angular oscillation frequencies along x, y, z (rad/s). For the
    /// crossed-beam shape these come from the curvature of the summed beam
    /// potentials at the crossing point.
    pub fn effective_omegas(&self) -> Result<[f64; 3]> {
        self.validate()?;
        match self.shape {
            PotentialShape::Harmonic => {
                let wr = 2.0 * PI * self.radial_hz;
                let wa = 2.0 * PI * self.axial_hz;
                Ok([wr, wr, wa])
            }
            PotentialShape::CrossedGaussian {
                waist_m,
                crossing_angle_rad,
                ..
            } => {
                let u0 = self.beam_depth()?;
                let w0 = (8.0 * u0 / (self.atom_mass_kg * waist_m * waist_m)).sqrt();
                let half = 0.5 * crossing_angle_rad;
                Ok([w0 * half.sin(), w0 * half.cos(), w0])
            }
        }
    }

    /// Oscillation frequencies in Hz.
    pub fn effective_frequencies_hz(&self) -> Result<[f64; 3]> {
        Ok(self.effective_omegas()?.map(|w| w / (2.0 * PI)))
    }

    /// Thermal standard deviation of the detuning for a harmonic potential:
    /// each quadratic axis contributes variance (kT)^2/2 to U, so
    /// sigma_delta = eta kT sqrt(3/2) / hbar. Also a good estimate for the
    /// crossed-beam trap while kT is well below the trap depth.
    pub fn sigma_delta_rad_s(&self) -> f64 {
        self.differential_shift_ratio * KB * self.temperature_k * 1.5_f64.sqrt() / HBAR
    }
}

/// Elastic collision model: a Poisson process at `rate_hz` per atom, each
/// event redrawing the full velocity vector from the thermal distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionConfig {
    pub rate_hz: f64,
}

impl CollisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz >= 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::invalid("collision rate must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Time propagator for one atom over one step `dt`.
#[derive(Debug)]
enum Propagator {
    /// Exact per-axis phase-space rotation. Harmonic motion advances each
    /// (x, v) pair by a rotation at the axis frequency, so energy is
    /// conserved to rounding regardless of dt.
    Harmonic {
        omega: [f64; 3],
        rot: [(f64, f64); 3],
        half_m_omega2: [f64; 3],
    },
    /// Velocity-Verlet with substeps chosen so the bounded energy wobble of
    /// the integrator stays below 1e-7 of the total energy.
    Gaussian {
        depth: f64,
        two_over_w2: f64,
        axes: [[f64; 3]; 2],
        mass: f64,
        n_sub: usize,
        h: f64,
    },
}

impl Propagator {
    fn build(trap: &TrapConfig, dt: f64) -> Result<Self> {
        let omegas = trap.effective_omegas()?;
        match trap.shape {
            PotentialShape::Harmonic => {
                let m = trap.atom_mass_kg;
                Ok(Propagator::Harmonic {
                    omega: omegas,
                    rot: omegas.map(|w| {
                        let (s, c) = (w * dt).sin_cos();
                        (c, s)
                    }),
                    half_m_omega2: omegas.map(|w| 0.5 * m * w * w),
                })
            }
            PotentialShape::CrossedGaussian {
                waist_m,
                crossing_angle_rad,
                ..
            } => {
                let w_max = omegas.iter().cloned().fold(0.0, f64::max);
                // (omega h)^2 / 8 <= 1e-7  =>  omega h <= 8.944e-4.
                let n_sub = ((w_max * dt / 8.944e-4).ceil() as usize).max(1);
                let half = 0.5 * crossing_angle_rad;
                let (s, c) = half.sin_cos();
                Ok(Propagator::Gaussian {
                    depth: trap.beam_depth()?,
                    two_over_w2: 2.0 / (waist_m * waist_m),
                    axes: [[c, s, 0.0], [c, -s, 0.0]],
                    mass: trap.atom_mass_kg,
                    n_sub,
                    h: dt / n_sub as f64,
                })
            }
        }
    }

    /// Potential energy relative to the trap minimum.
    fn potential(&self, pos: &[f64; 3]) -> f64 {
        match self {
            Propagator::Harmonic { half_m_omega2, .. } => {
                half_m_omega2[0] * pos[0] * pos[0]
                    + half_m_omega2[1] * pos[1] * pos[1]
                    + half_m_omega2[2] * pos[2] * pos[2]
            }
            Propagator::Gaussian {
                depth,
                two_over_w2,
                axes,
                ..
            } => {
                let r2 = pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2];
                let mut u = 2.0 * depth;
                for axis in axes {
                    let along = pos[0] * axis[0] + pos[1] * axis[1] + pos[2] * axis[2];
                    let d2 = r2 - along * along;
                    u -= depth * (-two_over_w2 * d2).exp();
                }
                u
            }
        }
    }

    fn force(&self, pos: &[f64; 3], out: &mut [f64; 3]) {
        match self {
            Propagator::Harmonic { .. } => unreachable!("harmonic path uses exact rotations"),
            Propagator::Gaussian {
                depth,
                two_over_w2,
                axes,
                ..
            } => {
                let r2 = pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2];
                *out = [0.0; 3];
                for axis in axes {
                    let along = pos[0] * axis[0] + pos[1] * axis[1] + pos[2] * axis[2];
                    let d2 = r2 - along * along;
                    let gain = -2.0 * depth * two_over_w2 * (-two_over_w2 * d2).exp();
                    for i in 0..3 {
                        out[i] += gain * (pos[i] - along * axis[i]);
                    }
                }
            }
        }
    }

    fn step(&self, pos: &mut [f64; 3], vel: &mut [f64; 3]) {
        match self {
            Propagator::Harmonic { omega, rot, .. } => {
                for i in 0..3 {
                    let (c, s) = rot[i];
                    let (x, v) = (pos[i], vel[i]);
                    pos[i] = x * c + v * s / omega[i];
                    vel[i] = -x * omega[i] * s + v * c;
                }
            }
            Propagator::Gaussian {
                mass, n_sub, h, ..
            } => {
                let mut f = [0.0; 3];
                self.force(pos, &mut f);
                let half_h_over_m = 0.5 * h / mass;
                for _ in 0..*n_sub {
                    for i in 0..3 {
                        vel[i] += f[i] * half_h_over_m;
                        pos[i] += vel[i] * h;
                    }
                    self.force(pos, &mut f);
                    for i in 0..3 {
                        vel[i] += f[i] * half_h_over_m;
                    }
                }
            }
        }
    }
}

fn thermal_velocity<R: Rng + ?Sized>(rng: &mut R, sigma_v: f64) -> [f64; 3] {
    let mut v = [0.0; 3];
    for component in &mut v {
        let z: f64 = rng.sample(StandardNormal);
        *component = sigma_v * z;
    }
    v
}

/// Cumulative distribution of the thermal speed |v| at temperature
/// `temperature_k`: erf(u/sqrt(2)) - sqrt(2/pi) u exp(-u^2/2) with
/// u = v / sqrt(kT/m).
pub fn maxwell_speed_cdf(speed: f64, temperature_k: f64, mass_kg: f64) -> f64 {
    let a = (KB * temperature_k / mass_kg).sqrt();
    let u = speed / a;
    crate::numeric::erf(u / std::f64::consts::SQRT_2)
        - (2.0 / PI).sqrt() * u * (-0.5 * u * u).exp()
}

/// Streaming generator of detuning traces for an ensemble of trapped atoms.
#[derive(Debug)]
pub struct BathSimulator {
    trap: TrapConfig,
    collisions: CollisionConfig,
    n_atoms: usize,
    dt: f64,
    n_steps: usize,
    seed: u64,
    prop: Propagator,
    u_ref: f64,
    sigma_v: f64,
    pos_sigma: [f64; 3],
    delta_scale: f64,
}

impl BathSimulator {
    /// Validates the configuration; in particular dt must resolve the
    /// fastest oscillation: dt <= 1/(20 f_max).
    pub fn new(
        trap: TrapConfig,
        collisions: CollisionConfig,
        n_atoms: usize,
        duration_s: f64,
        dt_s: f64,
        seed: u64,
    ) -> Result<Self> {
        trap.validate()?;
        collisions.validate()?;
        if n_atoms == 0 {
            return Err(Error::invalid("need at least one atom"));
        }
        if !(duration_s > 0.0 && duration_s.is_finite()) || !(dt_s > 0.0 && dt_s.is_finite()) {
            return Err(Error::invalid("duration and dt must be positive"));
        }
        let omegas = trap.effective_omegas()?;
        let f_max = omegas.iter().cloned().fold(0.0, f64::max) / (2.0 * PI);
        if dt_s > 1.0 / (20.0 * f_max) {
            return Err(Error::precondition(format!(
                "dt = {dt_s:.3e} s does not resolve the fastest trap motion; \
                 need dt <= {:.3e} s (1/20 of the {f_max:.1} Hz period)",
                1.0 / (20.0 * f_max)
            )));
        }
        let n_steps = (duration_s / dt_s).round() as usize;
        if n_steps < 2 {
            return Err(Error::invalid("duration must span at least two steps"));
        }
        let prop = Propagator::build(&trap, dt_s)?;
        let kt = KB * trap.temperature_k;
        let sigma_v = (kt / trap.atom_mass_kg).sqrt();
        let pos_sigma = [
            sigma_v / omegas[0],
            sigma_v / omegas[1],
            sigma_v / omegas[2],
        ];
        let delta_scale = trap.differential_shift_ratio / HBAR;
        Ok(BathSimulator {
            trap,
            collisions,
            n_atoms,
            dt: dt_s,
            n_steps,
            seed,
            prop,
            u_ref: 1.5 * kt,
            sigma_v,
            pos_sigma,
            delta_scale,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn trap(&self) -> &TrapConfig {
        &self.trap
    }

    /// Detuning trace of one atom (rad/s, sampled at k dt for
    /// k = 0..n_steps), centered on the analytic thermal mean potential.
    /// Deterministic in (seed, atom) alone.
    pub fn trace_of(&self, atom: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.reserve(self.n_steps);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(atom as u64 + 1);

        let mut pos = [0.0; 3];
        for i in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            pos[i] = self.pos_sigma[i] * z;
        }
        let mut vel = thermal_velocity(&mut rng, self.sigma_v);

        let rate = self.collisions.rate_hz;
        let mut next_event = if rate > 0.0 {
            let gap: f64 = rng.sample(Exp1);
            gap / rate
        } else {
            f64::INFINITY
        };
        // Events are rounded to the nearest step boundary; those rounding to
        // step 0 fire before any evolution.
        while next_event < 0.5 * self.dt {
            vel = thermal_velocity(&mut rng, self.sigma_v);
            let gap: f64 = rng.sample(Exp1);
            next_event += gap / rate;
        }
        for k in 0..self.n_steps {
            buf.push(self.delta_scale * (self.prop.potential(&pos) - self.u_ref));
            self.prop.step(&mut pos, &mut vel);
            let boundary = (k as f64 + 1.5) * self.dt;
            while next_event < boundary {
                vel = thermal_velocity(&mut rng, self.sigma_v);
                let gap: f64 = rng.sample(Exp1);
                next_event += gap / rate;
            }
        }
    }

    /// Stream every trace through `f` without materializing the ensemble.
    pub fn for_each_trace<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[f64]) -> Result<()>,
    {
        let mut buf = Vec::with_capacity(self.n_steps);
        for atom in 0..self.n_atoms {
            self.trace_of(atom, &mut buf);
            f(atom, &buf)?;
        }
        Ok(())
    }

    /// Materialize all traces, remove the global sample mean (recording it),
    /// and return the ensemble. Refuses runs that would not fit comfortably
    /// in memory; use the streaming methods for those.
    pub fn simulate(&self) -> Result<DetuningEnsemble> {
        let total = self.n_atoms.checked_mul(self.n_steps).ok_or_else(|| {
            Error::invalid("ensemble size overflows")
        })?;
        if total > 250_000_000 {
            return Err(Error::invalid(format!(
                "materializing {} samples (~{:.1} GB) exceeds the in-memory limit; \
                 use the streaming spectrum/coherence paths",
                total,
                total as f64 * 8e-9
            )));
        }
        let mut traces = vec![0.0_f64; total];
        traces
            .par_chunks_mut(ATOM_BLOCK * self.n_steps)
            .enumerate()
            .for_each(|(block, chunk)| {
                let mut buf = Vec::with_capacity(self.n_steps);
                for (slot, rows) in chunk.chunks_mut(self.n_steps).enumerate() {
                    self.trace_of(block * ATOM_BLOCK + slot, &mut buf);
                    rows.copy_from_slice(&buf);
                }
            });
        DetuningEnsemble::from_traces(self.dt, self.n_atoms, traces, self.seed)
    }

    /// Welch spectrum of the bath, streamed atom by atom.
    pub fn spectrum(&self, grid: &FrequencyGrid) -> Result<BathSpectrum> {
        check_spectrum_grid(grid, self.dt, self.n_steps)?;
        let seg_len = welch_seg_len(self.n_steps)?;
        let (freqs, g, se) = welch_spectrum(self.dt, self.n_steps, self.n_atoms, seg_len, |i, buf| {
            self.trace_of(i, buf)
        })?;
        interp_spectrum(grid, &freqs, &g, &se)
    }

    /// Ensemble-averaged coherence under a control waveform, streamed atom
    /// by atom; see [`measured_coherence`] for the semantics.
    pub fn coherence(
        &self,
        waveform: &ControlWaveform,
        sample_times_s: &[f64],
    ) -> Result<MeasuredCoherence> {
        coherence_core(
            self.dt,
            self.n_steps,
            self.n_atoms,
            |i, buf| self.trace_of(i, buf),
            waveform,
            sample_times_s,
        )
    }
}

/// A materialized set of detuning traces on a common time base.
#[derive(Debug, Clone)]
pub struct DetuningEnsemble {
    pub dt_s: f64,
    pub n_steps: usize,
    pub n_atoms: usize,
    /// Atom-major storage: trace i occupies `[i*n_steps, (i+1)*n_steps)`.
    pub traces: Vec<f64>,
    /// Global mean removed at construction (rad/s); a common detuning offset
    /// is a clock-frequency redefinition, not bath noise.
    pub removed_offset_rad_s: f64,
    pub rng_seed: u64,
}

impl DetuningEnsemble {
    /// Wrap raw traces, removing (and recording) the global sample mean.
    pub fn from_traces(
        dt_s: f64,
        n_atoms: usize,
        mut traces: Vec<f64>,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(dt_s > 0.0 && dt_s.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        if n_atoms == 0 || traces.is_empty() {
            return Err(Error::invalid("ensemble must contain at least one atom"));
        }
        if traces.len() % n_atoms != 0 {
            return Err(Error::invalid(
                "trace storage length must be a multiple of the atom count",
            ));
        }
        let n_steps = traces.len() / n_atoms;
        if n_steps < 2 {
            return Err(Error::invalid("traces must span at least two steps"));
        }
        if traces.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("traces contain non-finite samples"));
        }
        let mean = traces.iter().sum::<f64>() / traces.len() as f64;
        for x in &mut traces {
            *x -= mean;
        }
        Ok(DetuningEnsemble {
            dt_s,
            n_steps,
            n_atoms,
            traces,
            removed_offset_rad_s: mean,
            rng_seed,
        })
    }

    pub fn trace(&self, atom: usize) -> &[f64] {
        &self.traces[atom * self.n_steps..(atom + 1) * self.n_steps]
    }

    pub fn duration_s(&self) -> f64 {
        self.dt_s * self.n_steps as f64
    }

    /// Variance of the detuning over all atoms and times.
    pub fn variance(&self) -> f64 {
        let n = self.traces.len() as f64;
        self.traces.iter().map(|x| x * x).sum::<f64>() / n
    }
}

/// Materialize an ensemble of synthetic noise realizations, one stream-
/// addressed RNG per realization, so trace `i` is a pure function of
/// `(noise, dt, seed, i)` regardless of thread count.
pub fn synthetic_ensemble(
    noise: &SyntheticNoise,
    dt_s: f64,
    n_steps: usize,
    n_realizations: usize,
    seed: u64,
) -> Result<DetuningEnsemble> {
    if n_realizations == 0 || n_steps == 0 {
        return Err(Error::invalid(
            "synthetic ensemble needs at least one realization and one step",
        ));
    }
    let total = n_realizations
        .checked_mul(n_steps)
        .ok_or_else(|| Error::invalid("ensemble size overflows"))?;
    if total > 250_000_000 {
        return Err(Error::invalid(format!(
            "materializing {total} samples (~{:.1} GB) exceeds the in-memory limit",
            total as f64 * 8e-9
        )));
    }
    let mut traces = vec![0.0_f64; total];
    traces
        .par_chunks_mut(n_steps)
        .enumerate()
        .for_each(|(atom, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(atom as u64 + 1);
            row.copy_from_slice(&noise.sample_trace(dt_s, n_steps, &mut rng));
        });
    DetuningEnsemble::from_traces(dt_s, n_realizations, traces, seed)
}

/// Welch spectral estimate of a materialized ensemble, evaluated on `grid`.
///
/// Hann-windowed segments with 50% overlap, at least 8 segments per atom,
/// averaged over segments and atoms. Values are the two-sided spectral
/// density reported on f >= 0, so the integral over [0, Nyquist] is half the
/// trace variance. Standard errors treat segments as independent, which
/// overlapping Hann segments very nearly are.
pub fn spectrum_from_traces(ens: &DetuningEnsemble, grid: &FrequencyGrid) -> Result<BathSpectrum> {
    check_spectrum_grid(grid, ens.dt_s, ens.n_steps)?;
    let seg_len = welch_seg_len(ens.n_steps)?;
    let (freqs, g, se) = welch_spectrum(ens.dt_s, ens.n_steps, ens.n_atoms, seg_len, |i, buf| {
        buf.extend_from_slice(ens.trace(i))
    })?;
    interp_spectrum(grid, &freqs, &g, &se)
}

fn check_spectrum_grid(grid: &FrequencyGrid, dt: f64, n_steps: usize) -> Result<()> {
    let nyquist = 0.5 / dt;
    if grid.f_max() > nyquist * (1.0 + 1e-12) {
        return Err(Error::precondition(format!(
            "grid extends to {:.3} Hz, beyond the Nyquist frequency {:.3} Hz",
            grid.f_max(),
            nyquist
        )));
    }
    if let Some(f_lo) = grid.values().iter().copied().find(|f| *f > 0.0) {
        let duration = dt * n_steps as f64;
        if duration < 10.0 / f_lo {
            return Err(Error::precondition(format!(
                "trace duration {duration:.3} s is too short to estimate the spectrum at \
                 {f_lo:.3} Hz; need at least {:.3} s (10 periods)",
                10.0 / f_lo
            )));
        }
    }
    Ok(())
}

/// Largest power-of-two segment length giving >= 8 half-overlapped segments.
fn welch_seg_len(n_steps: usize) -> Result<usize> {
    let cap = (n_steps as f64 / 4.5).floor() as usize;
    if cap < 16 {
        return Err(Error::InsufficientData(format!(
            "{n_steps} steps cannot supply 8 Welch segments of >= 16 samples"
        )));
    }
    let mut l = 16;
    while l * 2 <= cap {
        l *= 2;
    }
    Ok(l)
}

struct WelchAccumulator {
    dt: f64,
    seg_len: usize,
    hop: usize,
    window: Vec<f64>,
    win_pow: f64,
    fft: std::sync::Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n_seg: usize,
}

impl WelchAccumulator {
    fn new(dt: f64, seg_len: usize) -> Self {
        let window: Vec<f64> = (0..seg_len)
            .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / seg_len as f64).cos()))
            .collect();
        let win_pow: f64 = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(seg_len);
        let scratch_len = fft.get_inplace_scratch_len();
        WelchAccumulator {
            dt,
            seg_len,
            hop: seg_len / 2,
            window,
            win_pow,
            fft,
            buf: vec![Complex::new(0.0, 0.0); seg_len],
            scratch: vec![Complex::new(0.0, 0.0); scratch_len],
            sum: vec![0.0; seg_len / 2 + 1],
            sum_sq: vec![0.0; seg_len / 2 + 1],
            n_seg: 0,
        }
    }

    fn add_trace(&mut self, x: &[f64]) {
        let mut start = 0;
        while start + self.seg_len <= x.len() {
            for (k, slot) in self.buf.iter_mut().enumerate() {
                *slot = Complex::new(x[start + k] * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
            for j in 0..self.sum.len() {
                let p = self.dt * self.buf[j].norm_sqr() / self.win_pow;
                self.sum[j] += p;
                self.sum_sq[j] += p * p;
            }
            self.n_seg += 1;
            start += self.hop;
        }
    }
}

/// Parallel Welch average over atoms. `fill(i, buf)` must append trace i to
/// the cleared `buf`. Returns (bin frequencies, mean, standard error).
fn welch_spectrum(
    dt: f64,
    n_steps: usize,
    n_atoms: usize,
    seg_len: usize,
    fill: impl Fn(usize, &mut Vec<f64>) + Sync,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let starts: Vec<usize> = (0..n_atoms).step_by(ATOM_BLOCK).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>, usize)> = starts
        .par_iter()
        .map(|&start| {
            let mut acc = WelchAccumulator::new(dt, seg_len);
            let mut buf = Vec::with_capacity(n_steps);
            for atom in start..(start + ATOM_BLOCK).min(n_atoms) {
                buf.clear();
                fill(atom, &mut buf);
                acc.add_trace(&buf);
            }
            (acc.sum, acc.sum_sq, acc.n_seg)
        })
        .collect();

    let n_bins = seg_len / 2 + 1;
    let mut sum = vec![0.0; n_bins];
    let mut sum_sq = vec![0.0; n_bins];
    let mut n_seg = 0usize;
    for (s, sq, k) in partials {
        for j in 0..n_bins {
            sum[j] += s[j];
            sum_sq[j] += sq[j];
        }
        n_seg += k;
    }
    if n_seg < 2 {
        return Err(Error::InsufficientData(
            "need at least two Welch segments for an error estimate".into(),
        ));
    }
    let n = n_seg as f64;
    let mut g = vec![0.0; n_bins];
    let mut se = vec![0.0; n_bins];
    for j in 0..n_bins {
        let mean = sum[j] / n;
        let var = ((sum_sq[j] / n - mean * mean) * n / (n - 1.0)).max(0.0);
        g[j] = mean;
        se[j] = (var / n).sqrt();
    }
    let freqs: Vec<f64> = (0..n_bins)
        .map(|j| j as f64 / (seg_len as f64 * dt))
        .collect();
    Ok((freqs, g, se))
}

fn interp_spectrum(
    grid: &FrequencyGrid,
    freqs: &[f64],
    g: &[f64],
    se: &[f64],
) -> Result<BathSpectrum> {
    let values: Vec<f64> = grid
        .values()
        .iter()
        .map(|&f| interp_clamped(freqs, g, f))
        .collect();
    let sigmas: Vec<f64> = grid
        .values()
        .iter()
        .map(|&f| interp_clamped(freqs, se, f))
        .collect();
    BathSpectrum::tabulated(
        grid.values().to_vec(),
        values,
        Some(sigmas),
        SpectrumOrigin::Simulated,
    )
}

/// Low-frequency spectral plateau versus collision rate.
///
/// Runs one bath simulation per rate (same seed, so atoms share initial
/// conditions) and reports `(rate_hz, G(0+))`, where the plateau is the
/// average of the lowest four nonzero Welch bins. In the collision-dominated
/// regime the plateau scales as 1/rate: faster collisions narrow the
/// inhomogeneous line.
pub fn collisional_narrowing_scan(
    trap: &TrapConfig,
    rates_hz: &[f64],
    n_atoms: usize,
    duration_s: f64,
    dt_s: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if rates_hz.len() < 2 {
        return Err(Error::invalid("narrowing scan needs at least two rates"));
    }
    if rates_hz.iter().any(|r| !(r > &0.0 && r.is_finite())) {
        return Err(Error::invalid("narrowing scan rates must be positive"));
    }
    let mut out = Vec::with_capacity(rates_hz.len());
    for &rate in rates_hz {
        let sim = BathSimulator::new(
            trap.clone(),
            CollisionConfig { rate_hz: rate },
            n_atoms,
            duration_s,
            dt_s,
            seed,
        )?;
        let seg_len = welch_seg_len(sim.n_steps())?;
        let (_, g, _) = welch_spectrum(dt_s, sim.n_steps(), n_atoms, seg_len, |i, buf| {
            sim.trace_of(i, buf)
        })?;
        let plateau = g[1..5].iter().sum::<f64>() / 4.0;
        out.push((rate, plateau));
    }
    Ok(out)
}

/// A coherence-versus-time measurement on an ensemble, with bootstrap
/// standard errors and, when enough of the curve is usable, an exponential
/// decay-rate fit.
#[derive(Debug, Clone, Serialize)]
pub struct MeasuredCoherence {
    pub times_s: Vec<f64>,
    pub coherence: Vec<f64>,
    pub stderr: Vec<f64>,
    pub fit: Option<RateFit>,
}

/// Per-waveform evolution plan, validated once per call.
enum WaveformPlan {
    FreeEvolution,
    /// Pulse fractions of the total time; the train is rescaled to each
    /// sample time, so a coherence curve compares like sequences of
    /// different durations.
    Train { fractions: Vec<f64>, phases: Vec<f64> },
    Drive { rabi_hz: f64 },
    Sideband {
        rabi_hz: f64,
        mod_freq_hz: f64,
        mod_index: f64,
    },
}

fn build_plan(
    waveform: &ControlWaveform,
    dt: f64,
    max_time: f64,
) -> Result<WaveformPlan> {
    match waveform {
        ControlWaveform::Free { .. } => Ok(WaveformPlan::FreeEvolution),
        ControlWaveform::PulseTrain {
            pulse_times,
            pulse_phases,
            pulse_area,
            total_time,
            ..
        } => {
            validate_pulse_times(pulse_times, *total_time)?;
            if pulse_phases.len() != pulse_times.len() {
                return Err(Error::invalid("one phase per pulse required"));
            }
            if (pulse_area - PI).abs() > 1e-9 {
                return Err(Error::invalid(
                    "the ensemble driver only supports pi pulses",
                ));
            }
            Ok(WaveformPlan::Train {
                fractions: pulse_times.iter().map(|t| t / total_time).collect(),
                phases: pulse_phases.clone(),
            })
        }
        ControlWaveform::ConstantDrive { rabi_hz, duration } => {
            if !(*rabi_hz > 0.0 && rabi_hz.is_finite()) {
                return Err(Error::invalid("drive Rabi frequency must be positive"));
            }
            if max_time > duration * (1.0 + 1e-9) + 0.5 * dt {
                return Err(Error::precondition(
                    "sample times extend beyond the drive duration",
                ));
            }
            Ok(WaveformPlan::Drive { rabi_hz: *rabi_hz })
        }
        ControlWaveform::SidebandDrive {
            rabi_hz,
            mod_freq_hz,
            mod_index,
            duration,
        } => {
            if !(*rabi_hz > 0.0 && *mod_freq_hz > 0.0 && *mod_index >= 0.0) {
                return Err(Error::invalid(
                    "sideband drive needs positive rabi and modulation frequencies",
                ));
            }
            if max_time > duration * (1.0 + 1e-9) + 0.5 * dt {
                return Err(Error::precondition(
                    "sample times extend beyond the drive duration",
                ));
            }
            if rabi_hz * dt > 0.05 || mod_freq_hz * dt > 0.05 {
                return Err(Error::precondition(
                    "dt too coarse for the modulated drive; need 20 steps per cycle",
                ));
            }
            Ok(WaveformPlan::Sideband {
                rabi_hz: *rabi_hz,
                mod_freq_hz: *mod_freq_hz,
                mod_index: *mod_index,
            })
        }
        ControlWaveform::Sampled { .. } => Err(Error::invalid(
            "sampled envelopes are not supported by the ensemble driver",
        )),
    }
}

/// Transverse components at each sample step for one realization.
fn pairs_for_atom(
    plan: &WaveformPlan,
    delta: &[f64],
    dt: f64,
    sample_steps: &[usize],
) -> Result<Vec<(f64, f64)>> {
    let init = BlochState::along_x();
    match plan {
        WaveformPlan::FreeEvolution => {
            let states = evolve_pulse_train(delta, dt, &[], init, sample_steps)?;
            Ok(states.iter().map(|s| (s.u, s.v)).collect())
        }
        WaveformPlan::Train { fractions, phases } => {
            let mut out = Vec::with_capacity(sample_steps.len());
            for &s in sample_steps {
                let pulses: Vec<(usize, f64)> = fractions
                    .iter()
                    .zip(phases)
                    .map(|(f, ph)| ((f * s as f64).round() as usize, *ph))
                    .collect();
                let states = evolve_pulse_train(&delta[..s], dt, &pulses, init, &[s])?;
                out.push((states[0].u, states[0].v));
            }
            Ok(out)
        }
        WaveformPlan::Drive { rabi_hz } => {
            // Drive along y; the coherence transverse to the drive axis is
            // (u, w), whose modulus is unchanged by the deterministic
            // nutation.
            let states =
                evolve_with_drive(delta, dt, *rabi_hz, 0.5 * PI, init, sample_steps)?;
            Ok(states.iter().map(|s| (s.u, s.w)).collect())
        }
        WaveformPlan::Sideband {
            rabi_hz,
            mod_freq_hz,
            mod_index,
        } => {
            let om_c = 2.0 * PI * rabi_hz;
            let om_m = 2.0 * PI * mod_freq_hz;
            let amp = mod_index * om_m;
            let mut state = init;
            let mut out = Vec::with_capacity(sample_steps.len());
            let mut next = 0;
            let last = *sample_steps.last().unwrap();
            for (k, &d) in delta.iter().enumerate().take(last) {
                let t_mid = (k as f64 + 0.5) * dt;
                let om = om_c + amp * (om_m * t_mid).cos();
                state.rotate(0.0, om * dt, d * dt);
                let done = k + 1;
                while next < sample_steps.len() && sample_steps[next] == done {
                    out.push((state.u, state.w));
                    next += 1;
                }
            }
            Ok(out)
        }
    }
}

pub(crate) fn coherence_core(
    dt: f64,
    n_steps: usize,
    n_atoms: usize,
    fill: impl Fn(usize, &mut Vec<f64>) + Sync,
    waveform: &ControlWaveform,
    sample_times_s: &[f64],
) -> Result<MeasuredCoherence> {
    if n_atoms == 0 {
        return Err(Error::invalid("ensemble must contain at least one atom"));
    }
    if sample_times_s.is_empty() {
        return Err(Error::invalid("need at least one sample time"));
    }
    if sample_times_s
        .windows(2)
        .any(|w| !(w[0] < w[1]))
    {
        return Err(Error::invalid("sample times must be strictly increasing"));
    }
    let mut sample_steps = Vec::with_capacity(sample_times_s.len());
    for &t in sample_times_s {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid("sample times must be positive"));
        }
        let step = (t / dt).round() as usize;
        if step == 0 {
            return Err(Error::precondition(format!(
                "sample time {t:.3e} s is below half a step (dt = {dt:.3e} s)"
            )));
        }
        if step > n_steps {
            return Err(Error::precondition(format!(
                "sample time {t:.3e} s exceeds the trace duration {:.3e} s",
                dt * n_steps as f64
            )));
        }
        sample_steps.push(step);
    }
    if sample_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "sample times round to duplicate steps; space them by at least dt",
        ));
    }
    let plan = build_plan(waveform, dt, *sample_times_s.last().unwrap())?;

    let starts: Vec<usize> = (0..n_atoms).step_by(ATOM_BLOCK).collect();
    let blocks: Vec<Vec<Vec<(f64, f64)>>> = starts
        .par_iter()
        .map(|&start| {
            let mut buf = Vec::with_capacity(n_steps);
            let mut rows = Vec::new();
            for atom in start..(start + ATOM_BLOCK).min(n_atoms) {
                buf.clear();
                fill(atom, &mut buf);
                rows.push(pairs_for_atom(&plan, &buf, dt, &sample_steps));
            }
            rows.into_iter().collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let n_times = sample_steps.len();
    let mut coherence = Vec::with_capacity(n_times);
    let mut stderr = Vec::with_capacity(n_times);
    let mut pairs = Vec::with_capacity(n_atoms);
    for j in 0..n_times {
        pairs.clear();
        for block in &blocks {
            for row in block {
                pairs.push(row[j]);
            }
        }
        let (c, se) = ensemble_coherence_with_err(&pairs, N_BOOTSTRAP);
        coherence.push(c);
        stderr.push(se);
    }
    let fit = fit_decay_rate(sample_times_s, &coherence, &stderr).ok();
    Ok(MeasuredCoherence {
        times_s: sample_times_s.to_vec(),
        coherence,
        stderr,
        fit,
    })
}

/// Coherence of a materialized ensemble under a control waveform.
///
/// Every atom starts on the equator, evolves under its own detuning trace
/// plus the waveform, and contributes its transverse Bloch components; the
/// curve is the modulus of their ensemble mean at each sample time, with a
/// bootstrap standard error. Pulse trains are rescaled to each sample time
/// (pulse positions keep their fractional layout); drives are sampled along
/// their fixed schedule.
pub fn measured_coherence(
    ens: &DetuningEnsemble,
    waveform: &ControlWaveform,
    sample_times_s: &[f64],
) -> Result<MeasuredCoherence> {
    coherence_core(
        ens.dt_s,
        ens.n_steps,
        ens.n_atoms,
        |i, buf| buf.extend_from_slice(ens.trace(i)),
        waveform,
        sample_times_s,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::SyntheticNoise;
    use crate::numeric::trapezoid;
    use approx::assert_relative_eq;

    fn test_trap() -> TrapConfig {
        TrapConfig::harmonic(600.0, 160.0, 7e-6)
    }

    #[test]
    fn synthetic_ensemble_is_reproducible_and_holds_the_nominal_variance() {
        let noise = SyntheticNoise::OrnsteinUhlenbeck {
            sigma_rad_s: 30.0,
            tau_c_s: 0.01,
        };
        let a = synthetic_ensemble(&noise, 1e-3, 2000, 64, 7).unwrap();
        let b = synthetic_ensemble(&noise, 1e-3, 2000, 64, 7).unwrap();
        assert_eq!(a.trace(5), b.trace(5));
        assert_eq!(a.removed_offset_rad_s, b.removed_offset_rad_s);
        let rel = (a.variance() - 900.0).abs() / 900.0;
        assert!(rel < 0.15, "ensemble variance {} vs nominal 900", a.variance());
    }

    #[test]
    fn single_axial_atom_detuning_is_periodic_at_twice_the_trap_frequency() {
        // U(z(t)) oscillates at exactly twice the axial frequency; with dt an
        // integer divisor of that period the exact propagator must reproduce
        // delta after one period to rounding.
        let trap = test_trap();
        let dt = 1.0 / 16_000.0; // 50 steps per half axial period (160 Hz)
        let prop = Propagator::build(&trap, dt).unwrap();
        let mut pos = [0.0, 0.0, 1.2e-6];
        let mut vel = [0.0, 0.0, 0.0];
        let scale = trap.differential_shift_ratio / HBAR;
        let u_ref = 1.5 * KB * trap.temperature_k;
        let mut delta = Vec::new();
        for _ in 0..400 {
            delta.push(scale * (prop.potential(&pos) - u_ref));
            prop.step(&mut pos, &mut vel);
        }
        let period_steps = 50; // 1 / (2 * 160 Hz) / dt
        let sigma = trap.sigma_delta_rad_s();
        for k in 0..(400 - period_steps) {
            assert!(
                (delta[k + period_steps] - delta[k]).abs() < 1e-9 * sigma,
                "detuning not periodic at 2 f_axial: step {k}"
            );
        }
    }

    #[test]
    fn harmonic_energy_is_conserved() {
        let trap = test_trap();
        let dt = 5e-5;
        let prop = Propagator::build(&trap, dt).unwrap();
        let mut pos = [2e-6, -1e-6, 3e-6];
        let mut vel = [1e-3, 2e-3, -0.5e-3];
        let kinetic =
            |v: &[f64; 3]| 0.5 * trap.atom_mass_kg * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        let e0 = kinetic(&vel) + prop.potential(&pos);
        for _ in 0..20_000 {
            prop.step(&mut pos, &mut vel);
        }
        let e1 = kinetic(&vel) + prop.potential(&pos);
        assert!(
            ((e1 - e0) / e0).abs() < 1e-6,
            "harmonic energy drift {:.2e}",
            ((e1 - e0) / e0).abs()
        );
    }

    #[test]
    fn crossed_beam_energy_is_conserved() {
        let trap = TrapConfig {
            radial_hz: 0.0,
            axial_hz: 0.0,
            temperature_k: 7e-6,
            atom_mass_kg: RB87_MASS_KG,
            differential_shift_ratio: DEFAULT_DIFFERENTIAL_SHIFT,
            shape: PotentialShape::CrossedGaussian {
                waist_m: 40e-6,
                power_w: 2.0,
                wavelength_m: 1.064e-6,
                crossing_angle_rad: 0.5,
            },
        };
        let freqs = trap.effective_frequencies_hz().unwrap();
        assert!(freqs[2] > freqs[1] && freqs[1] > freqs[0]);
        let dt = 1.0 / (25.0 * freqs[2]);
        let prop = Propagator::build(&trap, dt).unwrap();
        let mut pos = [3e-6, 1e-6, 2e-6];
        let mut vel = [0.02, -0.01, 0.015];
        let kinetic =
            |v: &[f64; 3]| 0.5 * trap.atom_mass_kg * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        let e0 = kinetic(&vel) + prop.potential(&pos);
        let steps = (1.0 / dt) as usize;
        for _ in 0..steps {
            prop.step(&mut pos, &mut vel);
        }
        let e1 = kinetic(&vel) + prop.potential(&pos);
        assert!(
            ((e1 - e0) / e0).abs() < 1e-6,
            "crossed-beam energy drift {:.2e} over 1 s",
            ((e1 - e0) / e0).abs()
        );
    }

    #[test]
    fn ensemble_detuning_variance_matches_thermal_prediction() {
        let sim = BathSimulator::new(
            test_trap(),
            CollisionConfig { rate_hz: 50.0 },
            2000,
            0.25,
            5e-5,
            11,
        )
        .unwrap();
        let ens = sim.simulate().unwrap();
        let sigma = test_trap().sigma_delta_rad_s();
        assert_relative_eq!(ens.variance(), sigma * sigma, max_relative = 0.05);
        // Centering is exact by construction; the removed offset must be a
        // small statistical residue of the analytic reference.
        assert!(ens.removed_offset_rad_s.abs() < 0.05 * sigma);
    }

    #[test]
    fn post_collision_speeds_are_maxwell_boltzmann() {
        // Kolmogorov-Smirnov test on 1e4 redraws at the 1% level.
        let trap = test_trap();
        let sigma_v = (KB * trap.temperature_k / trap.atom_mass_kg).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut speeds: Vec<f64> = (0..10_000)
            .map(|_| {
                let v = thermal_velocity(&mut rng, sigma_v);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .collect();
        speeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = speeds.len() as f64;
        let mut d_stat: f64 = 0.0;
        for (i, &v) in speeds.iter().enumerate() {
            let cdf = maxwell_speed_cdf(v, trap.temperature_k, trap.atom_mass_kg);
            d_stat = d_stat
                .max((cdf - i as f64 / n).abs())
                .max(((i + 1) as f64 / n - cdf).abs());
        }
        assert!(
            d_stat < 1.63 / n.sqrt(),
            "KS statistic {d_stat:.4} exceeds the 1% critical value"
        );
    }

    #[test]
    fn welch_recovers_the_redraw_process_spectrum() {
        // Synthetic velocity-redraw noise has an exactly exponential
        // discrete autocorrelation, so its sampled spectrum is known in
        // closed form; the Welch estimate must match within its own errors.
        let sigma = 40.0;
        let rate = 40.0;
        let dt = 1e-3;
        let n_steps = 8192;
        let n_atoms = 80;
        let noise = SyntheticNoise::PoissonRedraw {
            sigma_rad_s: sigma,
            rate_hz: rate,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut traces = Vec::with_capacity(n_atoms * n_steps);
        for _ in 0..n_atoms {
            traces.extend(noise.sample_trace(dt, n_steps, &mut rng));
        }
        let ens = DetuningEnsemble::from_traces(dt, n_atoms, traces, 7).unwrap();

        let seg_len = welch_seg_len(n_steps).unwrap(); // 1024
        let df = 1.0 / (seg_len as f64 * dt);
        let probe_bins = [3usize, 5, 7, 10, 14, 20, 28, 40];
        let grid =
            FrequencyGrid::from_values(probe_bins.iter().map(|&j| j as f64 * df).collect())
                .unwrap();
        let spec = spectrum_from_traces(&ens, &grid).unwrap();

        let rho = (-rate * dt).exp();
        for &j in &probe_bins {
            let f = j as f64 * df;
            let g_exact = sigma * sigma * dt * (1.0 - rho * rho)
                / (1.0 - 2.0 * rho * (2.0 * PI * f * dt).cos() + rho * rho);
            let g_hat = spec.value_at(f);
            let se = spec.uncertainty_at(f).unwrap();
            assert!(
                (g_hat - g_exact).abs() < 4.0 * se + 0.05 * g_exact,
                "bin {j}: estimate {g_hat:.3} vs exact {g_exact:.3} (se {se:.3})"
            );
        }

        // Total power: integral of the estimate over [0, Nyquist] is half
        // the trace variance.
        let (freqs, g, _) = welch_spectrum(dt, n_steps, n_atoms, seg_len, |i, buf| {
            buf.extend_from_slice(ens.trace(i))
        })
        .unwrap();
        let total = trapezoid(&freqs, &g);
        assert_relative_eq!(total, ens.variance() / 2.0, max_relative = 0.02);
    }

    #[test]
    fn constant_detuning_has_no_spectral_weight() {
        // A frozen, atom-dependent detuning is pure DC: away from the lowest
        // bins the spectrum must vanish relative to the static variance.
        let dt = 1e-3;
        let n_steps = 4096;
        let n_atoms = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut traces = Vec::with_capacity(n_atoms * n_steps);
        for _ in 0..n_atoms {
            let z: f64 = rng.sample(StandardNormal);
            let value = 30.0 * z;
            traces.extend(std::iter::repeat(value).take(n_steps));
        }
        let ens = DetuningEnsemble::from_traces(dt, n_atoms, traces, 3).unwrap();
        let seg_len = welch_seg_len(n_steps).unwrap();
        let df = 1.0 / (seg_len as f64 * dt);
        let grid = FrequencyGrid::from_values((4..40).map(|j| j as f64 * df).collect()).unwrap();
        let spec = spectrum_from_traces(&ens, &grid).unwrap();
        let var = ens.variance();
        for &f in grid.values() {
            // Density scale of the static variance if it were spread over
            // one bin; the Hann sidelobes must be far below it.
            let dc_scale = var / df;
            assert!(
                spec.value_at(f) < 1e-6 * dc_scale,
                "unexpected spectral weight {:.3e} at {f:.2} Hz",
                spec.value_at(f)
            );
        }
    }

    #[test]
    fn traces_are_stationary_across_halves() {
        let sim = BathSimulator::new(
            test_trap(),
            CollisionConfig { rate_hz: 50.0 },
            400,
            0.4,
            5e-5,
            17,
        )
        .unwrap();
        let ens = sim.simulate().unwrap();
        let half = ens.n_steps / 2;
        let mut mean_diffs = Vec::with_capacity(ens.n_atoms);
        let mut var_diffs = Vec::with_capacity(ens.n_atoms);
        for i in 0..ens.n_atoms {
            let tr = ens.trace(i);
            let (a, b) = tr.split_at(half);
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / a.len() as f64;
            let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / b.len() as f64;
            mean_diffs.push(ma - mb);
            var_diffs.push(va - vb);
        }
        for (name, diffs) in [("mean", mean_diffs), ("variance", var_diffs)] {
            let n = diffs.len() as f64;
            let m = diffs.iter().sum::<f64>() / n;
            let s = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0)).sqrt();
            let t = m / (s / n.sqrt());
            assert!(
                t.abs() < 4.0,
                "first/second half {name} differs: t = {t:.2}"
            );
        }
    }

    #[test]
    fn collisions_narrow_the_low_frequency_plateau() {
        let scan = collisional_narrowing_scan(&test_trap(), &[300.0, 600.0], 400, 2.0, 8e-5, 5)
            .unwrap();
        let ratio = scan[0].1 / scan[1].1;
        assert!(
            (1.5..2.8).contains(&ratio),
            "doubling the collision rate should roughly halve G(0): ratio {ratio:.2}"
        );
    }

    #[test]
    fn traces_are_deterministic_and_atom_addressed() {
        let make = |n_atoms| {
            BathSimulator::new(
                test_trap(),
                CollisionConfig { rate_hz: 30.0 },
                n_atoms,
                0.02,
                5e-5,
                99,
            )
            .unwrap()
        };
        let a = make(8).simulate().unwrap();
        let b = make(8).simulate().unwrap();
        assert_eq!(a.traces, b.traces);

        // Atom 7 is the same trajectory regardless of ensemble size; only
        // the removed global mean differs.
        let c = make(16).simulate().unwrap();
        let sigma = test_trap().sigma_delta_rad_s();
        for k in 0..a.n_steps {
            let x = a.trace(7)[k] + a.removed_offset_rad_s;
            let y = c.trace(7)[k] + c.removed_offset_rad_s;
            assert!((x - y).abs() < 1e-12 * sigma);
        }

        // The streaming path agrees with the materialized ensemble.
        let sim = make(8);
        let mut buf = Vec::new();
        sim.trace_of(7, &mut buf);
        for k in 0..a.n_steps {
            assert!((buf[k] - (a.trace(7)[k] + a.removed_offset_rad_s)).abs() < 1e-12 * sigma);
        }
    }

    #[test]
    fn preconditions_are_enforced() {
        // dt too coarse for the radial motion.
        let err = BathSimulator::new(
            test_trap(),
            CollisionConfig { rate_hz: 0.0 },
            1,
            0.1,
            1e-3,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));

        // Spectrum grid beyond Nyquist.
        let sim = BathSimulator::new(
            test_trap(),
            CollisionConfig { rate_hz: 0.0 },
            4,
            0.5,
            5e-5,
            0,
        )
        .unwrap();
        let grid = FrequencyGrid::linear(0.0, 11_000.0, 12).unwrap();
        assert!(matches!(
            sim.spectrum(&grid),
            Err(Error::Precondition(_))
        ));

        // Spectrum at frequencies the trace duration cannot resolve.
        let grid = FrequencyGrid::linear(1.0, 100.0, 10).unwrap();
        assert!(matches!(
            sim.spectrum(&grid),
            Err(Error::Precondition(_))
        ));

        // Narrowing scan needs two rates.
        assert!(collisional_narrowing_scan(&test_trap(), &[100.0], 4, 1.0, 8e-5, 0).is_err());

        // Empty ensembles are rejected.
        assert!(DetuningEnsemble::from_traces(1e-3, 1, Vec::new(), 0).is_err());
    }

    #[test]
    fn free_evolution_coherence_matches_the_gaussian_memory_law() {
        let sigma = 5.0;
        let tau_c = 0.3;
        let noise = SyntheticNoise::OrnsteinUhlenbeck {
            sigma_rad_s: sigma,
            tau_c_s: tau_c,
        };
        let dt = 5e-4;
        let n_steps = 2000;
        let n_atoms = 600;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut traces = Vec::with_capacity(n_atoms * n_steps);
        for _ in 0..n_atoms {
            traces.extend(noise.sample_trace(dt, n_steps, &mut rng));
        }
        let ens = DetuningEnsemble::from_traces(dt, n_atoms, traces, 21).unwrap();

        let times = [0.1, 0.2, 0.4, 0.8];
        let curve = measured_coherence(
            &ens,
            &ControlWaveform::Free { total_time: 1.0 },
            &times,
        )
        .unwrap();
        for (j, &t) in times.iter().enumerate() {
            let expected = crate::noise::gaussian_memory_coherence(sigma, tau_c, t);
            assert!(
                (curve.coherence[j] - expected).abs() < 4.0 * curve.stderr[j] + 0.01,
                "free coherence at {t} s: {:.3} vs Kubo {expected:.3}",
                curve.coherence[j]
            );
        }

        // An echo refocuses slow noise: at 0.4 s the single-pulse train must
        // beat free evolution decisively.
        let echo = measured_coherence(
            &ens,
            &ControlWaveform::PulseTrain {
                pulse_times: vec![0.5],
                pulse_phases: vec![0.0],
                pulse_area: PI,
                pulse_duration: 0.0,
                total_time: 1.0,
            },
            &[0.4],
        )
        .unwrap();
        let free_at = curve.coherence[2];
        assert!(
            echo.coherence[0] > free_at + 5.0 * (echo.stderr[0] + curve.stderr[2]),
            "echo {:.3} should exceed free decay {free_at:.3}",
            echo.coherence[0]
        );
    }

    #[test]
    fn driven_decoherence_rate_matches_the_sampled_noise_spectrum() {
        // Fast noise, weak drive: the transverse decay rate under a constant
        // drive at f0 is G(f0)/4 for the sampled (discrete) spectrum.
        let sigma = 60.0;
        let tau_c = 1e-3;
        let dt = 5e-4;
        let n_steps = 2000;
        let n_atoms = 800;
        let f0 = 50.0;
        let noise = SyntheticNoise::OrnsteinUhlenbeck {
            sigma_rad_s: sigma,
            tau_c_s: tau_c,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut traces = Vec::with_capacity(n_atoms * n_steps);
        for _ in 0..n_atoms {
            traces.extend(noise.sample_trace(dt, n_steps, &mut rng));
        }
        let ens = DetuningEnsemble::from_traces(dt, n_atoms, traces, 5).unwrap();
        let curve = measured_coherence(
            &ens,
            &ControlWaveform::ConstantDrive {
                rabi_hz: f0,
                duration: 1.0,
            },
            &[0.2, 0.5, 1.0],
        )
        .unwrap();
        let fit = curve.fit.expect("drive curve should be fittable");

        // Exact spectrum of the sampled AR(1) process at f0.
        let rho = (-dt / tau_c).exp();
        let g_f0 = sigma * sigma * dt * (1.0 - rho * rho)
            / (1.0 - 2.0 * rho * (2.0 * PI * f0 * dt).cos() + rho * rho);
        let predicted = g_f0 / 4.0;
        assert!(
            (fit.rate_per_s - predicted).abs()
                < 0.12 * predicted + 3.0 * fit.rate_uncertainty,
            "driven rate {:.3} /s vs spectral prediction {predicted:.3} /s",
            fit.rate_per_s
        );
    }

    #[test]
    fn coherence_driver_rejects_bad_sampling() {
        let ens = DetuningEnsemble::from_traces(1e-3, 2, vec![0.0; 2000], 0).unwrap();
        let free = ControlWaveform::Free { total_time: 1.0 };
        assert!(measured_coherence(&ens, &free, &[]).is_err());
        assert!(measured_coherence(&ens, &free, &[0.5, 0.5]).is_err());
        assert!(measured_coherence(&ens, &free, &[-0.1]).is_err());
        assert!(measured_coherence(&ens, &free, &[2.0]).is_err());
        // Samples beyond a drive's schedule are rejected even when the trace
        // could cover them.
        let drive = ControlWaveform::ConstantDrive {
            rabi_hz: 10.0,
            duration: 0.5,
        };
        assert!(matches!(
            measured_coherence(&ens, &drive, &[0.9]),
            Err(Error::Precondition(_))
        ));
        // Sampled envelopes have no ensemble-driver semantics.
        let sampled = ControlWaveform::Sampled {
            omega_rad_s: vec![0.0; 10],
            dt: 1e-3,
        };
        assert!(measured_coherence(&ens, &sampled, &[0.5]).is_err());
    }
}
