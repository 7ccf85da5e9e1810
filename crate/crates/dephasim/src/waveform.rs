//! Control waveforms and pulse-sequence construction.
//!
//! Conventions used throughout the crate:
//!
//! * Rabi envelopes `Omega(t)` are angular rates in rad/s: a resonant drive
//!   quoted as `f0` in Hz rotates the Bloch vector at `2*pi*f0` rad/s, and a
//!   pi pulse satisfies `integral Omega dt = pi`.
//! * Pulse trains use ideal (zero-duration) pi pulses unless a positive
//!   `pulse_duration` is set, in which case the pi rotation ramps linearly
//!   across a window centered on the nominal pulse time.
//! * The accumulated phase `theta(t) = integral_0^t Omega(tau) dtau` is what
//!   enters the filter function through `cos(theta)`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Pulse area enforced for every pulse-train pulse (pi pulses only).
pub const PULSE_AREA: f64 = PI;

/// Phase assignment pattern for the pulses of a train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhasePattern {
    /// Every pulse about the same equatorial axis (phase 0).
    #[default]
    Uniform,
    /// Phases 0, 0, pi, pi, 0, 0, ... This flips the rotation sense every two
    /// pulses so that small pulse-length errors cancel pairwise instead of
    /// accumulating. For ideal pulses the dephasing action is identical to
    /// `Uniform`.
    AlternatePairs,
}

/// A control waveform over a finite observation window starting at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "waveform", rename_all = "snake_case")]
pub enum ControlWaveform {
    /// Free evolution for `total_time` (no drive at all).
    Free { total_time: f64 },
    /// A train of pi pulses at `pulse_times` with per-pulse phases.
    PulseTrain {
        pulse_times: Vec<f64>,
        pulse_phases: Vec<f64>,
        /// Pulse area in rad; fixed at pi in this work.
        pulse_area: f64,
        /// Physical pulse duration in seconds; 0 means ideal delta pulses.
        pulse_duration: f64,
        total_time: f64,
    },
    /// Constant resonant drive at Rabi frequency `rabi_hz`.
    ConstantDrive { rabi_hz: f64, duration: f64 },
    /// Frequency-modulated drive
    /// `Omega(t) = 2 pi f0 (1 + beta (f_m/f0) cos(2 pi f_m t))`,
    /// whose accumulated phase is `2 pi f0 t + beta sin(2 pi f_m t)`.
    SidebandDrive {
        rabi_hz: f64,
        mod_freq_hz: f64,
        mod_index: f64,
        duration: f64,
    },
    /// Arbitrary envelope given as uniformly sampled Omega values (rad/s)
    /// with spacing `dt`; linear interpolation between samples.
    Sampled { omega_rad_s: Vec<f64>, dt: f64 },
}

impl ControlWaveform {
    /// Observation-window length in seconds.
    pub fn total_time(&self) -> f64 {
        match self {
            ControlWaveform::Free { total_time } => *total_time,
            ControlWaveform::PulseTrain { total_time, .. } => *total_time,
            ControlWaveform::ConstantDrive { duration, .. } => *duration,
            ControlWaveform::SidebandDrive { duration, .. } => *duration,
            ControlWaveform::Sampled { omega_rad_s, dt } => {
                dt * omega_rad_s.len().saturating_sub(1) as f64
            }
        }
    }

    /// Build an ideal pulse train, validating ordering and bounds.
    pub fn pulse_train(pulse_times: Vec<f64>, pulse_phases: Vec<f64>, total_time: f64) -> Result<Self> {
        Self::pulse_train_with_duration(pulse_times, pulse_phases, 0.0, total_time)
    }

    /// Build a pulse train with a finite per-pulse duration. Pulse windows
    /// `[t_j - d/2, t_j + d/2]` must lie inside (0, total_time) and must not
    /// overlap.
    pub fn pulse_train_with_duration(
        pulse_times: Vec<f64>,
        pulse_phases: Vec<f64>,
        pulse_duration: f64,
        total_time: f64,
    ) -> Result<Self> {
        if !(total_time > 0.0) || !total_time.is_finite() {
            return Err(Error::invalid(format!(
                "total_time must be positive and finite, got {total_time}"
            )));
        }
        if pulse_times.len() != pulse_phases.len() {
            return Err(Error::invalid(format!(
                "{} pulse times vs {} phases",
                pulse_times.len(),
                pulse_phases.len()
            )));
        }
        if !(pulse_duration >= 0.0) {
            return Err(Error::invalid("pulse_duration must be >= 0"));
        }
        let half = 0.5 * pulse_duration;
        let mut prev_end = 0.0;
        for (i, &t) in pulse_times.iter().enumerate() {
            if !(t - half > prev_end) || !(t + half < total_time) {
                return Err(Error::precondition(format!(
                    "pulse {i} at {t} s (duration {pulse_duration} s) must lie strictly inside \
                     (0, {total_time}) without overlapping its neighbors"
                )));
            }
            prev_end = t + half;
        }
        Ok(ControlWaveform::PulseTrain {
            pulse_times,
            pulse_phases,
            pulse_area: PULSE_AREA,
            pulse_duration,
            total_time,
        })
    }
}

/// CPMG pulse times `t_j = (j - 1/2) T / n`, j = 1..n. The first and last
/// free intervals are half as long as the interior ones, which makes the
/// train an even function about T/2.
pub fn cpmg_times(n: usize, total_time: f64) -> Result<Vec<f64>> {
    check_train_args(n, total_time)?;
    Ok((1..=n)
        .map(|j| (j as f64 - 0.5) * total_time / n as f64)
        .collect())
}

/// UDD pulse times `t_j = T sin^2(pi j / (2n + 2))`, j = 1..n.
/// UDD-1 coincides with the Hahn echo and UDD-2 with CPMG-2.
pub fn udd_times(n: usize, total_time: f64) -> Result<Vec<f64>> {
    check_train_args(n, total_time)?;
    let denom = 2.0 * (n as f64) + 2.0;
    Ok((1..=n)
        .map(|j| total_time * (PI * j as f64 / denom).sin().powi(2))
        .collect())
}

/// Largest concatenation order supported; pulse counts grow as ~2^order and
/// order 12 already yields 5461 pulses.
pub const CDD_MAX_ORDER: usize = 12;

/// Concatenated-sequence pulse times at the given order.
///
/// The generating recursion is `C_k = C_{k-1} X C_{k-1} X` acting on a free
/// interval; same-instant pulse pairs cancel (pi^2 = identity) and a trailing
/// boundary pulse at T, which cannot influence dephasing, is dropped. Order 1
/// is defined as the first level with a cancelled interior, giving times
/// `[T/4, 3T/4]`; pulse counts then run 2, 5, 10, 21, 42, 85, ...
pub fn cdd_times(order: usize, total_time: f64) -> Result<Vec<f64>> {
    if order == 0 || order > CDD_MAX_ORDER {
        return Err(Error::precondition(format!(
            "cdd order must be in [1, {CDD_MAX_ORDER}], got {order}"
        )));
    }
    if !(total_time > 0.0) || !total_time.is_finite() {
        return Err(Error::invalid(format!(
            "total_time must be positive and finite, got {total_time}"
        )));
    }
    // Build on the dyadic integer lattice [0, 2^levels] so pulse-pair
    // cancellation is exact set arithmetic, then scale once.
    let levels = order + 1;
    let mut positions: Vec<u64> = vec![1, 2]; // level 1 on [0, 2]
    let mut span: u64 = 2;
    for _ in 1..levels {
        let mut next: Vec<u64> = Vec::with_capacity(2 * positions.len() + 2);
        next.extend(positions.iter().copied());
        next.push(span);
        next.extend(positions.iter().map(|&p| p + span));
        next.push(2 * span);
        next.sort_unstable();
        // Cancel same-position pairs.
        let mut reduced = Vec::with_capacity(next.len());
        let mut i = 0;
        while i < next.len() {
            if i + 1 < next.len() && next[i] == next[i + 1] {
                i += 2;
            } else {
                reduced.push(next[i]);
                i += 1;
            }
        }
        positions = reduced;
        span *= 2;
    }
    if positions.last() == Some(&span) {
        positions.pop(); // trailing boundary pulse
    }
    let scale = total_time / span as f64;
    Ok(positions.into_iter().map(|p| p as f64 * scale).collect())
}

/// Number of pulses produced by [`cdd_times`] at the given order.
pub fn cdd_pulse_count(order: usize) -> Result<usize> {
    Ok(cdd_times(order, 1.0)?.len())
}

/// All (order, pulse count) pairs with counts in `[min_pulses, max_pulses]`.
pub fn cdd_admissible_orders(min_pulses: usize, max_pulses: usize) -> Vec<(usize, usize)> {
    (1..=CDD_MAX_ORDER)
        .filter_map(|order| {
            let count = cdd_pulse_count(order).ok()?;
            (count >= min_pulses && count <= max_pulses).then_some((order, count))
        })
        .collect()
}

/// Per-pulse phases for a train of `n` pulses under the given pattern.
pub fn assign_phases(n: usize, pattern: PhasePattern) -> Vec<f64> {
    match pattern {
        PhasePattern::Uniform => vec![0.0; n],
        PhasePattern::AlternatePairs => (0..n)
            .map(|k| if (k / 2) % 2 == 1 { PI } else { 0.0 })
            .collect(),
    }
}

/// Accumulated drive phase `theta(t) = integral_0^t Omega(tau) dtau`.
///
/// For pulse trains, theta advances by pi per pulse: instantaneously for
/// ideal pulses (the step occurs at the pulse time), linearly across the
/// pulse window for finite-duration pulses.
pub fn accumulated_phase(waveform: &ControlWaveform, t: f64) -> Result<f64> {
    let total = waveform.total_time();
    if !(0.0..=total * (1.0 + 1e-12) + f64::MIN_POSITIVE).contains(&t) {
        return Err(Error::precondition(format!(
            "t = {t} outside the waveform window [0, {total}]"
        )));
    }
    Ok(match waveform {
        ControlWaveform::Free { .. } => 0.0,
        ControlWaveform::PulseTrain {
            pulse_times,
            pulse_duration,
            ..
        } => {
            let mut theta = 0.0;
            if *pulse_duration == 0.0 {
                for &tp in pulse_times {
                    if tp <= t {
                        theta += PI;
                    } else {
                        break;
                    }
                }
            } else {
                let half = 0.5 * pulse_duration;
                for &tp in pulse_times {
                    if t >= tp + half {
                        theta += PI;
                    } else if t > tp - half {
                        theta += PI * (t - (tp - half)) / pulse_duration;
                    } else {
                        break;
                    }
                }
            }
            theta
        }
        ControlWaveform::ConstantDrive { rabi_hz, .. } => 2.0 * PI * rabi_hz * t,
        ControlWaveform::SidebandDrive {
            rabi_hz,
            mod_freq_hz,
            mod_index,
            ..
        } => 2.0 * PI * rabi_hz * t + mod_index * (2.0 * PI * mod_freq_hz * t).sin(),
        ControlWaveform::Sampled { omega_rad_s, dt } => {
            // Cumulative trapezoid of the piecewise-linear envelope up to t.
            let mut theta = 0.0;
            let mut done = false;
            for i in 1..omega_rad_s.len() {
                let t0 = (i - 1) as f64 * dt;
                let t1 = i as f64 * dt;
                if t >= t1 {
                    theta += 0.5 * (omega_rad_s[i - 1] + omega_rad_s[i]) * dt;
                } else {
                    let frac = (t - t0) / dt;
                    let omega_t = omega_rad_s[i - 1] + frac * (omega_rad_s[i] - omega_rad_s[i - 1]);
                    theta += 0.5 * (omega_rad_s[i - 1] + omega_t) * (t - t0);
                    done = true;
                    break;
                }
            }
            let _ = done;
            theta
        }
    })
}

fn check_train_args(n: usize, total_time: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::precondition("pulse count must be >= 1"));
    }
    if !(total_time > 0.0) || !total_time.is_finite() {
        return Err(Error::invalid(format!(
            "total_time must be positive and finite, got {total_time}"
        )));
    }
    Ok(())
}

/// Named sequence kinds for serialized experiment descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Hahn,
    Cpmg,
    Udd,
    Cdd,
}

/// Declarative pulse-sequence description, the unit of serialization for
/// experiment configs (keys: kind, n_pulses, total_time_s, phase_pattern,
/// cdd_order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub kind: SequenceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_pulses: Option<usize>,
    pub total_time_s: f64,
    #[serde(default)]
    pub phase_pattern: PhasePattern,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdd_order: Option<usize>,
}

impl SequenceSpec {
    /// Pulse times for this sequence.
    pub fn pulse_times(&self) -> Result<Vec<f64>> {
        match self.kind {
            SequenceKind::Hahn => {
                if let Some(n) = self.n_pulses {
                    if n != 1 {
                        return Err(Error::invalid(format!("hahn echo has exactly 1 pulse, got {n}")));
                    }
                }
                cpmg_times(1, self.total_time_s)
            }
            SequenceKind::Cpmg => cpmg_times(self.require_n()?, self.total_time_s),
            SequenceKind::Udd => udd_times(self.require_n()?, self.total_time_s),
            SequenceKind::Cdd => {
                let order = self.cdd_order.ok_or_else(|| {
                    Error::invalid("cdd sequences require the cdd_order key")
                })?;
                let times = cdd_times(order, self.total_time_s)?;
                if let Some(n) = self.n_pulses {
                    if n != times.len() {
                        return Err(Error::invalid(format!(
                            "cdd order {order} has {} pulses, but n_pulses = {n} was declared",
                            times.len()
                        )));
                    }
                }
                Ok(times)
            }
        }
    }

    /// The ideal pulse-train waveform realizing this sequence.
    pub fn waveform(&self) -> Result<ControlWaveform> {
        let times = self.pulse_times()?;
        let phases = assign_phases(times.len(), self.phase_pattern);
        ControlWaveform::pulse_train(times, phases, self.total_time_s)
    }

    fn require_n(&self) -> Result<usize> {
        self.n_pulses
            .ok_or_else(|| Error::invalid("this sequence kind requires the n_pulses key"))
    }
}

/// Experiment-level parameters shared by prediction runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub observation_time_s: f64,
    /// Initial-state statistics weight in the decay-rate integral; 1/4 for an
    /// equal superposition.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Optional energy-relaxation time combined as an extra 2/T1 rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_s: Option<f64>,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_alpha() -> f64 {
    0.25
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cpmg_matches_closed_form() {
        assert_eq!(cpmg_times(1, 1.0).unwrap(), vec![0.5]);
        let t = cpmg_times(4, 0.8).unwrap();
        let expect = [0.1, 0.3, 0.5, 0.7];
        for (a, b) in t.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn udd_low_orders_match_known_sequences() {
        // UDD-1 is the Hahn echo.
        let t = udd_times(1, 1.0).unwrap();
        assert_relative_eq!(t[0], 0.5, epsilon = 1e-15);
        // UDD-2 coincides with CPMG-2: sin^2(pi/6) = 1/4, sin^2(pi/3) = 3/4.
        let t = udd_times(2, 1.0).unwrap();
        assert_relative_eq!(t[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(t[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn cdd_order_one_and_two_unrolled_by_hand() {
        let t1 = cdd_times(1, 1.0).unwrap();
        assert_eq!(t1.len(), 2);
        assert_relative_eq!(t1[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(t1[1], 0.75, epsilon = 1e-15);
        // One recursion level deeper: [1, 3, 4, 5, 7] / 8.
        let t2 = cdd_times(2, 1.0).unwrap();
        let expect = [0.125, 0.375, 0.5, 0.625, 0.875];
        assert_eq!(t2.len(), expect.len());
        for (a, b) in t2.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn cdd_pulse_counts_follow_doubling_pattern() {
        let counts: Vec<usize> = (1..=7).map(|o| cdd_pulse_count(o).unwrap()).collect();
        assert_eq!(counts, vec![2, 5, 10, 21, 42, 85, 170]);
        // Exactly five admissible counts at or below 64 pulses.
        assert_eq!(
            cdd_admissible_orders(1, 64),
            vec![(1, 2), (2, 5), (3, 10), (4, 21), (5, 42)]
        );
    }

    #[test]
    fn phase_patterns() {
        assert_eq!(assign_phases(3, PhasePattern::Uniform), vec![0.0; 3]);
        let p = assign_phases(6, PhasePattern::AlternatePairs);
        assert_eq!(p, vec![0.0, 0.0, PI, PI, 0.0, 0.0]);
    }

    #[test]
    fn accumulated_phase_examples() {
        // Resonant pi pulse: f0 = 100 Hz for 5 ms accumulates pi.
        let w = ControlWaveform::ConstantDrive {
            rabi_hz: 100.0,
            duration: 5e-3,
        };
        assert_relative_eq!(accumulated_phase(&w, 5e-3).unwrap(), PI, epsilon = 1e-12);

        // Ideal train: theta is an exact multiple of pi between pulses.
        let w = ControlWaveform::pulse_train(vec![0.25, 0.75], vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(accumulated_phase(&w, 0.1).unwrap(), 0.0);
        assert_relative_eq!(accumulated_phase(&w, 0.5).unwrap(), PI, epsilon = 1e-15);
        assert_relative_eq!(
            accumulated_phase(&w, 1.0).unwrap(),
            2.0 * PI,
            epsilon = 1e-15
        );

        // Sideband drive: theta(t) = 2 pi f0 t + beta sin(2 pi f_m t).
        let w = ControlWaveform::SidebandDrive {
            rabi_hz: 300.0,
            mod_freq_hz: 40.0,
            mod_index: 0.3,
            duration: 0.1,
        };
        let t = 0.0137;
        assert_relative_eq!(
            accumulated_phase(&w, t).unwrap(),
            2.0 * PI * 300.0 * t + 0.3 * (2.0 * PI * 40.0 * t).sin(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sampled_phase_matches_trapezoid() {
        // Linear ramp Omega(t) = 100 t over [0, 1]: theta(t) = 50 t^2.
        let n = 1001;
        let dt = 1e-3;
        let omega: Vec<f64> = (0..n).map(|i| 100.0 * i as f64 * dt).collect();
        let w = ControlWaveform::Sampled {
            omega_rad_s: omega,
            dt,
        };
        assert_relative_eq!(
            accumulated_phase(&w, 0.6).unwrap(),
            50.0 * 0.36,
            max_relative = 1e-9
        );
    }

    #[test]
    fn finite_duration_ramp() {
        let w = ControlWaveform::pulse_train_with_duration(vec![0.5], vec![0.0], 0.1, 1.0).unwrap();
        assert_eq!(accumulated_phase(&w, 0.44).unwrap(), 0.0);
        assert_relative_eq!(accumulated_phase(&w, 0.5).unwrap(), PI / 2.0, epsilon = 1e-12);
        assert_relative_eq!(accumulated_phase(&w, 0.56).unwrap(), PI, epsilon = 1e-12);
    }

    #[test]
    fn pulse_train_rejects_out_of_window_and_overlap() {
        assert!(ControlWaveform::pulse_train(vec![0.0], vec![0.0], 1.0).is_err());
        assert!(ControlWaveform::pulse_train(vec![1.0], vec![0.0], 1.0).is_err());
        assert!(ControlWaveform::pulse_train(vec![0.5, 0.4], vec![0.0, 0.0], 1.0).is_err());
        assert!(
            ControlWaveform::pulse_train_with_duration(vec![0.40, 0.45], vec![0.0, 0.0], 0.1, 1.0)
                .is_err()
        );
    }

    #[test]
    fn sequence_spec_round_trips_through_toml_keys() {
        let spec = SequenceSpec {
            kind: SequenceKind::Cpmg,
            n_pulses: Some(8),
            total_time_s: 0.4,
            phase_pattern: PhasePattern::AlternatePairs,
            cdd_order: None,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"cpmg\""));
        assert!(json.contains("\"n_pulses\":8"));
        assert!(json.contains("\"total_time_s\":0.4"));
        assert!(json.contains("\"phase_pattern\":\"alternate_pairs\""));
        let back: SequenceSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    proptest! {
        #[test]
        fn cpmg_times_symmetric_and_interior(n in 1usize..80, t in 1e-3f64..10.0) {
            let times = cpmg_times(n, t).unwrap();
            prop_assert!(times.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(times[0] > 0.0 && *times.last().unwrap() < t);
            for j in 0..n {
                let mirror = times[j] + times[n - 1 - j];
                prop_assert!((mirror - t).abs() <= 1e-12 * t);
            }
        }

        #[test]
        fn udd_times_symmetric_and_interior(n in 1usize..80, t in 1e-3f64..10.0) {
            let times = udd_times(n, t).unwrap();
            prop_assert!(times.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(times[0] > 0.0 && *times.last().unwrap() < t);
            for j in 0..n {
                let mirror = times[j] + times[n - 1 - j];
                prop_assert!((mirror - t).abs() <= 1e-12 * t);
            }
        }

        #[test]
        fn cdd_times_interior_and_sorted(order in 1usize..9, t in 1e-3f64..10.0) {
            let times = cdd_times(order, t).unwrap();
            prop_assert!(times.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(times[0] > 0.0 && *times.last().unwrap() < t);
        }

        #[test]
        fn phase_theta_is_nondecreasing_for_trains(
            n in 1usize..20,
            t in 0.0f64..1.0,
        ) {
            let w = SequenceSpec {
                kind: SequenceKind::Cpmg,
                n_pulses: Some(n),
                total_time_s: 1.0,
                phase_pattern: PhasePattern::Uniform,
                cdd_order: None,
            }
            .waveform()
            .unwrap();
            let a = accumulated_phase(&w, t * 0.9).unwrap();
            let b = accumulated_phase(&w, t).unwrap();
            prop_assert!(b >= a);
        }
    }
}
