//! Overlap-integral engine: dephasing rates from spectrum times filter.
//!
//! In the weak-coupling regime the coherence of a driven or pulse-controlled
//! superposition decays as `C(t) = e^{-R t}` with
//!
//! ```text
//! R = (4 alpha / t) * integral_0^inf G(f) F_t(f) df
//! ```
//!
//! where `G` is the two-sided bath-coupling spectral density stored on the
//! non-negative half axis (so `integral_0^inf G df = Var(delta) / 2`) and
//! `F_t` the filter function of the control waveform. The prefactor is fixed
//! once by the Gaussian-phase oracle: for free evolution under Gaussian noise
//! `R t` must equal `<phi^2>/2`, which this normalization reproduces exactly
//! (see the free-evolution tests below and the acceptance suite). With
//! `alpha = 1/4` (equal superposition) a long resonant drive at `f0` decays
//! at `G(f0)/4`, the rate used to invert measurements into a spectrum.
//!
//! Population decay enters separately: a T1 process adds `2/T1` to the total
//! rate and is never simulated microscopically here.

use crate::error::{Error, Result};
use crate::filter::{
    filter_sideband_drive, FilterFunction, FrequencyGrid, ScaledTrainFilter,
};
use crate::numeric::{interp_clamped, levenberg_marquardt, simpson_uniform, trapezoid};
use crate::waveform::{SequenceKind, SequenceSpec};
use serde::{Deserialize, Serialize};

/// Sensitivity prefactor for an equal superposition of the two qubit states.
pub const ALPHA_EQUAL_SUPERPOSITION: f64 = 0.25;

/// Where a spectrum came from; carried through exports for provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumOrigin {
    Analytic,
    Simulated,
    Measured,
}

/// A bath-coupling spectral density G(f) >= 0 in rad^2/s (two-sided density
/// tabulated on f >= 0; even in f).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "spectrum", rename_all = "snake_case")]
pub enum BathSpectrum {
    /// G(f) = g0 / (1 + (f/f_c)^2); the spectrum of any stationary process
    /// with exponential memory.
    Lorentzian {
        g0_per_s: f64,
        corner_hz: f64,
        origin: SpectrumOrigin,
    },
    /// Linear interpolation between grid points, clamped to the end values
    /// outside the tabulated range.
    Tabulated {
        freqs_hz: Vec<f64>,
        values_per_s: Vec<f64>,
        uncertainties_per_s: Option<Vec<f64>>,
        origin: SpectrumOrigin,
    },
}

impl BathSpectrum {
    pub fn lorentzian(g0_per_s: f64, corner_hz: f64) -> Result<Self> {
        if !(g0_per_s > 0.0) || !(corner_hz > 0.0) {
            return Err(Error::invalid(format!(
                "Lorentzian spectrum requires g0 > 0 and corner > 0, got ({g0_per_s}, {corner_hz})"
            )));
        }
        Ok(Self::Lorentzian {
            g0_per_s,
            corner_hz,
            origin: SpectrumOrigin::Analytic,
        })
    }

    pub fn tabulated(
        freqs_hz: Vec<f64>,
        values_per_s: Vec<f64>,
        uncertainties_per_s: Option<Vec<f64>>,
        origin: SpectrumOrigin,
    ) -> Result<Self> {
        if freqs_hz.is_empty() || freqs_hz.len() != values_per_s.len() {
            return Err(Error::invalid("tabulated spectrum needs matching, nonempty grids"));
        }
        if freqs_hz[0] < 0.0 || freqs_hz.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "tabulated spectrum frequencies must be >= 0 and strictly increasing",
            ));
        }
        if values_per_s.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("spectrum values must be finite and >= 0"));
        }
        if let Some(u) = &uncertainties_per_s {
            if u.len() != freqs_hz.len() || u.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid("spectrum uncertainties malformed"));
            }
        }
        Ok(Self::Tabulated {
            freqs_hz,
            values_per_s,
            uncertainties_per_s,
            origin,
        })
    }

    pub fn origin(&self) -> SpectrumOrigin {
        match self {
            Self::Lorentzian { origin, .. } | Self::Tabulated { origin, .. } => *origin,
        }
    }

    /// G(|f|) in rad^2/s.
    pub fn value_at(&self, f: f64) -> f64 {
        let f = f.abs();
        match self {
            Self::Lorentzian {
                g0_per_s, corner_hz, ..
            } => g0_per_s / (1.0 + (f / corner_hz).powi(2)),
            Self::Tabulated {
                freqs_hz,
                values_per_s,
                ..
            } => interp_clamped(freqs_hz, values_per_s, f),
        }
    }

    /// Interpolated 1-sigma uncertainty, if the spectrum carries any.
    pub fn uncertainty_at(&self, f: f64) -> Option<f64> {
        match self {
            Self::Tabulated {
                freqs_hz,
                uncertainties_per_s: Some(u),
                ..
            } => Some(interp_clamped(freqs_hz, u, f.abs())),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Lorentzian {
                g0_per_s, corner_hz, ..
            } => {
                if !(*g0_per_s > 0.0) || !(*corner_hz > 0.0) {
                    return Err(Error::invalid("Lorentzian spectrum parameters must be positive"));
                }
            }
            Self::Tabulated {
                freqs_hz,
                values_per_s,
                ..
            } => {
                if freqs_hz.is_empty()
                    || freqs_hz.len() != values_per_s.len()
                    || values_per_s.iter().any(|v| !v.is_finite() || *v < 0.0)
                {
                    return Err(Error::invalid("tabulated spectrum malformed or negative"));
                }
            }
        }
        Ok(())
    }

    fn tab_range(&self) -> Option<(f64, f64)> {
        match self {
            Self::Tabulated { freqs_hz, .. } => {
                Some((freqs_hz[0], *freqs_hz.last().unwrap()))
            }
            _ => None,
        }
    }
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Predicted decay of one waveform under one bath.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayPrediction {
    /// Dephasing rate R in 1/s (no T1 contribution).
    pub rate_per_s: f64,
    /// Observation time t in s.
    pub observation_time_s: f64,
    /// C = e^{-R t}.
    pub coherence: f64,
    /// (1 + C) / 2: state-retention probability of the superposition.
    pub fidelity: f64,
    /// Overlap integrand G(f) F(f) on the integration grid, for diagnostics.
    pub integrand_freq_hz: Vec<f64>,
    pub integrand: Vec<f64>,
}

/// Dephasing rate by the overlap integral, trapezoid on the union of the
/// filter grid and (for tabulated spectra) the spectrum grid. The filter grid
/// must resolve the filter's lobes and extend to where G * F is negligible;
/// the default grids of [`crate::filter`] are built to do so.
pub fn decay_rate(g: &BathSpectrum, filt: &FilterFunction, alpha: f64) -> Result<DecayPrediction> {
    validate_alpha(alpha)?;
    g.validate()?;
    let t = filt.observation_time;
    if !(t > 0.0) {
        return Err(Error::invalid("filter has non-positive observation time"));
    }
    // A clamped table outside the filter range would silently turn one end
    // value into a white spectrum, so disjoint support is an error.
    if let Some((ta, tb)) = g.tab_range() {
        if ta > filt.grid.f_max() || tb < filt.grid.f_min() {
            return Err(Error::invalid(
                "spectrum and filter grids have no overlapping support",
            ));
        }
    }

    // Union grid: filter grid, spectrum knots inside its range, and f = 0.
    let mut freqs: Vec<f64> = filt.grid.values().to_vec();
    if let BathSpectrum::Tabulated { freqs_hz, .. } = g {
        freqs.extend(
            freqs_hz
                .iter()
                .copied()
                .filter(|&f| f > filt.grid.f_min() && f < filt.grid.f_max()),
        );
    }
    if filt.grid.f_min() > 0.0 {
        freqs.push(0.0);
    }
    freqs.sort_by(f64::total_cmp);
    freqs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));

    let integrand: Vec<f64> = freqs
        .iter()
        .map(|&f| g.value_at(f) * filt.value_at(f))
        .collect();
    let rate = 4.0 * alpha / t * trapezoid(&freqs, &integrand);
    Ok(DecayPrediction {
        rate_per_s: rate,
        observation_time_s: t,
        coherence: (-rate * t).exp(),
        fidelity: 0.5 * (1.0 + (-rate * t).exp()),
        integrand_freq_hz: freqs,
        integrand,
    })
}

/// Total decay rate with a population-decay channel: R + 2/T1.
/// `None` means no T1 process (T1 = infinity).
pub fn combine_t1(r_dephasing: f64, t1_s: Option<f64>) -> Result<f64> {
    match t1_s {
        None => Ok(r_dephasing),
        Some(t1) if t1 > 0.0 => Ok(r_dephasing + 2.0 / t1),
        Some(t1) => Err(Error::invalid(format!("T1 must be positive, got {t1}"))),
    }
}

/// Dephasing rate of a constant resonant drive at `f0` observed for `t`,
/// by exact overlap of the closed-form drive filter with the spectrum.
/// Asymptotically `G(f0)/4` for alpha = 1/4 as f0 t -> infinity.
///
/// Requires f0 t >= 10 (the two-lobe filter picture needs several Rabi
/// cycles); logs a warning below f0 t = 50 where the asymptotic inversion
/// `G = 4 R` is still a few percent off.
pub fn continuous_drive_rate(g: &BathSpectrum, f0: f64, t: f64, alpha: f64) -> Result<f64> {
    validate_alpha(alpha)?;
    g.validate()?;
    if !(f0 > 0.0) || !(t > 0.0) {
        return Err(Error::invalid(format!("need f0 > 0 and t > 0, got ({f0}, {t})")));
    }
    let cycles = f0 * t;
    if cycles < 10.0 {
        return Err(Error::precondition(format!(
            "continuous drive needs f0 * t >= 10, got {cycles:.2}"
        )));
    }
    if cycles < 50.0 {
        log::warn!(
            "continuous drive with f0 * t = {cycles:.1} < 50: G(f0)/4 inversion is biased at the few-percent level"
        );
    }

    // Central window in u = (f - f0) t, resolved at 16 points per sinc lobe;
    // the closed-form filter includes the f + f0 image and cross term.
    let u_span = 600.0f64;
    let u_lo = -cycles.min(u_span);
    let u_hi = u_span;
    let drive_f = |f: f64| {
        let d = window_kernel(f - f0, t) + window_kernel(f + f0, t);
        0.25 * d.norm_sqr()
    };
    let central = simpson_uniform(
        |u| {
            let f = f0 + u / t;
            g.value_at(f) * drive_f(f)
        },
        u_lo,
        u_hi,
        (16.0 * (u_hi - u_lo)).ceil() as usize,
    ) / t;

    // Tails carry the lobe-averaged filter (1/8 pi^2) [1/(f-f0)^2 + 1/(f+f0)^2].
    let mean_f = |f: f64| {
        (1.0 / (8.0 * std::f64::consts::PI.powi(2)))
            * (1.0 / (f - f0).powi(2) + 1.0 / (f + f0).powi(2))
    };
    let mut tails = 0.0;
    let upper_start = f0 + u_hi / t;
    let upper_stop = upper_start * 1e4;
    let log_grid = |a: f64, b: f64, n: usize| -> Vec<f64> {
        let (la, lb) = (a.ln(), b.ln());
        (0..n)
            .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
            .collect()
    };
    let up: Vec<f64> = log_grid(upper_start, upper_stop, 400);
    let up_vals: Vec<f64> = up.iter().map(|&f| g.value_at(f) * mean_f(f)).collect();
    tails += trapezoid(&up, &up_vals);
    if cycles > u_span {
        // Gap between f = 0 and the central window.
        let gap_hi = f0 + u_lo / t;
        let mut lo = vec![0.0];
        lo.extend(log_grid(gap_hi * 1e-6, gap_hi, 300));
        let lo_vals: Vec<f64> = lo.iter().map(|&f| g.value_at(f) * mean_f(f)).collect();
        tails += trapezoid(&lo, &lo_vals);
    }

    Ok(4.0 * alpha / t * (central + tails))
}

fn window_kernel(x: f64, t: f64) -> num_complex::Complex64 {
    num_complex::Complex64::from_polar(t * crate::filter::sinc(x * t), -std::f64::consts::PI * x * t)
}

/// A spectrum recovered from drive decoherence rates: G = 4 (R - bias),
/// clamped at zero where the bias exceeds the measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedSpectrum {
    pub spectrum: BathSpectrum,
    /// True where R < bias forced a clamp to G = 0.
    pub clamped: Vec<bool>,
}

/// Invert continuous-drive decoherence rates into a tabulated spectrum.
/// `rates` holds (f0 in Hz, R in 1/s, sigma_R in 1/s); `bias` is the rate
/// floor measured with the drive off (T1 plus estimator noise), subtracted
/// before inversion.
pub fn invert_spectrum(rates: &[(f64, f64, f64)], bias: f64) -> Result<InvertedSpectrum> {
    if rates.is_empty() {
        return Err(Error::invalid("no rates to invert"));
    }
    let mut sorted: Vec<(f64, f64, f64)> = rates.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("duplicate drive frequencies in rate list"));
    }
    if sorted.iter().any(|r| !(r.0 > 0.0) || !r.1.is_finite() || !(r.2 >= 0.0)) {
        return Err(Error::invalid("rates must have f0 > 0, finite R, sigma >= 0"));
    }
    let mut freqs = Vec::with_capacity(sorted.len());
    let mut values = Vec::with_capacity(sorted.len());
    let mut sigmas = Vec::with_capacity(sorted.len());
    let mut clamped = Vec::with_capacity(sorted.len());
    for (f0, r, s) in sorted {
        let g = 4.0 * (r - bias);
        clamped.push(g < 0.0);
        freqs.push(f0);
        values.push(g.max(0.0));
        sigmas.push(4.0 * s);
    }
    Ok(InvertedSpectrum {
        spectrum: BathSpectrum::tabulated(freqs, values, Some(sigmas), SpectrumOrigin::Measured)?,
        clamped,
    })
}

/// Extract the spectrum at the lower modulation sideband f0 - f_m from the
/// rate difference between a phase-modulated drive and a plain drive at the
/// same f0 and duration.
///
/// The modulated filter redistributes weight J_k(beta)^2 onto lobes at
/// f0 + k f_m; the extra decay is attributed to the lower sideband, whose
/// lobe area A is integrated numerically from the filter over a window around
/// f0 - f_m, giving G = delta_R * t / (4 alpha A). The carrier depletion and
/// the weight moved to f0 + f_m sample the spectrum at and above f0, where a
/// decaying spectrum contributes little; for a flat spectrum those terms
/// cancel the sideband gain exactly, and the method correctly reports the
/// shared level only through the plain-drive rate, not through delta_R.
///
/// `sigma_delta_r` is the 1-sigma uncertainty of (r_with - r_without); a
/// deficit beyond 2 sigma is inconsistent with the filter picture and errors.
/// Returns (probe frequency in Hz, G there in rad^2/s).
#[allow(clippy::too_many_arguments)]
pub fn sideband_extract(
    r_with: f64,
    r_without: f64,
    sigma_delta_r: f64,
    beta: f64,
    mod_freq_hz: f64,
    f0: f64,
    t: f64,
    alpha: f64,
) -> Result<(f64, f64)> {
    validate_alpha(alpha)?;
    if !(beta > 0.0) {
        return Err(Error::invalid(format!(
            "sideband extraction needs modulation depth beta > 0, got {beta}"
        )));
    }
    if !(mod_freq_hz > 0.0) || !(mod_freq_hz < f0) {
        return Err(Error::invalid(format!(
            "need 0 < f_m < f0, got f_m = {mod_freq_hz}, f0 = {f0}"
        )));
    }
    if f0 * t < 10.0 || mod_freq_hz * t < 10.0 {
        return Err(Error::precondition(
            "sideband extraction needs f0 t >= 10 and f_m t >= 10 (resolved lobes)",
        ));
    }
    let f_probe = f0 - mod_freq_hz;
    if f_probe * t < 2.0 {
        return Err(Error::precondition(
            "probe frequency f0 - f_m must exceed ~2/t to sit clear of DC",
        ));
    }
    let delta_r = r_with - r_without;
    if delta_r < -2.0 * sigma_delta_r {
        return Err(Error::InconsistentMeasurement(format!(
            "modulated drive decays slower than plain drive by {:.3e}/s (> 2 sigma = {:.3e}/s)",
            -delta_r,
            2.0 * sigma_delta_r
        )));
    }
    let delta_r = delta_r.max(0.0);

    // Numeric lobe area over a window around the probe frequency, Simpson on
    // a grid resolving the 1/t-wide sinc lobes.
    let w = (0.45 * mod_freq_hz).min(0.95 * f_probe);
    let lo = f_probe - w;
    let hi = f_probe + w;
    let n = ((hi - lo) * 32.0 * t).ceil().max(64.0) as usize;
    let n = n.next_multiple_of(2);
    let step = (hi - lo) / n as f64;
    let window = FrequencyGrid::from_values((0..=n).map(|i| lo + step * i as f64).collect())?;
    let filt = filter_sideband_drive(f0, mod_freq_hz, beta, t, &window)?;
    let mut acc = filt.values[0] + filt.values[n];
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * filt.values[i];
    }
    let a_low = acc * step / 3.0;
    if !(a_low > 0.0) {
        return Err(Error::InsufficientVariation(
            "lower sideband carries no filter weight".into(),
        ));
    }

    Ok((f_probe, delta_r * t / (4.0 * alpha * a_low)))
}

/// A family of control waveforms parameterized by total time, for coherence
/// curves and coherence-time solves.
#[derive(Debug, Clone, PartialEq)]
pub enum WaveformFamily {
    Free,
    /// Ideal pi-pulse train with pulse times at fixed fractions of the total
    /// time (the case for CPMG, UDD, and CDD).
    Train { fractions: Vec<f64>, label: String },
    ConstantDrive { rabi_hz: f64 },
}

impl WaveformFamily {
    /// Family of a named sequence at any total time.
    pub fn from_sequence(
        kind: SequenceKind,
        n_pulses: Option<usize>,
        cdd_order: Option<usize>,
    ) -> Result<Self> {
        let spec = SequenceSpec {
            kind,
            n_pulses,
            total_time_s: 1.0,
            phase_pattern: Default::default(),
            cdd_order,
        };
        let fractions = spec.pulse_times()?;
        Ok(Self::Train {
            label: format!("{kind:?} n={}", fractions.len()),
            fractions,
        })
    }
}

/// Coherence of one waveform family under one bath across observation times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoherenceCurve {
    pub times_s: Vec<f64>,
    /// Dephasing-only rate R(t) in 1/s.
    pub dephasing_rate_per_s: Vec<f64>,
    /// R(t) + 2/T1 when a T1 is configured.
    pub total_rate_per_s: Vec<f64>,
    /// C(t) = e^{-R_total(t) t}.
    pub coherence: Vec<f64>,
    pub label: String,
}

/// Overlap evaluator for a pulse-train family, reusing one dimensionless
/// filter shape for all observation times: the filter of a train with pulse
/// times at fixed fractions obeys F_t(f) = t^2 Fhat(f t) exactly, so
/// R(t) = 4 alpha * integral_0^inf G(x/t) Fhat(x) dx.
struct TrainOverlap {
    shape: ScaledTrainFilter,
    /// sum of squared toggling jumps, for the lobe-averaged tail.
    sum_a2: f64,
}

impl TrainOverlap {
    fn new(fractions: &[f64]) -> Result<Self> {
        let n = fractions.len();
        let x_max = 40.0 * n.max(1) as f64 + 100.0;
        let points = (16.0 * x_max).ceil() as usize + 1;
        let shape = ScaledTrainFilter::new(fractions, x_max, points)?;
        Ok(Self {
            sum_a2: 4.0 * n as f64 + 2.0,
            shape,
        })
    }

    fn rate(&self, g: &BathSpectrum, t: f64, alpha: f64) -> f64 {
        let xs = &self.shape.x;
        let vals = &self.shape.shape;
        let n = xs.len() - 1; // even by construction of points
        let h = xs[1] - xs[0];
        // Composite Simpson over the precomputed uniform x grid.
        let mut acc = g.value_at(xs[0] / t) * vals[0] + g.value_at(xs[n] / t) * vals[n];
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * g.value_at(xs[i] / t) * vals[i];
        }
        let mut integral = acc * h / 3.0;
        // Lobe-averaged tail beyond x_max: Fhat ~ sum_a2 / (4 pi^2 x^2).
        let x_max = xs[n];
        let (la, lb) = (x_max.ln(), (x_max * 1e4).ln());
        let m = 200;
        let tail_f: Vec<f64> = (0..m)
            .map(|i| (la + (lb - la) * i as f64 / (m - 1) as f64).exp())
            .collect();
        let tail_v: Vec<f64> = tail_f
            .iter()
            .map(|&x| {
                g.value_at(x / t) * self.sum_a2 / (4.0 * std::f64::consts::PI.powi(2) * x * x)
            })
            .collect();
        integral += trapezoid(&tail_f, &tail_v);
        4.0 * alpha * integral
    }
}

/// Coherence curve of a waveform family under a bath, optionally with T1.
/// Times must be sorted ascending and positive. Drive families require
/// f0 * t >= 10 at every requested time.
pub fn coherence_curve(
    g: &BathSpectrum,
    family: &WaveformFamily,
    times_s: &[f64],
    alpha: f64,
    t1_s: Option<f64>,
) -> Result<CoherenceCurve> {
    validate_alpha(alpha)?;
    g.validate()?;
    if times_s.is_empty() {
        return Err(Error::invalid("no observation times"));
    }
    if times_s[0] <= 0.0 || times_s.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("times must be positive and sorted ascending"));
    }
    if let Some(t1) = t1_s {
        if !(t1 > 0.0) {
            return Err(Error::invalid(format!("T1 must be positive, got {t1}")));
        }
    }
    let (rates, label): (Vec<f64>, String) = match family {
        WaveformFamily::Free => {
            let ov = TrainOverlap::new(&[])?;
            (
                times_s.iter().map(|&t| ov.rate(g, t, alpha)).collect(),
                "free".into(),
            )
        }
        WaveformFamily::Train { fractions, label } => {
            let ov = TrainOverlap::new(fractions)?;
            (
                times_s.iter().map(|&t| ov.rate(g, t, alpha)).collect(),
                label.clone(),
            )
        }
        WaveformFamily::ConstantDrive { rabi_hz } => {
            let mut rates = Vec::with_capacity(times_s.len());
            for &t in times_s {
                rates.push(continuous_drive_rate(g, *rabi_hz, t, alpha)?);
            }
            (rates, format!("drive f0={rabi_hz}Hz"))
        }
    };
    let mut total = Vec::with_capacity(rates.len());
    let mut coh = Vec::with_capacity(rates.len());
    for (&r, &t) in rates.iter().zip(times_s) {
        let rt = combine_t1(r, t1_s)?;
        total.push(rt);
        coh.push((-rt * t).exp());
    }
    Ok(CoherenceCurve {
        times_s: times_s.to_vec(),
        dephasing_rate_per_s: rates,
        total_rate_per_s: total,
        coherence: coh,
        label,
    })
}

/// Observation time at which the predicted coherence crosses `target`
/// (e.g. 1/e). Solved by bisection on ln C(t) + |ln target| over
/// t in [1e-4, 1e4] s; errors if coherence does not cross the target there.
pub fn coherence_time(
    g: &BathSpectrum,
    family: &WaveformFamily,
    alpha: f64,
    t1_s: Option<f64>,
    target: f64,
) -> Result<f64> {
    validate_alpha(alpha)?;
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid(format!("target coherence must be in (0, 1), got {target}")));
    }
    let goal = -target.ln();
    let decay_exponent: Box<dyn Fn(f64) -> Result<f64>> = match family {
        WaveformFamily::Free => {
            let ov = TrainOverlap::new(&[])?;
            let g = g.clone();
            Box::new(move |t: f64| Ok(combine_t1(ov.rate(&g, t, alpha), t1_s)? * t))
        }
        WaveformFamily::Train { fractions, .. } => {
            let ov = TrainOverlap::new(fractions)?;
            let g = g.clone();
            Box::new(move |t: f64| Ok(combine_t1(ov.rate(&g, t, alpha), t1_s)? * t))
        }
        WaveformFamily::ConstantDrive { rabi_hz } => {
            let g = g.clone();
            let f0 = *rabi_hz;
            Box::new(move |t: f64| {
                Ok(combine_t1(continuous_drive_rate(&g, f0, t, alpha)?, t1_s)? * t)
            })
        }
    };
    let (mut lo, mut hi) = (1e-4, 1e-2);
    if decay_exponent(lo)? > goal {
        return Err(Error::precondition(format!(
            "coherence already below target at t = {lo} s"
        )));
    }
    while decay_exponent(hi)? < goal {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::precondition(
                "coherence does not reach target below t = 1e4 s",
            ));
        }
    }
    // Plain bisection on the smooth, effectively monotone exponent.
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if decay_exponent(mid)? < goal {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-5 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Result of fitting a Lorentzian G(f) = g0 / (1 + (f/f_c)^2) to a tabulated
/// spectrum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub g0_per_s: f64,
    pub corner_hz: f64,
    pub g0_uncertainty: f64,
    pub corner_uncertainty: f64,
    pub chi2: f64,
    pub dof: usize,
}

impl LorentzianFit {
    pub fn spectrum(&self) -> Result<BathSpectrum> {
        BathSpectrum::lorentzian(self.g0_per_s, self.corner_hz)
    }
}

/// Weighted least-squares Lorentzian fit in log-parameter space (g0 and f_c
/// stay positive by construction). `sigmas` default to unit weights.
pub fn fit_lorentzian(
    freqs_hz: &[f64],
    values: &[f64],
    sigmas: Option<&[f64]>,
) -> Result<LorentzianFit> {
    if freqs_hz.len() != values.len() || freqs_hz.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "Lorentzian fit needs >= 3 matched points, got {}",
            freqs_hz.len()
        )));
    }
    if let Some(s) = sigmas {
        if s.len() != values.len() || s.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("fit sigmas must be positive and matched"));
        }
    }
    let g_max = values.iter().cloned().fold(f64::MIN, f64::max);
    if !(g_max > 0.0) {
        return Err(Error::InsufficientVariation(
            "spectrum is identically zero; nothing to fit".into(),
        ));
    }
    // Initial corner: first frequency where the value drops below half max.
    let mut fc0 = freqs_hz[freqs_hz.len() / 2].max(freqs_hz[1]);
    for (&f, &v) in freqs_hz.iter().zip(values) {
        if v < 0.5 * g_max && f > 0.0 {
            fc0 = f;
            break;
        }
    }
    let init = [g_max.ln(), fc0.ln()];
    let n = values.len();
    let fit = levenberg_marquardt(
        |p, out| {
            let (g0, fc) = (p[0].exp(), p[1].exp());
            for i in 0..n {
                let model = g0 / (1.0 + (freqs_hz[i] / fc).powi(2));
                let w = sigmas.map_or(1.0, |s| s[i]);
                out[i] = (model - values[i]) / w;
            }
        },
        &init,
        n,
        200,
    )?;
    let (g0, fc) = (fit.params[0].exp(), fit.params[1].exp());
    Ok(LorentzianFit {
        g0_per_s: g0,
        corner_hz: fc,
        g0_uncertainty: g0 * fit.covariance[0].max(0.0).sqrt(),
        corner_uncertainty: fc * fit.covariance[3].max(0.0).sqrt(),
        chi2: fit.chi2,
        dof: fit.dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::filter_pulse_train;
    use crate::waveform::cpmg_times;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flat_spectrum(g0: f64, f_max: f64) -> BathSpectrum {
        BathSpectrum::tabulated(
            vec![0.0, f_max],
            vec![g0, g0],
            None,
            SpectrumOrigin::Analytic,
        )
        .unwrap()
    }

    #[test]
    fn zero_spectrum_means_no_decay() {
        let g = flat_spectrum(0.0, 1e4);
        let grid = FrequencyGrid::linear(0.0, 100.0, 1001).unwrap();
        let filt = filter_pulse_train(&[], 1.0, &grid).unwrap();
        let p = decay_rate(&g, &filt, ALPHA_EQUAL_SUPERPOSITION).unwrap();
        assert_eq!(p.rate_per_s, 0.0);
        assert_eq!(p.coherence, 1.0);
        assert_eq!(p.fidelity, 1.0);
    }

    #[test]
    fn white_noise_free_evolution_rate_is_half_g0() {
        // For Gaussian noise R t = <phi^2>/2 = g0 t / 2 at a flat two-sided
        // density g0; this pins the engine's normalization.
        let g0 = 3.0;
        let t = 0.7;
        let g = flat_spectrum(g0, 1e5);
        // Free-evolution filter concentrated below ~10/t; resolve and cover.
        let grid = FrequencyGrid::linear(0.0, 400.0 / t, 160_001).unwrap();
        let filt = filter_pulse_train(&[], t, &grid).unwrap();
        let p = decay_rate(&g, &filt, ALPHA_EQUAL_SUPERPOSITION).unwrap();
        // Grid truncation at 400/t leaves ~ 1/(pi^2 * 400) of the area out.
        assert_relative_eq!(p.rate_per_s, g0 / 2.0, max_relative = 1e-3);
    }

    #[test]
    fn cpmg_rate_matches_fine_grid_oracle() {
        let g = BathSpectrum::lorentzian(2.0, 50.0).unwrap();
        let t = 1.0;
        let times = cpmg_times(16, t).unwrap();
        let coarse = FrequencyGrid::linear(0.0, 320.0, 5_121).unwrap();
        let fine = FrequencyGrid::linear(0.0, 320.0, 51_201).unwrap();
        let r_coarse = decay_rate(
            &g,
            &filter_pulse_train(&times, t, &coarse).unwrap(),
            0.25,
        )
        .unwrap()
        .rate_per_s;
        let r_fine = decay_rate(&g, &filter_pulse_train(&times, t, &fine).unwrap(), 0.25)
            .unwrap()
            .rate_per_s;
        assert_relative_eq!(r_coarse, r_fine, max_relative = 5e-3);
    }

    #[test]
    fn combine_t1_examples() {
        assert_relative_eq!(combine_t1(0.5, Some(2.2)).unwrap(), 0.5 + 2.0 / 2.2);
        assert_eq!(combine_t1(0.0, None).unwrap(), 0.0);
        assert_relative_eq!(combine_t1(1.0, Some(2.0)).unwrap(), 2.0);
        assert!(combine_t1(1.0, Some(0.0)).is_err());
        assert!(combine_t1(1.0, Some(-1.0)).is_err());
    }

    #[test]
    fn drive_rate_approaches_quarter_spectrum() {
        let g = BathSpectrum::lorentzian(2.0, 50.0).unwrap();
        // f0 = corner: G(f0) = 1.0, so R -> 0.25.
        let r = continuous_drive_rate(&g, 50.0, 1.0, 0.25).unwrap();
        assert_relative_eq!(r, 0.25, max_relative = 0.02);
        // Longer observation converges closer to the asymptote.
        let r10 = continuous_drive_rate(&g, 50.0, 10.0, 0.25).unwrap();
        assert!((r10 - 0.25).abs() < (r - 0.25).abs());
        // Far above the corner the spectrum (and the rate) vanish.
        let r_hi = continuous_drive_rate(&g, 5_000.0, 1.0, 0.25).unwrap();
        assert!(r_hi < 1e-3);
        // Too few Rabi cycles is a precondition violation.
        assert!(matches!(
            continuous_drive_rate(&g, 5.0, 1.0, 0.25),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn invert_spectrum_arithmetic_and_clamping() {
        let inv = invert_spectrum(&[(100.0, 0.5, 0.05)], 0.1).unwrap();
        assert_relative_eq!(inv.spectrum.value_at(100.0), 1.6, epsilon = 1e-12);
        assert_relative_eq!(inv.spectrum.uncertainty_at(100.0).unwrap(), 0.2);
        assert!(!inv.clamped[0]);

        let inv = invert_spectrum(&[(10.0, 0.05, 0.01), (20.0, 0.5, 0.01)], 0.1).unwrap();
        assert!(inv.clamped[0]);
        assert_eq!(inv.spectrum.value_at(10.0), 0.0);

        assert!(invert_spectrum(&[], 0.0).is_err());
        assert!(invert_spectrum(&[(10.0, 0.2, 0.0), (10.0, 0.3, 0.0)], 0.0).is_err());
    }

    #[test]
    fn round_trip_forward_then_invert_recovers_spectrum() {
        let g = BathSpectrum::lorentzian(4.0, 40.0).unwrap();
        let t = 2.0;
        let mut rates = Vec::new();
        for &f0 in &[25.0, 40.0, 80.0, 160.0, 320.0] {
            let r = continuous_drive_rate(&g, f0, t, 0.25).unwrap();
            rates.push((f0, r, 0.0));
        }
        let inv = invert_spectrum(&rates, 0.0).unwrap();
        for &(f0, _, _) in &rates {
            let got = inv.spectrum.value_at(f0);
            let expect = g.value_at(f0);
            assert!(
                (got - expect).abs() <= 0.03 * expect,
                "f0 = {f0}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn sideband_extraction_recovers_low_frequency_lorentzian() {
        let g = BathSpectrum::lorentzian(5.0, 30.0).unwrap();
        let (f0, fm, beta, t) = (300.0, 280.0, 0.5, 1.0);
        // Forward rates from full overlap integrals (independent of the
        // extraction's window attribution).
        let grid = FrequencyGrid::linear(0.0, 1200.0, 38_401).unwrap();
        let f_sb = filter_sideband_drive(f0, fm, beta, t, &grid).unwrap();
        let r_with = decay_rate(&g, &f_sb, 0.25).unwrap().rate_per_s;
        let r_without = continuous_drive_rate(&g, f0, t, 0.25).unwrap();
        let (f_probe, g_low) =
            sideband_extract(r_with, r_without, 0.0, beta, fm, f0, t, 0.25).unwrap();
        assert_eq!(f_probe, 20.0);
        let expect = g.value_at(20.0);
        assert!(
            (g_low - expect).abs() <= 0.10 * expect,
            "{g_low} vs {expect}"
        );
    }

    #[test]
    fn sideband_extraction_edge_cases() {
        assert!(matches!(
            sideband_extract(1.0, 0.9, 0.0, 0.0, 280.0, 300.0, 1.0, 0.25),
            Err(Error::InvalidArgument(_))
        ));
        // Zero rate difference means no detectable weight at the sideband.
        let (_, g_low) =
            sideband_extract(0.5, 0.5, 0.0, 0.5, 280.0, 300.0, 1.0, 0.25).unwrap();
        assert_eq!(g_low, 0.0);
        // A significant rate deficit is inconsistent.
        assert!(matches!(
            sideband_extract(0.3, 0.5, 0.01, 0.5, 280.0, 300.0, 1.0, 0.25),
            Err(Error::InconsistentMeasurement(_))
        ));
    }

    #[test]
    fn coherence_curve_trivial_and_white_cases() {
        let times: Vec<f64> = (1..=10).map(|i| i as f64 * 0.1).collect();
        let zero = flat_spectrum(0.0, 1e4);
        let c = coherence_curve(&zero, &WaveformFamily::Free, &times, 0.25, None).unwrap();
        assert!(c.coherence.iter().all(|&x| x == 1.0));

        // White noise, free evolution: C = e^{-g0 t / 2}.
        let g0 = 2.0;
        let white = flat_spectrum(g0, 1e6);
        let c = coherence_curve(&white, &WaveformFamily::Free, &times, 0.25, None).unwrap();
        for (&t, &coh) in times.iter().zip(&c.coherence) {
            assert_relative_eq!(coh, (-g0 * t / 2.0).exp(), max_relative = 5e-3);
        }

        // T1 multiplies in as e^{-2t/T1}.
        let c_t1 =
            coherence_curve(&white, &WaveformFamily::Free, &times, 0.25, Some(2.0)).unwrap();
        for i in 0..times.len() {
            assert_relative_eq!(
                c_t1.coherence[i],
                c.coherence[i] * (-2.0 * times[i] / 2.0).exp(),
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn cpmg_coherence_time_grows_with_pulse_count() {
        let g = BathSpectrum::lorentzian(30.0, 20.0).unwrap();
        let mut last = 0.0;
        for n in [2usize, 8, 32] {
            let fam = WaveformFamily::from_sequence(SequenceKind::Cpmg, Some(n), None).unwrap();
            let t2 = coherence_time(&g, &fam, 0.25, None, (-1.0f64).exp()).unwrap();
            assert!(
                t2 > last,
                "coherence time should grow with n: n = {n}, t2 = {t2}, prev = {last}"
            );
            last = t2;
        }
    }

    #[test]
    fn cpmg_beats_udd_and_cdd_on_lorentzian_bath() {
        // Coherence-time ranking. With the corner near 20 Hz the passband at
        // the 1/e time sits above the corner, where equal spacing
        // concentrates the filter at the lowest-G frequency; unequal
        // spacings (UDD, CDD) trade that for low-frequency suppression the
        // bath does not reward. At fixed observation time instead, CPMG and
        // CDD rates tie to within 1e-4 at small counts, so the time-domain
        // ranking is the robust formulation.
        let g = BathSpectrum::lorentzian(30.0, 20.0).unwrap();
        let target = (-1.0f64).exp();
        let t2_of =
            |fam: &WaveformFamily| coherence_time(&g, fam, 0.25, None, target).unwrap();
        let mut prev = 0.0;
        for n in [4usize, 8, 16, 32, 64] {
            let cpmg = WaveformFamily::from_sequence(SequenceKind::Cpmg, Some(n), None).unwrap();
            let udd = WaveformFamily::from_sequence(SequenceKind::Udd, Some(n), None).unwrap();
            let t2_cpmg = t2_of(&cpmg);
            assert!(
                t2_cpmg >= t2_of(&udd) * (1.0 - 1e-6),
                "CPMG should hold coherence at least as long as UDD at n = {n}"
            );
            assert!(t2_cpmg >= prev, "CPMG coherence time fell from n = {}", n / 2);
            prev = t2_cpmg;
        }
        for (order, count) in [(2usize, 5usize), (3, 10), (4, 21), (5, 42)] {
            let cpmg =
                WaveformFamily::from_sequence(SequenceKind::Cpmg, Some(count), None).unwrap();
            let cdd =
                WaveformFamily::from_sequence(SequenceKind::Cdd, Some(count), Some(order))
                    .unwrap();
            assert!(
                t2_of(&cpmg) >= t2_of(&cdd) * (1.0 - 1e-6),
                "CPMG should hold coherence at least as long as CDD at count = {count}"
            );
        }
    }

    #[test]
    fn fit_lorentzian_recovers_parameters() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (g0, fc) = (12.0, 35.0);
        let freqs: Vec<f64> = (1..=40).map(|i| i as f64 * 5.0).collect();
        let sigma = 0.2;
        let values: Vec<f64> = freqs
            .iter()
            .map(|&f| {
                g0 / (1.0 + (f / fc).powi(2))
                    + sigma * (rng.random::<f64>() - 0.5) * 2.0
            })
            .collect();
        let sigmas = vec![sigma; freqs.len()];
        let fit = fit_lorentzian(&freqs, &values, Some(&sigmas)).unwrap();
        assert_relative_eq!(fit.g0_per_s, g0, max_relative = 0.05);
        assert_relative_eq!(fit.corner_hz, fc, max_relative = 0.08);
        assert!(fit.g0_uncertainty > 0.0 && fit.corner_uncertainty > 0.0);
    }

    #[test]
    fn grid_support_mismatch_is_an_error() {
        let g = BathSpectrum::tabulated(
            vec![1000.0, 2000.0],
            vec![1.0, 1.0],
            None,
            SpectrumOrigin::Analytic,
        )
        .unwrap();
        let grid = FrequencyGrid::linear(0.0, 100.0, 101).unwrap();
        let filt = filter_pulse_train(&[], 1.0, &grid).unwrap();
        assert!(decay_rate(&g, &filt, 0.25).is_err());
    }

    proptest! {
        #[test]
        fn decay_rate_is_linear_and_monotone_in_spectrum(
            scale in 0.1f64..50.0,
            seed in 0u64..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let freqs: Vec<f64> = (0..40).map(|i| i as f64 * 5.0).collect();
            let base: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 10.0).collect();
            let g1 = BathSpectrum::tabulated(
                freqs.clone(), base.clone(), None, SpectrumOrigin::Analytic,
            ).unwrap();
            let scaled: Vec<f64> = base.iter().map(|v| v * scale).collect();
            let g2 = BathSpectrum::tabulated(
                freqs.clone(), scaled, None, SpectrumOrigin::Analytic,
            ).unwrap();
            // Pointwise-larger third spectrum.
            let bumped: Vec<f64> = base.iter().map(|v| v + rng.random::<f64>()).collect();
            let g3 = BathSpectrum::tabulated(
                freqs, bumped, None, SpectrumOrigin::Analytic,
            ).unwrap();

            let t = 0.5;
            let grid = FrequencyGrid::linear(0.0, 200.0, 2001).unwrap();
            let filt = filter_pulse_train(&cpmg_times(4, t).unwrap(), t, &grid).unwrap();
            let r1 = decay_rate(&g1, &filt, 0.25).unwrap().rate_per_s;
            let r2 = decay_rate(&g2, &filt, 0.25).unwrap().rate_per_s;
            let r3 = decay_rate(&g3, &filt, 0.25).unwrap().rate_per_s;
            prop_assert!((r2 - scale * r1).abs() <= 1e-12 * r2.abs().max(scale * r1.abs()));
            prop_assert!(r3 >= r1);
        }
    }
}
