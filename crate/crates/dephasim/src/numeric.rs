//! Shared numerical routines: quadrature, interpolation, special functions,
//! 1-D minimization, root bracketing, and small least-squares solvers.
//!
//! Everything here is deterministic and allocation-light; the physics modules
//! build on these primitives so that integration and fitting behavior is
//! consistent across the crate.

use crate::error::{Error, Result};
use num_complex::Complex64;

/// Trapezoid rule over a tabulated function. `xs` must be strictly increasing
/// and the same length as `ys`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let mut acc = 0.0;
    for i in 1..xs.len() {
        acc += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    }
    acc
}

/// Linear interpolation with clamping to the end values outside the grid.
/// `xs` must be strictly increasing, non-empty, and as long as `ys`.
pub fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    debug_assert!(!xs.is_empty());
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    // partition_point returns the first index with xs[i] > x; i >= 1 here.
    let i = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[i - 1], xs[i]);
    let t = (x - x0) / (x1 - x0);
    ys[i - 1] + t * (ys[i] - ys[i - 1])
}

fn simpson(f0: f64, fm: f64, f1: f64, h: f64) -> f64 {
    (f0 + 4.0 * fm + f1) * h / 6.0
}

/// Adaptive Simpson quadrature of a real integrand on [a, b].
///
/// `rel_tol` controls the local error relative to the accumulated integral;
/// `abs_floor` guards the relative test when the integral is near zero.
/// Fails with [`Error::NumericFailure`] if the recursion depth limit is hit
/// before the tolerance is met.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<f64> {
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> std::result::Result<f64, f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let err = (left + right - whole) / 15.0;
        if err.abs() <= tol || depth == 0 {
            if depth == 0 && err.abs() > tol {
                return Err(err.abs());
            }
            return Ok(left + right + err);
        }
        let l = recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
        let r = recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
        Ok(l + r)
    }

    if !(b > a) {
        return Err(Error::invalid(format!(
            "integration interval [{a}, {b}] is empty or reversed"
        )));
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, b - a);
    let tol = rel_tol * whole.abs().max(abs_floor);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48).map_err(|achieved| Error::NumericFailure {
        context: "adaptive Simpson quadrature".into(),
        achieved,
        required: tol,
    })
}

/// Adaptive Simpson quadrature of a complex integrand on [a, b]; the error
/// control is applied to the complex magnitude of the local correction.
pub fn adaptive_simpson_complex<F: Fn(f64) -> Complex64>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<Complex64> {
    fn simpson_c(f0: Complex64, fm: Complex64, f1: Complex64, h: f64) -> Complex64 {
        (f0 + 4.0 * fm + f1) * (h / 6.0)
    }
    fn recurse<F: Fn(f64) -> Complex64>(
        f: &F,
        a: f64,
        b: f64,
        fa: Complex64,
        fm: Complex64,
        fb: Complex64,
        whole: Complex64,
        tol: f64,
        depth: u32,
    ) -> std::result::Result<Complex64, f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson_c(fa, flm, fm, m - a);
        let right = simpson_c(fm, frm, fb, b - m);
        let err = (left + right - whole) / 15.0;
        if err.norm() <= tol || depth == 0 {
            if depth == 0 && err.norm() > tol {
                return Err(err.norm());
            }
            return Ok(left + right + err);
        }
        let l = recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
        let r = recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
        Ok(l + r)
    }

    if !(b > a) {
        return Err(Error::invalid(format!(
            "integration interval [{a}, {b}] is empty or reversed"
        )));
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson_c(fa, fm, fb, b - a);
    let tol = rel_tol * whole.norm().max(abs_floor);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48).map_err(|achieved| Error::NumericFailure {
        context: "adaptive complex Simpson quadrature".into(),
        achieved,
        required: tol,
    })
}

/// Sine integral Si(x) = integral of sin(t)/t from 0 to x.
///
/// Power series below |x| = 2, Lentz continued fraction for the complex
/// exponential integral above; absolute accuracy is near machine precision
/// over the tested range. Odd in x.
pub fn sine_integral(x: f64) -> f64 {
    let ax = x.abs();
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    if ax < 1e-300 {
        return 0.0;
    }
    if ax <= 2.0 {
        // Si(x) = sum_k (-1)^k x^(2k+1) / ((2k+1) (2k+1)!)
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        let mut k = 1u32;
        loop {
            let n = 2 * k as u64;
            term *= -x2 / ((n * (n + 1)) as f64);
            let contrib = term / (n + 1) as f64;
            sum += contrib;
            if contrib.abs() < 1e-17 * sum.abs() {
                break;
            }
            k += 1;
        }
        return sign * sum;
    }
    // Continued fraction for E1(i x), modified Lentz.
    let mut b = Complex64::new(1.0, ax);
    let mut c = Complex64::new(1.0 / 1e-300, 0.0);
    let mut d = b.inv();
    let mut h = d;
    for i in 1..200 {
        let a = -((i * i) as f64);
        b += Complex64::new(2.0, 0.0);
        d = (a * d + b).inv();
        c = b + a * c.inv();
        let del = c * d;
        h *= del;
        if (del - Complex64::new(1.0, 0.0)).norm() < 1e-16 {
            break;
        }
    }
    h *= Complex64::new(ax.cos(), -ax.sin());
    // h = -Ci(x) + i (si(x)) where si = Si - pi/2
    sign * (std::f64::consts::FRAC_PI_2 + h.im)
}

/// Golden-section minimization of a unimodal function on [a, b].
/// Returns (argmin, min). Tolerance is on the argument.
pub fn golden_section<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, x_tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > x_tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let xm = 0.5 * (a + b);
    (xm, f(xm))
}

/// Bisection root of `f` on a bracketing interval [a, b] (f(a) and f(b) of
/// opposite sign) to relative x-tolerance.
pub fn bisect<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, rel_tol: f64) -> Result<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::invalid(format!(
            "bisection bracket [{a}, {b}] does not straddle a root"
        )));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 || (b - a).abs() <= rel_tol * m.abs().max(f64::MIN_POSITIVE) {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Result of a straight-line fit y = intercept + slope * x.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_err: f64,
    pub slope_err: f64,
    pub chi2: f64,
    pub dof: usize,
}

impl LinearFit {
    /// Reduced chi-square; infinite when there are no spare degrees of freedom.
    pub fn chi2_per_dof(&self) -> f64 {
        if self.dof == 0 {
            f64::INFINITY
        } else {
            self.chi2 / self.dof as f64
        }
    }
}

/// Weighted least-squares line fit. `weights[i]` is 1/sigma_i^2; pass `None`
/// for an unweighted fit, in which case parameter errors are scaled by the
/// residual variance (sqrt(chi2/dof)).
pub fn linear_fit(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> Result<LinearFit> {
    let n = xs.len();
    if n != ys.len() || weights.map(|w| w.len() != n).unwrap_or(false) {
        return Err(Error::invalid("linear fit input lengths differ"));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "linear fit needs at least 2 points, got {n}"
        )));
    }
    let w_at = |i: usize| weights.map(|w| w[i]).unwrap_or(1.0);
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let w = w_at(i);
        if !(w > 0.0) || !xs[i].is_finite() || !ys[i].is_finite() {
            return Err(Error::invalid(
                "linear fit requires finite inputs and positive weights",
            ));
        }
        sw += w;
        swx += w * xs[i];
        swy += w * ys[i];
        swxx += w * xs[i] * xs[i];
        swxy += w * xs[i] * ys[i];
    }
    let det = sw * swxx - swx * swx;
    if det.abs() <= 1e-14 * sw * swxx.max(1e-300) {
        return Err(Error::InsufficientVariation(
            "linear fit abscissae are (nearly) identical".into(),
        ));
    }
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swxx * swy - swx * swxy) / det;
    let mut chi2 = 0.0;
    for i in 0..n {
        let r = ys[i] - intercept - slope * xs[i];
        chi2 += w_at(i) * r * r;
    }
    let dof = n.saturating_sub(2);
    let mut var_slope = sw / det;
    let mut var_intercept = swxx / det;
    if weights.is_none() && dof > 0 {
        let scale = chi2 / dof as f64;
        var_slope *= scale;
        var_intercept *= scale;
    }
    Ok(LinearFit {
        intercept,
        slope,
        intercept_err: var_intercept.sqrt(),
        slope_err: var_slope.sqrt(),
        chi2,
        dof,
    })
}

/// Solve the symmetric positive-(semi)definite system `a x = b` in place by
/// Gaussian elimination with partial pivoting. `a` is row-major n x n.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return Err(Error::NumericFailure {
                context: "dense solve (singular normal equations)".into(),
                achieved: a[piv * n + col].abs(),
                required: 1e-300,
            });
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Levenberg-Marquardt output for a small nonlinear least-squares problem.
#[derive(Debug, Clone)]
pub struct NonlinearFit {
    pub params: Vec<f64>,
    /// Row-major covariance estimate (residual-variance scaled).
    pub covariance: Vec<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

/// Levenberg-Marquardt for small dense problems. `residuals(p, out)` fills
/// one residual per data point; the Jacobian is taken by forward differences.
/// Intended for a handful of parameters and up to a few thousand points.
pub fn levenberg_marquardt<R>(
    residuals: R,
    initial: &[f64],
    n_resid: usize,
    max_iter: usize,
) -> Result<NonlinearFit>
where
    R: Fn(&[f64], &mut [f64]),
{
    let np = initial.len();
    if np == 0 || n_resid < np {
        return Err(Error::InsufficientData(format!(
            "{n_resid} residuals cannot constrain {np} parameters"
        )));
    }
    let mut p = initial.to_vec();
    let mut r = vec![0.0; n_resid];
    let mut r_trial = vec![0.0; n_resid];
    let mut jac = vec![0.0; n_resid * np];
    residuals(&p, &mut r);
    let mut chi2: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // Forward-difference Jacobian.
        for j in 0..np {
            let step = 1e-6 * p[j].abs().max(1e-6);
            let mut pj = p.clone();
            pj[j] += step;
            residuals(&pj, &mut r_trial);
            for i in 0..n_resid {
                jac[i * np + j] = (r_trial[i] - r[i]) / step;
            }
        }
        // Normal equations J^T J + lambda diag, J^T r.
        let mut jtj = vec![0.0; np * np];
        let mut jtr = vec![0.0; np];
        for i in 0..n_resid {
            for a in 0..np {
                let ja = jac[i * np + a];
                jtr[a] += ja * r[i];
                for b in a..np {
                    jtj[a * np + b] += ja * jac[i * np + b];
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtj[a * np + b] = jtj[b * np + a];
            }
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut lhs = jtj.clone();
            for a in 0..np {
                lhs[a * np + a] += lambda * jtj[a * np + a].max(1e-12);
            }
            let mut step = jtr.clone();
            if solve_dense(&mut lhs, &mut step, np).is_err() {
                lambda *= 10.0;
                continue;
            }
            let trial: Vec<f64> = (0..np).map(|a| p[a] - step[a]).collect();
            residuals(&trial, &mut r_trial);
            let chi2_trial: f64 = r_trial.iter().map(|v| v * v).sum();
            if chi2_trial < chi2 {
                let rel_drop = (chi2 - chi2_trial) / chi2.max(1e-300);
                p = trial;
                std::mem::swap(&mut r, &mut r_trial);
                chi2 = chi2_trial;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel_drop < 1e-10 {
                    iterations = max_iter; // converged; exit outer loop below
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved || iterations >= max_iter {
            break;
        }
    }
    // Covariance from (J^T J)^-1 scaled by residual variance.
    let dof = n_resid - np;
    let scale = if dof > 0 { chi2 / dof as f64 } else { 0.0 };
    let mut jtj = vec![0.0; np * np];
    for j in 0..np {
        let step = 1e-6 * p[j].abs().max(1e-6);
        let mut pj = p.clone();
        pj[j] += step;
        residuals(&pj, &mut r_trial);
        for i in 0..n_resid {
            jac[i * np + j] = (r_trial[i] - r[i]) / step;
        }
    }
    for i in 0..n_resid {
        for a in 0..np {
            for b in a..np {
                jtj[a * np + b] += jac[i * np + a] * jac[i * np + b];
            }
        }
    }
    for a in 0..np {
        for b in 0..a {
            jtj[a * np + b] = jtj[b * np + a];
        }
    }
    let mut cov = vec![0.0; np * np];
    for col in 0..np {
        let mut lhs = jtj.clone();
        let mut e = vec![0.0; np];
        e[col] = 1.0;
        solve_dense(&mut lhs, &mut e, np)?;
        for row in 0..np {
            cov[row * np + col] = e[row] * scale;
        }
    }
    Ok(NonlinearFit {
        params: p,
        covariance: cov,
        chi2,
        dof,
        iterations,
    })
}

/// Error function, Abramowitz & Stegun 7.1.26 rational approximation
/// (absolute error < 1.5e-7), extended to negative arguments by oddness.
/// Accurate enough for distribution-shape tests; not for precision tails.
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Composite Simpson rule with `n_intervals` uniform intervals (rounded up to
/// even). Suited to smooth oscillatory integrands where the caller knows the
/// oscillation scale and picks the sampling density directly.
pub fn simpson_uniform<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n_intervals: usize) -> f64 {
    let n = n_intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Bessel function of the first kind J_n(x) for integer order n >= 0, by the
/// ascending power series. Accurate and fast for the moderate arguments used
/// here (|x| up to ~10); not intended for large-argument asymptotics.
pub fn bessel_j(n: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    // term_0 = (x/2)^n / n!
    let mut term = 1.0;
    for k in 1..=n {
        term *= half / k as f64;
    }
    let mut sum = term;
    let neg_q = -half * half;
    for m in 1..200 {
        term *= neg_q / (m as f64 * (m as f64 + n as f64));
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() + 1e-300 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trapezoid_integrates_line_exactly() {
        let xs: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert_relative_eq!(trapezoid(&xs, &ys), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn interp_clamps_and_interpolates() {
        let xs = [1.0, 2.0, 4.0];
        let ys = [10.0, 20.0, 40.0];
        assert_eq!(interp_clamped(&xs, &ys, 0.0), 10.0);
        assert_eq!(interp_clamped(&xs, &ys, 5.0), 40.0);
        assert_relative_eq!(interp_clamped(&xs, &ys, 3.0), 30.0, epsilon = 1e-14);
    }

    #[test]
    fn simpson_oscillatory() {
        let v = adaptive_simpson(&|x: f64| (10.0 * x).sin(), 0.0, 1.0, 1e-10, 1e-12).unwrap();
        let exact = (1.0 - (10.0f64).cos()) / 10.0;
        assert_relative_eq!(v, exact, max_relative = 1e-9);
    }

    #[test]
    fn simpson_complex_fourier_kernel() {
        // integral of e^{-2 pi i f t} over [0, T] = T e^{-pi i f T} sinc(f T)
        let (f, t) = (3.0, 0.7);
        let v = adaptive_simpson_complex(
            &|x: f64| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * x),
            0.0,
            t,
            1e-11,
            1e-13,
        )
        .unwrap();
        let phase = std::f64::consts::PI * f * t;
        let exact = Complex64::from_polar(t * (phase.sin() / phase), -phase);
        assert!((v - exact).norm() < 1e-10);
    }

    #[test]
    fn sine_integral_reference_values() {
        // Reference values from standard tables.
        assert_relative_eq!(sine_integral(1.0), 0.946_083_070_367_183, epsilon = 1e-12);
        assert_relative_eq!(sine_integral(2.0), 1.605_412_976_802_695, epsilon = 1e-12);
        assert_relative_eq!(sine_integral(10.0), 1.658_347_594_218_874, epsilon = 1e-11);
        assert_relative_eq!(sine_integral(-1.0), -0.946_083_070_367_183, epsilon = 1e-12);
        // Large-argument limit is pi/2.
        assert_relative_eq!(
            sine_integral(1e6),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-5
        );
    }

    #[test]
    fn golden_section_quadratic() {
        // The +1 offset makes the quadratic flat to double precision within
        // ~sqrt(eps) of the minimum, so localization below ~1e-8 is not
        // achievable regardless of x_tol.
        let (x, _) = golden_section(&|x: f64| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 1e-10);
        assert_relative_eq!(x, 0.3, epsilon = 1e-6);
    }

    #[test]
    fn bisect_finds_root() {
        let r = bisect(&|x: f64| x * x - 2.0, 0.0, 2.0, 1e-12).unwrap();
        assert_relative_eq!(r, std::f64::consts::SQRT_2, epsilon = 1e-10);
    }

    #[test]
    fn linear_fit_recovers_line_with_weights() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let w = [1.0, 4.0, 1.0, 0.25];
        let fit = linear_fit(&xs, &ys, Some(&w)).unwrap();
        assert_relative_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, 1.0, epsilon = 1e-12);
        assert!(fit.chi2 < 1e-20);
    }

    #[test]
    fn linear_fit_rejects_degenerate_x() {
        let xs = [1.0, 1.0, 1.0];
        let ys = [1.0, 2.0, 3.0];
        assert!(matches!(
            linear_fit(&xs, &ys, None),
            Err(Error::InsufficientVariation(_))
        ));
    }

    #[test]
    fn lm_fits_damped_cosine() {
        // y = a cos(b x) with a=2, b=3, from clean samples.
        let xs: Vec<f64> = (0..60).map(|i| i as f64 * 0.05).collect();
        let data: Vec<f64> = xs.iter().map(|&x| 2.0 * (3.0 * x).cos()).collect();
        let fit = levenberg_marquardt(
            |p, out| {
                for (i, &x) in xs.iter().enumerate() {
                    out[i] = p[0] * (p[1] * x).cos() - data[i];
                }
            },
            &[1.5, 2.5],
            xs.len(),
            100,
        )
        .unwrap();
        assert_relative_eq!(fit.params[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(fit.params[1], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn simpson_uniform_oscillatory() {
        // 16 points per period resolves sin^2 to ~1e-7.
        let v = simpson_uniform(|x: f64| x.sin().powi(2), 0.0, 20.0 * std::f64::consts::PI, 160);
        assert_relative_eq!(v, 10.0 * std::f64::consts::PI, max_relative = 1e-7);
    }

    #[test]
    fn bessel_reference_values_and_sum_rule() {
        // Reference values from standard tables.
        assert_relative_eq!(bessel_j(0, 0.6), 0.912_004_863_497_210_9, epsilon = 1e-12);
        assert_relative_eq!(bessel_j(1, 0.6), 0.286_700_988_063_99, epsilon = 1e-12);
        assert_relative_eq!(bessel_j(0, 2.0), 0.223_890_779_141_235_6, epsilon = 1e-12);
        assert_relative_eq!(bessel_j(2, 1.0), 0.114_903_484_931_900_5, epsilon = 1e-12);
        // sum rule J_0^2 + 2 sum_{k>=1} J_k^2 = 1.
        for &x in &[0.3, 1.0, 3.0] {
            let mut s = bessel_j(0, x).powi(2);
            for k in 1..40 {
                s += 2.0 * bessel_j(k, x).powi(2);
            }
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn erf_reference_values() {
        // The rational approximation's coefficients sum to 1 only to ~1e-9,
        // so erf(0) carries that residue rather than being exactly zero.
        assert_relative_eq!(erf(0.0), 0.0, epsilon = 1e-8);
        assert_relative_eq!(erf(0.5), 0.520_499_877_8, epsilon = 3e-7);
        assert_relative_eq!(erf(1.0), 0.842_700_792_9, epsilon = 3e-7);
        assert_relative_eq!(erf(2.0), 0.995_322_265_0, epsilon = 3e-7);
        assert_relative_eq!(erf(-1.0), -erf(1.0), epsilon = 1e-15);
        assert!(erf(6.0) <= 1.0 && erf(6.0) > 0.999_999);
    }
}
