//! Gamma frailty density and expectations over the frailty variable.
//!
//! Every quantity the model needs (prediction numerators and denominators,
//! posterior moments, the marginal likelihood) is an integral of the form
//! `E[f(u)] = ∫ f(u) g(u) du` with `g` the mean-one gamma density of
//! variance `θ`. Integrands are handled in log space throughout.
//!
//! Three rules are available:
//!
//! * [`Scheme::GammaGauss`]: generalized Gauss–Laguerre nodes matched to `g`,
//!   so the rule only sees `f`. Exact for polynomials, but `f` usually carries
//!   non-integer powers `u^γ`, so the rule is run at `n` and `2n` nodes and
//!   falls back to the adaptive rule when the two disagree.
//! * [`Scheme::Trapezoid`]: fixed-step trapezoid rule in `s = ln u`, anchored
//!   at the mode of the full log-integrand and stretched by a sinh map. The
//!   integrand is smooth and decays at least exponentially in `s`, so the
//!   rule converges geometrically and is a smooth function of the inputs.
//! * [`Scheme::Adaptive`]: globally adaptive Gauss–Kronrod (7/15) subdivision
//!   in `s = ln u` over a mode-anchored interval bounded where the integrand
//!   falls below `e^-50` of its peak.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::rc::Rc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{ensure_positive, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Log-integrand drop (relative to the peak) treated as negligible.
const TAIL_CUT: f64 = 50.0;
const S_MIN: f64 = -700.0;
const S_MAX: f64 = 700.0;
const MAX_PANELS: usize = 4000;

/// Mean-one gamma frailty with variance `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrailtyParams {
    pub variance: f64,
}

impl FrailtyParams {
    pub fn new(variance: f64) -> Result<Self> {
        ensure_positive("frailty variance", variance)?;
        Ok(Self { variance })
    }

    /// Gamma shape `1/θ` (also the rate, since the mean is one).
    pub fn shape(&self) -> f64 {
        1.0 / self.variance
    }

    /// `ln g(u)`. Written around `u = 1` so that tiny variances keep full
    /// precision: `k(ln u - u + 1) - ln u + ½ ln(k/2π) - stirling(k)`.
    pub fn log_density(&self, u: f64) -> f64 {
        if !(u > 0.0) {
            return f64::NEG_INFINITY;
        }
        let s = u.ln();
        self.log_density_in_log_scale(s) - s
    }

    /// `ln(u g(u))` at `u = e^s`, the density of `ln u`.
    pub(crate) fn log_density_in_log_scale(&self, s: f64) -> f64 {
        let k = self.shape();
        k * (s - s.exp_m1()) + self.log_norm()
    }

    fn log_norm(&self) -> f64 {
        let k = self.shape();
        0.5 * (k.ln() - LN_2PI) - stirling_remainder(k)
    }
}

/// `ln Γ(k) - (k - ½) ln k + k - ½ ln 2π`.
fn stirling_remainder(k: f64) -> f64 {
    if k >= 10.0 {
        let r = 1.0 / k;
        let r2 = r * r;
        r * (1.0 / 12.0 - r2 * (1.0 / 360.0 - r2 * (1.0 / 1260.0 - r2 * (1.0 / 1680.0 - r2 / 1188.0))))
    } else {
        ln_gamma(k) - (k - 0.5) * k.ln() + k - 0.5 * LN_2PI
    }
}

/// Gamma frailty density `g(u)`.
pub fn frailty_density(frailty: FrailtyParams, u: f64) -> Result<f64> {
    ensure_positive("frailty variance", frailty.variance)?;
    if !(u > 0.0) {
        return Err(Error::Domain(format!("frailty density needs u > 0, got {u}")));
    }
    Ok(frailty.log_density(u).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    GammaGauss,
    Trapezoid,
    Adaptive,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::GammaGauss => "gamma-gauss",
            Scheme::Trapezoid => "trapezoid",
            Scheme::Adaptive => "adaptive",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma-gauss" => Ok(Scheme::GammaGauss),
            "trapezoid" => Ok(Scheme::Trapezoid),
            "adaptive" => Ok(Scheme::Adaptive),
            other => Err(Error::Usage(format!("unknown quadrature scheme '{other}' (gamma-gauss|trapezoid|adaptive)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Gauss nodes for `GammaGauss` (doubled on escalation); for `Trapezoid`
    /// the step near the mode is `12.8 / node_count` curvature widths,
    /// capped at the same multiple of one unit of `ln u`.
    pub node_count: usize,
    pub scheme: Scheme,
    pub rel_tol: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { node_count: 64, scheme: Scheme::GammaGauss, rel_tol: 1e-9 }
    }
}

impl QuadratureSpec {
    pub fn new(node_count: usize, scheme: Scheme, rel_tol: f64) -> Result<Self> {
        let spec = Self { node_count, scheme, rel_tol };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_scheme(self, scheme: Scheme) -> Self {
        Self { scheme, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count < 8 {
            return Err(Error::Parameter(format!("node_count must be >= 8, got {}", self.node_count)));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-3) {
            return Err(Error::Parameter(format!("rel_tol must lie in (0, 1e-3], got {}", self.rel_tol)));
        }
        Ok(())
    }
}

/// Which rule produced an estimate and what it cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureReport {
    pub scheme: Scheme,
    pub evaluations: usize,
    /// Relative error estimate of the returned value.
    pub rel_error: f64,
    /// True when the Gauss rule had to hand over to the adaptive rule.
    pub fell_back: bool,
}

impl QuadratureReport {
    /// Combines the reports of several integrals into one summary.
    pub fn merge(self, other: Self) -> Self {
        Self {
            scheme: if other.fell_back || other.scheme == Scheme::Adaptive { other.scheme } else { self.scheme },
            evaluations: self.evaluations + other.evaluations,
            rel_error: self.rel_error.max(other.rel_error),
            fell_back: self.fell_back || other.fell_back,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub report: QuadratureReport,
}

/// A log-integrand `ln f(u)` on `u > 0`.
pub trait LogIntegrand {
    /// `ln f(u)`, `-inf` where `f` vanishes.
    fn log_f(&self, u: f64) -> f64;

    /// `(v, v', v'')` for `v(s) = ln f(e^s)` when available in closed form.
    /// Implementations returning `Some` promise that `v` is concave in `s`.
    fn log_scale_derivatives(&self, _s: f64) -> Option<(f64, f64, f64)> {
        None
    }
}

impl<F: Fn(f64) -> f64> LogIntegrand for F {
    fn log_f(&self, u: f64) -> f64 {
        self(u)
    }
}

/// `ln f(u) = power ln u - death_load u^γ - recurrent_load u
///            [+ ln(1 - exp(-window_load u^γ))]`.
///
/// Covers every frailty integrand of the joint model. Concave in `ln u` for
/// nonnegative loads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrailtyKernel {
    pub power: f64,
    pub death_load: f64,
    pub death_exponent: f64,
    pub recurrent_load: f64,
    pub window_load: Option<f64>,
}

impl FrailtyKernel {
    pub fn new(power: f64, death_load: f64, death_exponent: f64, recurrent_load: f64) -> Self {
        Self { power, death_load, death_exponent, recurrent_load, window_load: None }
    }

    pub fn with_window(self, window_load: f64) -> Self {
        Self { window_load: Some(window_load), ..self }
    }
}

impl LogIntegrand for FrailtyKernel {
    fn log_f(&self, u: f64) -> f64 {
        if !(u > 0.0) {
            return f64::NEG_INFINITY;
        }
        let y = u.powf(self.death_exponent);
        let mut v = self.power * u.ln() - self.death_load * y - self.recurrent_load * u;
        if let Some(e) = self.window_load {
            v += (-(-e * y).exp_m1()).ln();
        }
        v
    }

    fn log_scale_derivatives(&self, s: f64) -> Option<(f64, f64, f64)> {
        let g = self.death_exponent;
        let x = s.exp();
        let y = (g * s).exp();
        let mut v = self.power * s - self.death_load * y - self.recurrent_load * x;
        let mut d1 = self.power - self.death_load * g * y - self.recurrent_load * x;
        let mut d2 = -self.death_load * g * g * y - self.recurrent_load * x;
        if let Some(e) = self.window_load {
            let q = e * y;
            v += (-(-q).exp_m1()).ln();
            if q < 700.0 && q > 0.0 {
                let em = q.exp_m1();
                d1 += g * q / em;
                d2 += g * g * q * (em - q * q.exp()) / (em * em);
            } else if q == 0.0 {
                // ln(1 - e^{-q}) ~ ln q near zero
                d1 += g;
            }
        }
        Some((v, d1, d2))
    }
}

/// `E[f(u)]` for a nonnegative integrand.
pub fn integrate_frailty<F: Fn(f64) -> f64>(frailty: FrailtyParams, f: F, spec: &QuadratureSpec) -> Result<Integral> {
    let log_f = |u: f64| {
        let v = f(u);
        if v > 0.0 {
            v.ln()
        } else {
            f64::NEG_INFINITY
        }
    };
    let out = log_integrate_frailty(frailty, &log_f, spec)?;
    Ok(Integral { value: out.value.exp(), report: out.report })
}

/// `ln E[exp(log_f(u))]`, computed with max-shifted summation.
pub fn log_integrate_frailty<I: LogIntegrand + ?Sized>(
    frailty: FrailtyParams,
    log_f: &I,
    spec: &QuadratureSpec,
) -> Result<Integral> {
    ensure_positive("frailty variance", frailty.variance)?;
    spec.validate()?;
    match spec.scheme {
        Scheme::GammaGauss => gamma_gauss_with_escalation(frailty, log_f, spec),
        Scheme::Trapezoid => {
            let target = LogScaleTarget { frailty, log_f };
            trapezoid(&target, spec.node_count)
        }
        Scheme::Adaptive => {
            let target = LogScaleTarget { frailty, log_f };
            adaptive(&target, spec.rel_tol)
        }
    }
}

fn gamma_gauss_with_escalation<I: LogIntegrand + ?Sized>(
    frailty: FrailtyParams,
    log_f: &I,
    spec: &QuadratureSpec,
) -> Result<Integral> {
    let coarse = GammaGaussRule::cached(frailty, spec.node_count)?.log_integrate(log_f);
    let fine = GammaGaussRule::cached(frailty, 2 * spec.node_count)?.log_integrate(log_f);
    let evaluations = 3 * spec.node_count;
    if coarse == f64::NEG_INFINITY && fine == f64::NEG_INFINITY {
        let report = QuadratureReport { scheme: Scheme::GammaGauss, evaluations, rel_error: 0.0, fell_back: false };
        return Ok(Integral { value: fine, report });
    }
    let rel = (coarse - fine).exp_m1().abs();
    if rel.is_finite() && rel <= spec.rel_tol {
        let report = QuadratureReport { scheme: Scheme::GammaGauss, evaluations, rel_error: rel, fell_back: false };
        return Ok(Integral { value: fine, report });
    }
    let target = LogScaleTarget { frailty, log_f };
    match adaptive(&target, spec.rel_tol) {
        Ok(mut out) => {
            out.report.evaluations += evaluations;
            out.report.fell_back = true;
            Ok(out)
        }
        Err(Error::Accuracy { .. }) => Err(Error::Accuracy { coarse, fine, rel_tol: spec.rel_tol }),
        Err(e) => Err(e),
    }
}

type RuleEntry = ((u64, usize), Rc<GammaGaussRule>);

/// Generalized Gauss–Laguerre rule for the gamma frailty density, with
/// weights normalized to sum to one.
#[derive(Debug, Clone)]
pub struct GammaGaussRule {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GammaGaussRule {
    pub fn new(frailty: FrailtyParams, n: usize) -> Result<Self> {
        ensure_positive("frailty variance", frailty.variance)?;
        if n == 0 {
            return Err(Error::Parameter("Gauss rule needs at least one node".into()));
        }
        let alpha = frailty.shape() - 1.0;
        let diag = |j: usize| 2.0 * j as f64 + alpha + 1.0;
        let off = |j: usize| (j as f64 * (j as f64 + alpha)).sqrt();

        // Golub–Welsch: eigenvalues of the Jacobi matrix are the nodes.
        let jacobi = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => diag(i),
            1 => off(i.max(j)),
            _ => 0.0,
        });
        let mut xs: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        xs.sort_by(|a, b| a.total_cmp(b));

        let mut nodes = Vec::with_capacity(n);
        let mut log_weights = Vec::with_capacity(n);
        for mut x in xs {
            // Newton polish on the orthonormal recurrence, then
            // w = 1 / sum_j p_j(x)^2 (normalized measure).
            for _ in 0..3 {
                let (p, dp, _) = orthonormal_eval(x, n, &diag, &off);
                if dp == 0.0 || !dp.is_finite() {
                    break;
                }
                let step = p / dp;
                let next = x - step;
                if !(next > 0.0) || !next.is_finite() {
                    break;
                }
                x = next;
                if step.abs() <= 1e-15 * x {
                    break;
                }
            }
            let (_, _, log_sum_sq) = orthonormal_eval(x, n, &diag, &off);
            nodes.push(x * frailty.variance);
            log_weights.push(-log_sum_sq);
        }
        Ok(Self { nodes, log_weights })
    }

    /// Rules recently built on this thread, keyed by `(θ, n)`.
    pub fn cached(frailty: FrailtyParams, n: usize) -> Result<Rc<Self>> {
        const CAPACITY: usize = 16;
        thread_local! {
            static RULES: RefCell<VecDeque<RuleEntry>> = RefCell::new(VecDeque::with_capacity(CAPACITY));
        }
        let key = (frailty.variance.to_bits(), n);
        if let Some(rule) = RULES.with(|r| r.borrow().iter().find(|(k, _)| *k == key).map(|(_, v)| Rc::clone(v))) {
            return Ok(rule);
        }
        let rule = Rc::new(Self::new(frailty, n)?);
        RULES.with(|r| {
            let mut r = r.borrow_mut();
            if r.len() == CAPACITY {
                r.pop_front();
            }
            r.push_back((key, Rc::clone(&rule)));
        });
        Ok(rule)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_weights.iter().map(|w| w.exp())
    }

    pub fn log_integrate<I: LogIntegrand + ?Sized>(&self, log_f: &I) -> f64 {
        let terms: Vec<f64> = self.nodes.iter().zip(&self.log_weights).map(|(&u, &lw)| lw + log_f.log_f(u)).collect();
        log_sum_exp(&terms)
    }
}

/// Returns `(p_n(x), p_n'(x), ln sum_{j<n} p_j(x)^2)` for the orthonormal
/// family of the Jacobi matrix, with the first two rescaled by a common
/// factor to avoid overflow.
fn orthonormal_eval(x: f64, n: usize, diag: &impl Fn(usize) -> f64, off: &impl Fn(usize) -> f64) -> (f64, f64, f64) {
    let (mut p_prev, mut p) = (0.0, 1.0);
    let (mut d_prev, mut d) = (0.0, 0.0);
    let mut log_scale = 0.0;
    let mut sum_sq = 0.0;
    for j in 0..n {
        sum_sq += p * p;
        let b_next = off(j + 1);
        let b_cur = if j == 0 { 0.0 } else { off(j) };
        let p_next = ((x - diag(j)) * p - b_cur * p_prev) / b_next;
        let d_next = (p + (x - diag(j)) * d - b_cur * d_prev) / b_next;
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
        let m = p.abs().max(p_prev.abs());
        if m > 1e100 {
            let r = 1.0 / m;
            p *= r;
            p_prev *= r;
            d *= r;
            d_prev *= r;
            sum_sq *= r * r;
            log_scale += m.ln();
        }
    }
    (p, d, sum_sq.ln() + 2.0 * log_scale)
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `L(s) = ln f(e^s) + ln(e^s g(e^s))`, the integrand in log-frailty coordinates.
struct LogScaleTarget<'a, I: ?Sized> {
    frailty: FrailtyParams,
    log_f: &'a I,
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    s: f64,
    value: f64,
    /// `1/sqrt(-L''(s))`, the local width in `s`.
    width: f64,
}

impl<I: LogIntegrand + ?Sized> LogScaleTarget<'_, I> {
    fn eval(&self, s: f64) -> f64 {
        let v = self.log_f.log_f(s.exp()) + self.frailty.log_density_in_log_scale(s);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Derivatives of `L` with the normalizing constant left out.
    fn derivatives(&self, s: f64) -> Option<(f64, f64, f64)> {
        let (v, d1, d2) = self.log_f.log_scale_derivatives(s)?;
        let k = self.frailty.shape();
        let e = s.exp();
        Some((v + k * (s - s.exp_m1()), d1 + k * (1.0 - e), d2 - k * e))
    }

    fn peak(&self) -> Result<Peak> {
        if self.log_f.log_scale_derivatives(0.0).is_some() {
            self.peak_newton()
        } else {
            self.peak_search()
        }
    }

    /// Safeguarded Newton on `L'(s) = 0`; `L` is strictly concave here.
    fn peak_newton(&self) -> Result<Peak> {
        let d1 = |s: f64| self.derivatives(s).map(|d| d.1).unwrap_or(f64::NAN);
        let (mut lo, mut hi);
        let start = d1(0.0);
        if start.is_nan() {
            return self.peak_search();
        }
        if start > 0.0 {
            lo = 0.0;
            hi = 1.0;
            while d1(hi) > 0.0 {
                lo = hi;
                hi *= 2.0;
                if hi > S_MAX {
                    return Err(Error::Domain("log-integrand has no interior maximum (grows without bound)".into()));
                }
            }
        } else {
            hi = 0.0;
            lo = -1.0;
            while !(d1(lo) > 0.0) {
                hi = lo;
                lo *= 2.0;
                if lo < S_MIN {
                    return Err(Error::Domain("integrand is not integrable near u = 0".into()));
                }
            }
        }
        let mut s = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (_, g, h) = self.derivatives(s).unwrap();
            if g > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let mut next = if h < 0.0 { s - g / h } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - s).abs() <= 1e-13 * (1.0 + s.abs()) || hi - lo <= 1e-14 * (1.0 + s.abs());
            s = next;
            if done {
                break;
            }
        }
        let (_, _, h) = self.derivatives(s).unwrap();
        let width = if h < 0.0 { (-h).sqrt().recip() } else { 1.0 };
        Ok(Peak { s, value: self.eval(s), width })
    }

    /// Grid scan plus golden-section refinement; assumes a unimodal integrand.
    fn peak_search(&self) -> Result<Peak> {
        let step = 0.25;
        let (mut a, mut b) = (-40.0, 10.0);
        let mut best;
        loop {
            best = (f64::NAN, f64::NEG_INFINITY);
            let mut s = a;
            while s <= b + 1e-12 {
                let v = self.eval(s);
                if v > best.1 {
                    best = (s, v);
                }
                s += step;
            }
            if best.1 == f64::NEG_INFINITY {
                if a <= S_MIN && b >= S_MAX {
                    return Ok(Peak { s: 0.0, value: f64::NEG_INFINITY, width: 1.0 });
                }
                a = (a * 4.0).max(S_MIN);
                b = (b * 4.0).min(S_MAX);
                continue;
            }
            if best.0 - a < 1.5 * step && a > S_MIN {
                a = (a * 4.0).max(S_MIN);
            } else if b - best.0 < 1.5 * step && b < S_MAX {
                b = (b * 4.0).min(S_MAX);
            } else {
                break;
            }
        }
        if best.1 == f64::INFINITY {
            return Err(Error::Domain("log-integrand is infinite".into()));
        }
        // golden section on [best - step, best + step]
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let (mut lo, mut hi) = (best.0 - step, best.0 + step);
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let (mut f1, mut f2) = (self.eval(x1), self.eval(x2));
        while hi - lo > 1e-10 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = self.eval(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = self.eval(x1);
            }
        }
        let s = 0.5 * (lo + hi);
        let value = self.eval(s);
        let mut h = 1e-3;
        let mut width = 1.0;
        for _ in 0..4 {
            let d2 = (self.eval(s + h) - 2.0 * value + self.eval(s - h)) / (h * h);
            if !(d2 < 0.0) || !d2.is_finite() {
                break;
            }
            width = (-d2).sqrt().recip();
            if width >= 10.0 * h {
                break;
            }
            h = width / 10.0;
        }
        Ok(Peak { s, value, width })
    }

    /// Walks from the peak until the log-integrand has dropped by `TAIL_CUT`.
    fn bracket(&self, peak: &Peak) -> (f64, f64) {
        let walk = |dir: f64| {
            let mut step = peak.width;
            let mut s = peak.s;
            loop {
                let next = s + dir * step;
                if next <= S_MIN || next >= S_MAX {
                    return next.clamp(S_MIN, S_MAX);
                }
                s = next;
                if self.eval(s) < peak.value - TAIL_CUT {
                    return s;
                }
                step *= 1.6;
            }
        };
        (walk(-1.0), walk(1.0))
    }
}

/// Nodes `(u, ln weight + ln integrand)` of the mode-anchored trapezoid rule
/// and the relative gap to the half-density rule.
fn trapezoid_nodes<I: LogIntegrand + ?Sized>(
    target: &LogScaleTarget<'_, I>,
    node_count: usize,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let peak = target.peak()?;
    if peak.value == f64::NEG_INFINITY {
        return Ok((Vec::new(), 0.0));
    }
    // s = peak + scale * A sinh(tau), tau on a uniform grid
    const STRETCH: f64 = 5.0;
    // the integrand is analytic in a strip of half-width about π/2 around
    // the real s axis, which bounds the usable step independently of width
    let scale_s = peak.width.min(1.0);
    let h = 12.8 / node_count as f64 / STRETCH;
    let log_step = (scale_s * h).ln();
    let mut nodes = Vec::with_capacity(2 * node_count);
    let (mut sum, mut sum_even) = (0.0, 0.0);
    for dir in [1.0, -1.0] {
        let mut j: usize = if dir > 0.0 { 0 } else { 1 };
        loop {
            let tau = dir * j as f64 * h;
            let jac = STRETCH * tau.cosh();
            let s = peak.s + scale_s * STRETCH * tau.sinh();
            if !(S_MIN..=S_MAX).contains(&s) {
                break;
            }
            let v = target.eval(s) - peak.value + jac.ln();
            nodes.push((s.exp(), v + peak.value + log_step));
            let term = v.exp();
            sum += term;
            if j.is_multiple_of(2) {
                sum_even += term;
            }
            if v < -TAIL_CUT - 5.0 {
                break;
            }
            j += 1;
        }
    }
    Ok((nodes, (2.0 * sum_even / sum - 1.0).abs()))
}

fn trapezoid<I: LogIntegrand + ?Sized>(target: &LogScaleTarget<'_, I>, node_count: usize) -> Result<Integral> {
    let (nodes, rel_error) = trapezoid_nodes(target, node_count)?;
    let terms: Vec<f64> = nodes.iter().map(|n| n.1).collect();
    let report = QuadratureReport { scheme: Scheme::Trapezoid, evaluations: nodes.len(), rel_error, fell_back: false };
    Ok(Integral { value: log_sum_exp(&terms), report })
}

// Gauss–Kronrod 7/15 abscissae and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.partial_cmp(&other.error).unwrap_or(Ordering::Equal)
    }
}

fn kronrod_panel(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> Panel {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = r * XGK[i];
        let pair = f(c - x) + f(c + x);
        k += WGK[i] * pair;
        if i % 2 == 1 {
            g += WG[i / 2] * pair;
        }
    }
    Panel { a, b, value: k * r, error: ((k - g) * r).abs() }
}

struct AdaptiveOutcome {
    panels: Vec<Panel>,
    peak_value: f64,
    report: QuadratureReport,
}

fn adaptive_panels<I: LogIntegrand + ?Sized>(target: &LogScaleTarget<'_, I>, rel_tol: f64) -> Result<AdaptiveOutcome> {
    let peak = target.peak()?;
    if peak.value == f64::NEG_INFINITY {
        let report = QuadratureReport { scheme: Scheme::Adaptive, evaluations: 0, rel_error: 0.0, fell_back: false };
        return Ok(AdaptiveOutcome { panels: Vec::new(), peak_value: peak.value, report });
    }
    let (lo, hi) = target.bracket(&peak);
    let f = |s: f64| (target.eval(s) - peak.value).exp();

    let mut cuts = vec![lo];
    for off in [-2.0, 2.0] {
        let c = peak.s + off * peak.width;
        if c > lo && c < hi {
            cuts.push(c);
        }
    }
    cuts.push(hi);
    cuts.sort_by(|a, b| a.total_cmp(b));

    let mut heap = BinaryHeap::new();
    for w in cuts.windows(2) {
        heap.push(kronrod_panel(&f, w[0], w[1]));
    }
    let mut evaluations = 15 * heap.len();
    loop {
        let total: f64 = heap.iter().map(|p| p.value).sum();
        let err: f64 = heap.iter().map(|p| p.error).sum();
        if err <= rel_tol * total.abs() || total == 0.0 {
            let report = QuadratureReport {
                scheme: Scheme::Adaptive,
                evaluations,
                rel_error: if total > 0.0 { err / total } else { 0.0 },
                fell_back: false,
            };
            return Ok(AdaptiveOutcome { panels: heap.into_vec(), peak_value: peak.value, report });
        }
        if heap.len() >= MAX_PANELS {
            let coarse = (total - err).max(0.0);
            return Err(Error::Accuracy { coarse: coarse.ln() + peak.value, fine: total.ln() + peak.value, rel_tol });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        heap.push(kronrod_panel(&f, worst.a, mid));
        heap.push(kronrod_panel(&f, mid, worst.b));
        evaluations += 30;
    }
}

fn adaptive<I: LogIntegrand + ?Sized>(target: &LogScaleTarget<'_, I>, rel_tol: f64) -> Result<Integral> {
    let out = adaptive_panels(target, rel_tol)?;
    let mut panels = out.panels;
    // fixed summation order keeps the result independent of heap layout
    panels.sort_by(|x, y| x.a.total_cmp(&y.a));
    let total: f64 = panels.iter().map(|p| p.value).sum();
    let value = if panels.is_empty() { f64::NEG_INFINITY } else { total.ln() + out.peak_value };
    Ok(Integral { value, report: out.report })
}

/// Kronrod nodes of the converged panels, `(u, ln weight + ln integrand)`.
fn adaptive_nodes<I: LogIntegrand + ?Sized>(
    target: &LogScaleTarget<'_, I>,
    rel_tol: f64,
) -> Result<(Vec<(f64, f64)>, QuadratureReport)> {
    let out = adaptive_panels(target, rel_tol)?;
    let mut nodes = Vec::with_capacity(15 * out.panels.len());
    for p in &out.panels {
        let c = 0.5 * (p.a + p.b);
        let r = 0.5 * (p.b - p.a);
        let mut push = |s: f64, w: f64| nodes.push((s.exp(), (w * r).ln() + target.eval(s)));
        push(c, WGK[7]);
        for i in 0..7 {
            push(c - r * XGK[i], WGK[i]);
            push(c + r * XGK[i], WGK[i]);
        }
    }
    Ok((nodes, out.report))
}

/// Posterior expectations under the density proportional to `f(u) g(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expectations {
    /// `ln E[f(u)]`.
    pub log_integral: f64,
    /// `E[h_i(u) f(u)] / E[f(u)]` for each observable `h_i`.
    pub values: Vec<f64>,
    pub report: QuadratureReport,
}

/// Computes `ln E[f]` together with `f`-tilted expectations of each
/// observable on one set of nodes.
pub fn frailty_expectations<I: LogIntegrand + ?Sized>(
    frailty: FrailtyParams,
    log_f: &I,
    spec: &QuadratureSpec,
    observables: &[&dyn Fn(f64) -> f64],
) -> Result<Expectations> {
    ensure_positive("frailty variance", frailty.variance)?;
    spec.validate()?;
    let target = LogScaleTarget { frailty, log_f };
    match spec.scheme {
        Scheme::Trapezoid => {
            let (nodes, rel_error) = trapezoid_nodes(&target, spec.node_count)?;
            let report =
                QuadratureReport { scheme: Scheme::Trapezoid, evaluations: nodes.len(), rel_error, fell_back: false };
            expectations_on(&nodes, observables, report)
        }
        Scheme::Adaptive => {
            let (nodes, report) = adaptive_nodes(&target, spec.rel_tol)?;
            expectations_on(&nodes, observables, report)
        }
        Scheme::GammaGauss => {
            // observables may be non-polynomial too, so both rules must agree on them
            let on_rule = |n: usize| -> Result<Expectations> {
                let rule = GammaGaussRule::cached(frailty, n)?;
                let nodes: Vec<(f64, f64)> =
                    rule.nodes.iter().zip(&rule.log_weights).map(|(&u, &lw)| (u, lw + log_f.log_f(u))).collect();
                let report =
                    QuadratureReport { scheme: Scheme::GammaGauss, evaluations: n, rel_error: 0.0, fell_back: false };
                expectations_on(&nodes, observables, report)
            };
            let coarse = on_rule(spec.node_count);
            let fine = on_rule(2 * spec.node_count);
            if let (Ok(c), Ok(mut f)) = (&coarse, fine) {
                let rel = (c.log_integral - f.log_integral).exp_m1().abs();
                let agree =
                    c.values.iter().zip(&f.values).all(|(a, b)| (a - b).abs() <= spec.rel_tol * b.abs().max(1.0));
                if rel <= spec.rel_tol && agree {
                    f.report.rel_error = rel;
                    f.report.evaluations = 3 * spec.node_count;
                    return Ok(f);
                }
            }
            let (nodes, mut report) = adaptive_nodes(&target, spec.rel_tol)?;
            report.fell_back = true;
            report.evaluations += 3 * spec.node_count;
            expectations_on(&nodes, observables, report)
        }
    }
}

fn expectations_on(
    nodes: &[(f64, f64)],
    observables: &[&dyn Fn(f64) -> f64],
    report: QuadratureReport,
) -> Result<Expectations> {
    let terms: Vec<f64> = nodes.iter().map(|n| n.1).collect();
    let log_integral = log_sum_exp(&terms);
    if !log_integral.is_finite() {
        return Err(Error::Domain(format!("tilting integrand has log-mass {log_integral}")));
    }
    let weights: Vec<f64> = terms.iter().map(|t| (t - log_integral).exp()).collect();
    let values = observables
        .iter()
        .map(|h| nodes.iter().zip(&weights).filter(|(_, &w)| w > 0.0).map(|(n, w)| w * h(n.0)).sum())
        .collect();
    Ok(Expectations { log_integral, values, report })
}
