//! Maximum-likelihood fitting.
//!
//! The log-likelihood is maximized over the free vector of
//! [`ParameterLayout`]: a short Nelder–Mead pass followed by BFGS with the
//! analytic gradient. The covariance is the inverse of the negative Hessian
//! (central differences of the gradient), mapped to the natural scale by the
//! delta method. Intervals are symmetric on the natural scale.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazards::WeibullParams;
use crate::likelihood::{cohort_log_likelihood, cohort_log_likelihood_with_gradient, Cohort, ParameterLayout};
use crate::predict::ModelParams;
use crate::quadrature::{FrailtyParams, QuadratureSpec, Scheme};
use crate::recurrent::SubmodelKind;

const Z_95: f64 = 1.959_963_984_540_054;
const HESSIAN_STEP: f64 = 1e-4;
/// Largest BFGS step, in free coordinates.
const MAX_STEP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Max-norm of the log-likelihood gradient accepted as converged.
    pub gradient_tol: f64,
    /// Budget of the Nelder–Mead stage, in likelihood evaluations.
    pub simplex_evaluations: usize,
    pub quadrature: QuadratureSpec,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tol: 1e-4,
            simplex_evaluations: 200,
            quadrature: QuadratureSpec { node_count: 64, scheme: Scheme::Trapezoid, rel_tol: 1e-9 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimates: ModelParams,
    pub parameter_names: Vec<String>,
    /// Natural-scale covariance in `parameter_names` order.
    pub covariance: Vec<Vec<f64>>,
    pub ci95: Vec<ConfidenceInterval>,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max_norm: f64,
    /// Largest `|H_ij - H_ji| / max|H|` before symmetrization.
    pub hessian_asymmetry: f64,
}

impl FitResult {
    fn position(&self, name: &str) -> Result<usize> {
        self.parameter_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Parameter(format!("no fitted parameter named '{name}'")))
    }

    pub fn interval(&self, name: &str) -> Result<&ConfidenceInterval> {
        Ok(&self.ci95[self.position(name)?])
    }

    pub fn covariance_of(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.covariance[self.position(a)?][self.position(b)?])
    }
}

/// Neutral starting point: unit shapes, scales at the mean follow-up,
/// exponent 0.5, unit frailty variance, zero coefficients.
pub fn default_init(
    cohort: &Cohort,
    submodel: SubmodelKind,
    death_covariates: &[String],
    recurrent_covariates: &[String],
) -> ModelParams {
    let b = cohort.mean_follow_up();
    ModelParams {
        submodel,
        frailty_exponent: 0.5,
        frailty: FrailtyParams { variance: 1.0 },
        death_baseline: WeibullParams { shape: 1.0, scale: b },
        recurrent_baseline: WeibullParams { shape: 1.0, scale: b },
        death_coefficients: death_covariates.iter().map(|n| (n.clone(), 0.0)).collect(),
        recurrent_coefficients: recurrent_covariates.iter().map(|n| (n.clone(), 0.0)).collect(),
    }
}

struct Objective<'a> {
    cohort: &'a Cohort,
    layout: &'a ParameterLayout,
    spec: &'a QuadratureSpec,
}

impl Objective<'_> {
    /// Negative log-likelihood; `+inf` where it cannot be evaluated.
    fn value(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        match cohort_log_likelihood(self.cohort, &self.layout.to_params(x), self.spec) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (ll, g) = cohort_log_likelihood_with_gradient(self.cohort, self.layout, x, self.spec).ok()?;
        if !ll.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((-ll, g.into_iter().map(|v| -v).collect()))
    }
}

fn nelder_mead(obj: &Objective<'_>, start: &[f64], budget: usize) -> Vec<f64> {
    let n = start.len();
    if budget == 0 {
        return start.to_vec();
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), obj.value(start)));
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += 0.05 * start[i].abs().clamp(1.0, 10.0);
        let f = obj.value(&v);
        simplex.push((v, f));
    }
    let mut evals = n + 1;
    let combine =
        |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let worst = simplex[n].clone();
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64).collect();
        let reflected = combine(&centroid, &worst.0, -1.0);
        let fr = obj.value(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = combine(&centroid, &worst.0, -2.0);
            let fe = obj.value(&expanded);
            evals += 1;
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let contracted =
                if fr < worst.1 { combine(&centroid, &reflected, 0.5) } else { combine(&centroid, &worst.0, 0.5) };
            let fc = obj.value(&contracted);
            evals += 1;
            if fc < worst.1.min(fr) {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    p.0 = combine(&best, &p.0, 0.5);
                    p.1 = obj.value(&p.0);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).0
}

struct BfgsOutcome {
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    iterations: usize,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bfgs(obj: &Objective<'_>, start: Vec<f64>, options: &FitOptions) -> Result<BfgsOutcome> {
    let n = start.len();
    let (mut f, mut g) = obj
        .value_and_gradient(&start)
        .ok_or_else(|| Error::Parameter("log-likelihood cannot be evaluated at the starting point".into()))?;
    let mut x = start;
    let identity = |scale: f64| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { scale } else { 0.0 }).collect()).collect()
    };
    let mut h = identity(1.0 / max_norm(&g).max(1.0));
    let mut fresh = true;
    let mut iterations = 0;
    while iterations < options.max_iterations && max_norm(&g) > options.gradient_tol {
        iterations += 1;
        let mut dir: Vec<f64> = h.iter().map(|row| -dot(row, &g)).collect();
        if dot(&dir, &g) >= 0.0 {
            h = identity(1.0 / max_norm(&g).max(1.0));
            dir = g.iter().map(|v| -v / max_norm(&g).max(1.0)).collect();
        }
        let longest = max_norm(&dir);
        if longest > MAX_STEP {
            dir.iter_mut().for_each(|d| *d *= MAX_STEP / longest);
        }
        let slope = dot(&dir, &g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Some((ft, gt)) = obj.value_and_gradient(&trial) {
                if ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if fresh {
                break;
            }
            h = identity(1.0 / max_norm(&g).max(1.0));
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h = identity(scale);
            }
            let hy: Vec<f64> = h.iter().map(|row| dot(row, &y)).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
            fresh = false;
        }
        x = xn;
        f = fnew;
        g = gn;
    }
    Ok(BfgsOutcome { x, value: f, grad: g, iterations })
}

/// Hessian of the log-likelihood by central differences of its gradient,
/// with the asymmetry measured before symmetrization.
fn numeric_hessian(obj: &Objective<'_>, x: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = HESSIAN_STEP * x[j].abs().max(1.0);
        let mut up = x.to_vec();
        up[j] += h;
        let mut dn = x.to_vec();
        dn[j] -= h;
        let (_, gu) =
            obj.value_and_gradient(&up).ok_or_else(|| Error::Covariance("gradient failed near the optimum".into()))?;
        let (_, gd) =
            obj.value_and_gradient(&dn).ok_or_else(|| Error::Covariance("gradient failed near the optimum".into()))?;
        for i in 0..n {
            // objective is the negative log-likelihood
            hess[(i, j)] = -(gu[i] - gd[i]) / (2.0 * h);
        }
    }
    let scale = hess.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (hess[(i, j)] - hess[(j, i)]).abs())
        .fold(0.0, f64::max)
        / scale;
    let sym = (&hess + hess.transpose()) * 0.5;
    Ok((sym, asym))
}

/// Inverse of the observed information `-H`.
fn invert_information(hessian: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let info = -hessian.clone();
    if let Some(chol) = info.clone().cholesky() {
        return Ok(chol.inverse());
    }
    let eig = SymmetricEigen::new(info);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut weakest = 0;
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < lo {
            lo = v;
            weakest = i;
        }
        hi = hi.max(v);
    }
    let dominant = eig
        .eigenvectors
        .column(weakest)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| names[i].clone())
        .unwrap_or_default();
    Err(Error::Covariance(format!(
        "observed information is not positive definite: eigenvalues in [{lo:.3e}, {hi:.3e}], \
         condition {:.3e}; weakest direction loads on {dominant}",
        hi / lo.abs().max(f64::MIN_POSITIVE)
    )))
}

/// Point estimate without the covariance stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub estimates: ModelParams,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max_norm: f64,
}

/// Maximizes the cohort log-likelihood from `init` under `submodel`.
pub fn maximize(cohort: &Cohort, submodel: SubmodelKind, init: &ModelParams, options: &FitOptions) -> Result<Optimum> {
    options.quadrature.validate()?;
    let mut init = init.clone();
    init.submodel = submodel;
    let layout = ParameterLayout::from_params(&init);
    let start = layout.to_free(&init)?;
    let obj = Objective { cohort, layout: &layout, spec: &options.quadrature };
    let initial_loglik = cohort_log_likelihood(cohort, &init, &options.quadrature)?;

    let polished_start = nelder_mead(&obj, &start, options.simplex_evaluations);
    let start = if obj.value(&polished_start) <= -initial_loglik { polished_start } else { start };
    let out = bfgs(&obj, start, options)?;
    let gradient_max_norm = max_norm(&out.grad);
    Ok(Optimum {
        estimates: layout.to_params(&out.x),
        loglik: -out.value,
        initial_loglik,
        converged: gradient_max_norm <= options.gradient_tol,
        iterations: out.iterations,
        gradient_max_norm,
    })
}

/// [`maximize`] followed by the observed-information covariance.
pub fn fit(cohort: &Cohort, submodel: SubmodelKind, init: &ModelParams, options: &FitOptions) -> Result<FitResult> {
    let optimum = maximize(cohort, submodel, init, options)?;
    let layout = ParameterLayout::from_params(&optimum.estimates);
    let x = layout.to_free(&optimum.estimates)?;
    let obj = Objective { cohort, layout: &layout, spec: &options.quadrature };

    let names = layout.names();
    let (hessian, hessian_asymmetry) = numeric_hessian(&obj, &x)?;
    let free_cov = invert_information(&hessian, &names)?;
    let (natural, jac) = layout.natural_with_jacobian(&x);
    let dim = layout.dim();
    let covariance: Vec<Vec<f64>> =
        (0..dim).map(|i| (0..dim).map(|j| jac[i] * free_cov[(i, j)] * jac[j]).collect()).collect();
    let ci95 = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let se = covariance[i][i].max(0.0).sqrt();
            ConfidenceInterval {
                name: name.clone(),
                estimate: natural[i],
                se,
                lower: natural[i] - Z_95 * se,
                upper: natural[i] + Z_95 * se,
            }
        })
        .collect();

    Ok(FitResult {
        estimates: optimum.estimates,
        parameter_names: names,
        covariance,
        ci95,
        loglik: optimum.loglik,
        initial_loglik: optimum.initial_loglik,
        converged: optimum.converged,
        iterations: optimum.iterations,
        gradient_max_norm: optimum.gradient_max_norm,
        hessian_asymmetry,
    })
}

/// `(γ, σ_r)` block of a fit's natural-scale covariance.
pub fn exponent_shape_covariance(result: &FitResult) -> Result<[[f64; 2]; 2]> {
    let layout_names = &result.parameter_names;
    let g = layout_names.iter().position(|n| n == "frailty_exponent");
    let s = layout_names.iter().position(|n| n == "recurrent_shape");
    let (Some(g), Some(s)) = (g, s) else {
        return Err(Error::Parameter("fit lacks frailty_exponent or recurrent_shape".into()));
    };
    let c = &result.covariance;
    Ok([[c[g][g], c[g][s]], [c[s][g], c[s][s]]])
}
