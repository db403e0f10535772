//! Levenberg–Marquardt minimisation of weighted χ² over [`SpectralModel`]
//! parameters with an analytic Jacobian.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectra::{eval_model_unchecked, SpectralModel, Spectrum, SpectrumError};

/// Damping beyond which a failing normal-equation solve is declared stagnant.
pub const MAX_DAMPING: f64 = 1e16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad initial model: {0}")]
    BadInitialModel(String),
    #[error("line {0} has zero width")]
    SingularWidth(usize),
    #[error("normal equations unsolvable with damping above {MAX_DAMPING:e}")]
    Stagnation,
    #[error("J^T J is singular; no covariance available")]
    DegenerateFit,
    #[error("{params} parameters need more than {pixels} pixels")]
    Underdetermined { params: usize, pixels: usize },
    #[error("invalid fit options: {0}")]
    InvalidOptions(&'static str),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

pub type Result<T, E = FitError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub rel_chi2_tol: f64,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub damping_init: f64,
    pub damping_ratio: f64,
    /// Lower clamp on line widths; `None` means half the median pixel spacing.
    pub sigma_min: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_chi2_tol: 1e-8,
            grad_tol: 1e-10,
            step_tol: 1e-12,
            damping_init: 1e-3,
            damping_ratio: 2.0,
            sigma_min: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.max_iterations == 0 {
            return Err(FitError::InvalidOptions("max_iterations must be >= 1"));
        }
        if !(positive(self.rel_chi2_tol) && positive(self.grad_tol) && positive(self.step_tol))
        {
            return Err(FitError::InvalidOptions("tolerances must be > 0"));
        }
        if !positive(self.damping_init) {
            return Err(FitError::InvalidOptions("damping_init must be > 0"));
        }
        if !(self.damping_ratio.is_finite() && self.damping_ratio > 1.0) {
            return Err(FitError::InvalidOptions("damping_ratio must be > 1"));
        }
        if let Some(s) = self.sigma_min {
            if !positive(s) {
                return Err(FitError::InvalidOptions("sigma_min must be > 0"));
            }
        }
        Ok(())
    }
}

/// Which stopping rule ended the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    Chi2Tol,
    GradTol,
    StepTol,
    MaxIter,
}

impl Convergence {
    pub fn as_str(self) -> &'static str {
        match self {
            Convergence::Chi2Tol => "chi2_tol",
            Convergence::GradTol => "grad_tol",
            Convergence::StepTol => "step_tol",
            Convergence::MaxIter => "max_iter",
        }
    }
}

impl std::str::FromStr for Convergence {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Ok(match s {
            "chi2_tol" => Convergence::Chi2Tol,
            "grad_tol" => Convergence::GradTol,
            "step_tol" => Convergence::StepTol,
            "max_iter" => Convergence::MaxIter,
            _ => return Err(()),
        })
    }
}

impl std::fmt::Display for Convergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-call wall-clock counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTimers {
    /// Model and Jacobian evaluation.
    pub model_eval_seconds: f64,
    /// Normal-equation factorisation and solve.
    pub linear_solve_seconds: f64,
    pub total_seconds: f64,
    pub n_model_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: SpectralModel,
    pub chi2: f64,
    pub dof: usize,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: Convergence,
    /// `None` when J^T J was singular at the solution.
    pub covariance: Option<DMatrix<f64>>,
    /// Initial χ² followed by the χ² after every accepted step.
    pub chi2_trace: Vec<f64>,
    pub timers: FitTimers,
}

impl FitResult {
    /// 1-sigma parameter uncertainties, NaN where no covariance exists.
    pub fn uncertainties(&self) -> Vec<f64> {
        match &self.covariance {
            Some(c) => c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
            None => vec![f64::NAN; self.model.n_params()],
        }
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.chi2 / self.dof as f64
    }
}

/// Σ ((observed − predicted) / sigma)².
pub fn weighted_chi2(observed: &[f64], sigma: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != sigma.len() || observed.len() != predicted.len() {
        return Err(FitError::Shape(format!(
            "observed {}, sigma {}, predicted {}",
            observed.len(),
            sigma.len(),
            predicted.len()
        )));
    }
    Ok(observed
        .iter()
        .zip(sigma)
        .zip(predicted)
        .map(|((y, s), m)| {
            let r = (y - m) / s;
            r * r
        })
        .sum())
}

pub fn chi2(model: &SpectralModel, spectrum: &Spectrum) -> Result<f64> {
    model.validate()?;
    let predicted = eval_model_unchecked(model, spectrum.grid().pixels());
    weighted_chi2(spectrum.counts(), spectrum.sigma(), &predicted)
}

/// Weighted Jacobian, entry (i, p) = ∂S(λ_i)/∂θ_p / sigma_i.
pub fn jacobian(model: &SpectralModel, spectrum: &Spectrum) -> Result<DMatrix<f64>> {
    if let Some(k) = model.lines.iter().position(|l| l.width == 0.0) {
        return Err(FitError::SingularWidth(k));
    }
    model.validate()?;
    Ok(jacobian_unchecked(model, spectrum))
}

fn jacobian_unchecked(model: &SpectralModel, spectrum: &Spectrum) -> DMatrix<f64> {
    let x = spectrum.grid().pixels();
    let w = spectrum.sigma();
    let nb = model.baseline_len();
    let mut jac = DMatrix::zeros(x.len(), model.n_params());
    for (i, (&lambda, &s)) in x.iter().zip(w).enumerate() {
        let inv = 1.0 / s;
        let mut pow = inv;
        for j in 0..nb {
            jac[(i, j)] = pow;
            pow *= lambda;
        }
        for (k, line) in model.lines.iter().enumerate() {
            let col = nb + 3 * k;
            let d = lambda - line.center;
            let s2 = line.width * line.width;
            let e = (-(d * d) / (2.0 * s2)).exp();
            let ae = line.amplitude * e;
            jac[(i, col)] = e * inv;
            jac[(i, col + 1)] = ae * d / s2 * inv;
            jac[(i, col + 2)] = ae * d * d / (s2 * line.width) * inv;
        }
    }
    jac
}

/// `(JᵀJ)⁻¹ · max(chi2/dof, 1)`, symmetrised.
pub fn covariance(jac: &DMatrix<f64>, chi2: f64, dof: usize) -> Result<DMatrix<f64>> {
    if dof == 0 {
        return Err(FitError::Shape("covariance needs dof >= 1".into()));
    }
    let jtj = jac.tr_mul(jac);
    let inv = jtj
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(FitError::DegenerateFit)?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(FitError::DegenerateFit);
    }
    let scale = (chi2 / dof as f64).max(1.0);
    let sym = (&inv + inv.transpose()) * (0.5 * scale);
    Ok(sym)
}

struct Workspace<'a> {
    spectrum: &'a Spectrum,
    template: &'a SpectralModel,
    timers: FitTimers,
}

impl<'a> Workspace<'a> {
    fn residuals(&mut self, p: &[f64]) -> DVector<f64> {
        let t = Instant::now();
        let model = self.template.from_params_like(p);
        let pred = eval_model_unchecked(&model, self.spectrum.grid().pixels());
        let r = DVector::from_iterator(
            pred.len(),
            self.spectrum
                .counts()
                .iter()
                .zip(self.spectrum.sigma())
                .zip(&pred)
                .map(|((y, s), m)| (y - m) / s),
        );
        self.timers.n_model_evals += 1;
        self.timers.model_eval_seconds += t.elapsed().as_secs_f64();
        r
    }

    fn jacobian(&mut self, p: &[f64]) -> DMatrix<f64> {
        let t = Instant::now();
        let j = jacobian_unchecked(&self.template.from_params_like(p), self.spectrum);
        self.timers.model_eval_seconds += t.elapsed().as_secs_f64();
        j
    }
}

fn clamp_params(p: &mut [f64], nb: usize, sigma_min: f64) {
    for chunk in p[nb..].chunks_exact_mut(3) {
        chunk[0] = chunk[0].max(0.0);
        chunk[2] = chunk[2].max(sigma_min);
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Fit `init` to `spectrum`.
///
/// Steps solve `(JᵀJ + λ·diag(JᵀJ))·δ = Jᵀr`; bounds (A ≥ 0, σ ≥ sigma_min)
/// are applied to the trial point before its χ² is evaluated, and a trial is
/// accepted only if χ² strictly decreases.
pub fn lm_fit(spectrum: &Spectrum, init: &SpectralModel, options: &FitOptions) -> Result<FitResult> {
    let t_total = Instant::now();
    options.validate()?;
    init.validate()
        .map_err(|e| FitError::BadInitialModel(e.to_string()))?;

    let n_pix = spectrum.len();
    let n_par = init.n_params();
    if n_par >= n_pix {
        return Err(FitError::Underdetermined {
            params: n_par,
            pixels: n_pix,
        });
    }
    let dof = n_pix - n_par;
    let nb = init.baseline_len();
    let sigma_min = options
        .sigma_min
        .unwrap_or_else(|| 0.5 * spectrum.grid().median_spacing());

    let mut ws = Workspace {
        spectrum,
        template: init,
        timers: FitTimers::default(),
    };

    let mut p = init.params();
    let mut r = ws.residuals(&p);
    if let Some(i) = r.iter().position(|v| !v.is_finite()) {
        return Err(FitError::BadInitialModel(format!(
            "non-finite residual at pixel {i}"
        )));
    }
    let mut chi2 = r.norm_squared();
    let mut trace = vec![chi2];
    let mut jac = ws.jacobian(&p);
    let mut jtj = jac.tr_mul(&jac);
    let mut grad = jac.tr_mul(&r);

    let mut iterations = 0;
    let converged = if chi2 == 0.0 {
        Convergence::Chi2Tol
    } else if inf_norm(&grad) <= options.grad_tol {
        Convergence::GradTol
    } else {
        let mut damping = options.damping_init * jtj.diagonal().max().max(f64::MIN_POSITIVE);
        let mut p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        loop {
            if iterations >= options.max_iterations {
                break Convergence::MaxIter;
            }
            // Marquardt scaling; zero diagonal entries (e.g. a line whose
            // amplitude sits on its bound) are floored so the damped system
            // stays positive definite.
            let max_diag = jtj.diagonal().max();
            let floor = f64::EPSILON * max_diag.max(f64::MIN_POSITIVE);
            let t = Instant::now();
            let mut lhs = jtj.clone();
            for q in 0..n_par {
                lhs[(q, q)] += damping * jtj[(q, q)].max(floor);
            }
            let step = lhs.cholesky().map(|c| c.solve(&grad));
            ws.timers.linear_solve_seconds += t.elapsed().as_secs_f64();

            let step = match step {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => {
                    damping *= options.damping_ratio;
                    if damping > MAX_DAMPING {
                        return Err(FitError::Stagnation);
                    }
                    continue;
                }
            };

            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            clamp_params(&mut trial, nb, sigma_min);
            let moved = trial
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if moved <= options.step_tol * (p_norm + options.step_tol) {
                break Convergence::StepTol;
            }

            let r_trial = ws.residuals(&trial);
            let chi2_trial = r_trial.norm_squared();
            if chi2_trial.is_finite() && chi2_trial < chi2 {
                let decrease = chi2 - chi2_trial;
                let previous = chi2;
                p = trial;
                p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                r = r_trial;
                chi2 = chi2_trial;
                trace.push(chi2);
                iterations += 1;
                damping /= options.damping_ratio;

                jac = ws.jacobian(&p);
                jtj = jac.tr_mul(&jac);
                grad = jac.tr_mul(&r);

                if chi2 == 0.0 || decrease <= options.rel_chi2_tol * previous {
                    break Convergence::Chi2Tol;
                }
                if inf_norm(&grad) <= options.grad_tol {
                    break Convergence::GradTol;
                }
            } else {
                damping *= options.damping_ratio;
                if damping > MAX_DAMPING {
                    // Every direction is uphill at negligible step length.
                    break Convergence::StepTol;
                }
            }
        }
    };

    let t = Instant::now();
    let cov = covariance(&jac, chi2, dof).ok();
    ws.timers.linear_solve_seconds += t.elapsed().as_secs_f64();

    let mut timers = ws.timers;
    timers.total_seconds = t_total.elapsed().as_secs_f64();
    Ok(FitResult {
        model: init.from_params_like(&p),
        chi2,
        dof,
        iterations,
        converged,
        covariance: cov,
        chi2_trace: trace,
        timers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{synthesize, GaussianLine, Noise, WavelengthGrid};

    fn truth() -> SpectralModel {
        SpectralModel::constant(5.0).with_line(GaussianLine::new(100.0, 500.2, 0.10))
    }

    fn grid100() -> WavelengthGrid {
        WavelengthGrid::linspace(499.0, 501.0, 100).unwrap()
    }

    #[test]
    fn chi2_zero_on_exact_model() {
        let s = synthesize(&truth(), &grid100(), Noise::None, 0).unwrap();
        assert_eq!(chi2(&truth(), &s).unwrap(), 0.0);
    }

    #[test]
    fn chi2_single_pixel_two_sigma() {
        let m = truth();
        let g = grid100();
        let exact = synthesize(&m, &g, Noise::None, 0).unwrap();
        let mut counts = exact.counts().to_vec();
        let sigma: Vec<f64> = (0..100).map(|i| 1.0 + i as f64 * 0.1).collect();
        counts[17] += 2.0 * sigma[17];
        let s = Spectrum::new(g, counts, sigma).unwrap();
        assert!((chi2(&m, &s).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_chi2_shape_error() {
        assert!(matches!(
            weighted_chi2(&[1.0, 2.0], &[1.0], &[1.0, 2.0]),
            Err(FitError::Shape(_))
        ));
    }

    #[test]
    fn baseline_column_is_inverse_sigma() {
        let g = grid100();
        let sigma: Vec<f64> = (0..100).map(|i| 0.5 + i as f64).collect();
        let s = Spectrum::new(g, vec![0.0; 100], sigma.clone()).unwrap();
        let j = jacobian(&SpectralModel::constant(3.0), &s).unwrap();
        assert_eq!(j.ncols(), 1);
        for i in 0..100 {
            assert_eq!(j[(i, 0)], 1.0 / sigma[i]);
        }
    }

    #[test]
    fn center_derivative_vanishes_at_peak() {
        let g = WavelengthGrid::new(vec![499.8, 500.0, 500.2, 500.4]).unwrap();
        let s = Spectrum::new(g, vec![0.0; 4], vec![1.0; 4]).unwrap();
        let m = SpectralModel::constant(1.0).with_line(GaussianLine::new(10.0, 500.0, 0.1));
        let j = jacobian(&m, &s).unwrap();
        assert_eq!(j[(1, 2)], 0.0);
        assert_eq!(j[(1, 1)], 1.0);
    }

    #[test]
    fn zero_width_is_singular() {
        let s = synthesize(&truth(), &grid100(), Noise::None, 0).unwrap();
        let mut m = truth();
        m.lines[0].width = 0.0;
        assert_eq!(jacobian(&m, &s), Err(FitError::SingularWidth(0)));
    }

    #[test]
    fn fit_at_truth_takes_no_steps() {
        let s = synthesize(&truth(), &grid100(), Noise::None, 0).unwrap();
        let r = lm_fit(&s, &truth(), &FitOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.chi2, 0.0);
        assert!(matches!(
            r.converged,
            Convergence::Chi2Tol | Convergence::GradTol
        ));
        assert_eq!(r.dof, 96);
    }

    #[test]
    fn fit_recovers_perturbed_model() {
        let s = synthesize(&truth(), &grid100(), Noise::None, 0).unwrap();
        let t = truth();
        let mut init = t.clone();
        init.baseline[0] *= 1.1;
        init.lines[0].amplitude *= 1.1;
        init.lines[0].width *= 1.1;
        init.lines[0].center += 0.1 * grid100().span();
        let r = lm_fit(&s, &init, &FitOptions::default()).unwrap();
        for (got, want) in r.model.params().iter().zip(t.params()) {
            assert!((got - want).abs() <= 1e-6 * want.abs(), "{got} vs {want}");
        }
        assert!(r.chi2 < 1e-12, "chi2 {}", r.chi2);
        assert!(r.chi2_trace.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(r.chi2_trace.len(), r.iterations + 1);
    }

    #[test]
    fn non_finite_count_is_bad_initial_model() {
        let g = grid100();
        let mut counts = vec![5.0; 100];
        counts[10] = f64::NAN;
        let s = Spectrum::new_unchecked_counts(g, counts, vec![1.0; 100]).unwrap();
        assert!(matches!(
            lm_fit(&s, &truth(), &FitOptions::default()),
            Err(FitError::BadInitialModel(_))
        ));
    }

    #[test]
    fn underdetermined_rejected() {
        let g = WavelengthGrid::linspace(499.0, 501.0, 4).unwrap();
        let s = Spectrum::new(g, vec![1.0, 5.0, 2.0, 1.0], vec![1.0; 4]).unwrap();
        assert!(matches!(
            lm_fit(&s, &truth(), &FitOptions::default()),
            Err(FitError::Underdetermined { .. })
        ));
    }

    #[test]
    fn options_validated() {
        let bad = FitOptions {
            damping_ratio: 1.0,
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
        let bad = FitOptions {
            max_iterations: 0,
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
        let bad = FitOptions {
            grad_tol: 0.0,
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn max_iter_reported() {
        let g = grid100();
        let s = synthesize(&truth(), &g, Noise::SqrtGaussian, 3).unwrap();
        let mut init = truth();
        init.lines[0].width = 0.15;
        let opts = FitOptions {
            max_iterations: 1,
            ..FitOptions::default()
        };
        let r = lm_fit(&s, &init, &opts).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.converged, Convergence::MaxIter);
    }

    #[test]
    fn baseline_only_covariance_is_scalar_inverse() {
        let n = 40;
        let g = WavelengthGrid::linspace(10.0, 20.0, n).unwrap();
        let s_val = 2.5;
        let counts: Vec<f64> = (0..n).map(|i| 7.0 + if i % 2 == 0 { 0.3 } else { -0.3 }).collect();
        let s = Spectrum::new(g, counts, vec![s_val; n]).unwrap();
        let r = lm_fit(&s, &SpectralModel::constant(6.0), &FitOptions::default()).unwrap();
        let cov = r.covariance.as_ref().unwrap();
        let scale = (r.chi2 / r.dof as f64).max(1.0);
        let expect = s_val * s_val / n as f64 * scale;
        assert!((cov[(0, 0)] - expect).abs() <= 1e-12 * expect);
        assert!((r.model.baseline[0] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn exact_fit_covariance_scale_clamps_to_one() {
        let s = synthesize(&truth(), &grid100(), Noise::None, 0).unwrap();
        let jac = jacobian(&truth(), &s).unwrap();
        let unscaled = covariance(&jac, 0.0, 96).unwrap();
        let scaled = covariance(&jac, 1e-20, 96).unwrap();
        assert_eq!(unscaled, scaled);
        let inflated = covariance(&jac, 2.0 * 96.0, 96).unwrap();
        assert!(((inflated[(0, 0)] / unscaled[(0, 0)]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_normal_matrix_is_degenerate() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(covariance(&jac, 1.0, 1), Err(FitError::DegenerateFit));
    }

    #[test]
    fn timers_populated_and_consistent() {
        let s = synthesize(&truth(), &grid100(), Noise::SqrtGaussian, 5).unwrap();
        let mut init = truth();
        init.lines[0].amplitude = 80.0;
        let r = lm_fit(&s, &init, &FitOptions::default()).unwrap();
        let t = r.timers;
        assert!(t.n_model_evals > r.iterations);
        assert!(t.model_eval_seconds + t.linear_solve_seconds <= t.total_seconds);
        assert!(t.total_seconds > 0.0);
    }

    #[test]
    fn bounds_respected() {
        let g = grid100();
        // pure baseline data: the line amplitude should be driven to its bound
        let s = Spectrum::new(g.clone(), vec![5.0; 100], vec![1.0; 100]).unwrap();
        let init = SpectralModel::constant(5.0).with_line(GaussianLine::new(3.0, 500.0, 0.05));
        let r = lm_fit(&s, &init, &FitOptions::default()).unwrap();
        let l = r.model.lines[0];
        assert!(l.amplitude >= 0.0);
        assert!(l.width >= 0.5 * g.median_spacing());
        assert!(r.chi2_trace.windows(2).all(|w| w[1] < w[0]));
    }
}
