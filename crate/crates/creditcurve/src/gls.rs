//! Generalised least squares with a structured covariance, and the
//! deterministic grid search used to pick covariance parameters.
//!
//! The solver never inverts the covariance explicitly: it factors it with a
//! Cholesky decomposition, whitens the system, and solves the resulting
//! ordinary least-squares problem.  Grid minimisation evaluates every point,
//! treats failures as +inf, and breaks ties toward the lexicographically
//! smallest point so results do not depend on evaluation order or thread
//! count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A generalised least-squares problem `y = X beta + eta`,
/// `Cov(eta) = sigma^2 * covariance`.
///
/// The covariance is taken at unit scale: the overall factor `sigma^2` is
/// profiled out and estimated from the residuals afterwards.
#[derive(Debug, Clone)]
pub struct GlsProblem {
    /// `N x P` design matrix.
    pub design: DMatrix<f64>,
    /// `N` responses.
    pub response: DVector<f64>,
    /// `N x N` symmetric positive-definite covariance (unit scale).
    pub covariance: DMatrix<f64>,
}

/// The result of a generalised least-squares solve.
#[derive(Debug, Clone)]
pub struct GlsSolution {
    /// Estimated coefficients `beta_hat`.
    pub coefficients: DVector<f64>,
    /// The quadratic form `psi = (y - X beta_hat)' Phi^-1 (y - X beta_hat)`.
    pub objective: f64,
    /// Residual scale estimate `sigma2 = psi / (N - P)` (zero when `N == P`).
    pub sigma2: f64,
    /// Coefficient covariance `sigma2 * (X' Phi^-1 X)^-1`.
    pub coef_covariance: DMatrix<f64>,
    /// Residuals `y - X beta_hat` in the original (unwhitened) space.
    pub residuals: DVector<f64>,
    /// `log det Phi` of the supplied covariance, from its Cholesky factor.
    /// Likelihood-based grid objectives need it alongside `objective`.
    pub log_det_covariance: f64,
}

impl GlsSolution {
    /// Standard errors: square roots of the coefficient covariance diagonal.
    pub fn standard_errors(&self) -> Vec<f64> {
        self.coef_covariance
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }
}

fn check_finite(name: &str, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} contains a non-finite value")));
        }
    }
    Ok(())
}

/// Solve a GLS problem by Cholesky whitening.
///
/// Fails with a singular-system error naming the covariance when the
/// covariance is not positive definite, and naming the design when
/// `X' Phi^-1 X` is rank deficient.
pub fn glse(problem: &GlsProblem) -> Result<GlsSolution> {
    let n = problem.response.len();
    let p = problem.design.ncols();
    if problem.design.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "design has {} rows but response has {n} entries",
            problem.design.nrows()
        )));
    }
    if problem.covariance.nrows() != n || problem.covariance.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "covariance is {}x{}, expected {n}x{n}",
            problem.covariance.nrows(),
            problem.covariance.ncols()
        )));
    }
    if n < p {
        return Err(Error::UnderIdentified(format!(
            "{n} observations cannot identify {p} parameters"
        )));
    }
    check_finite("design", problem.design.iter().copied())?;
    check_finite("response", problem.response.iter().copied())?;
    check_finite("covariance", problem.covariance.iter().copied())?;

    let scale = problem
        .covariance
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = problem.covariance[(i, j)];
            let b = problem.covariance[(j, i)];
            if (a - b).abs() > 1e-10 * scale {
                return Err(Error::InvalidInput(format!(
                    "covariance is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }

    let chol = nalgebra::Cholesky::new(problem.covariance.clone()).ok_or_else(|| {
        Error::SingularSystem {
            matrix: "covariance",
            reason: "is not positive definite".into(),
        }
    })?;
    let log_det_covariance = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let l = chol.l();
    let whitened_design = l
        .solve_lower_triangular(&problem.design)
        .ok_or_else(|| Error::SingularSystem {
            matrix: "covariance",
            reason: "Cholesky factor has a zero pivot".into(),
        })?;
    let whitened_response = l
        .solve_lower_triangular(&problem.response)
        .ok_or_else(|| Error::SingularSystem {
            matrix: "covariance",
            reason: "Cholesky factor has a zero pivot".into(),
        })?;

    // Solve the whitened least-squares problem by QR rather than normal
    // equations: squaring the design roughly squares its condition number,
    // which costs half the attainable digits on poorly scaled columns.
    let column_scales: Vec<f64> =
        (0..p).map(|j| whitened_design.column(j).norm()).collect();
    let qr = whitened_design.clone().qr();
    let r = qr.r();
    // A pivot tiny relative to its column scale means the column is
    // numerically in the span of the previous ones.
    for (j, pivot) in r.diagonal().iter().enumerate() {
        if pivot.abs() <= 1e-7 * column_scales[j] {
            return Err(Error::SingularSystem {
                matrix: "design",
                reason: format!("column {j} of X is numerically collinear with the others"),
            });
        }
    }
    let qtb = qr.q().transpose() * &whitened_response;
    let coefficients =
        r.solve_upper_triangular(&qtb).ok_or_else(|| Error::SingularSystem {
            matrix: "design",
            reason: "X' Phi^-1 X is rank deficient".into(),
        })?;
    let r_inverse =
        r.solve_upper_triangular(&DMatrix::identity(p, p)).ok_or_else(|| {
            Error::SingularSystem {
                matrix: "design",
                reason: "X' Phi^-1 X is rank deficient".into(),
            }
        })?;

    let whitened_residuals = &whitened_response - &whitened_design * &coefficients;
    let objective = whitened_residuals.norm_squared();
    let sigma2 = if n > p { objective / (n - p) as f64 } else { 0.0 };
    let coef_covariance = &r_inverse * r_inverse.transpose() * sigma2;
    let residuals = &problem.response - &problem.design * &coefficients;

    Ok(GlsSolution {
        coefficients,
        objective,
        sigma2,
        coef_covariance,
        residuals,
        log_det_covariance,
    })
}

/// How grid objectives are formed from a GLS solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ObjectiveMode {
    /// Gaussian negative log-likelihood with the residual scale profiled out:
    /// `N ln(psi / N) + log det Phi` (constants dropped).  Comparable across
    /// grid points with different covariance scales; the default.
    ProfiledNll,
    /// The raw quadratic form `psi`.  Kept for diagnostics; not comparable
    /// across covariance structures of different overall size.
    RawPsi,
}

impl ObjectiveMode {
    /// Combine the GLS quadratic form and covariance log-determinant into
    /// the grid objective.
    pub fn value(self, n: usize, psi: f64, log_det: f64) -> f64 {
        match self {
            // Floor psi so that an exact fit yields a very negative finite
            // value instead of ln(0).
            ObjectiveMode::ProfiledNll => {
                let n = n as f64;
                n * (psi.max(1e-300) / n).ln() + log_det
            }
            ObjectiveMode::RawPsi => psi,
        }
    }
}

impl Default for ObjectiveMode {
    fn default() -> Self {
        ObjectiveMode::ProfiledNll
    }
}

/// One named parameter axis of a search grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridAxis {
    pub name: String,
    values: Vec<f64>,
}

impl GridAxis {
    /// Values must be finite, within `[0, 1]`, and strictly increasing.
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::InvalidInput(format!("grid axis {name} has no values")));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "grid axis {name}: value {v} outside [0, 1]"
                )));
            }
            if i > 0 && v <= values[i - 1] {
                return Err(Error::InvalidInput(format!(
                    "grid axis {name}: values must be strictly increasing"
                )));
            }
        }
        Ok(Self { name, values })
    }

    /// The default axis `{0.0, 0.1, ..., 0.9}`.
    pub fn default_unit(name: impl Into<String>) -> Self {
        Self::new(name, (0..10).map(|i| i as f64 / 10.0).collect()).expect("valid default axis")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A full search grid: per-parameter value lists plus optional neighbourhood
/// refinement around the incumbent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    axes: Vec<GridAxis>,
    refine_depth: usize,
    refine_shrink: f64,
}

impl GridSpec {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidInput("grid has no axes".into()));
        }
        Ok(Self { axes, refine_depth: 0, refine_shrink: 0.1 })
    }

    /// Default `{0.0, ..., 0.9}` axes with the given names, no refinement.
    pub fn default_for(names: &[&str]) -> Self {
        Self::new(names.iter().map(|n| GridAxis::default_unit(*n)).collect())
            .expect("at least one axis")
    }

    /// Enable `depth` refinement passes; each pass re-grids the neighbourhood
    /// of the incumbent with steps shrunk by `shrink`.
    pub fn with_refinement(mut self, depth: usize, shrink: f64) -> Result<Self> {
        if !shrink.is_finite() || !(0.0..1.0).contains(&shrink) || shrink == 0.0 {
            return Err(Error::InvalidInput(format!(
                "refinement shrink {shrink} must lie in (0, 1)"
            )));
        }
        self.refine_depth = depth;
        self.refine_shrink = shrink;
        Ok(self)
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn refine_depth(&self) -> usize {
        self.refine_depth
    }

    pub fn refine_shrink(&self) -> f64 {
        self.refine_shrink
    }

    /// Number of points in the initial (unrefined) grid.
    pub fn initial_points(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }
}

/// A recorded objective evaluation.
#[derive(Debug, Clone)]
pub struct GridEvaluation {
    pub point: Vec<f64>,
    pub value: f64,
}

/// Outcome of a grid minimisation.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    /// Every evaluation performed, in evaluation order (initial grid first,
    /// then refinement passes).  Failed points appear with value +inf.
    pub evaluations: Vec<GridEvaluation>,
}

fn lexicographically_smaller(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// True when candidate `(value, point)` beats the incumbent: smaller value,
/// or equal value at a lexicographically smaller point.
fn improves(value: f64, point: &[f64], best_value: f64, best_point: &[f64]) -> bool {
    value < best_value || (value == best_value && lexicographically_smaller(point, best_point))
}

fn cartesian_point(axes: &[Vec<f64>], mut flat: usize) -> Vec<f64> {
    let mut point = vec![0.0; axes.len()];
    for (i, axis) in axes.iter().enumerate().rev() {
        point[i] = axis[flat % axis.len()];
        flat /= axis.len();
    }
    point
}

fn evaluate_pass<F>(objective: &F, axes: &[Vec<f64>]) -> Vec<GridEvaluation>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let total: usize = axes.iter().map(Vec::len).product();
    (0..total)
        .into_par_iter()
        .map(|flat| {
            let point = cartesian_point(axes, flat);
            let raw = objective(&point);
            let value = if raw.is_nan() { f64::INFINITY } else { raw };
            GridEvaluation { point, value }
        })
        .collect()
}

/// Refined values for one axis: the interval one original step either side
/// of the incumbent, subdivided by the shrink factor and clipped to the
/// axis's original hull.
fn refine_axis(original: &[f64], incumbent: f64, shrink: f64) -> Vec<f64> {
    if original.len() < 2 {
        return original.to_vec();
    }
    let step = original
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let fine = step * shrink;
    let lo = (incumbent - step).max(original[0]);
    let hi = (incumbent + step).min(*original.last().expect("non-empty"));
    let mut values = Vec::new();
    let mut v = lo;
    while v < hi - 1e-12 * step {
        values.push(v);
        v += fine;
    }
    values.push(hi);
    // Make sure the incumbent itself stays on the refined axis.
    if !values.iter().any(|&x| x == incumbent) {
        let pos = values.partition_point(|&x| x < incumbent);
        values.insert(pos, incumbent);
    }
    values
}

/// Exhaustively minimise `objective` over the grid, then over `refine_depth`
/// shrunken neighbourhood grids around the incumbent.
///
/// Objective failures must be signalled by returning +inf (NaN is treated
/// the same); they are recorded and skipped.  If every point of the initial
/// grid fails, a no-feasible-point error is returned.
pub fn grid_minimize<F>(objective: F, spec: &GridSpec) -> Result<GridSearchResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut axes: Vec<Vec<f64>> = spec.axes.iter().map(|a| a.values.clone()).collect();
    let mut evaluations = Vec::new();
    let mut best_point: Option<Vec<f64>> = None;
    let mut best_value = f64::INFINITY;

    for pass in 0..=spec.refine_depth {
        let pass_evals = evaluate_pass(&objective, &axes);
        for eval in &pass_evals {
            let beats = match &best_point {
                None => eval.value < f64::INFINITY,
                Some(bp) => improves(eval.value, &eval.point, best_value, bp),
            };
            if beats {
                best_value = eval.value;
                best_point = Some(eval.point.clone());
            }
        }
        evaluations.extend(pass_evals);

        let Some(incumbent) = &best_point else {
            return Err(Error::NoFeasiblePoint(
                "every grid point failed to evaluate".into(),
            ));
        };
        if pass < spec.refine_depth {
            axes = spec
                .axes
                .iter()
                .zip(incumbent)
                .map(|(axis, &inc)| refine_axis(&axis.values, inc, spec.refine_shrink))
                .collect();
        }
    }

    Ok(GridSearchResult {
        best_point: best_point.expect("feasible point found"),
        best_value,
        evaluations,
    })
}
