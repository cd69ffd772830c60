//! Corporate-bond credit regression: term structures of default
//! probabilities (TSDP) and recovery rates.
//!
//! A corporate bond's expected cash flow replaces each promised flow `C(s)`
//! by `C(s)[1 - p(s)] + 100 gamma [p(s) - p(s_prev)]`, where `p` is the
//! issuer's TSDP — a sales-weighted mix of per-industry polynomials of
//! order `q` with no constant term — and `gamma` the mean recovery rate of
//! the bond's rating grade.  Valuing the expected flows with the
//! government-bond mean discount curve turns the observed price shortfall
//! `y_k = V_k - P_hat_k` into a regression that is linear in the polynomial
//! coefficients once `gamma` is fixed.  Recovery rates and the covariance
//! decay/correlation parameters are chosen by grid search; the coefficient
//! vector by iterated generalised least squares, since the residual
//! covariance itself depends on the coefficients through the expected
//! flows.

use std::collections::HashMap;
use std::ops::RangeInclusive;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gb::GbCurveModel;
use crate::gls::{self, GlsProblem, GlsSolution, GridSpec, ObjectiveMode};
use crate::instruments::{BusinessPortfolio, CashFlowSchedule, CorporateBond};

/// TSDP polynomial coefficients `alpha_h^{ij}` for grade `i`, industry `j`
/// and power `h = 1..=q`.
///
/// The stacked per-grade block `beta(i) = (alpha_1^{i.}, ..., alpha_q^{i.})`
/// is power-major with industries innermost, matching the weight basis
/// `w(s) = (s w', ..., s^q w')'` so that the issuer TSDP is the plain inner
/// product `w(s)' beta(i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsdpCoefficients {
    grades: usize,
    industries: usize,
    order: usize,
    values: Vec<f64>,
}

impl TsdpCoefficients {
    pub fn new(grades: usize, industries: usize, order: usize, values: Vec<f64>) -> Result<Self> {
        if grades == 0 || industries == 0 || order == 0 {
            return Err(Error::InvalidInput(format!(
                "TSDP dimensions must be positive, got I={grades}, J={industries}, q={order}"
            )));
        }
        if values.len() != grades * industries * order {
            return Err(Error::InvalidInput(format!(
                "expected {} TSDP coefficients for I={grades}, J={industries}, q={order}, got {}",
                grades * industries * order,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("TSDP coefficients must be finite".into()));
        }
        Ok(Self { grades, industries, order, values })
    }

    pub fn zeros(grades: usize, industries: usize, order: usize) -> Result<Self> {
        Self::new(grades, industries, order, vec![0.0; grades * industries * order])
    }

    /// Assemble from per-grade blocks (each of length `J * q`, power-major).
    pub fn from_grade_blocks(industries: usize, order: usize, blocks: &[Vec<f64>]) -> Result<Self> {
        let mut values = Vec::with_capacity(blocks.len() * industries * order);
        for block in blocks {
            if block.len() != industries * order {
                return Err(Error::InvalidInput(format!(
                    "grade block has {} values, expected J*q = {}",
                    block.len(),
                    industries * order
                )));
            }
            values.extend_from_slice(block);
        }
        Self::new(blocks.len(), industries, order, values)
    }

    pub fn grades(&self) -> usize {
        self.grades
    }

    pub fn industries(&self) -> usize {
        self.industries
    }

    /// Polynomial order `q`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// `alpha_h^{ij}`; all indices 1-based.
    pub fn coefficient(&self, grade: usize, power: usize, industry: usize) -> f64 {
        assert!(grade >= 1 && grade <= self.grades, "grade {grade} outside 1..={}", self.grades);
        assert!(power >= 1 && power <= self.order, "power {power} outside 1..={}", self.order);
        assert!(
            industry >= 1 && industry <= self.industries,
            "industry {industry} outside 1..={}",
            self.industries
        );
        self.values[((grade - 1) * self.order + (power - 1)) * self.industries + (industry - 1)]
    }

    /// The stacked coefficient block `beta(i)` of a grade, length `J * q`.
    pub fn grade_block(&self, grade: usize) -> &[f64] {
        assert!(grade >= 1 && grade <= self.grades, "grade {grade} outside 1..={}", self.grades);
        let span = self.industries * self.order;
        &self.values[(grade - 1) * span..grade * span]
    }

    /// Generic per-industry TSDP `p(s : i, j) = sum_h alpha_h^{ij} s^h`.
    pub fn curve_value(&self, grade: usize, industry: usize, s: f64) -> f64 {
        let mut total = 0.0;
        let mut s_pow = 1.0;
        for h in 1..=self.order {
            s_pow *= s;
            total += self.coefficient(grade, h, industry) * s_pow;
        }
        total
    }

    /// Derivative `d/ds` of the issuer TSDP for a sales portfolio.
    pub fn issuer_derivative(&self, portfolio: &BusinessPortfolio, grade: usize, s: f64) -> f64 {
        let weights = portfolio.weights();
        assert_eq!(
            weights.len(),
            self.industries,
            "portfolio spans {} industries, coefficients {}",
            weights.len(),
            self.industries
        );
        let mut total = 0.0;
        let mut s_pow = 1.0;
        for h in 1..=self.order {
            let mixed: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * self.coefficient(grade, h, j + 1))
                .sum();
            total += h as f64 * mixed * s_pow;
            s_pow *= s;
        }
        total
    }
}

/// Issuer TSDP `p_k(s : i) = w_k(s)' beta(i)`: the sales-weighted mix of the
/// grade's per-industry polynomials.
///
/// Returns the raw polynomial value; results outside `[0, 1]` are possible
/// and are surfaced through fit diagnostics, with clamping left to the
/// consumers that need a probability.
pub fn tsdp_eval(
    coeffs: &TsdpCoefficients,
    portfolio: &BusinessPortfolio,
    grade: usize,
    s: f64,
) -> f64 {
    let weights = portfolio.weights();
    assert_eq!(
        weights.len(),
        coeffs.industries,
        "portfolio spans {} industries, coefficients {}",
        weights.len(),
        coeffs.industries
    );
    assert!(s >= 0.0, "TSDP evaluated at negative tenor {s}");
    let mut total = 0.0;
    let mut s_pow = 1.0;
    for h in 1..=coeffs.order {
        s_pow *= s;
        let mixed: f64 = weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * coeffs.coefficient(grade, h, j + 1))
            .sum();
        total += mixed * s_pow;
    }
    total
}

/// Mean recovery rates per grade, as a fraction of face value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRates {
    gamma: Vec<f64>,
}

impl RecoveryRates {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::InvalidInput("recovery rates must cover at least one grade".into()));
        }
        for (i, g) in gamma.iter().enumerate() {
            if !g.is_finite() || !(0.0..=1.0).contains(g) {
                return Err(Error::InvalidInput(format!(
                    "recovery rate {g} for grade {} outside [0, 1]",
                    i + 1
                )));
            }
        }
        Ok(Self { gamma })
    }

    pub fn grades(&self) -> usize {
        self.gamma.len()
    }

    /// Recovery rate of a grade (1-based).
    pub fn gamma(&self, grade: usize) -> f64 {
        assert!(grade >= 1 && grade <= self.gamma.len(), "grade {grade} outside 1..={}", self.gamma.len());
        self.gamma[grade - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }
}

/// Covariance parameters of the stacked corporate-bond regression.
///
/// Entry `(k, l)` of the covariance is `sigma2 * lambda_kl * phi_kl` where
/// `lambda_kk = 1`, `lambda_kl = rho[i(k)][i(l)] *
/// exp(-xi[i(k)][i(l)] |s_kM - s_lM|)` for `k != l`, and `phi_kl` double-sums
/// products of expected flows weighted by `exp(-theta |s_kj - s_lm|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbCovarianceParams {
    pub sigma2: f64,
    pub theta: f64,
    /// Grade-pair correlations, `rho[i][j]` 0-based, symmetric.
    pub rho: Vec<Vec<f64>>,
    /// Grade-pair maturity-decay rates, symmetric.
    pub xi: Vec<Vec<f64>>,
}

impl CbCovarianceParams {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma2.is_finite() || self.sigma2 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "sigma2 {} must be strictly positive",
                self.sigma2
            )));
        }
        if !self.theta.is_finite() || self.theta < 0.0 {
            return Err(Error::InvalidInput(format!("theta {} must be non-negative", self.theta)));
        }
        let grades = self.rho.len();
        if grades == 0 || self.xi.len() != grades {
            return Err(Error::InvalidInput(
                "rho and xi must be non-empty square matrices of equal size".into(),
            ));
        }
        for (name, matrix) in [("rho", &self.rho), ("xi", &self.xi)] {
            for row in matrix.iter() {
                if row.len() != grades {
                    return Err(Error::InvalidInput(format!("{name} is not square")));
                }
            }
            for i in 0..grades {
                for j in 0..grades {
                    let v = matrix[i][j];
                    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                        return Err(Error::InvalidInput(format!(
                            "{name}[{i}][{j}] = {v} outside [0, 1]"
                        )));
                    }
                    if (matrix[i][j] - matrix[j][i]).abs() > 1e-12 {
                        return Err(Error::InvalidInput(format!("{name} is not symmetric")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn grades(&self) -> usize {
        self.rho.len()
    }
}

/// Evaluate `sum_h poly[h-1] * s^h` (no constant term).
fn eval_no_constant_poly(poly: &[f64], s: f64) -> f64 {
    let mut total = 0.0;
    let mut s_pow = 1.0;
    for &c in poly {
        s_pow *= s;
        total += c * s_pow;
    }
    total
}

/// Collapse a grade block and portfolio weights into the issuer's effective
/// per-power coefficients `c_h = sum_j w_j alpha_h^{ij}`.
fn issuer_poly(block: &[f64], weights: &[f64]) -> Vec<f64> {
    let industries = weights.len();
    let order = block.len() / industries;
    (0..order)
        .map(|h| {
            weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * block[h * industries + j])
                .sum()
        })
        .collect()
}

/// Expected flows from the issuer's effective polynomial: each promised flow
/// kept with probability `1 - p`, plus recovery on default in the period.
fn expected_flows_from_poly(schedule: &CashFlowSchedule, poly: &[f64], gamma: f64) -> Vec<f64> {
    let mut flows = Vec::with_capacity(schedule.len());
    let mut prev_p = 0.0;
    for (&t, &c) in schedule.times().iter().zip(schedule.amounts()) {
        let p = eval_no_constant_poly(poly, t);
        flows.push(c * (1.0 - p) + 100.0 * gamma * (p - prev_p));
        prev_p = p;
    }
    flows
}

/// Investors' expected cash flow vector `Cbar_k(s_kj)`.
///
/// `Cbar(s_j) = C(s_j)[1 - p(s_j)] + 100 gamma(i) [p(s_j) - p(s_{j-1})]`,
/// with `s_0 := 0` and `p(0) = 0`; recovery is paid at the first payment
/// date following default.  The TSDP enters unclamped, exactly as the
/// estimator uses it.
pub fn expected_cashflow(
    bond: &CorporateBond,
    coeffs: &TsdpCoefficients,
    recovery: &RecoveryRates,
) -> Result<Vec<f64>> {
    if bond.grade > coeffs.grades() || bond.grade > recovery.grades() {
        return Err(Error::InvalidInput(format!(
            "bond {} has grade {}, beyond the {} fitted grades",
            bond.id,
            bond.grade,
            coeffs.grades().min(recovery.grades())
        )));
    }
    if bond.portfolio.weights().len() != coeffs.industries() {
        return Err(Error::InvalidInput(format!(
            "bond {} spans {} industries, coefficients {}",
            bond.id,
            bond.portfolio.weights().len(),
            coeffs.industries()
        )));
    }
    let poly = issuer_poly(coeffs.grade_block(bond.grade), bond.portfolio.weights());
    Ok(expected_flows_from_poly(&bond.schedule, &poly, recovery.gamma(bond.grade)))
}

/// One corporate bond's regression pieces.
///
/// The model identity `sum_j Cbar(s_j) Dbar(s_j) - P_hat = [u + gamma v]'
/// beta` holds exactly for any `(beta, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbRegression {
    /// Credit risk discount `y_k = V_k - P_hat_k`.
    pub response: f64,
    /// `-sum_j C(s_j) Dbar(s_j) w(s_j)`, length `J * q`.
    pub u: DVector<f64>,
    /// `100 sum_j Dbar(s_j) [w(s_j) - w(s_{j-1})]`, length `J * q`.
    pub v: DVector<f64>,
}

/// Weight basis `w(s) = (s w', s^2 w', ..., s^q w')'`.
fn weight_basis(weights: &[f64], order: usize, s: f64) -> DVector<f64> {
    let industries = weights.len();
    let mut basis = DVector::zeros(industries * order);
    let mut s_pow = 1.0;
    for h in 0..order {
        s_pow *= s;
        for (j, &w) in weights.iter().enumerate() {
            basis[h * industries + j] = w * s_pow;
        }
    }
    basis
}

/// Build the credit-discount regression pieces for one bond against a fitted
/// government-bond curve of polynomial order `q` in the TSDP.
///
/// The bond's own coupon and maturity enter the mean discount function.  A
/// final payment beyond the curve's fitted maturity span extrapolates the
/// discount polynomial; this is logged, not rejected.
pub fn build_cb_regression(
    bond: &CorporateBond,
    gb: &GbCurveModel,
    order: usize,
) -> Result<CbRegression> {
    if order == 0 {
        return Err(Error::InvalidInput("TSDP order must be at least 1".into()));
    }
    let maturity = bond.schedule.maturity();
    if maturity > gb.maturity_span.1 {
        log::warn!(
            "bond {} matures at {maturity:.4}y, beyond the fitted span ({:.4}y, {:.4}y); \
             the discount curve is extrapolated",
            bond.id,
            gb.maturity_span.0,
            gb.maturity_span.1
        );
    }
    let weights = bond.portfolio.weights();
    let p_hat = gb.theoretical_price(&bond.schedule, &bond.attributes);
    let mut u = DVector::zeros(weights.len() * order);
    let mut v = DVector::zeros(weights.len() * order);
    let mut prev_basis = DVector::zeros(weights.len() * order);
    for (&t, &c) in bond.schedule.times().iter().zip(bond.schedule.amounts()) {
        let discount = gb.mean_discount(&bond.attributes, t);
        let basis = weight_basis(weights, order, t);
        u.axpy(-c * discount, &basis, 1.0);
        v.axpy(100.0 * discount, &(&basis - &prev_basis), 1.0);
        prev_basis = basis;
    }
    Ok(CbRegression { response: bond.price - p_hat, u, v })
}

/// Flow-proximity kernels `exp(-theta |s_kj - s_lm|)` for every bond pair,
/// stored for the upper triangle only.
struct PairKernels {
    n: usize,
    mats: Vec<DMatrix<f64>>,
}

impl PairKernels {
    fn build(schedules: &[&CashFlowSchedule], theta: f64) -> Self {
        let n = schedules.len();
        let mut mats = Vec::with_capacity(n * (n + 1) / 2);
        for k in 0..n {
            for l in k..n {
                let (tk, tl) = (schedules[k].times(), schedules[l].times());
                let mut m = DMatrix::zeros(tk.len(), tl.len());
                for (a, &ta) in tk.iter().enumerate() {
                    for (b, &tb) in tl.iter().enumerate() {
                        m[(a, b)] = (-theta * (ta - tb).abs()).exp();
                    }
                }
                mats.push(m);
            }
        }
        Self { n, mats }
    }

    fn at(&self, k: usize, l: usize) -> &DMatrix<f64> {
        debug_assert!(k <= l && l < self.n);
        // Row offset k*n - k(k-1)/2, rearranged to stay in usize at k = 0.
        &self.mats[k * (2 * self.n - k + 1) / 2 + (l - k)]
    }
}

/// `phi_kl = Cbar_k' B_kl Cbar_l` for all pairs.
fn phi_from_kernels(kernels: &PairKernels, flows: &[DVector<f64>]) -> DMatrix<f64> {
    let n = flows.len();
    let mut phi = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in k..n {
            let value = flows[k].dot(&(kernels.at(k, l) * &flows[l]));
            phi[(k, l)] = value;
            phi[(l, k)] = value;
        }
    }
    phi
}

/// Scale `phi` into the covariance via the grade-pair correlation structure.
fn apply_lambda(
    phi: &DMatrix<f64>,
    maturities: &[f64],
    grade_of: &[usize],
    rho: &[Vec<f64>],
    xi: &[Vec<f64>],
    sigma2: f64,
) -> DMatrix<f64> {
    let n = maturities.len();
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        cov[(k, k)] = sigma2 * phi[(k, k)];
        for l in (k + 1)..n {
            let (gi, gj) = (grade_of[k], grade_of[l]);
            let lambda =
                rho[gi][gj] * (-xi[gi][gj] * (maturities[k] - maturities[l]).abs()).exp();
            let value = sigma2 * lambda * phi[(k, l)];
            cov[(k, l)] = value;
            cov[(l, k)] = value;
        }
    }
    cov
}

/// Residual covariance of a corporate-bond cross-section at the given TSDP
/// coefficients and recovery rates.
pub fn cb_covariance(
    bonds: &[CorporateBond],
    coeffs: &TsdpCoefficients,
    recovery: &RecoveryRates,
    params: &CbCovarianceParams,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    if bonds.is_empty() {
        return Err(Error::InvalidInput("no bonds supplied".into()));
    }
    let mut flows = Vec::with_capacity(bonds.len());
    let mut grade_of = Vec::with_capacity(bonds.len());
    for bond in bonds {
        if bond.grade > params.grades() {
            return Err(Error::InvalidInput(format!(
                "bond {} has grade {}, beyond the {} covariance grades",
                bond.id,
                bond.grade,
                params.grades()
            )));
        }
        flows.push(DVector::from_vec(expected_cashflow(bond, coeffs, recovery)?));
        grade_of.push(bond.grade - 1);
    }
    let schedules: Vec<&CashFlowSchedule> = bonds.iter().map(|b| &b.schedule).collect();
    let maturities: Vec<f64> = schedules.iter().map(|s| s.maturity()).collect();
    let kernels = PairKernels::build(&schedules, params.theta);
    let phi = phi_from_kernels(&kernels, &flows);
    Ok(apply_lambda(&phi, &maturities, &grade_of, &params.rho, &params.xi, params.sigma2))
}

/// Result of the per-grade stage: grid-selected `(gamma, rho_ii, xi_ii,
/// theta)` with the iterated coefficient estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeEstimate {
    pub grade: usize,
    pub industries: usize,
    pub order: usize,
    pub bond_count: usize,
    pub gamma: f64,
    pub rho: f64,
    pub xi: f64,
    pub theta: f64,
    /// Coefficient block `beta(i)`, power-major with industries innermost.
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub psi: f64,
    pub log_det_covariance: f64,
    pub objective: f64,
    pub objective_mode: ObjectiveMode,
    /// GLS iterations used at the selected grid point.
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub residual_std: f64,
    pub grid_evaluations: usize,
}

/// Shared scratch for the per-grade iterated GLS.
struct GradePanel<'a> {
    schedules: Vec<&'a CashFlowSchedule>,
    raw_flows: Vec<DVector<f64>>,
    maturities: Vec<f64>,
    response: DVector<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    weights: Vec<&'a [f64]>,
    industries: usize,
}

impl<'a> GradePanel<'a> {
    fn build(bonds: &'a [CorporateBond], gb: &GbCurveModel, order: usize) -> Result<Self> {
        let industries = bonds[0].portfolio.weights().len();
        let columns = industries * order;
        let mut response = DVector::zeros(bonds.len());
        let mut u = DMatrix::zeros(bonds.len(), columns);
        let mut v = DMatrix::zeros(bonds.len(), columns);
        for (k, bond) in bonds.iter().enumerate() {
            if bond.portfolio.weights().len() != industries {
                return Err(Error::InvalidInput(format!(
                    "bond {} spans {} industries, others {}",
                    bond.id,
                    bond.portfolio.weights().len(),
                    industries
                )));
            }
            let parts = build_cb_regression(bond, gb, order)?;
            response[k] = parts.response;
            u.row_mut(k).copy_from(&parts.u.transpose());
            v.row_mut(k).copy_from(&parts.v.transpose());
        }
        Ok(Self {
            schedules: bonds.iter().map(|b| &b.schedule).collect(),
            raw_flows: bonds
                .iter()
                .map(|b| DVector::from_column_slice(b.schedule.amounts()))
                .collect(),
            maturities: bonds.iter().map(|b| b.schedule.maturity()).collect(),
            response,
            u,
            v,
            weights: bonds.iter().map(|b| b.portfolio.weights()).collect(),
            industries,
        })
    }

    fn expected_flows(&self, beta: &[f64], gamma: f64) -> Vec<DVector<f64>> {
        self.schedules
            .iter()
            .zip(&self.weights)
            .map(|(schedule, weights)| {
                let poly = issuer_poly(beta, weights);
                DVector::from_vec(expected_flows_from_poly(schedule, &poly, gamma))
            })
            .collect()
    }
}

/// Iterate GLS at fixed `(gamma, rho, xi)` and precomputed kernels: the
/// covariance is rebuilt from the previous iterate's expected flows, so the
/// first round (beta = 0) prices with the promised flows.
fn iterate_grade_gls(
    panel: &GradePanel<'_>,
    design: &DMatrix<f64>,
    gamma: f64,
    rho: f64,
    xi: f64,
    kernels: &PairKernels,
    max_iter: usize,
    tol: f64,
) -> Result<(GlsSolution, usize)> {
    let rho_m = vec![vec![rho]];
    let xi_m = vec![vec![xi]];
    let grade_of = vec![0usize; panel.maturities.len()];
    let mut flows: Vec<DVector<f64>> = panel.raw_flows.clone();
    let mut beta_prev: Option<DVector<f64>> = None;
    let mut last: Option<(GlsSolution, usize)> = None;
    for iter in 1..=max_iter {
        let phi = phi_from_kernels(kernels, &flows);
        let covariance = apply_lambda(&phi, &panel.maturities, &grade_of, &rho_m, &xi_m, 1.0);
        let sol = gls::glse(&GlsProblem {
            design: design.clone(),
            response: panel.response.clone(),
            covariance,
        })?;
        let beta = sol.coefficients.clone();
        let converged = match &beta_prev {
            Some(prev) => {
                let delta = (&beta - prev).amax();
                delta <= tol * prev.amax().max(1e-12)
            }
            None => false,
        };
        last = Some((sol, iter));
        if converged {
            break;
        }
        beta_prev = Some(beta.clone());
        if iter < max_iter {
            flows = panel.expected_flows(beta.as_slice(), gamma);
        }
    }
    Ok(last.expect("at least one GLS iteration"))
}

fn fit_cb_grade_impl(
    bonds: &[CorporateBond],
    gb: &GbCurveModel,
    order: usize,
    grid: &GridSpec,
    max_iter: usize,
    tol: f64,
    mode: ObjectiveMode,
) -> Result<GradeEstimate> {
    if bonds.is_empty() {
        return Err(Error::InvalidInput("no bonds supplied".into()));
    }
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be at least 1".into()));
    }
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    if grid.axes().len() != 4 {
        return Err(Error::InvalidInput(format!(
            "per-grade grid needs the four axes (gamma, rho, xi, theta), got {}",
            grid.axes().len()
        )));
    }
    let grade = bonds[0].grade;
    if bonds.iter().any(|b| b.grade != grade) {
        return Err(Error::InvalidInput("per-grade fit received mixed grades".into()));
    }
    let panel = GradePanel::build(bonds, gb, order)?;
    let columns = panel.industries * order;
    if bonds.len() < 2 * columns {
        return Err(Error::UnderIdentified(format!(
            "grade {grade}: {} bonds with J={}, q={order} violates K >= 2Jq = {}",
            bonds.len(),
            panel.industries,
            2 * columns
        )));
    }

    let kernel_cache: Mutex<HashMap<u64, Arc<PairKernels>>> = Mutex::new(HashMap::new());
    let kernels_for = |theta: f64| -> Arc<PairKernels> {
        let key = theta.to_bits();
        if let Some(hit) = kernel_cache.lock().expect("kernel cache").get(&key) {
            return hit.clone();
        }
        let built = Arc::new(PairKernels::build(&panel.schedules, theta));
        kernel_cache
            .lock()
            .expect("kernel cache")
            .entry(key)
            .or_insert(built)
            .clone()
    };

    let solve_at = |point: &[f64]| -> Result<(GlsSolution, usize)> {
        let (gamma, rho, xi, theta) = (point[0], point[1], point[2], point[3]);
        let design = &panel.u + &panel.v * gamma;
        iterate_grade_gls(&panel, &design, gamma, rho, xi, &kernels_for(theta), max_iter, tol)
    };

    let search = gls::grid_minimize(
        |point| match solve_at(point) {
            Ok((sol, _)) => mode.value(bonds.len(), sol.objective, sol.log_det_covariance),
            Err(_) => f64::INFINITY,
        },
        grid,
    )?;
    let (best, iterations) = solve_at(&search.best_point)?;
    let dof = (bonds.len() - columns).max(1) as f64;
    Ok(GradeEstimate {
        grade,
        industries: panel.industries,
        order,
        bond_count: bonds.len(),
        gamma: search.best_point[0],
        rho: search.best_point[1],
        xi: search.best_point[2],
        theta: search.best_point[3],
        beta: best.coefficients.iter().copied().collect(),
        sigma2: best.sigma2,
        psi: best.objective,
        log_det_covariance: best.log_det_covariance,
        objective: search.best_value,
        objective_mode: mode,
        iterations,
        residual_std: (best.residuals.norm_squared() / dof).sqrt(),
        residuals: best.residuals.iter().copied().collect(),
        grid_evaluations: search.evaluations.len(),
    })
}

/// Per-grade stage: grid-search `(gamma, rho_ii, xi_ii, theta)` — the grid
/// must supply those four axes in that order — solving each candidate by
/// iterated GLS started from `beta = 0`.
pub fn fit_cb_grade(
    bonds: &[CorporateBond],
    gb: &GbCurveModel,
    order: usize,
    grid: &GridSpec,
    max_iter: usize,
    tol: f64,
) -> Result<GradeEstimate> {
    fit_cb_grade_impl(bonds, gb, order, grid, max_iter, tol, ObjectiveMode::default())
}

/// [`fit_cb_grade`] with an explicit grid objective.
pub fn fit_cb_grade_with(
    bonds: &[CorporateBond],
    gb: &GbCurveModel,
    order: usize,
    grid: &GridSpec,
    max_iter: usize,
    tol: f64,
    mode: ObjectiveMode,
) -> Result<GradeEstimate> {
    fit_cb_grade_impl(bonds, gb, order, grid, max_iter, tol, mode)
}

/// Per-grade diagnostics carried into the combined fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeDiagnostics {
    pub grade: usize,
    pub bond_count: usize,
    pub gamma: f64,
    pub rho: f64,
    pub xi: f64,
    /// Grade-stage decay estimate, before pooling into the shared theta.
    pub theta: f64,
    pub residual_std: f64,
    pub iterations: usize,
    pub objective: f64,
}

/// Shape diagnostics of one fitted per-industry TSDP curve over the grade's
/// observed maturity span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveDiagnostic {
    pub grade: usize,
    pub industry: usize,
    /// Maturity span of the grade's bonds, over which the flags are sampled.
    pub maturity_span: (f64, f64),
    /// Curve leaves [0, 1] somewhere on the span.
    pub exits_unit_interval: bool,
    /// Curve decreases somewhere on the span.
    pub decreasing: bool,
}

/// One order candidate examined by [`select_order`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCandidate {
    pub order: usize,
    /// Full-model grid objective of the candidate fit.
    pub objective: f64,
    /// Selection criterion: profiled deviance plus `IJq ln K`.
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditDiagnostics {
    /// Chosen TSDP polynomial order `q`.
    pub order: usize,
    /// Full-model objective at the selected cross-grade parameters.
    pub objective: f64,
    pub objective_mode: ObjectiveMode,
    pub psi: f64,
    pub log_det_covariance: f64,
    pub per_grade: Vec<GradeDiagnostics>,
    pub curves: Vec<CurveDiagnostic>,
    /// Order-selection trace; empty unless [`select_order`] produced the fit.
    pub selection: Vec<OrderCandidate>,
}

/// The full credit fit: TSDP coefficients, recovery rates, covariance
/// parameters and residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditFit {
    pub tsdp: TsdpCoefficients,
    pub recovery: RecoveryRates,
    pub covariance: CbCovarianceParams,
    /// Residuals grouped by grade, input order within each grade.
    pub residuals: Vec<Vec<f64>>,
    pub diagnostics: CreditDiagnostics,
}

impl CreditFit {
    pub fn grades(&self) -> usize {
        self.tsdp.grades()
    }

    pub fn industries(&self) -> usize {
        self.tsdp.industries()
    }

    pub fn order(&self) -> usize {
        self.tsdp.order()
    }

    /// Issuer TSDP under this fit (raw polynomial value).
    pub fn issuer_default_probability(
        &self,
        portfolio: &BusinessPortfolio,
        grade: usize,
        s: f64,
    ) -> f64 {
        tsdp_eval(&self.tsdp, portfolio, grade, s)
    }
}

fn curve_diagnostics(
    tsdp: &TsdpCoefficients,
    spans: &[(f64, f64)],
) -> Vec<CurveDiagnostic> {
    const SAMPLES: usize = 201;
    let mut out = Vec::new();
    for grade in 1..=tsdp.grades() {
        let span = spans[grade - 1];
        for industry in 1..=tsdp.industries() {
            let mut exits = false;
            let mut decreasing = false;
            let mut prev = 0.0;
            for step in 0..=SAMPLES {
                let s = span.1 * step as f64 / SAMPLES as f64;
                let p = tsdp.curve_value(grade, industry, s);
                if !(-1e-12..=1.0 + 1e-12).contains(&p) {
                    exits = true;
                }
                if step > 0 && p < prev - 1e-12 {
                    decreasing = true;
                }
                prev = p;
            }
            out.push(CurveDiagnostic {
                grade,
                industry,
                maturity_span: span,
                exits_unit_interval: exits,
                decreasing,
            });
        }
    }
    out
}

/// Group bond indices by grade, requiring grades to form `1..=I` with every
/// grade populated; within a grade, input order is preserved.
fn group_by_grade(bonds: &[CorporateBond]) -> Result<Vec<Vec<usize>>> {
    if bonds.is_empty() {
        return Err(Error::InvalidInput("no bonds supplied".into()));
    }
    let max_grade = bonds.iter().map(|b| b.grade).max().expect("non-empty");
    let mut groups = vec![Vec::new(); max_grade];
    for (k, bond) in bonds.iter().enumerate() {
        if bond.grade == 0 {
            return Err(Error::InvalidInput(format!("bond {} has grade 0; grades are 1-based", bond.id)));
        }
        groups[bond.grade - 1].push(k);
    }
    for (i, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::InvalidInput(format!(
                "grades must be contiguous from 1: grade {} has no bonds but grade {max_grade} does",
                i + 1
            )));
        }
    }
    Ok(groups)
}

fn degenerate_single_grade_fit(
    estimate: &GradeEstimate,
    spans: &[(f64, f64)],
) -> Result<CreditFit> {
    let tsdp =
        TsdpCoefficients::from_grade_blocks(estimate.industries, estimate.order, &[estimate.beta.clone()])?;
    let curves = curve_diagnostics(&tsdp, spans);
    Ok(CreditFit {
        recovery: RecoveryRates::new(vec![estimate.gamma])?,
        covariance: CbCovarianceParams {
            sigma2: estimate.sigma2,
            theta: estimate.theta,
            rho: vec![vec![estimate.rho]],
            xi: vec![vec![estimate.xi]],
        },
        residuals: vec![estimate.residuals.clone()],
        diagnostics: CreditDiagnostics {
            order: estimate.order,
            objective: estimate.objective,
            objective_mode: estimate.objective_mode,
            psi: estimate.psi,
            log_det_covariance: estimate.log_det_covariance,
            per_grade: vec![GradeDiagnostics {
                grade: estimate.grade,
                bond_count: estimate.bond_count,
                gamma: estimate.gamma,
                rho: estimate.rho,
                xi: estimate.xi,
                theta: estimate.theta,
                residual_std: estimate.residual_std,
                iterations: estimate.iterations,
                objective: estimate.objective,
            }],
            curves,
            selection: Vec::new(),
        },
        tsdp,
    })
}

fn fit_cb_full_impl(
    bonds: &[CorporateBond],
    per_grade: &[GradeEstimate],
    gb: &GbCurveModel,
    cross_grid: &GridSpec,
    mode: ObjectiveMode,
) -> Result<CreditFit> {
    let groups = group_by_grade(bonds)?;
    let grades = groups.len();
    if per_grade.len() != grades {
        return Err(Error::InvalidInput(format!(
            "{} per-grade estimates supplied for {} grades present",
            per_grade.len(),
            grades
        )));
    }
    for (i, est) in per_grade.iter().enumerate() {
        if est.grade != i + 1 {
            return Err(Error::InvalidInput(format!(
                "per-grade estimates must be ordered by grade: position {} holds grade {}",
                i + 1,
                est.grade
            )));
        }
    }
    let order = per_grade[0].order;
    let industries = per_grade[0].industries;
    if per_grade.iter().any(|e| e.order != order || e.industries != industries) {
        return Err(Error::InvalidInput(
            "per-grade estimates disagree on industries or order".into(),
        ));
    }
    let spans: Vec<(f64, f64)> = groups
        .iter()
        .map(|group| {
            let mats: Vec<f64> = group.iter().map(|&k| bonds[k].schedule.maturity()).collect();
            (
                mats.iter().copied().fold(f64::INFINITY, f64::min),
                mats.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        })
        .collect();

    if grades == 1 {
        // Nothing to combine: the full model is the per-grade model.
        return degenerate_single_grade_fit(&per_grade[0], &spans);
    }
    if cross_grid.axes().len() != 2 {
        return Err(Error::InvalidInput(format!(
            "cross-grade grid needs the two axes (rho, xi), got {}",
            cross_grid.axes().len()
        )));
    }

    // Stack rows grade-major (input order within grade) so the design is
    // block-diagonal across grades.
    let row_order: Vec<usize> = groups.iter().flatten().copied().collect();
    let k_total = row_order.len();
    let block = industries * order;
    let columns = grades * block;
    let mut response = DVector::zeros(k_total);
    let mut design = DMatrix::zeros(k_total, columns);
    let mut grade_of = Vec::with_capacity(k_total);
    let mut maturities = Vec::with_capacity(k_total);
    let mut schedules = Vec::with_capacity(k_total);
    let mut weights: Vec<&[f64]> = Vec::with_capacity(k_total);
    for (row, &k) in row_order.iter().enumerate() {
        let bond = &bonds[k];
        if bond.portfolio.weights().len() != industries {
            return Err(Error::InvalidInput(format!(
                "bond {} spans {} industries, the per-grade fits used {}",
                bond.id,
                bond.portfolio.weights().len(),
                industries
            )));
        }
        let parts = build_cb_regression(bond, gb, order)?;
        let gamma = per_grade[bond.grade - 1].gamma;
        let x_row = &parts.u + &parts.v * gamma;
        response[row] = parts.response;
        design
            .view_mut((row, (bond.grade - 1) * block), (1, block))
            .copy_from(&x_row.transpose());
        grade_of.push(bond.grade - 1);
        maturities.push(bond.schedule.maturity());
        schedules.push(&bond.schedule);
        weights.push(bond.portfolio.weights());
    }

    // One decay rate serves the whole panel; pool the per-grade estimates,
    // weighting by how many bonds informed each.
    let theta = per_grade
        .iter()
        .map(|e| e.theta * e.bond_count as f64)
        .sum::<f64>()
        / per_grade.iter().map(|e| e.bond_count as f64).sum::<f64>();
    let kernels = PairKernels::build(&schedules, theta);
    let gammas: Vec<f64> = per_grade.iter().map(|e| e.gamma).collect();

    let expected_flows = |beta: &DVector<f64>| -> Vec<DVector<f64>> {
        row_order
            .iter()
            .enumerate()
            .map(|(row, &k)| {
                let gi = grade_of[row];
                let block_coeffs = beta.as_slice()[gi * block..(gi + 1) * block].to_vec();
                let poly = issuer_poly(&block_coeffs, weights[row]);
                DVector::from_vec(expected_flows_from_poly(&bonds[k].schedule, &poly, gammas[gi]))
            })
            .collect()
    };

    let mut rho = vec![vec![0.0; grades]; grades];
    let mut xi = vec![vec![0.0; grades]; grades];
    for (i, est) in per_grade.iter().enumerate() {
        rho[i][i] = est.rho;
        xi[i][i] = est.xi;
    }
    let cross_pairs: Vec<(usize, usize)> = (0..grades)
        .flat_map(|i| ((i + 1)..grades).map(move |j| (i, j)))
        .collect();

    let mut beta = DVector::from_vec(
        per_grade.iter().flat_map(|e| e.beta.iter().copied()).collect::<Vec<f64>>(),
    );
    let mut final_solution: Option<GlsSolution> = None;
    let mut final_objective = f64::INFINITY;
    let mut evaluations = 0usize;

    // Two passes: select cross parameters and re-estimate beta, then repeat
    // once with the covariance rebuilt from the first-pass coefficients.
    for _pass in 0..2 {
        let flows = expected_flows(&beta);
        let phi = phi_from_kernels(&kernels, &flows);
        let solve_with = |rho_m: &[Vec<f64>], xi_m: &[Vec<f64>]| -> Result<GlsSolution> {
            let covariance = apply_lambda(&phi, &maturities, &grade_of, rho_m, xi_m, 1.0);
            gls::glse(&GlsProblem {
                design: design.clone(),
                response: response.clone(),
                covariance,
            })
        };
        // Sweep the cross pairs one at a time over the 2-d grid, holding the
        // others fixed; with two grades this is a single exact search.
        let sweeps = if cross_pairs.len() == 1 { 1 } else { 3 };
        for _sweep in 0..sweeps {
            let mut changed = false;
            for &(i, j) in &cross_pairs {
                let search = gls::grid_minimize(
                    |point| {
                        let mut rho_c = rho.clone();
                        let mut xi_c = xi.clone();
                        rho_c[i][j] = point[0];
                        rho_c[j][i] = point[0];
                        xi_c[i][j] = point[1];
                        xi_c[j][i] = point[1];
                        match solve_with(&rho_c, &xi_c) {
                            Ok(sol) => {
                                mode.value(k_total, sol.objective, sol.log_det_covariance)
                            }
                            Err(_) => f64::INFINITY,
                        }
                    },
                    cross_grid,
                )?;
                evaluations += search.evaluations.len();
                if rho[i][j] != search.best_point[0] || xi[i][j] != search.best_point[1] {
                    changed = true;
                }
                rho[i][j] = search.best_point[0];
                rho[j][i] = search.best_point[0];
                xi[i][j] = search.best_point[1];
                xi[j][i] = search.best_point[1];
            }
            if !changed {
                break;
            }
        }
        let sol = solve_with(&rho, &xi)?;
        beta = sol.coefficients.clone();
        final_objective = mode.value(k_total, sol.objective, sol.log_det_covariance);
        final_solution = Some(sol);
    }
    let solution = final_solution.expect("two passes ran");
    let _ = evaluations;

    let blocks: Vec<Vec<f64>> = (0..grades)
        .map(|i| beta.as_slice()[i * block..(i + 1) * block].to_vec())
        .collect();
    let tsdp = TsdpCoefficients::from_grade_blocks(industries, order, &blocks)?;
    let curves = curve_diagnostics(&tsdp, &spans);

    // Rows were stacked grade-major, so residuals split back contiguously.
    let mut residuals = Vec::with_capacity(grades);
    let mut per_grade_diag = Vec::with_capacity(grades);
    let mut offset = 0;
    for (i, group) in groups.iter().enumerate() {
        let slice: Vec<f64> =
            solution.residuals.as_slice()[offset..offset + group.len()].to_vec();
        let dof = (group.len().max(block + 1) - block) as f64;
        per_grade_diag.push(GradeDiagnostics {
            grade: i + 1,
            bond_count: group.len(),
            gamma: per_grade[i].gamma,
            rho: per_grade[i].rho,
            xi: per_grade[i].xi,
            theta: per_grade[i].theta,
            residual_std: (slice.iter().map(|r| r * r).sum::<f64>() / dof).sqrt(),
            iterations: per_grade[i].iterations,
            objective: per_grade[i].objective,
        });
        residuals.push(slice);
        offset += group.len();
    }

    Ok(CreditFit {
        tsdp,
        recovery: RecoveryRates::new(gammas)?,
        covariance: CbCovarianceParams { sigma2: solution.sigma2, theta, rho, xi },
        residuals,
        diagnostics: CreditDiagnostics {
            order,
            objective: final_objective,
            objective_mode: mode,
            psi: solution.objective,
            log_det_covariance: solution.log_det_covariance,
            per_grade: per_grade_diag,
            curves,
            selection: Vec::new(),
        },
    })
}

/// Combined stage: hold every per-grade `(beta, gamma, rho_ii, xi_ii)`
/// fixed inside the covariance, grid-search the cross-grade `(rho_ij,
/// xi_ij)` pairs, and re-estimate the stacked coefficient vector on the
/// block-diagonal design; the pass is run twice so the covariance reflects
/// the re-estimated coefficients.
pub fn fit_cb_full(
    bonds: &[CorporateBond],
    per_grade: &[GradeEstimate],
    gb: &GbCurveModel,
    cross_grid: &GridSpec,
) -> Result<CreditFit> {
    fit_cb_full_impl(bonds, per_grade, gb, cross_grid, ObjectiveMode::default())
}

/// [`fit_cb_full`] with an explicit grid objective.
pub fn fit_cb_full_with(
    bonds: &[CorporateBond],
    per_grade: &[GradeEstimate],
    gb: &GbCurveModel,
    cross_grid: &GridSpec,
    mode: ObjectiveMode,
) -> Result<CreditFit> {
    fit_cb_full_impl(bonds, per_grade, gb, cross_grid, mode)
}

/// Run both stages at a fixed order: per-grade fits followed by the
/// combined cross-grade fit.
pub fn fit_credit(
    bonds: &[CorporateBond],
    gb: &GbCurveModel,
    order: usize,
    grade_grid: &GridSpec,
    cross_grid: &GridSpec,
) -> Result<CreditFit> {
    fit_credit_with(bonds, gb, order, grade_grid, cross_grid, ObjectiveMode::default())
}

/// Grade-stage iteration budget: the covariance is refreshed from the new
/// coefficients at most this many times per grid point.
pub const DEFAULT_MAX_ITER: usize = 5;
/// Grade-stage stopping tolerance on the relative change in the coefficient
/// vector (infinity norm).
pub const DEFAULT_TOL: f64 = 1e-6;

/// [`fit_credit`] with an explicit grid objective.
pub fn fit_credit_with(
    bonds: &[CorporateBond],
    gb: &GbCurveModel,
    order: usize,
    grade_grid: &GridSpec,
    cross_grid: &GridSpec,
    mode: ObjectiveMode,
) -> Result<CreditFit> {
    let groups = group_by_grade(bonds)?;
    let mut estimates = Vec::with_capacity(groups.len());
    for group in &groups {
        let grade_bonds: Vec<CorporateBond> =
            group.iter().map(|&k| bonds[k].clone()).collect();
        estimates.push(fit_cb_grade_with(
            &grade_bonds,
            gb,
            order,
            grade_grid,
            DEFAULT_MAX_ITER,
            DEFAULT_TOL,
            mode,
        )?);
    }
    fit_cb_full_impl(bonds, &estimates, gb, cross_grid, mode)
}

/// Run the full two-stage procedure for each feasible polynomial order in
/// `q_range` and keep the order minimizing the profiled deviance plus the
/// `IJq ln K` complexity penalty; ties prefer the smaller order.
///
/// Orders for which some grade would violate `K_i >= 2Jq` are infeasible
/// and never attempted; candidates that fail numerically stay in the trace
/// with an infinite criterion.
pub fn select_order(
    bonds: &[CorporateBond],
    gb: &GbCurveModel,
    q_range: RangeInclusive<usize>,
    grade_grid: &GridSpec,
    cross_grid: &GridSpec,
) -> Result<CreditFit> {
    let groups = group_by_grade(bonds)?;
    let industries = bonds[0].portfolio.weights().len();
    let min_count = groups.iter().map(Vec::len).min().expect("non-empty groups");
    let k_total = bonds.len() as f64;
    let grades = groups.len();

    let feasible: Vec<usize> = q_range
        .clone()
        .filter(|&q| q >= 1 && 2 * industries * q <= min_count)
        .collect();
    if feasible.is_empty() {
        return Err(Error::UnderIdentified(format!(
            "no order in {:?} satisfies K_i >= 2Jq: smallest grade has {min_count} bonds, J = {industries}",
            q_range
        )));
    }

    let mut trace = Vec::with_capacity(feasible.len());
    let mut best: Option<(f64, usize, CreditFit)> = None;
    for &q in &feasible {
        match fit_credit(bonds, gb, q, grade_grid, cross_grid) {
            Ok(fit) => {
                // Complexity-penalised profiled deviance; computed from psi
                // and the log determinant regardless of the grid objective
                // so candidates stay comparable.
                let nll = ObjectiveMode::ProfiledNll.value(
                    bonds.len(),
                    fit.diagnostics.psi,
                    fit.diagnostics.log_det_covariance,
                );
                let criterion =
                    nll + (grades * industries * q) as f64 * k_total.ln();
                trace.push(OrderCandidate {
                    order: q,
                    objective: fit.diagnostics.objective,
                    criterion,
                });
                let improves = match &best {
                    Some((best_criterion, _, _)) => criterion < *best_criterion,
                    None => true,
                };
                if improves {
                    best = Some((criterion, q, fit));
                }
            }
            Err(err) => {
                log::warn!("order {q} failed: {err}");
                trace.push(OrderCandidate {
                    order: q,
                    objective: f64::INFINITY,
                    criterion: f64::INFINITY,
                });
            }
        }
    }
    match best {
        Some((_, _, mut fit)) => {
            fit.diagnostics.selection = trace;
            Ok(fit)
        }
        None => Err(Error::NoFeasiblePoint(
            "every candidate polynomial order failed to fit".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gb::{AttributeSet, DiscountCoefficients, GbCovarianceParams, GbDiagnostics};
    use crate::gls::GridAxis;
    use crate::instruments::{BondAttributes, build_schedule};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// A hand-made attribute-free GB curve: Dbar(s) = 1 - 0.03 s + 0.0004 s^2.
    fn test_gb() -> GbCurveModel {
        GbCurveModel {
            coefficients: DiscountCoefficients::new(
                2,
                vec![-0.03, 0.0, 0.0, 0.0004, 0.0, 0.0],
            )
            .unwrap(),
            attributes: AttributeSet::constant_only(),
            covariance: GbCovarianceParams { sigma2: 1.0, theta: 0.0, rho: 0.0, xi: 0.0 },
            residuals: vec![],
            maturity_span: (0.5, 12.0),
            diagnostics: GbDiagnostics {
                objective: 0.0,
                objective_mode: ObjectiveMode::ProfiledNll,
                residual_std: 0.0,
                coef_std_errors: vec![0.0; 6],
                grid_evaluations: 0,
            },
        }
    }

    fn cb(
        id: &str,
        price: f64,
        coupon: f64,
        maturity: f64,
        grade: usize,
        weights: Vec<f64>,
    ) -> CorporateBond {
        CorporateBond::new(
            id,
            price,
            coupon,
            maturity,
            2,
            grade,
            BusinessPortfolio::new(weights).unwrap(),
        )
        .unwrap()
    }

    /// Price a bond exactly under given TSDP truth via the expected flows.
    fn priced_cb(
        id: &str,
        coupon: f64,
        maturity: f64,
        grade: usize,
        weights: Vec<f64>,
        gb: &GbCurveModel,
        coeffs: &TsdpCoefficients,
        recovery: &RecoveryRates,
    ) -> CorporateBond {
        let mut bond = cb(id, 1.0, coupon, maturity, grade, weights);
        let flows = expected_cashflow(&bond, coeffs, recovery).unwrap();
        bond.price = bond
            .schedule
            .times()
            .iter()
            .zip(&flows)
            .map(|(&t, &f)| f * gb.mean_discount(&bond.attributes, t))
            .sum();
        bond
    }

    fn axis(name: &'static str, values: &[f64]) -> GridAxis {
        GridAxis::new(name, values.to_vec()).unwrap()
    }

    fn grade_grid(gammas: &[f64], rhos: &[f64], xis: &[f64], thetas: &[f64]) -> GridSpec {
        GridSpec::new(vec![
            axis("gamma", gammas),
            axis("rho", rhos),
            axis("xi", xis),
            axis("theta", thetas),
        ])
        .unwrap()
    }

    fn cross_grid(rhos: &[f64], xis: &[f64]) -> GridSpec {
        GridSpec::new(vec![axis("rho", rhos), axis("xi", xis)]).unwrap()
    }

    #[test]
    fn tsdp_eval_weighted_polynomial() {
        // q = 1, J = 2, alpha = (0.02, 0.04), w = (0.5, 0.5), s = 3 -> 0.09.
        let coeffs = TsdpCoefficients::new(1, 2, 1, vec![0.02, 0.04]).unwrap();
        let portfolio = BusinessPortfolio::new(vec![0.5, 0.5]).unwrap();
        assert_relative_eq!(tsdp_eval(&coeffs, &portfolio, 1, 3.0), 0.09, max_relative = 1e-15);
        assert_eq!(tsdp_eval(&coeffs, &portfolio, 1, 0.0), 0.0);
    }

    #[test]
    fn tsdp_one_hot_matches_generic_curve() {
        let coeffs =
            TsdpCoefficients::new(2, 3, 2, (0..12).map(|k| 0.001 * k as f64).collect()).unwrap();
        for grade in 1..=2 {
            for industry in 1..=3 {
                let onehot = BusinessPortfolio::single(industry, 3).unwrap();
                for s in [0.5, 2.0, 7.5] {
                    assert_relative_eq!(
                        tsdp_eval(&coeffs, &onehot, grade, s),
                        coeffs.curve_value(grade, industry, s),
                        max_relative = 1e-14
                    );
                }
            }
        }
    }

    #[test]
    fn coefficient_layout_is_power_major_with_industry_innermost() {
        // I = 2, J = 2, q = 2; values laid out grade, power, industry.
        let values = vec![11.0, 12.0, 21.0, 22.0, 111.0, 112.0, 121.0, 122.0];
        let coeffs = TsdpCoefficients::new(2, 2, 2, values).unwrap();
        assert_eq!(coeffs.coefficient(1, 1, 2), 12.0);
        assert_eq!(coeffs.coefficient(1, 2, 1), 21.0);
        assert_eq!(coeffs.coefficient(2, 1, 1), 111.0);
        assert_eq!(coeffs.coefficient(2, 2, 2), 122.0);
        assert_eq!(coeffs.grade_block(2), &[111.0, 112.0, 121.0, 122.0]);
    }

    #[test]
    fn expected_cashflow_zero_coefficients_is_identity() {
        let coeffs = TsdpCoefficients::zeros(1, 1, 2).unwrap();
        let recovery = RecoveryRates::new(vec![0.4]).unwrap();
        let bond = cb("c", 95.0, 4.0, 3.0, 1, vec![1.0]);
        let flows = expected_cashflow(&bond, &coeffs, &recovery).unwrap();
        assert_eq!(flows.as_slice(), bond.schedule.amounts());
    }

    #[test]
    fn expected_cashflow_two_flow_hand_expansion() {
        // Flows (5, 105) at (1, 2); p(s) = 0.01 s; gamma = 0.4:
        //   Cbar_1 = 5(1 - 0.01) + 40(0.01 - 0)    = 4.95 + 0.4 = 5.35
        //   Cbar_2 = 105(1 - 0.02) + 40(0.02-0.01) = 102.9 + 0.4 = 103.3
        let coeffs = TsdpCoefficients::new(1, 1, 1, vec![0.01]).unwrap();
        let recovery = RecoveryRates::new(vec![0.4]).unwrap();
        let bond = CorporateBond::new(
            "c",
            95.0,
            5.0,
            2.0,
            1,
            1,
            BusinessPortfolio::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(bond.schedule.times(), &[1.0, 2.0]);
        let flows = expected_cashflow(&bond, &coeffs, &recovery).unwrap();
        assert_relative_eq!(flows[0], 5.35, max_relative = 1e-14);
        assert_relative_eq!(flows[1], 103.3, max_relative = 1e-14);
    }

    #[test]
    fn expected_cashflow_zero_recovery_drops_second_term() {
        let coeffs = TsdpCoefficients::new(1, 1, 1, vec![0.015]).unwrap();
        let recovery = RecoveryRates::new(vec![0.0]).unwrap();
        let bond = cb("c", 95.0, 6.0, 2.0, 1, vec![1.0]);
        let flows = expected_cashflow(&bond, &coeffs, &recovery).unwrap();
        for ((&t, &c), &f) in bond.schedule.times().iter().zip(bond.schedule.amounts()).zip(&flows)
        {
            assert_relative_eq!(f, c * (1.0 - 0.015 * t), max_relative = 1e-14);
        }
    }

    #[test]
    fn regression_pieces_single_flow_closed_form() {
        // J = 1, q = 1, single-flow bond: u = -C Dbar(s) s, v = 100 Dbar(s) s.
        let gb = test_gb();
        let schedule = CashFlowSchedule::new(vec![2.0], vec![100.0]).unwrap();
        let attrs = BondAttributes { coupon_rate: 0.0, maturity: 2.0 };
        let bond = CorporateBond::with_schedule(
            "c",
            90.0,
            attrs,
            schedule,
            1,
            BusinessPortfolio::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        let parts = build_cb_regression(&bond, &gb, 1).unwrap();
        let d = gb.mean_discount(&bond.attributes, 2.0);
        assert_eq!(parts.u.len(), 1);
        assert_relative_eq!(parts.u[0], -100.0 * d * 2.0, max_relative = 1e-14);
        assert_relative_eq!(parts.v[0], 100.0 * d * 2.0, max_relative = 1e-14);
        assert_relative_eq!(parts.response, 90.0 - 100.0 * d, max_relative = 1e-14);
    }

    #[test]
    fn regression_pieces_have_jq_dimension() {
        let gb = test_gb();
        let bond = cb("c", 95.0, 4.0, 6.0, 1, vec![0.25, 0.75]);
        for q in 1..=4 {
            let parts = build_cb_regression(&bond, &gb, q).unwrap();
            assert_eq!(parts.u.len(), 2 * q);
            assert_eq!(parts.v.len(), 2 * q);
        }
    }

    #[test]
    fn exact_price_gives_zero_response() {
        let gb = test_gb();
        let schedule = build_schedule(4.0, 3.0, 2).unwrap();
        let attrs = BondAttributes { coupon_rate: 4.0, maturity: 3.0 };
        let price = gb.theoretical_price(&schedule, &attrs);
        let bond = CorporateBond::with_schedule(
            "c",
            price,
            attrs,
            schedule,
            1,
            BusinessPortfolio::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        let parts = build_cb_regression(&bond, &gb, 2).unwrap();
        assert!(parts.response.abs() < 1e-12);
    }

    #[test]
    fn regression_identity_holds_for_random_inputs() {
        // sum_j Cbar(s_j) Dbar(s_j) - P_hat = [u + gamma v]' beta for any
        // (beta, gamma).
        let gb = test_gb();
        let mut rng = StdRng::seed_from_u64(42);
        for trial in 0..50 {
            let industries = rng.random_range(1..=3);
            let order = rng.random_range(1..=3);
            let maturity = rng.random_range(1.0..9.0);
            let coupon = rng.random_range(0.0..7.0);
            let mut weights: Vec<f64> = (0..industries).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let bond = cb(&format!("c{trial}"), 95.0, coupon, maturity, 1, weights.clone());
            let gamma = rng.random_range(0.0..1.0);
            let beta: Vec<f64> =
                (0..industries * order).map(|_| rng.random_range(-0.01..0.02)).collect();
            let coeffs = TsdpCoefficients::new(1, industries, order, beta.clone()).unwrap();
            let recovery = RecoveryRates::new(vec![gamma]).unwrap();

            let parts = build_cb_regression(&bond, &gb, order).unwrap();
            let beta_v = DVector::from_vec(beta);
            let linear = (&parts.u + &parts.v * gamma).dot(&beta_v);

            let flows = expected_cashflow(&bond, &coeffs, &recovery).unwrap();
            let priced: f64 = bond
                .schedule
                .times()
                .iter()
                .zip(&flows)
                .map(|(&t, &f)| f * gb.mean_discount(&bond.attributes, t))
                .sum();
            let p_hat = gb.theoretical_price(&bond.schedule, &bond.attributes);
            let direct = priced - p_hat;
            assert_relative_eq!(direct, linear, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn credit_discount_is_nonpositive_on_noise_free_data() {
        let gb = test_gb();
        let coeffs = TsdpCoefficients::new(1, 2, 2, vec![0.004, 0.006, 0.0004, 0.0002]).unwrap();
        let recovery = RecoveryRates::new(vec![0.35]).unwrap();
        for (i, maturity) in [1.0, 3.0, 5.5, 8.0].iter().enumerate() {
            let bond = priced_cb(
                &format!("c{i}"),
                3.0,
                *maturity,
                1,
                vec![0.6, 0.4],
                &gb,
                &coeffs,
                &recovery,
            );
            let parts = build_cb_regression(&bond, &gb, 2).unwrap();
            assert!(parts.response <= 1e-12, "y = {} at maturity {maturity}", parts.response);
        }
    }

    #[test]
    fn covariance_at_zero_beta_matches_gb_formula() {
        let coeffs = TsdpCoefficients::zeros(1, 1, 2).unwrap();
        let recovery = RecoveryRates::new(vec![0.5]).unwrap();
        let bonds: Vec<CorporateBond> = (0..4)
            .map(|i| cb(&format!("c{i}"), 95.0, 2.0 + i as f64, 1.5 + 2.0 * i as f64, 1, vec![1.0]))
            .collect();
        let params = CbCovarianceParams {
            sigma2: 1.3,
            theta: 0.4,
            rho: vec![vec![0.6]],
            xi: vec![vec![0.3]],
        };
        let cov = cb_covariance(&bonds, &coeffs, &recovery, &params).unwrap();

        let gov: Vec<crate::instruments::GovernmentBond> = bonds
            .iter()
            .map(|b| {
                crate::instruments::GovernmentBond::with_schedule(
                    b.id.clone(),
                    b.price,
                    b.attributes.clone(),
                    b.schedule.clone(),
                )
                .unwrap()
            })
            .collect();
        let gb_cov = crate::gb::gb_covariance(
            &gov,
            &GbCovarianceParams { sigma2: 1.3, theta: 0.4, rho: 0.6, xi: 0.3 },
        )
        .unwrap();
        assert_relative_eq!(cov, gb_cov, max_relative = 1e-12);
    }

    #[test]
    fn zero_rho_collapses_to_diagonal() {
        let coeffs = TsdpCoefficients::zeros(2, 1, 1).unwrap();
        let recovery = RecoveryRates::new(vec![0.3, 0.3]).unwrap();
        let bonds = [
            cb("a", 95.0, 3.0, 2.0, 1, vec![1.0]),
            cb("b", 94.0, 3.0, 4.0, 1, vec![1.0]),
            cb("c", 92.0, 3.0, 3.0, 2, vec![1.0]),
        ];
        let params = CbCovarianceParams {
            sigma2: 1.0,
            theta: 0.5,
            rho: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            xi: vec![vec![0.2, 0.2], vec![0.2, 0.2]],
        };
        let cov = cb_covariance(&bonds, &coeffs, &recovery, &params).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                if k != l {
                    assert_eq!(cov[(k, l)], 0.0);
                } else {
                    assert!(cov[(k, k)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn covariance_two_single_flow_bonds_by_hand() {
        // Same grade, single flows Cbar at (2, 5): with beta = 0 the flows
        // are the promised 100s, so
        //   phi_12 = 100 * 100 * exp(-theta * 3)
        //   lambda_12 = rho * exp(-xi * 3).
        let coeffs = TsdpCoefficients::zeros(1, 1, 1).unwrap();
        let recovery = RecoveryRates::new(vec![0.2]).unwrap();
        let mk = |id: &str, t: f64| {
            CorporateBond::with_schedule(
                id,
                85.0,
                BondAttributes { coupon_rate: 0.0, maturity: t },
                CashFlowSchedule::new(vec![t], vec![100.0]).unwrap(),
                1,
                BusinessPortfolio::new(vec![1.0]).unwrap(),
            )
            .unwrap()
        };
        let bonds = [mk("a", 2.0), mk("b", 5.0)];
        let params = CbCovarianceParams {
            sigma2: 2.0,
            theta: 0.3,
            rho: vec![vec![0.7]],
            xi: vec![vec![0.1]],
        };
        let cov = cb_covariance(&bonds, &coeffs, &recovery, &params).unwrap();
        let expected = 2.0 * 0.7 * (-0.1f64 * 3.0).exp() * 10_000.0 * (-0.3f64 * 3.0).exp();
        assert_relative_eq!(cov[(0, 1)], expected, max_relative = 1e-14);
        assert_relative_eq!(cov[(0, 0)], 20_000.0, max_relative = 1e-14);
    }

    #[test]
    fn covariance_symmetric_and_pd_where_cross_correlation_is_consistent() {
        let coeffs =
            TsdpCoefficients::new(2, 1, 1, vec![0.003, 0.008]).unwrap();
        let recovery = RecoveryRates::new(vec![0.3, 0.4]).unwrap();
        let bonds: Vec<CorporateBond> = (0..6)
            .map(|i| {
                cb(
                    &format!("c{i}"),
                    92.0,
                    2.0 + (i % 3) as f64,
                    1.0 + 1.7 * i as f64,
                    1 + i % 2,
                    vec![1.0],
                )
            })
            .collect();
        let nodes = [0.0, 0.3, 0.6, 0.9];
        for &theta in &nodes {
            for &r11 in &nodes {
                for &r22 in &nodes {
                    for &r12 in &nodes {
                        for &x in &nodes {
                            let params = CbCovarianceParams {
                                sigma2: 1.0,
                                theta,
                                rho: vec![vec![r11, r12], vec![r12, r22]],
                                xi: vec![vec![x, x], vec![x, x]],
                            };
                            let cov =
                                cb_covariance(&bonds, &coeffs, &recovery, &params).unwrap();
                            assert_relative_eq!(cov.clone(), cov.transpose(), max_relative = 1e-13);
                            // A cross-correlation exceeding the within-grade
                            // levels can push the matrix indefinite; the
                            // estimator records such grid points as
                            // infeasible.  Positive definiteness is asserted
                            // on the consistent region only.
                            if r12 * r12 <= r11 * r22 {
                                assert!(
                                    nalgebra::Cholesky::new(cov).is_some(),
                                    "not PD at theta={theta} rho=({r11},{r22},{r12}) xi={x}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grade_fit_recovers_truth_on_noise_free_grid_node() {
        let gb = test_gb();
        // J = 1, q = 1: truth alpha = 0.01, gamma = 0.4 (a grid node).
        let truth = TsdpCoefficients::new(1, 1, 1, vec![0.01]).unwrap();
        let recovery = RecoveryRates::new(vec![0.4]).unwrap();
        let bonds: Vec<CorporateBond> = (0..8)
            .map(|i| {
                priced_cb(
                    &format!("c{i}"),
                    1.0 + 0.6 * i as f64,
                    1.0 + i as f64,
                    1,
                    vec![1.0],
                    &gb,
                    &truth,
                    &recovery,
                )
            })
            .collect();
        let grid = grade_grid(&[0.2, 0.4, 0.6], &[0.0, 0.3], &[0.0, 0.5], &[0.0, 0.5]);
        let est = fit_cb_grade(&bonds, &gb, 1, &grid, 5, 1e-6).unwrap();
        assert_eq!(est.gamma, 0.4);
        assert_relative_eq!(est.beta[0], 0.01, max_relative = 1e-7);
        assert!(est.residuals.iter().all(|r| r.abs() < 1e-8));
        assert!(est.residual_std < 1e-8);
    }

    #[test]
    fn grade_fit_rejects_under_identified_panel() {
        let gb = test_gb();
        let bonds: Vec<CorporateBond> = (0..3)
            .map(|i| cb(&format!("c{i}"), 95.0, 3.0, 2.0 + i as f64, 1, vec![1.0, 0.0]))
            .collect();
        // J = 2, q = 1 needs K >= 4; only 3 bonds.
        let grid = grade_grid(&[0.4], &[0.0], &[0.0], &[0.0]);
        match fit_cb_grade(&bonds, &gb, 1, &grid, 5, 1e-6) {
            Err(Error::UnderIdentified(msg)) => {
                assert!(msg.contains('3') && msg.contains('4'), "message {msg}");
            }
            other => panic!("expected under-identified error, got {other:?}"),
        }
    }

    #[test]
    fn grade_fit_single_point_equals_whitened_ols() {
        // gamma pinned to 0 kills the covariance's beta feedback after the
        // first refresh only through Cbar = C(1 - p); with theta = rho = 0
        // the covariance is diagonal with entries (sum Cbar)^2... it still
        // depends on beta, so compare against running the same iteration by
        // hand.
        let gb = test_gb();
        let truth = TsdpCoefficients::new(1, 1, 1, vec![0.008]).unwrap();
        let recovery = RecoveryRates::new(vec![0.0]).unwrap();
        let bonds: Vec<CorporateBond> = (0..5)
            .map(|i| {
                priced_cb(
                    &format!("c{i}"),
                    2.0,
                    1.0 + 1.5 * i as f64,
                    1,
                    vec![1.0],
                    &gb,
                    &truth,
                    &recovery,
                )
            })
            .collect();
        let grid = grade_grid(&[0.0], &[0.0], &[0.0], &[0.0]);
        let est = fit_cb_grade(&bonds, &gb, 1, &grid, 1, 1e-6).unwrap();

        // One iteration at beta = 0: Cbar = C, so the covariance is the
        // diagonal of squared kernel sums; replicate with a direct GLS call.
        let panel = GradePanel::build(&bonds, &gb, 1).unwrap();
        let kernels = PairKernels::build(&panel.schedules, 0.0);
        let phi = phi_from_kernels(&kernels, &panel.raw_flows);
        let cov = apply_lambda(
            &phi,
            &panel.maturities,
            &vec![0; 5],
            &[vec![0.0]],
            &[vec![0.0]],
            1.0,
        );
        let sol = gls::glse(&GlsProblem {
            design: panel.u.clone(),
            response: panel.response.clone(),
            covariance: cov,
        })
        .unwrap();
        assert_relative_eq!(est.beta[0], sol.coefficients[0], max_relative = 1e-12);
    }

    #[test]
    fn full_fit_single_grade_degenerates_to_grade_result() {
        let gb = test_gb();
        let truth = TsdpCoefficients::new(1, 1, 1, vec![0.012]).unwrap();
        let recovery = RecoveryRates::new(vec![0.3]).unwrap();
        let bonds: Vec<CorporateBond> = (0..6)
            .map(|i| {
                priced_cb(
                    &format!("c{i}"),
                    2.5,
                    1.0 + 1.2 * i as f64,
                    1,
                    vec![1.0],
                    &gb,
                    &truth,
                    &recovery,
                )
            })
            .collect();
        let grid = grade_grid(&[0.3, 0.5], &[0.0, 0.3], &[0.0], &[0.0]);
        let est = fit_cb_grade(&bonds, &gb, 1, &grid, 5, 1e-6).unwrap();
        let fit = fit_cb_full(&bonds, &[est.clone()], &gb, &cross_grid(&[0.0], &[0.0])).unwrap();
        assert_eq!(fit.tsdp.grade_block(1), est.beta.as_slice());
        assert_eq!(fit.recovery.gamma(1), est.gamma);
        assert_eq!(fit.covariance.rho, vec![vec![est.rho]]);
        assert_eq!(fit.residuals[0], est.residuals);
        assert_eq!(fit.diagnostics.objective, est.objective);
    }

    #[test]
    fn full_design_is_block_diagonal() {
        // Two grades, noise-free; the fitted coefficients must split by
        // grade exactly, which only happens with a block-diagonal design.
        let gb = test_gb();
        let truth =
            TsdpCoefficients::new(2, 1, 1, vec![0.004, 0.011]).unwrap();
        let recovery = RecoveryRates::new(vec![0.3, 0.5]).unwrap();
        let mut bonds = Vec::new();
        for i in 0..6 {
            bonds.push(priced_cb(
                &format!("a{i}"),
                2.0 + 0.5 * i as f64,
                1.0 + 1.3 * i as f64,
                1,
                vec![1.0],
                &gb,
                &truth,
                &recovery,
            ));
            bonds.push(priced_cb(
                &format!("b{i}"),
                1.5 + 0.4 * i as f64,
                1.5 + 1.3 * i as f64,
                2,
                vec![1.0],
                &gb,
                &truth,
                &recovery,
            ));
        }
        let grid = grade_grid(&[0.3, 0.5], &[0.0, 0.2], &[0.0], &[0.0, 0.4]);
        let fit = fit_credit(&bonds, &gb, 1, &grid, &cross_grid(&[0.0, 0.4], &[0.0, 0.3]))
            .unwrap();
        assert_eq!(fit.recovery.gamma(1), 0.3);
        assert_eq!(fit.recovery.gamma(2), 0.5);
        assert_relative_eq!(fit.tsdp.coefficient(1, 1, 1), 0.004, max_relative = 1e-6);
        assert_relative_eq!(fit.tsdp.coefficient(2, 1, 1), 0.011, max_relative = 1e-6);
        // On noise-free data the cross-correlation is unidentified; it must
        // still land on a grid node and stay symmetric.
        assert!([0.0, 0.4].contains(&fit.covariance.rho[0][1]));
        assert_eq!(fit.covariance.rho[0][1], fit.covariance.rho[1][0]);
        assert_eq!(fit.residuals[0].len(), 6);
        assert_eq!(fit.residuals[1].len(), 6);
        for grade_res in &fit.residuals {
            for r in grade_res {
                assert!(r.abs() < 1e-7, "residual {r}");
            }
        }
    }

    #[test]
    fn select_order_single_candidate_equals_direct_fit() {
        let gb = test_gb();
        let truth = TsdpCoefficients::new(1, 1, 3, vec![0.008, -0.0004, 0.00001]).unwrap();
        let recovery = RecoveryRates::new(vec![0.3]).unwrap();
        let bonds: Vec<CorporateBond> = (0..10)
            .map(|i| {
                priced_cb(
                    &format!("c{i}"),
                    2.0 + 0.3 * ((i * i) % 4) as f64,
                    0.8 + 0.9 * i as f64,
                    1,
                    vec![1.0],
                    &gb,
                    &truth,
                    &recovery,
                )
            })
            .collect();
        let grid = grade_grid(&[0.3], &[0.0], &[0.0], &[0.2]);
        let cross = cross_grid(&[0.0], &[0.0]);
        let direct = fit_credit(&bonds, &gb, 3, &grid, &cross).unwrap();
        let selected = select_order(&bonds, &gb, 3..=3, &grid, &cross).unwrap();
        assert_eq!(selected.tsdp, direct.tsdp);
        assert_eq!(selected.diagnostics.selection.len(), 1);
        assert_eq!(selected.diagnostics.selection[0].order, 3);
    }

    #[test]
    fn select_order_trace_covers_feasible_range_and_caps_q() {
        let gb = test_gb();
        let truth = TsdpCoefficients::new(1, 1, 2, vec![0.006, 0.0003]).unwrap();
        let recovery = RecoveryRates::new(vec![0.3]).unwrap();
        // K = 9, J = 1: feasible q needs 2q <= 9, so q <= 4.
        let bonds: Vec<CorporateBond> = (0..9)
            .map(|i| {
                priced_cb(
                    &format!("c{i}"),
                    2.0 + 0.4 * ((i * i) % 5) as f64,
                    0.7 + 1.1 * i as f64,
                    1,
                    vec![1.0],
                    &gb,
                    &truth,
                    &recovery,
                )
            })
            .collect();
        let grid = grade_grid(&[0.3], &[0.0], &[0.0], &[0.2]);
        let cross = cross_grid(&[0.0], &[0.0]);
        let fit = select_order(&bonds, &gb, 2..=6, &grid, &cross).unwrap();
        let traced: Vec<usize> = fit.diagnostics.selection.iter().map(|c| c.order).collect();
        assert_eq!(traced, vec![2, 3, 4]);
    }

    #[test]
    fn select_order_rejects_when_nothing_is_feasible() {
        let gb = test_gb();
        let bonds: Vec<CorporateBond> = (0..3)
            .map(|i| cb(&format!("c{i}"), 95.0, 3.0, 2.0 + i as f64, 1, vec![1.0]))
            .collect();
        let grid = grade_grid(&[0.3], &[0.0], &[0.0], &[0.2]);
        let cross = cross_grid(&[0.0], &[0.0]);
        match select_order(&bonds, &gb, 2..=6, &grid, &cross) {
            Err(Error::UnderIdentified(_)) => {}
            other => panic!("expected under-identified, got {other:?}"),
        }
    }

    #[test]
    fn curve_diagnostics_flag_misbehaving_polynomials() {
        // Grade 1: gently increasing, stays in [0, 1].
        // Grade 2: strongly negative slope — decreasing and below 0.
        let tsdp =
            TsdpCoefficients::new(2, 1, 1, vec![0.01, -0.05]).unwrap();
        let flags = curve_diagnostics(&tsdp, &[(1.0, 8.0), (1.0, 8.0)]);
        assert_eq!(flags.len(), 2);
        assert!(!flags[0].exits_unit_interval && !flags[0].decreasing);
        assert!(flags[1].exits_unit_interval && flags[1].decreasing);
    }
}
