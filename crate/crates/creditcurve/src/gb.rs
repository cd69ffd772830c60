//! Government-bond discount curve estimation.
//!
//! A bond's price is modelled as the sum of its cash flows valued by a
//! bond-specific discount function `D_g = Dbar_g + Delta_g`, where the mean
//! part is a polynomial in time-to-payment whose coefficients load on the
//! bond attributes (constant, coupon, maturity):
//!
//! `Dbar(s) = 1 + sum_m (d_m1 + d_m2 * coupon + d_m3 * maturity) * s^m`.
//!
//! Subtracting the undiscounted cash total from the price leaves a linear
//! regression for the polynomial coefficients; the residuals carry a
//! structured cross-sectional covariance driven by cash-flow proximity and
//! maturity distance.  Covariance parameters are chosen by deterministic
//! grid search and the coefficients by generalised least squares.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::{self, GlsProblem, GlsSolution, GridSpec, ObjectiveMode};
use crate::instruments::{BondAttributes, CashFlowSchedule, GovernmentBond};

/// Which attribute regressors enter the discount polynomial.
///
/// The full set uses (constant, coupon, maturity); the constant-only set
/// yields the attribute-free curve used for swap discounting.  Inactive
/// attributes keep zero loadings in [`DiscountCoefficients`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub constant: bool,
    pub coupon: bool,
    pub maturity: bool,
}

impl AttributeSet {
    pub fn full() -> Self {
        Self { constant: true, coupon: true, maturity: true }
    }

    pub fn constant_only() -> Self {
        Self { constant: true, coupon: false, maturity: false }
    }

    /// Attribute activity flags in (constant, coupon, maturity) order.
    pub fn mask(&self) -> [bool; 3] {
        [self.constant, self.coupon, self.maturity]
    }

    /// Number of active attributes.
    pub fn active_count(&self) -> usize {
        self.mask().iter().filter(|&&b| b).count()
    }

    fn validate(&self) -> Result<()> {
        if self.active_count() == 0 {
            return Err(Error::InvalidInput(
                "attribute set must keep at least one regressor active".into(),
            ));
        }
        Ok(())
    }
}

/// Coefficients of the mean discount polynomial.
///
/// Stored order-major: for each power `m = 1..=p` the three attribute
/// loadings (constant, coupon, maturity).  This matches the coefficient
/// ordering of the regression design built by [`build_gb_regression`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountCoefficients {
    order: usize,
    values: Vec<f64>,
}

impl DiscountCoefficients {
    pub fn new(order: usize, values: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidInput("polynomial order must be at least 1".into()));
        }
        if values.len() != 3 * order {
            return Err(Error::InvalidInput(format!(
                "expected {} coefficient values for order {order}, got {}",
                3 * order,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("coefficients must be finite".into()));
        }
        Ok(Self { order, values })
    }

    /// Expand a coefficient vector over the active attributes (order-major)
    /// into the dense layout with zeros at inactive loadings.
    fn from_active(order: usize, attributes: &AttributeSet, active: &[f64]) -> Result<Self> {
        let mask = attributes.mask();
        let mut values = vec![0.0; 3 * order];
        let mut next = 0;
        for m in 0..order {
            for (a, &on) in mask.iter().enumerate() {
                if on {
                    values[3 * m + a] = active[next];
                    next += 1;
                }
            }
        }
        debug_assert_eq!(next, active.len());
        Self::new(order, values)
    }

    /// Polynomial order `p`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Dense loadings, order-major with (constant, coupon, maturity) per power.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Loading of attribute `attribute` (0 = constant, 1 = coupon,
    /// 2 = maturity) at power `power` (1-based).
    pub fn loading(&self, power: usize, attribute: usize) -> f64 {
        assert!(power >= 1 && power <= self.order, "power {power} outside 1..={}", self.order);
        assert!(attribute < 3, "attribute index {attribute} outside 0..3");
        self.values[3 * (power - 1) + attribute]
    }

    /// Mean discount factor at time-to-payment `s` for a bond with the given
    /// attributes.
    pub fn mean_discount(&self, attributes: &BondAttributes, s: f64) -> f64 {
        let z = attributes.regressors();
        let mut total = 1.0;
        let mut s_pow = 1.0;
        for m in 0..self.order {
            s_pow *= s;
            let loading = self.values[3 * m] * z[0]
                + self.values[3 * m + 1] * z[1]
                + self.values[3 * m + 2] * z[2];
            total += loading * s_pow;
        }
        total
    }
}

/// Covariance parameters of the price residuals.
///
/// `Cov(eta_g, eta_h) = sigma2 * lambda_gh * phi_gh` with
/// `lambda_gg = 1`, `lambda_gh = rho * exp(-xi |s_gM - s_hM|)` for `g != h`,
/// and `phi_gh` the double sum of cash-flow products weighted by
/// `exp(-theta |s_gj - s_hm|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbCovarianceParams {
    pub sigma2: f64,
    pub theta: f64,
    pub rho: f64,
    pub xi: f64,
}

impl GbCovarianceParams {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma2.is_finite() || self.sigma2 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "sigma2 {} must be strictly positive",
                self.sigma2
            )));
        }
        for (name, v) in [("theta", self.theta), ("rho", self.rho), ("xi", self.xi)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The cash-flow proximity part of the covariance:
/// `phi_gh = sum_j sum_m C_g(s_gj) C_h(s_hm) exp(-theta |s_gj - s_hm|)`.
fn phi_entry(a: &CashFlowSchedule, b: &CashFlowSchedule, theta: f64) -> f64 {
    let mut total = 0.0;
    for (&t_a, &c_a) in a.times().iter().zip(a.amounts()) {
        for (&t_b, &c_b) in b.times().iter().zip(b.amounts()) {
            total += c_a * c_b * (-theta * (t_a - t_b).abs()).exp();
        }
    }
    total
}

fn phi_matrix(schedules: &[&CashFlowSchedule], theta: f64) -> DMatrix<f64> {
    let n = schedules.len();
    let mut phi = DMatrix::zeros(n, n);
    for g in 0..n {
        for h in g..n {
            let value = phi_entry(schedules[g], schedules[h], theta);
            phi[(g, h)] = value;
            phi[(h, g)] = value;
        }
    }
    phi
}

/// Assemble the full covariance from a precomputed `phi` matrix at unit
/// `sigma2`.
fn assemble_covariance(
    phi: &DMatrix<f64>,
    maturities: &[f64],
    rho: f64,
    xi: f64,
    sigma2: f64,
) -> DMatrix<f64> {
    let n = maturities.len();
    let mut cov = DMatrix::zeros(n, n);
    for g in 0..n {
        cov[(g, g)] = sigma2 * phi[(g, g)];
        for h in (g + 1)..n {
            let lambda = rho * (-xi * (maturities[g] - maturities[h]).abs()).exp();
            let value = sigma2 * lambda * phi[(g, h)];
            cov[(g, h)] = value;
            cov[(h, g)] = value;
        }
    }
    cov
}

/// Residual covariance matrix for a cross-section of government bonds.
pub fn gb_covariance(bonds: &[GovernmentBond], params: &GbCovarianceParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    if bonds.is_empty() {
        return Err(Error::InvalidInput("no bonds supplied".into()));
    }
    let schedules: Vec<&CashFlowSchedule> = bonds.iter().map(|b| &b.schedule).collect();
    let maturities: Vec<f64> = schedules.iter().map(|s| s.maturity()).collect();
    let phi = phi_matrix(&schedules, params.theta);
    Ok(assemble_covariance(&phi, &maturities, params.rho, params.xi, params.sigma2))
}

/// Build the price regression `y_g = x_g' beta + eta_g`.
///
/// The response is the price minus the undiscounted cash total, and each row
/// stacks, order-major, the active attribute loadings times the cash-flow
/// moment `sum_j C_g(s_gj) s_gj^m`.
pub fn build_gb_regression(
    bonds: &[GovernmentBond],
    order: usize,
    attributes: &AttributeSet,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    attributes.validate()?;
    if order == 0 {
        return Err(Error::InvalidInput("polynomial order must be at least 1".into()));
    }
    if bonds.is_empty() {
        return Err(Error::InvalidInput("no bonds supplied".into()));
    }
    let columns = attributes.active_count() * order;
    let mask = attributes.mask();
    let mut design = DMatrix::zeros(bonds.len(), columns);
    let mut response = DVector::zeros(bonds.len());
    for (g, bond) in bonds.iter().enumerate() {
        response[g] = bond.price - bond.schedule.total_cash();
        let z = bond.attributes.regressors();
        let mut col = 0;
        let mut moment_pow: Vec<f64> = bond.schedule.times().to_vec();
        for _m in 1..=order {
            let moment: f64 = bond
                .schedule
                .amounts()
                .iter()
                .zip(&moment_pow)
                .map(|(c, sp)| c * sp)
                .sum();
            for (a, &on) in mask.iter().enumerate() {
                if on {
                    design[(g, col)] = z[a] * moment;
                    col += 1;
                }
            }
            for (sp, &t) in moment_pow.iter_mut().zip(bond.schedule.times()) {
                *sp *= t;
            }
        }
    }
    Ok((design, response))
}

/// Fit diagnostics reported alongside the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbDiagnostics {
    /// Grid objective at the selected covariance parameters.
    pub objective: f64,
    pub objective_mode: ObjectiveMode,
    /// Residual standard deviation, `sqrt(sum r^2 / (N - P))`.
    pub residual_std: f64,
    /// Coefficient standard errors, dense layout aligned with
    /// [`DiscountCoefficients::values`] (zero at inactive loadings).
    pub coef_std_errors: Vec<f64>,
    /// Number of objective evaluations performed by the grid search.
    pub grid_evaluations: usize,
}

/// A fitted government-bond discount model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbCurveModel {
    pub coefficients: DiscountCoefficients,
    pub attributes: AttributeSet,
    /// Selected covariance parameters with the estimated residual scale.
    pub covariance: GbCovarianceParams,
    /// Per-bond residuals `P_g - fitted price`, in input order.
    pub residuals: Vec<f64>,
    /// Smallest and largest final payment time among the fitted bonds;
    /// evaluation outside this span extrapolates the polynomial.
    pub maturity_span: (f64, f64),
    pub diagnostics: GbDiagnostics,
}

impl GbCurveModel {
    /// Mean discount factor for a bond with the given attributes.
    pub fn mean_discount(&self, attributes: &BondAttributes, s: f64) -> f64 {
        self.coefficients.mean_discount(attributes, s)
    }

    /// Theoretical price: cash flows valued by the mean discount function
    /// with the supplied attributes inserted.
    pub fn theoretical_price(&self, schedule: &CashFlowSchedule, attributes: &BondAttributes) -> f64 {
        schedule
            .times()
            .iter()
            .zip(schedule.amounts())
            .map(|(&t, &c)| c * self.mean_discount(attributes, t))
            .sum()
    }

    /// Continuously compounded zero yield `-ln Dbar(s) / s`.
    pub fn zero_yield(&self, attributes: &BondAttributes, s: f64) -> Result<f64> {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "zero yield needs a strictly positive tenor, got {s}"
            )));
        }
        let d = self.mean_discount(attributes, s);
        if d <= 0.0 {
            return Err(Error::Domain(format!(
                "mean discount {d} at tenor {s} is not positive"
            )));
        }
        Ok(-d.ln() / s)
    }
}

/// Shared grid-search core for the attribute-dependent and attribute-free
/// fits.
fn fit_gb_impl(
    bonds: &[GovernmentBond],
    order: usize,
    grid: &GridSpec,
    attributes: AttributeSet,
    mode: ObjectiveMode,
) -> Result<GbCurveModel> {
    if grid.axes().len() != 3 {
        return Err(Error::InvalidInput(format!(
            "discount-curve grid needs the three axes (theta, rho, xi), got {}",
            grid.axes().len()
        )));
    }
    let (design, response) = build_gb_regression(bonds, order, &attributes)?;
    if bonds.len() < design.ncols() {
        return Err(Error::UnderIdentified(format!(
            "{} bonds cannot identify {} discount coefficients",
            bonds.len(),
            design.ncols()
        )));
    }
    let schedules: Vec<&CashFlowSchedule> = bonds.iter().map(|b| &b.schedule).collect();
    let maturities: Vec<f64> = schedules.iter().map(|s| s.maturity()).collect();
    let n = bonds.len();

    // phi depends on theta only, and the grid revisits each theta for every
    // (rho, xi) pair; cache it keyed by the exact bit pattern.
    let phi_cache: Mutex<HashMap<u64, Arc<DMatrix<f64>>>> = Mutex::new(HashMap::new());
    let phi_for = |theta: f64| -> Arc<DMatrix<f64>> {
        let key = theta.to_bits();
        if let Some(hit) = phi_cache.lock().expect("phi cache").get(&key) {
            return hit.clone();
        }
        let computed = Arc::new(phi_matrix(&schedules, theta));
        phi_cache
            .lock()
            .expect("phi cache")
            .entry(key)
            .or_insert(computed)
            .clone()
    };

    let solve_at = |point: &[f64]| -> Result<GlsSolution> {
        let (theta, rho, xi) = (point[0], point[1], point[2]);
        let covariance = assemble_covariance(&phi_for(theta), &maturities, rho, xi, 1.0);
        gls::glse(&GlsProblem {
            design: design.clone(),
            response: response.clone(),
            covariance,
        })
    };

    let search = gls::grid_minimize(
        |point| match solve_at(point) {
            Ok(sol) => mode.value(n, sol.objective, sol.log_det_covariance),
            Err(_) => f64::INFINITY,
        },
        grid,
    )?;

    let best = solve_at(&search.best_point)?;
    let active: Vec<f64> = best.coefficients.iter().copied().collect();
    let coefficients = DiscountCoefficients::from_active(order, &attributes, &active)?;
    let columns = active.len();
    let dof = (n - columns).max(1) as f64;
    let residual_std = (best.residuals.norm_squared() / dof).sqrt();
    let coef_std_errors = {
        let active_errors = best.standard_errors();
        DiscountCoefficients::from_active(order, &attributes, &active_errors)?
            .values()
            .to_vec()
    };

    Ok(GbCurveModel {
        coefficients,
        attributes,
        covariance: GbCovarianceParams {
            sigma2: best.sigma2,
            theta: search.best_point[0],
            rho: search.best_point[1],
            xi: search.best_point[2],
        },
        residuals: best.residuals.iter().copied().collect(),
        maturity_span: (
            maturities.iter().copied().fold(f64::INFINITY, f64::min),
            maturities.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
        diagnostics: GbDiagnostics {
            objective: search.best_value,
            objective_mode: mode,
            residual_std,
            coef_std_errors,
            grid_evaluations: search.evaluations.len(),
        },
    })
}

/// Fit the attribute-dependent discount curve of order `order` with the
/// default likelihood objective.
///
/// The grid must supply the three axes (theta, rho, xi) in that order.
pub fn fit_gb(bonds: &[GovernmentBond], order: usize, grid: &GridSpec) -> Result<GbCurveModel> {
    fit_gb_impl(bonds, order, grid, AttributeSet::full(), ObjectiveMode::default())
}

/// Fit with an explicit attribute set and grid objective.
pub fn fit_gb_with(
    bonds: &[GovernmentBond],
    order: usize,
    grid: &GridSpec,
    attributes: AttributeSet,
    mode: ObjectiveMode,
) -> Result<GbCurveModel> {
    fit_gb_impl(bonds, order, grid, attributes, mode)
}

/// Fit the attribute-free curve (constant loadings only): the discount
/// function shared by all bonds, used to discount swap payoffs.
pub fn fit_attribute_free(
    bonds: &[GovernmentBond],
    order: usize,
    grid: &GridSpec,
) -> Result<GbCurveModel> {
    fit_gb_impl(bonds, order, grid, AttributeSet::constant_only(), ObjectiveMode::default())
}
