//! Credit default swap premium pricing on a daily grid.
//!
//! The protection buyer pays a fixed premium `x` (per 100 notional) at the
//! contract's premium dates while the reference issuer survives; on default
//! at day `m` the buyer receives the non-recovered principal.  Under the
//! implied default curve `Q` and the attribute-free discount grid the fair
//! premium solves `V = 0`:
//!
//! `x = (1 - gamma) sum_m D(m) Q(N = m) / sum_k Q(N > m_k) D(m_k)`.
//!
//! Three pricers are provided: the closed-form discrete formula above, a
//! quadrature variant whose protection leg integrates `D(s) p'(s)`, and a
//! Monte Carlo simulator over sampled default days that also supports
//! settlement lags on the default payments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cb::CreditFit;
use crate::error::{Error, Result};
use crate::gb::{AttributeSet, GbCurveModel};
use crate::instruments::{BondAttributes, BusinessPortfolio, DAYS_PER_YEAR};

/// Length of one grid day in years.
pub const DAY: f64 = 1.0 / DAYS_PER_YEAR;

/// A CDS contract on a daily grid: horizon, premium dates, the reference
/// issuer (grade and sales portfolio), and optional settlement lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdsContract {
    horizon_days: usize,
    premium_days: Vec<usize>,
    grade: usize,
    portfolio: BusinessPortfolio,
    pay_lag_days: usize,
    recovery_lag_days: usize,
}

impl CdsContract {
    pub fn new(
        horizon_days: usize,
        premium_days: Vec<usize>,
        grade: usize,
        portfolio: BusinessPortfolio,
    ) -> Result<Self> {
        if horizon_days == 0 {
            return Err(Error::InvalidInput("contract horizon must be at least one day".into()));
        }
        if grade == 0 {
            return Err(Error::InvalidInput("grade indices are 1-based".into()));
        }
        if premium_days.is_empty() {
            return Err(Error::InvalidInput("a CDS needs at least one premium date".into()));
        }
        for window in premium_days.windows(2) {
            if window[1] <= window[0] {
                return Err(Error::InvalidInput(format!(
                    "premium days must be strictly increasing, got {} then {}",
                    window[0], window[1]
                )));
            }
        }
        if premium_days[0] < 1 || *premium_days.last().expect("non-empty") > horizon_days {
            return Err(Error::InvalidInput(format!(
                "premium days must lie in [1, {horizon_days}]"
            )));
        }
        Ok(Self {
            horizon_days,
            premium_days,
            grade,
            portfolio,
            pay_lag_days: 0,
            recovery_lag_days: 0,
        })
    }

    /// Add settlement lags: the protection principal is paid `pay_lag_days`
    /// after default, the recovered fraction `recovery_lag_days` after.
    pub fn with_lags(mut self, pay_lag_days: usize, recovery_lag_days: usize) -> Self {
        self.pay_lag_days = pay_lag_days;
        self.recovery_lag_days = recovery_lag_days;
        self
    }

    /// Premium dates spaced every `365 / per_year` days out to the horizon.
    pub fn evenly_spaced_premium_days(horizon_days: usize, per_year: usize) -> Result<Vec<usize>> {
        if per_year == 0 {
            return Err(Error::InvalidInput("need at least one premium per year".into()));
        }
        let mut days = Vec::new();
        let mut k = 1usize;
        loop {
            let day = (DAYS_PER_YEAR * k as f64 / per_year as f64).round() as usize;
            if day > horizon_days {
                break;
            }
            if days.last() != Some(&day) {
                days.push(day);
            }
            k += 1;
        }
        if days.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no premium date fits a {horizon_days}-day horizon at {per_year} payments per year"
            )));
        }
        Ok(days)
    }

    pub fn horizon_days(&self) -> usize {
        self.horizon_days
    }

    pub fn premium_days(&self) -> &[usize] {
        &self.premium_days
    }

    pub fn grade(&self) -> usize {
        self.grade
    }

    pub fn portfolio(&self) -> &BusinessPortfolio {
        &self.portfolio
    }

    pub fn pay_lag_days(&self) -> usize {
        self.pay_lag_days
    }

    pub fn recovery_lag_days(&self) -> usize {
        self.recovery_lag_days
    }
}

/// Cumulative default probabilities `Q(N <= m)` on the day grid, with
/// diagnostics describing how the raw fitted polynomial was repaired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultCurve {
    /// `q[m] = Q(N <= m)`, `m = 0..=M`.
    q: Vec<f64>,
    /// Raw TSDP left [0, 1] somewhere and was clamped.
    pub clamped: bool,
    /// Raw TSDP decreased somewhere and was replaced by its running maximum.
    pub monotonized: bool,
    /// Horizon extends beyond the grade's fitted maturity span.
    pub extrapolated: bool,
}

impl DefaultCurve {
    /// Wrap explicit cumulative probabilities (index 0 is day 0).
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.len() < 2 {
            return Err(Error::InvalidInput("default curve needs at least one day".into()));
        }
        if q[0] != 0.0 {
            return Err(Error::InvalidInput(format!("Q(0) must be 0, got {}", q[0])));
        }
        for m in 1..q.len() {
            if !q[m].is_finite() || !(0.0..=1.0).contains(&q[m]) {
                return Err(Error::InvalidInput(format!("Q({m}) = {} outside [0, 1]", q[m])));
            }
            if q[m] < q[m - 1] {
                return Err(Error::InvalidInput(format!(
                    "cumulative probabilities must be non-decreasing: Q({m}) = {} < Q({}) = {}",
                    q[m],
                    m - 1,
                    q[m - 1]
                )));
            }
        }
        Ok(Self { q, clamped: false, monotonized: false, extrapolated: false })
    }

    pub fn horizon_days(&self) -> usize {
        self.q.len() - 1
    }

    /// `Q(N <= m)`.
    pub fn cumulative(&self, m: usize) -> f64 {
        self.q[m]
    }

    /// `Q(N = m) = Q(m) - Q(m - 1)`.
    pub fn mass(&self, m: usize) -> f64 {
        assert!(m >= 1, "default mass is defined from day 1");
        self.q[m] - self.q[m - 1]
    }

    /// `Q(N > m)`.
    pub fn survival_beyond(&self, m: usize) -> f64 {
        1.0 - self.q[m]
    }
}

/// Build the issuer's default curve from a credit fit: the TSDP sampled at
/// `m / 365` years, clamped to `[0, 1]` and forced non-decreasing by a
/// running maximum, with diagnostics when either repair bites.
pub fn default_curve(
    fit: &CreditFit,
    portfolio: &BusinessPortfolio,
    grade: usize,
    horizon_days: usize,
) -> Result<DefaultCurve> {
    if grade == 0 || grade > fit.grades() {
        return Err(Error::InvalidInput(format!(
            "grade {grade} outside the fitted 1..={}",
            fit.grades()
        )));
    }
    if horizon_days == 0 {
        return Err(Error::InvalidInput("horizon must be at least one day".into()));
    }
    let span_end = fit
        .diagnostics
        .curves
        .iter()
        .filter(|c| c.grade == grade)
        .map(|c| c.maturity_span.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let extrapolated =
        span_end.is_finite() && horizon_days as f64 * DAY > span_end + 1e-9;
    if extrapolated {
        log::warn!(
            "CDS horizon {:.2}y extends beyond the grade-{grade} fitted span ending {:.2}y",
            horizon_days as f64 * DAY,
            span_end
        );
    }
    let mut q = Vec::with_capacity(horizon_days + 1);
    q.push(0.0);
    let mut clamped = false;
    let mut monotonized = false;
    let mut running = 0.0f64;
    for m in 1..=horizon_days {
        let raw = fit.issuer_default_probability(portfolio, grade, m as f64 * DAY);
        let clipped = raw.clamp(0.0, 1.0);
        if clipped != raw {
            clamped = true;
        }
        if clipped < running {
            monotonized = true;
        }
        running = running.max(clipped);
        q.push(running);
    }
    if clamped {
        log::warn!("grade-{grade} TSDP left [0, 1] on the day grid; clamped");
    }
    if monotonized {
        log::warn!("grade-{grade} TSDP decreases on the day grid; replaced by running maximum");
    }
    Ok(DefaultCurve { q, clamped, monotonized, extrapolated })
}

/// Attribute-free discount factors on the day grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountGrid {
    /// `d[m]` discounts a day-`m` flow to today; `d[0] = 1`.
    d: Vec<f64>,
}

impl DiscountGrid {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.len() < 2 {
            return Err(Error::InvalidInput("discount grid needs at least one day".into()));
        }
        if d[0] != 1.0 {
            return Err(Error::InvalidInput(format!("D(0) must be 1, got {}", d[0])));
        }
        if d.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidInput("discount factors must be finite and positive".into()));
        }
        Ok(Self { d })
    }

    /// Evaluate an attribute-free fitted curve on the day grid.
    pub fn from_gb(gb: &GbCurveModel, horizon_days: usize) -> Result<Self> {
        if gb.attributes != AttributeSet::constant_only() {
            return Err(Error::InvalidInput(
                "CDS discounting uses the attribute-free curve; fit one with constant loadings only"
                    .into(),
            ));
        }
        let attrs = BondAttributes { coupon_rate: 0.0, maturity: horizon_days as f64 * DAY };
        let mut d = Vec::with_capacity(horizon_days + 1);
        for m in 0..=horizon_days {
            let value = gb.mean_discount(&attrs, m as f64 * DAY);
            if !(value > 0.0) {
                return Err(Error::Domain(format!(
                    "mean discount {value} at day {m} is not positive; \
                     the curve cannot discount this horizon"
                )));
            }
            d.push(value);
        }
        Ok(Self { d })
    }

    /// A flat (no-discounting) grid, useful for tests.
    pub fn flat(horizon_days: usize) -> Self {
        Self { d: vec![1.0; horizon_days + 1] }
    }

    /// Constant continuously compounded zero rate.
    pub fn from_zero_rate(horizon_days: usize, rate: f64) -> Result<Self> {
        if !rate.is_finite() {
            return Err(Error::InvalidInput(format!("rate {rate} must be finite")));
        }
        Ok(Self {
            d: (0..=horizon_days).map(|m| (-rate * m as f64 * DAY).exp()).collect(),
        })
    }

    pub fn horizon_days(&self) -> usize {
        self.d.len() - 1
    }

    /// Discount factor for a day-`m` flow.
    pub fn at(&self, m: usize) -> f64 {
        self.d[m]
    }

    /// Linear interpolation between day nodes, for quadrature.
    fn at_years(&self, s: f64) -> f64 {
        let m = (s * DAYS_PER_YEAR).max(0.0);
        let lo = (m.floor() as usize).min(self.d.len() - 1);
        let hi = (lo + 1).min(self.d.len() - 1);
        let frac = (m - lo as f64).clamp(0.0, 1.0);
        self.d[lo] * (1.0 - frac) + self.d[hi] * frac
    }
}

fn check_grids(
    contract: &CdsContract,
    curve: &DefaultCurve,
    disc: &DiscountGrid,
    extra_days: usize,
) -> Result<()> {
    if curve.horizon_days() < contract.horizon_days {
        return Err(Error::InvalidInput(format!(
            "default curve covers {} days, contract needs {}",
            curve.horizon_days(),
            contract.horizon_days
        )));
    }
    if disc.horizon_days() < contract.horizon_days + extra_days {
        return Err(Error::InvalidInput(format!(
            "discount grid covers {} days, contract needs {}",
            disc.horizon_days(),
            contract.horizon_days + extra_days
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("recovery rate {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// Net value, to the protection seller, of the day-`m` flows at premium `x`:
/// `100 D(m) [ -(1 - gamma) Q(N = m) + 1{m premium date} x Q(N > m) ]`.
pub fn payoff_value(
    contract: &CdsContract,
    curve: &DefaultCurve,
    disc: &DiscountGrid,
    gamma: f64,
    x: f64,
    m: usize,
) -> f64 {
    assert!(
        m >= 1 && m <= contract.horizon_days,
        "day {m} outside the contract horizon 1..={}",
        contract.horizon_days
    );
    let premium = if contract.premium_days.binary_search(&m).is_ok() {
        x * curve.survival_beyond(m)
    } else {
        0.0
    };
    100.0 * disc.at(m) * (-(1.0 - gamma) * curve.mass(m) + premium)
}

fn reject_lags(contract: &CdsContract, pricer: &str) -> Result<()> {
    if contract.pay_lag_days != 0 || contract.recovery_lag_days != 0 {
        return Err(Error::InvalidInput(format!(
            "{pricer} prices lag-free contracts only; use the Monte Carlo pricer for settlement lags"
        )));
    }
    Ok(())
}

fn premium_leg_factor(contract: &CdsContract, curve: &DefaultCurve, disc: &DiscountGrid) -> f64 {
    contract
        .premium_days
        .iter()
        .map(|&mk| curve.survival_beyond(mk) * disc.at(mk))
        .sum()
}

/// Fair premium per payment per 100 notional, from the discrete formula.
///
/// Errors when default is certain by every premium date (no premium income
/// can balance the protection leg).
pub fn cds_premium(
    contract: &CdsContract,
    curve: &DefaultCurve,
    disc: &DiscountGrid,
    gamma: f64,
) -> Result<f64> {
    reject_lags(contract, "the discrete pricer")?;
    check_gamma(gamma)?;
    check_grids(contract, curve, disc, 0)?;
    let protection: f64 = (1..=contract.horizon_days)
        .map(|m| disc.at(m) * curve.mass(m))
        .sum::<f64>()
        * (1.0 - gamma);
    let denominator = premium_leg_factor(contract, curve, disc);
    if !(denominator > 0.0) {
        return Err(Error::NoFairPremium(
            "default is certain by every premium date; no finite premium balances the contract"
                .into(),
        ));
    }
    let x = protection / denominator;
    // The fair-value identity must close: sum of per-day payoff values at x
    // is zero up to roundoff.
    let residual: f64 = (1..=contract.horizon_days)
        .map(|m| payoff_value(contract, curve, disc, gamma, x, m))
        .sum();
    let scale = (100.0 * protection).abs().max(1e-3);
    if residual.abs() > 1e-12 * scale.max(1.0) * 1e3 {
        return Err(Error::Domain(format!(
            "fair-value identity failed to close: residual {residual:e} at premium {x}"
        )));
    }
    Ok(x)
}

/// Fair premium with the protection leg computed by composite Simpson
/// quadrature of `D(s) p'(s)` over the horizon, using the raw fitted
/// polynomial derivative; the premium leg matches the discrete pricer.
pub fn cds_premium_continuous(
    contract: &CdsContract,
    fit: &CreditFit,
    disc: &DiscountGrid,
    gamma: f64,
    step: f64,
) -> Result<f64> {
    reject_lags(contract, "the quadrature pricer")?;
    check_gamma(gamma)?;
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidInput(format!("quadrature step {step} must be positive")));
    }
    let curve = default_curve(fit, &contract.portfolio, contract.grade, contract.horizon_days)?;
    check_grids(contract, &curve, disc, 0)?;
    let horizon_years = contract.horizon_days as f64 * DAY;
    let mut intervals = (horizon_years / step).ceil() as usize;
    intervals = intervals.max(2);
    if intervals % 2 == 1 {
        intervals += 1;
    }
    let width = horizon_years / intervals as f64;
    let integrand = |s: f64| -> f64 {
        disc.at_years(s) * fit.tsdp.issuer_derivative(&contract.portfolio, contract.grade, s)
    };
    let mut integral = integrand(0.0) + integrand(horizon_years);
    for i in 1..intervals {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        integral += weight * integrand(i as f64 * width);
    }
    integral *= width / 3.0;
    let protection = (1.0 - gamma) * integral;
    let denominator = premium_leg_factor(contract, &curve, disc);
    if !(denominator > 0.0) {
        return Err(Error::NoFairPremium(
            "default is certain by every premium date; no finite premium balances the contract"
                .into(),
        ));
    }
    Ok(protection / denominator)
}

/// Sample default days by inverse transform: path `i` draws `u` from its
/// own seeded stream and defaults at the first day with `Q(m) > u`, or
/// survives the horizon (`None`).
///
/// Each path's stream depends only on `(seed, path index)`, so results are
/// independent of how paths are partitioned across workers.
pub fn simulate_default_times(
    curve: &DefaultCurve,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Option<usize>>> {
    if n_paths == 0 {
        return Err(Error::InvalidInput("need at least one path".into()));
    }
    let interior = &curve.q[1..];
    Ok((0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            let u: f64 = rng.random::<f64>();
            let idx = interior.partition_point(|&qm| qm <= u);
            if idx < interior.len() {
                Some(idx + 1)
            } else {
                None
            }
        })
        .collect())
}

/// Monte Carlo fair premium: pathwise-averaged protection and premium legs,
/// with optional settlement lags on the default payments.
///
/// A defaulted path receives `100 D(d + pay lag) - 100 gamma
/// D(d + recovery lag)` and pays premiums only at dates strictly before the
/// default day; with zero lags the estimate converges to [`cds_premium`].
pub fn mc_premium(
    contract: &CdsContract,
    curve: &DefaultCurve,
    disc: &DiscountGrid,
    gamma: f64,
    n_paths: usize,
    seed: u64,
) -> Result<f64> {
    check_gamma(gamma)?;
    let max_lag = contract.pay_lag_days.max(contract.recovery_lag_days);
    check_grids(contract, curve, disc, max_lag)?;
    let days = simulate_default_times(curve, n_paths, seed)?;
    // Fixed-size chunks summed in order keep the reduction deterministic.
    let legs: Vec<(f64, f64)> = days
        .par_chunks(1 << 16)
        .map(|chunk| {
            let mut protection = 0.0f64;
            let mut premium = 0.0f64;
            for &day in chunk {
                match day {
                    Some(d) if d <= contract.horizon_days => {
                        protection += 100.0 * disc.at(d + contract.pay_lag_days)
                            - 100.0 * gamma * disc.at(d + contract.recovery_lag_days);
                        premium += contract
                            .premium_days
                            .iter()
                            .take_while(|&&mk| mk < d)
                            .map(|&mk| 100.0 * disc.at(mk))
                            .sum::<f64>();
                    }
                    _ => {
                        premium += contract
                            .premium_days
                            .iter()
                            .map(|&mk| 100.0 * disc.at(mk))
                            .sum::<f64>();
                    }
                }
            }
            (protection, premium)
        })
        .collect();
    let (protection, premium) =
        legs.iter().fold((0.0, 0.0), |(p, q), &(cp, cq)| (p + cp, q + cq));
    if !(premium > 0.0) {
        return Err(Error::NoFairPremium(
            "every sampled path defaulted before the first premium date".into(),
        ));
    }
    // Premium payments are 100 x per date; x solves protection = x * premium.
    Ok(protection / premium)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cb::{
        CbCovarianceParams, CreditDiagnostics, CurveDiagnostic, RecoveryRates, TsdpCoefficients,
    };
    use crate::gls::ObjectiveMode;
    use approx::assert_relative_eq;

    fn manual_fit(coeffs: TsdpCoefficients, gammas: Vec<f64>) -> CreditFit {
        let grades = coeffs.grades();
        CreditFit {
            tsdp: coeffs,
            recovery: RecoveryRates::new(gammas).unwrap(),
            covariance: CbCovarianceParams {
                sigma2: 1.0,
                theta: 0.0,
                rho: vec![vec![0.0; grades]; grades],
                xi: vec![vec![0.0; grades]; grades],
            },
            residuals: vec![vec![]; grades],
            diagnostics: CreditDiagnostics {
                order: 1,
                objective: 0.0,
                objective_mode: ObjectiveMode::ProfiledNll,
                psi: 0.0,
                log_det_covariance: 0.0,
                per_grade: vec![],
                curves: vec![],
                selection: vec![],
            },
        }
    }

    fn single_industry() -> BusinessPortfolio {
        BusinessPortfolio::new(vec![1.0]).unwrap()
    }

    #[test]
    fn default_curve_zero_tsdp_is_zero() {
        let fit = manual_fit(TsdpCoefficients::zeros(1, 1, 1).unwrap(), vec![0.4]);
        let curve = default_curve(&fit, &single_industry(), 1, 30).unwrap();
        assert_eq!(curve.cumulative(0), 0.0);
        assert!((0..=30).all(|m| curve.cumulative(m) == 0.0));
        assert!(!curve.clamped && !curve.monotonized);
    }

    #[test]
    fn default_curve_linear_tsdp_at_one_year() {
        let fit = manual_fit(TsdpCoefficients::new(1, 1, 1, vec![0.02]).unwrap(), vec![0.4]);
        let curve = default_curve(&fit, &single_industry(), 1, 365).unwrap();
        assert_relative_eq!(curve.cumulative(365), 0.02, max_relative = 1e-12);
        assert_eq!(curve.cumulative(0), 0.0);
    }

    #[test]
    fn default_curve_flags_clamp_and_monotone_repairs() {
        // p(s) = 0.8 s crosses 1 before 2 years: clamped.
        let fit = manual_fit(TsdpCoefficients::new(1, 1, 1, vec![0.8]).unwrap(), vec![0.4]);
        let curve = default_curve(&fit, &single_industry(), 1, 2 * 365).unwrap();
        assert!(curve.clamped);
        assert_eq!(curve.cumulative(2 * 365), 1.0);

        // p(s) = 0.1 s - 0.02 s^2 peaks at s = 2.5 then declines: running
        // maximum holds the peak.
        let fit = manual_fit(TsdpCoefficients::new(1, 1, 2, vec![0.1, -0.02]).unwrap(), vec![0.4]);
        let curve = default_curve(&fit, &single_industry(), 1, 4 * 365).unwrap();
        assert!(curve.monotonized);
        let peak = 0.1 * 2.5 - 0.02 * 2.5 * 2.5;
        assert_relative_eq!(curve.cumulative(4 * 365), peak, max_relative = 1e-4);
        for m in 1..=4 * 365 {
            assert!(curve.cumulative(m) >= curve.cumulative(m - 1));
        }
    }

    #[test]
    fn default_curve_extrapolation_flag_uses_fitted_span() {
        let mut fit = manual_fit(TsdpCoefficients::new(1, 1, 1, vec![0.01]).unwrap(), vec![0.4]);
        fit.diagnostics.curves.push(CurveDiagnostic {
            grade: 1,
            industry: 1,
            maturity_span: (0.5, 5.0),
            exits_unit_interval: false,
            decreasing: false,
        });
        let inside = default_curve(&fit, &single_industry(), 1, 4 * 365).unwrap();
        assert!(!inside.extrapolated);
        let outside = default_curve(&fit, &single_industry(), 1, 7 * 365).unwrap();
        assert!(outside.extrapolated);
    }

    #[test]
    fn payoff_value_cases() {
        let portfolio = single_industry();
        let contract = CdsContract::new(2, vec![2], 1, portfolio).unwrap();
        let curve = DefaultCurve::new(vec![0.0, 0.1, 0.1]).unwrap();
        let disc = DiscountGrid::flat(2);
        // Day 1 is not a premium date; Q jumps 0 -> 0.1 with gamma = 0.4.
        let v1 = payoff_value(&contract, &curve, &disc, 0.4, 0.05, 1);
        assert_relative_eq!(v1, -100.0 * 0.6 * 0.1, max_relative = 1e-14);
        // Full recovery kills the protection term everywhere.
        let v1_full = payoff_value(&contract, &curve, &disc, 1.0, 0.05, 1);
        assert_eq!(v1_full, 0.0);
        // Day 2: flat Q, premium date: only the premium term remains.
        let v2 = payoff_value(&contract, &curve, &disc, 0.4, 0.05, 2);
        assert_relative_eq!(v2, 100.0 * 0.05 * 0.9, max_relative = 1e-14);
    }

    #[test]
    fn two_day_premium_hand_computed() {
        let contract = CdsContract::new(2, vec![2], 1, single_industry()).unwrap();
        let curve = DefaultCurve::new(vec![0.0, 0.0, 0.1]).unwrap();
        let disc = DiscountGrid::flat(2);
        let x = cds_premium(&contract, &curve, &disc, 0.4).unwrap();
        assert_relative_eq!(x, 0.6 * 0.1 / 0.9, max_relative = 1e-14);
        // Fair-value identity.
        let total: f64 =
            (1..=2).map(|m| payoff_value(&contract, &curve, &disc, 0.4, x, m)).sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn premium_trivial_cases() {
        let contract = CdsContract::new(10, vec![5, 10], 1, single_industry()).unwrap();
        let disc = DiscountGrid::flat(10);
        let flat = DefaultCurve::new(vec![0.0; 11]).unwrap();
        assert_eq!(cds_premium(&contract, &flat, &disc, 0.3).unwrap(), 0.0);
        let mut q = vec![0.1; 11];
        q[0] = 0.0;
        let curve = DefaultCurve::new(q).unwrap();
        assert_eq!(cds_premium(&contract, &curve, &disc, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn certain_default_has_no_fair_premium() {
        let contract = CdsContract::new(2, vec![2], 1, single_industry()).unwrap();
        let curve = DefaultCurve::new(vec![0.0, 1.0, 1.0]).unwrap();
        let disc = DiscountGrid::flat(2);
        match cds_premium(&contract, &curve, &disc, 0.4) {
            Err(Error::NoFairPremium(_)) => {}
            other => panic!("expected no-fair-premium, got {other:?}"),
        }
    }

    #[test]
    fn premium_monotone_in_gamma_and_default_mass() {
        let contract = CdsContract::new(365, vec![180, 365], 1, single_industry()).unwrap();
        let disc = DiscountGrid::from_zero_rate(365, 0.02).unwrap();
        let base: Vec<f64> = (0..=365).map(|m| 0.05 * m as f64 / 365.0).collect();
        let curve = DefaultCurve::new(base.clone()).unwrap();
        let mut prev = f64::INFINITY;
        for gamma in [0.0, 0.2, 0.5, 0.8, 1.0] {
            let x = cds_premium(&contract, &curve, &disc, gamma).unwrap();
            assert!(x <= prev + 1e-15, "premium rose with recovery");
            prev = x;
        }
        // Scaling the default mass up raises the premium.
        let scaled = DefaultCurve::new(base.iter().map(|q| q * 1.5).collect()).unwrap();
        let x_base = cds_premium(&contract, &curve, &disc, 0.4).unwrap();
        let x_scaled = cds_premium(&contract, &scaled, &disc, 0.4).unwrap();
        assert!(x_scaled > x_base);
    }

    #[test]
    fn continuous_premium_matches_discrete_on_smooth_curve() {
        // p(s) = 0.03 s over 5 years with biannual premiums.
        let horizon = 5 * 365;
        let premium_days = CdsContract::evenly_spaced_premium_days(horizon, 2).unwrap();
        let contract = CdsContract::new(horizon, premium_days, 1, single_industry()).unwrap();
        let fit = manual_fit(TsdpCoefficients::new(1, 1, 1, vec![0.03]).unwrap(), vec![0.4]);
        let disc = DiscountGrid::from_zero_rate(horizon, 0.025).unwrap();
        let curve = default_curve(&fit, &single_industry(), 1, horizon).unwrap();
        let discrete = cds_premium(&contract, &curve, &disc, 0.4).unwrap();
        let continuous = cds_premium_continuous(&contract, &fit, &disc, 0.4, 1e-3).unwrap();
        assert_relative_eq!(continuous, discrete, max_relative = 5e-3);
    }

    #[test]
    fn continuous_protection_leg_constant_integrand() {
        // p(s) = 0.02 s and flat discounting: the premium with a single
        // premium date at the horizon is (1-gamma) * 0.02 T / Q(N > T).
        let horizon = 2 * 365;
        let contract = CdsContract::new(horizon, vec![horizon], 1, single_industry()).unwrap();
        let fit = manual_fit(TsdpCoefficients::new(1, 1, 1, vec![0.02]).unwrap(), vec![0.25]);
        let disc = DiscountGrid::flat(horizon);
        let x = cds_premium_continuous(&contract, &fit, &disc, 0.25, 1e-3).unwrap();
        let t = horizon as f64 * DAY;
        let expected = 0.75 * 0.02 * t / (1.0 - 0.02 * t);
        assert_relative_eq!(x, expected, max_relative = 1e-9);
    }

    #[test]
    fn simulation_degenerate_curves() {
        let sure = DefaultCurve::new(vec![0.0, 1.0, 1.0]).unwrap();
        let days = simulate_default_times(&sure, 1000, 9).unwrap();
        assert!(days.iter().all(|d| *d == Some(1)));
        let never = DefaultCurve::new(vec![0.0, 0.0, 0.0]).unwrap();
        let days = simulate_default_times(&never, 1000, 9).unwrap();
        assert!(days.iter().all(|d| d.is_none()));
    }

    #[test]
    fn simulation_is_deterministic_and_prefix_stable() {
        let q: Vec<f64> = (0..=365).map(|m| 0.3 * m as f64 / 365.0).collect();
        let curve = DefaultCurve::new(q).unwrap();
        let a = simulate_default_times(&curve, 1000, 42).unwrap();
        let b = simulate_default_times(&curve, 1000, 42).unwrap();
        assert_eq!(a, b);
        // Path streams depend only on (seed, index): a shorter run is a
        // prefix of a longer one.
        let short = simulate_default_times(&curve, 400, 42).unwrap();
        assert_eq!(&a[..400], &short[..]);
        let other_seed = simulate_default_times(&curve, 1000, 43).unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn simulated_default_frequency_matches_curve() {
        let q: Vec<f64> = (0..=365).map(|m| 0.2 * m as f64 / 365.0).collect();
        let curve = DefaultCurve::new(q).unwrap();
        let n = 200_000;
        let days = simulate_default_times(&curve, n, 7).unwrap();
        let defaulted = days.iter().filter(|d| d.is_some()).count() as f64 / n as f64;
        // Binomial standard error at p = 0.2, n = 2e5 is ~0.0009.
        assert!((defaulted - 0.2).abs() < 0.003, "frequency {defaulted}");
    }

    #[test]
    fn mc_premium_converges_to_analytic() {
        let contract = CdsContract::new(2, vec![2], 1, single_industry()).unwrap();
        let curve = DefaultCurve::new(vec![0.0, 0.0, 0.1]).unwrap();
        let disc = DiscountGrid::flat(2);
        let analytic = cds_premium(&contract, &curve, &disc, 0.4).unwrap();
        let mc = mc_premium(&contract, &curve, &disc, 0.4, 1_000_000, 11).unwrap();
        assert_relative_eq!(mc, analytic, max_relative = 0.01);
    }

    #[test]
    fn mc_premium_full_recovery_is_zero() {
        let contract = CdsContract::new(10, vec![10], 1, single_industry()).unwrap();
        let mut q = vec![0.05; 11];
        q[0] = 0.0;
        let curve = DefaultCurve::new(q).unwrap();
        let disc = DiscountGrid::flat(10);
        assert_eq!(mc_premium(&contract, &curve, &disc, 1.0, 10_000, 3).unwrap(), 0.0);
    }

    #[test]
    fn recovery_lag_raises_the_premium() {
        let horizon = 365;
        let contract = CdsContract::new(horizon, vec![180, 365], 1, single_industry()).unwrap();
        let lagged = contract.clone().with_lags(0, 90);
        let q: Vec<f64> = (0..=horizon).map(|m| 0.15 * m as f64 / 365.0).collect();
        let curve = DefaultCurve::new(q).unwrap();
        let disc = DiscountGrid::from_zero_rate(horizon + 90, 0.05).unwrap();
        let base = mc_premium(&contract, &curve, &disc, 0.4, 50_000, 5).unwrap();
        let with_lag = mc_premium(&lagged, &curve, &disc, 0.4, 50_000, 5).unwrap();
        assert!(
            with_lag > base,
            "delayed recovery should cost more: {with_lag} <= {base}"
        );
        // The analytic pricers refuse lagged contracts.
        assert!(cds_premium(&lagged, &curve, &disc, 0.4).is_err());
    }

    #[test]
    fn mc_certain_early_default_has_no_fair_premium() {
        let contract = CdsContract::new(2, vec![2], 1, single_industry()).unwrap();
        let curve = DefaultCurve::new(vec![0.0, 1.0, 1.0]).unwrap();
        let disc = DiscountGrid::flat(2);
        match mc_premium(&contract, &curve, &disc, 0.4, 1000, 1) {
            Err(Error::NoFairPremium(_)) => {}
            other => panic!("expected no-fair-premium, got {other:?}"),
        }
    }

    #[test]
    fn contract_validation() {
        let p = single_industry();
        assert!(CdsContract::new(0, vec![1], 1, p.clone()).is_err());
        assert!(CdsContract::new(10, vec![], 1, p.clone()).is_err());
        assert!(CdsContract::new(10, vec![3, 3], 1, p.clone()).is_err());
        assert!(CdsContract::new(10, vec![3, 11], 1, p.clone()).is_err());
        assert!(CdsContract::new(10, vec![0, 5], 1, p.clone()).is_err());
        let days = CdsContract::evenly_spaced_premium_days(2 * 365, 2).unwrap();
        assert_eq!(days, vec![183, 365, 548, 730]);
    }

    #[test]
    fn discount_grid_validation_and_sources() {
        assert!(DiscountGrid::new(vec![1.0]).is_err());
        assert!(DiscountGrid::new(vec![0.9, 0.8]).is_err());
        assert!(DiscountGrid::new(vec![1.0, -0.2]).is_err());
        let grid = DiscountGrid::from_zero_rate(365, 0.04).unwrap();
        assert_eq!(grid.at(0), 1.0);
        assert_relative_eq!(grid.at(365), (-0.04f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn default_curve_validation() {
        assert!(DefaultCurve::new(vec![0.1, 0.2]).is_err());
        assert!(DefaultCurve::new(vec![0.0, 0.3, 0.2]).is_err());
        assert!(DefaultCurve::new(vec![0.0, 1.2]).is_err());
    }
}
