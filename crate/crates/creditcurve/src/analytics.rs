//! Applications of a fitted credit model: implied TSDP curves, credit risk
//! discounts, fair spreads, and portfolio loss decomposition.
//!
//! Where a fitted TSDP polynomial is used as a probability it is clamped to
//! `[0, 1]` (the estimator itself is unconstrained); every clamp is logged.
//! Both the per-bond discount `y_hat` and the portfolio decomposition run
//! through the same clamped evaluations, so portfolio totals always equal
//! the sum of per-bond fair values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cb::CreditFit;
use crate::error::{Error, Result};
use crate::gb::GbCurveModel;
use crate::instruments::{day_index, CorporateBond};

/// One sample of an implied TSDP curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub s: f64,
    /// Raw polynomial value; may leave [0, 1] (see the fit's curve
    /// diagnostics).
    pub probability: f64,
}

/// An implied per-industry TSDP curve with the grade's recovery rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsdpCurve {
    pub grade: usize,
    pub industry: usize,
    pub gamma: f64,
    pub samples: Vec<CurveSample>,
}

/// Sample the implied generic TSDP `p(s : i, j)` on a tenor grid.
///
/// Samples are the raw fitted polynomial, not clamped: this reports the
/// estimate itself.
pub fn implied_tsdp_curve(
    fit: &CreditFit,
    grade: usize,
    industry: usize,
    s_grid: &[f64],
) -> Result<TsdpCurve> {
    if grade == 0 || grade > fit.grades() {
        return Err(Error::InvalidInput(format!(
            "grade {grade} outside the fitted 1..={}",
            fit.grades()
        )));
    }
    if industry == 0 || industry > fit.industries() {
        return Err(Error::InvalidInput(format!(
            "industry {industry} outside the fitted 1..={}",
            fit.industries()
        )));
    }
    if s_grid.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidInput("tenor grid must be finite and non-negative".into()));
    }
    Ok(TsdpCurve {
        grade,
        industry,
        gamma: fit.recovery.gamma(grade),
        samples: s_grid
            .iter()
            .map(|&s| CurveSample { s, probability: fit.tsdp.curve_value(grade, industry, s) })
            .collect(),
    })
}

/// Issuer TSDP: the sales-weighted mix of the grade's industry curves.
pub fn issuer_tsdp(
    fit: &CreditFit,
    portfolio: &crate::instruments::BusinessPortfolio,
    grade: usize,
    s: f64,
) -> f64 {
    fit.issuer_default_probability(portfolio, grade, s)
}

/// Clamped issuer TSDP for valuation, counting how often the clamp bites.
fn clamped_tsdp(fit: &CreditFit, bond: &CorporateBond, s: f64, clamps: &mut usize) -> f64 {
    let p = fit.issuer_default_probability(&bond.portfolio, bond.grade, s);
    if (0.0..=1.0).contains(&p) {
        p
    } else {
        *clamps += 1;
        p.clamp(0.0, 1.0)
    }
}

/// The credit risk discount of one bond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditDiscount {
    /// `y_hat = sum_j Dbar(s_kj) * W(s_kj)`, the (usually negative) price
    /// adjustment for default risk.
    pub y_hat: f64,
    /// Per-payment-time expected-loss flows `W(s_kj)`.
    pub w_values: Vec<f64>,
}

/// Per-flow expected-loss terms
/// `W(s_j) = [100 gamma - C(s_j)] p(s_j) - 100 gamma p(s_{j-1})`
/// with the TSDP clamped to [0, 1]; returns the flows and the clamp count.
fn loss_flows(fit: &CreditFit, bond: &CorporateBond) -> (Vec<f64>, usize) {
    let gamma = fit.recovery.gamma(bond.grade);
    let mut clamps = 0usize;
    let mut prev_p = 0.0;
    let w_values = bond
        .schedule
        .times()
        .iter()
        .zip(bond.schedule.amounts())
        .map(|(&t, &c)| {
            let p = clamped_tsdp(fit, bond, t, &mut clamps);
            let w = (100.0 * gamma - c) * p - 100.0 * gamma * prev_p;
            prev_p = p;
            w
        })
        .collect();
    (w_values, clamps)
}

/// Credit risk discount `y_hat` of a bond under a fitted credit model,
/// valued with the government-bond mean discount curve.
pub fn credit_discount(fit: &CreditFit, bond: &CorporateBond, gb: &GbCurveModel) -> CreditDiscount {
    let (w_values, clamps) = loss_flows(fit, bond);
    if clamps > 0 {
        log::warn!(
            "bond {}: fitted TSDP left [0, 1] at {clamps} of {} payment times; clamped",
            bond.id,
            bond.schedule.len()
        );
    }
    let y_hat = bond
        .schedule
        .times()
        .iter()
        .zip(&w_values)
        .map(|(&t, &w)| gb.mean_discount(&bond.attributes, t) * w)
        .sum();
    CreditDiscount { y_hat, w_values }
}

/// Fair spread `-y_hat / P_hat`: the proportional price discount a
/// default-free investor would demand for holding the credit.
pub fn fair_spread(fit: &CreditFit, bond: &CorporateBond, gb: &GbCurveModel) -> Result<f64> {
    let p_hat = gb.theoretical_price(&bond.schedule, &bond.attributes);
    if !(p_hat > 0.0) {
        return Err(Error::Domain(format!(
            "bond {}: theoretical default-free price {p_hat} is not positive",
            bond.id
        )));
    }
    Ok(-credit_discount(fit, bond, gb).y_hat / p_hat)
}

/// A physical holding of a corporate bond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioPosition {
    pub bond: CorporateBond,
    /// Units held; negative means short.
    pub units: f64,
}

impl PortfolioPosition {
    pub fn new(bond: CorporateBond, units: f64) -> Result<Self> {
        if !units.is_finite() {
            return Err(Error::InvalidInput(format!(
                "position in bond {}: units {units} must be finite",
                bond.id
            )));
        }
        Ok(Self { bond, units })
    }
}

/// Fair-value decomposition of a portfolio on the merged cash-flow grid:
/// per-time no-default inflows `A_m`, expected losses `B_m`, and their sum
/// `C_m`, with the corresponding weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioDecomposition {
    /// Merged payment times (union over positions, one entry per calendar
    /// day).
    pub times: Vec<f64>,
    /// No-default inflow present value per time.
    pub inflow: Vec<f64>,
    /// Expected-loss present value per time (usually negative).
    pub loss: Vec<f64>,
    /// `inflow + loss` per time: the fair-value contribution.
    pub combined: Vec<f64>,
    pub total_inflow: f64,
    pub total_loss: f64,
    /// Total fair value; equals the sum of unit-weighted bond fair values.
    pub total_value: f64,
    /// Per-time weights `a_m = A_m / A`; absent when the total is zero.
    pub inflow_weights: Option<Vec<f64>>,
    /// Per-time weights `b_m = B_m / B`; absent when the total is zero.
    pub loss_weights: Option<Vec<f64>>,
    /// Per-time weights `c_m = C_m / C`; absent when the total is zero.
    pub combined_weights: Option<Vec<f64>>,
    /// Some weight is negative (per-time values of mixed sign), so the
    /// weighted-average durations should be read with care.
    pub mixed_sign_weights: bool,
}

/// Weighted-average cash-flow times of a decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Durations {
    /// `sum_m a_m s_m` — average arrival of the no-default inflows.
    pub inflow: Option<f64>,
    /// `sum_m b_m s_m` — average arrival of the expected losses.
    pub loss: Option<f64>,
    /// `sum_m c_m s_m` — average arrival of the fair-value flows.
    pub actual: Option<f64>,
}

fn weights_of(values: &[f64], total: f64) -> Option<Vec<f64>> {
    // A total this small cannot normalize its per-time values meaningfully.
    if total.abs() <= 1e-12 {
        None
    } else {
        Some(values.iter().map(|v| v / total).collect())
    }
}

/// Decompose a portfolio's fair value over the merged cash-flow grid.
///
/// Short positions are rejected unless `allow_short` is set.
pub fn portfolio_decompose_with(
    positions: &[PortfolioPosition],
    fit: &CreditFit,
    gb: &GbCurveModel,
    allow_short: bool,
) -> Result<PortfolioDecomposition> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("no positions supplied".into()));
    }
    if !allow_short {
        if let Some(short) = positions.iter().find(|p| p.units < 0.0) {
            return Err(Error::InvalidInput(format!(
                "position in bond {} is short ({} units); enable short positions explicitly",
                short.bond.id, short.units
            )));
        }
    }
    for position in positions {
        if position.bond.grade > fit.grades() {
            return Err(Error::InvalidInput(format!(
                "bond {} has grade {}, beyond the fitted 1..={}",
                position.bond.id,
                position.bond.grade,
                fit.grades()
            )));
        }
        if position.bond.portfolio.weights().len() != fit.industries() {
            return Err(Error::InvalidInput(format!(
                "bond {} spans {} industries, the fit {}",
                position.bond.id,
                position.bond.portfolio.weights().len(),
                fit.industries()
            )));
        }
    }

    // Bucket by calendar day; each bucket's reported time is the earliest
    // time mapped to it, while every bond's terms are computed at the
    // bond's own payment times so totals stay exact.
    let mut buckets: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
    for position in positions {
        let bond = &position.bond;
        let (w_values, clamps) = loss_flows(fit, bond);
        if clamps > 0 {
            log::warn!(
                "bond {}: fitted TSDP left [0, 1] at {clamps} of {} payment times; clamped",
                bond.id,
                bond.schedule.len()
            );
        }
        for ((&t, &c), &w) in bond
            .schedule
            .times()
            .iter()
            .zip(bond.schedule.amounts())
            .zip(&w_values)
        {
            let discount = gb.mean_discount(&bond.attributes, t);
            let entry = buckets.entry(day_index(t)).or_insert((t, 0.0, 0.0));
            entry.0 = entry.0.min(t);
            entry.1 += position.units * c * discount;
            entry.2 += position.units * w * discount;
        }
    }

    let times: Vec<f64> = buckets.values().map(|&(t, _, _)| t).collect();
    let inflow: Vec<f64> = buckets.values().map(|&(_, a, _)| a).collect();
    let loss: Vec<f64> = buckets.values().map(|&(_, _, b)| b).collect();
    let combined: Vec<f64> = inflow.iter().zip(&loss).map(|(a, b)| a + b).collect();
    let total_inflow: f64 = inflow.iter().sum();
    let total_loss: f64 = loss.iter().sum();
    let total_value: f64 = total_inflow + total_loss;
    let inflow_weights = weights_of(&inflow, total_inflow);
    let loss_weights = weights_of(&loss, total_loss);
    let combined_weights = weights_of(&combined, total_value);
    let mixed_sign_weights = [&inflow_weights, &loss_weights, &combined_weights]
        .iter()
        .any(|w| w.as_ref().is_some_and(|w| w.iter().any(|x| *x < 0.0)));
    if mixed_sign_weights {
        log::warn!("portfolio decomposition has per-time values of mixed sign");
    }
    Ok(PortfolioDecomposition {
        times,
        inflow,
        loss,
        combined,
        total_inflow,
        total_loss,
        total_value,
        inflow_weights,
        loss_weights,
        combined_weights,
        mixed_sign_weights,
    })
}

/// [`portfolio_decompose_with`] with short positions disallowed.
pub fn portfolio_decompose(
    positions: &[PortfolioPosition],
    fit: &CreditFit,
    gb: &GbCurveModel,
) -> Result<PortfolioDecomposition> {
    portfolio_decompose_with(positions, fit, gb, false)
}

/// Weighted-average flow times; a component whose total is zero has no
/// defined duration.
pub fn durations(decomp: &PortfolioDecomposition) -> Durations {
    let average = |weights: &Option<Vec<f64>>| {
        weights
            .as_ref()
            .map(|w| w.iter().zip(&decomp.times).map(|(wm, s)| wm * s).sum())
    };
    Durations {
        inflow: average(&decomp.inflow_weights),
        loss: average(&decomp.loss_weights),
        actual: average(&decomp.combined_weights),
    }
}
