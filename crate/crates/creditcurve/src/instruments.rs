//! Bond instruments and cash-flow schedules.
//!
//! All instruments pay per 100 of face value and quote dirty prices (accrued
//! interest is not split out).  Cash-flow times are measured in years from
//! the valuation date.  Two times are treated as the same payment date when
//! they round to the same whole day on a 365-day year, which keeps
//! payment-date membership tests exact without relying on float equality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Days per year on the quantisation grid shared with the CDS day grid.
pub const DAYS_PER_YEAR: f64 = 365.0;

/// Quantise a time in years to a whole-day index on the 365-day grid.
pub fn day_index(time_years: f64) -> i64 {
    (time_years * DAYS_PER_YEAR).round() as i64
}

/// A non-empty, strictly increasing sequence of future cash flows per 100
/// face value.
///
/// Invariants enforced at construction: times are finite, strictly positive,
/// strictly increasing and land on distinct days of the quantisation grid;
/// amounts are non-negative (a zero-coupon bond carries explicit zero
/// coupons) and the final amount contains the principal, so it is at
/// least 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CashFlowSchedule {
    times: Vec<f64>,
    amounts: Vec<f64>,
}

impl CashFlowSchedule {
    /// Build a schedule from paired times (years) and amounts (per 100 face).
    pub fn new(times: Vec<f64>, amounts: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidInput("schedule has no cash flows".into()));
        }
        if times.len() != amounts.len() {
            return Err(Error::InvalidInput(format!(
                "schedule has {} times but {} amounts",
                times.len(),
                amounts.len()
            )));
        }
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "cash-flow time {t} at position {i} is not strictly positive"
                )));
            }
            if i > 0 {
                if t <= times[i - 1] {
                    return Err(Error::InvalidInput(format!(
                        "cash-flow times must be strictly increasing ({} then {t})",
                        times[i - 1]
                    )));
                }
                if day_index(t) == day_index(times[i - 1]) {
                    return Err(Error::InvalidInput(format!(
                        "cash-flow times {} and {t} fall on the same day",
                        times[i - 1]
                    )));
                }
            }
        }
        for (i, &a) in amounts.iter().enumerate() {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "cash-flow amount {a} at position {i} is negative"
                )));
            }
        }
        let last = *amounts.last().expect("non-empty");
        if last < 100.0 {
            return Err(Error::InvalidInput(format!(
                "final cash flow {last} does not contain the principal of 100"
            )));
        }
        Ok(Self { times, amounts })
    }

    /// Number of cash flows.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// Always false: construction rejects empty schedules.
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Payment times in years, ascending.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Payment amounts per 100 face, aligned with [`times`](Self::times).
    pub fn amounts(&self) -> &[f64] {
        &self.amounts
    }

    /// Time of the final payment.
    pub fn maturity(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Position of the payment falling on the same day as `time_years`.
    pub fn position_of(&self, time_years: f64) -> Option<usize> {
        let day = day_index(time_years);
        self.times.iter().position(|&t| day_index(t) == day)
    }

    /// Payment-date indicator: true when `time_years` falls on the same day
    /// as one of the scheduled payments.
    pub fn is_payment_time(&self, time_years: f64) -> bool {
        self.position_of(time_years).is_some()
    }

    /// Amount paid at `time_years`; zero when it is not a payment date.
    pub fn amount_at(&self, time_years: f64) -> f64 {
        self.position_of(time_years)
            .map_or(0.0, |i| self.amounts[i])
    }

    /// Undiscounted sum of all cash flows.
    pub fn total_cash(&self) -> f64 {
        self.amounts.iter().sum()
    }
}

/// Enumerate a level-coupon schedule, with the stub (if any) as the first
/// period.
///
/// Payments fall at `maturity - k/frequency` for `k = 0 .. ceil(maturity *
/// frequency) - 1`, each paying `coupon_rate / frequency` per 100 face, and
/// the payment at maturity additionally returns the principal of 100.  When
/// `maturity * frequency` is not an integer the first period is short and
/// still pays the full period coupon.
pub fn build_schedule(coupon_rate: f64, maturity: f64, frequency: u32) -> Result<CashFlowSchedule> {
    if !coupon_rate.is_finite() || coupon_rate < 0.0 {
        return Err(Error::InvalidInput(format!(
            "coupon rate {coupon_rate} must be non-negative"
        )));
    }
    if !maturity.is_finite() || maturity <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "maturity {maturity} must be strictly positive"
        )));
    }
    if frequency == 0 {
        return Err(Error::InvalidInput("payment frequency must be at least 1".into()));
    }
    let periods = maturity * f64::from(frequency);
    // Guard against 3.0 * 2 evaluating to 6.000000000000001 and gaining a period.
    let count = ((periods - 1e-9).ceil().max(1.0)) as usize;
    let coupon = coupon_rate / f64::from(frequency);
    let mut times = Vec::with_capacity(count);
    let mut amounts = Vec::with_capacity(count);
    for k in (0..count).rev() {
        times.push(maturity - k as f64 / f64::from(frequency));
        amounts.push(coupon);
    }
    *amounts.last_mut().expect("count >= 1") += 100.0;
    CashFlowSchedule::new(times, amounts)
}

/// Pricing attributes entering the discount polynomial: the regressors are
/// the constant 1, the coupon rate, and the maturity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondAttributes {
    /// Annual coupon rate per 100 face value.
    pub coupon_rate: f64,
    /// Time to maturity in years.
    pub maturity: f64,
}

impl BondAttributes {
    /// The attribute regressors `(1, coupon, maturity)`.
    pub fn regressors(&self) -> [f64; 3] {
        [1.0, self.coupon_rate, self.maturity]
    }
}

/// A government (default-free) bond quote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernmentBond {
    pub id: String,
    /// Observed dirty price per 100 face value.
    pub price: f64,
    pub attributes: BondAttributes,
    pub schedule: CashFlowSchedule,
}

impl GovernmentBond {
    /// Build a bond with a level-coupon schedule derived from the attributes.
    pub fn new(
        id: impl Into<String>,
        price: f64,
        coupon_rate: f64,
        maturity: f64,
        frequency: u32,
    ) -> Result<Self> {
        let schedule = build_schedule(coupon_rate, maturity, frequency)?;
        Self::with_schedule(
            id,
            price,
            BondAttributes { coupon_rate, maturity },
            schedule,
        )
    }

    /// Build a bond with an explicit schedule.  The attribute maturity must
    /// fall on the same day as the final payment.
    pub fn with_schedule(
        id: impl Into<String>,
        price: f64,
        attributes: BondAttributes,
        schedule: CashFlowSchedule,
    ) -> Result<Self> {
        let id = id.into();
        if !price.is_finite() || price <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "bond {id}: price {price} must be strictly positive"
            )));
        }
        if day_index(attributes.maturity) != day_index(schedule.maturity()) {
            return Err(Error::InvalidInput(format!(
                "bond {id}: attribute maturity {} disagrees with final payment time {}",
                attributes.maturity,
                schedule.maturity()
            )));
        }
        Ok(Self { id, price, attributes, schedule })
    }
}

/// Sales-share weights of an issuer across the declared industry categories.
///
/// Weights are non-negative and sum to one within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusinessPortfolio {
    weights: Vec<f64>,
}

impl BusinessPortfolio {
    /// Tolerance on the weight sum.
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("portfolio has no industry weights".into()));
        }
        for (j, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "portfolio weight {w} for industry {} is negative",
                    j + 1
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "portfolio weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    /// A portfolio fully concentrated in one industry (1-based) out of
    /// `industries`.
    pub fn single(industry: usize, industries: usize) -> Result<Self> {
        if industry == 0 || industry > industries {
            return Err(Error::InvalidInput(format!(
                "industry {industry} outside 1..={industries}"
            )));
        }
        let mut weights = vec![0.0; industries];
        weights[industry - 1] = 1.0;
        Self::new(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of industry categories.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// A corporate (defaultable) bond quote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorporateBond {
    pub id: String,
    /// Observed dirty price per 100 face value.
    pub price: f64,
    pub attributes: BondAttributes,
    pub schedule: CashFlowSchedule,
    /// Rating grade index, 1-based with 1 the highest grade.
    pub grade: usize,
    /// Issuer sales shares across industries.
    pub portfolio: BusinessPortfolio,
}

impl CorporateBond {
    /// Build a bond with a level-coupon schedule derived from the attributes.
    pub fn new(
        id: impl Into<String>,
        price: f64,
        coupon_rate: f64,
        maturity: f64,
        frequency: u32,
        grade: usize,
        portfolio: BusinessPortfolio,
    ) -> Result<Self> {
        let schedule = build_schedule(coupon_rate, maturity, frequency)?;
        Self::with_schedule(
            id,
            price,
            BondAttributes { coupon_rate, maturity },
            schedule,
            grade,
            portfolio,
        )
    }

    /// Build a bond with an explicit schedule.
    pub fn with_schedule(
        id: impl Into<String>,
        price: f64,
        attributes: BondAttributes,
        schedule: CashFlowSchedule,
        grade: usize,
        portfolio: BusinessPortfolio,
    ) -> Result<Self> {
        let id = id.into();
        if !price.is_finite() || price <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "bond {id}: price {price} must be strictly positive"
            )));
        }
        if grade == 0 {
            return Err(Error::InvalidInput(format!(
                "bond {id}: grade indices are 1-based"
            )));
        }
        if day_index(attributes.maturity) != day_index(schedule.maturity()) {
            return Err(Error::InvalidInput(format!(
                "bond {id}: attribute maturity {} disagrees with final payment time {}",
                attributes.maturity,
                schedule.maturity()
            )));
        }
        Ok(Self { id, price, attributes, schedule, grade, portfolio })
    }
}
