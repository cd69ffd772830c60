//! Synthetic market generation with known true parameters.
//!
//! The generator inverts the pricing models: it draws schedules, computes
//! exact model prices, and adds a mean-zero error vector drawn from the same
//! structured covariance the estimators assume.  The true parameters are
//! returned alongside the dataset so fits can be scored against them.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cb::{
    cb_covariance, expected_cashflow, CbCovarianceParams, RecoveryRates, TsdpCoefficients,
};
use crate::error::{Error, Result};
use crate::gb::{gb_covariance, AttributeSet, DiscountCoefficients, GbCovarianceParams};
use crate::instruments::{BusinessPortfolio, CorporateBond, GovernmentBond};
use crate::io::{default_industry_labels, default_rating_labels, MarketDataset};

/// Identifier of the draw algorithm, stored in generated metadata so oracle
/// datasets are reproducible across implementations of the same generator.
pub const RNG_ALGORITHM: &str = "chacha8(seed)/ziggurat-standard-normal";

/// Residual noise scale of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseLevel {
    /// The covariance scale directly; zero means exact model prices.
    Sigma2(f64),
    /// Choose the scale so the average marginal residual standard deviation
    /// (per 100 face) matches this target.
    ResidualStd(f64),
}

impl NoiseLevel {
    fn validate(&self) -> Result<()> {
        let v = match self {
            NoiseLevel::Sigma2(v) | NoiseLevel::ResidualStd(v) => *v,
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidInput(format!(
                "noise level {v} must be finite and non-negative"
            )));
        }
        Ok(())
    }

    /// Resolve to a `sigma2` given the unit-scale covariance of the scenario.
    fn resolve(&self, unit_covariance: &DMatrix<f64>) -> f64 {
        match *self {
            NoiseLevel::Sigma2(v) => v,
            NoiseLevel::ResidualStd(target) => {
                let mean_diag = unit_covariance.diagonal().mean();
                target * target / mean_diag
            }
        }
    }
}

/// Coupon/maturity sampling ranges and the payment frequency of generated
/// schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSettings {
    pub coupon_min: f64,
    pub coupon_max: f64,
    pub maturity_min: f64,
    pub maturity_max: f64,
    pub frequency: u32,
}

impl ScheduleSettings {
    fn validate(&self) -> Result<()> {
        if !(self.coupon_min.is_finite() && self.coupon_max.is_finite())
            || self.coupon_min < 0.0
            || self.coupon_max < self.coupon_min
        {
            return Err(Error::InvalidInput(format!(
                "coupon range [{}, {}] is invalid",
                self.coupon_min, self.coupon_max
            )));
        }
        if !(self.maturity_min.is_finite() && self.maturity_max.is_finite())
            || self.maturity_min <= 0.0
            || self.maturity_max < self.maturity_min
        {
            return Err(Error::InvalidInput(format!(
                "maturity range [{}, {}] is invalid",
                self.maturity_min, self.maturity_max
            )));
        }
        if self.frequency == 0 {
            return Err(Error::InvalidInput("payment frequency must be at least 1".into()));
        }
        Ok(())
    }
}

/// True government-bond model for generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbScenario {
    /// Number of bonds `G`.
    pub count: usize,
    /// Polynomial order `p`.
    pub order: usize,
    pub attributes: AttributeSet,
    /// Dense coefficients, `3 p` values in power-major order
    /// (constant, coupon, maturity per power); inactive loadings must be 0.
    pub coefficients: Vec<f64>,
    pub theta: f64,
    pub rho: f64,
    pub xi: f64,
    pub noise: NoiseLevel,
    pub schedule: ScheduleSettings,
}

/// True corporate-bond model for generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbScenario {
    /// Bonds per grade, `K_i`; the length sets the number of grades.
    pub counts: Vec<usize>,
    /// Number of industries `J`.
    pub industries: usize,
    /// TSDP polynomial order `q`.
    pub order: usize,
    /// `alpha_h^{ij}` flattened grade-major, then power, then industry.
    pub tsdp: Vec<f64>,
    /// Recovery rate per grade.
    pub gamma: Vec<f64>,
    pub theta: f64,
    /// Grade-pair correlations, `I x I` symmetric in [0, 1].
    pub rho: Vec<Vec<f64>>,
    /// Grade-pair maturity-decay rates, `I x I` symmetric.
    pub xi: Vec<Vec<f64>>,
    pub noise: NoiseLevel,
    pub schedule: ScheduleSettings,
}

/// Everything the generator needs: the true models plus label metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    #[serde(default = "default_valuation_date")]
    pub valuation_date: String,
    /// Defaults to `IND1..INDj` when absent.
    #[serde(default)]
    pub industry_labels: Option<Vec<String>>,
    /// Defaults to the conventional rating ladder when absent.
    #[serde(default)]
    pub rating_labels: Option<Vec<String>>,
    pub gb: GbScenario,
    #[serde(default)]
    pub cb: Option<CbScenario>,
}

fn default_valuation_date() -> String {
    "1990-01-01".to_string()
}

/// The true parameters behind a generated dataset, with resolved noise
/// scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbTruth {
    pub coefficients: DiscountCoefficients,
    pub attributes: AttributeSet,
    pub sigma2: f64,
    pub theta: f64,
    pub rho: f64,
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbTruth {
    pub tsdp: TsdpCoefficients,
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    pub theta: f64,
    pub rho: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub seed: u64,
    pub rng_algorithm: String,
    pub gb: GbTruth,
    pub cb: Option<CbTruth>,
}

/// A generated dataset together with the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    pub dataset: MarketDataset,
    pub truth: TrueParameters,
}

impl SyntheticConfig {
    fn validate_and_types(&self) -> Result<(DiscountCoefficients, Option<(TsdpCoefficients, RecoveryRates)>)> {
        if self.gb.count == 0 {
            return Err(Error::InvalidInput("need at least one government bond".into()));
        }
        self.gb.schedule.validate()?;
        self.gb.noise.validate()?;
        for (name, v) in
            [("theta", self.gb.theta), ("rho", self.gb.rho), ("xi", self.gb.xi)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!("gb {name} = {v} is out of range")));
            }
        }
        if self.gb.rho > 1.0 {
            return Err(Error::InvalidInput(format!("gb rho = {} exceeds 1", self.gb.rho)));
        }
        let deltas = DiscountCoefficients::new(self.gb.order, self.gb.coefficients.clone())?;
        let mask = self.gb.attributes.mask();
        for power in 1..=self.gb.order {
            for attr in 0..3 {
                if !mask[attr] && deltas.loading(power, attr) != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "gb coefficient at power {power}, attribute {attr} must be 0: \
                         that loading is switched off"
                    )));
                }
            }
        }
        let cb_types = match &self.cb {
            None => None,
            Some(cb) => {
                if cb.counts.is_empty() || cb.counts.iter().any(|&k| k == 0) {
                    return Err(Error::InvalidInput(
                        "every grade needs at least one corporate bond".into(),
                    ));
                }
                cb.schedule.validate()?;
                cb.noise.validate()?;
                let grades = cb.counts.len();
                let tsdp =
                    TsdpCoefficients::new(grades, cb.industries, cb.order, cb.tsdp.clone())?;
                let recovery = RecoveryRates::new(cb.gamma.clone())?;
                if recovery.grades() != grades {
                    return Err(Error::InvalidInput(format!(
                        "{} recovery rates for {grades} grades",
                        recovery.grades()
                    )));
                }
                // Borrow the covariance validator for the matrix invariants.
                CbCovarianceParams {
                    sigma2: 1.0,
                    theta: cb.theta,
                    rho: cb.rho.clone(),
                    xi: cb.xi.clone(),
                }
                .validate()?;
                if cb.rho.len() != grades {
                    return Err(Error::InvalidInput(format!(
                        "rho is {}x{} for {grades} grades",
                        cb.rho.len(),
                        cb.rho.len()
                    )));
                }
                Some((tsdp, recovery))
            }
        };
        Ok((deltas, cb_types))
    }
}

fn draw_noise(
    unit_covariance: DMatrix<f64>,
    sigma2: f64,
    rng: &mut ChaCha8Rng,
    what: &str,
) -> Result<DVector<f64>> {
    let n = unit_covariance.nrows();
    let chol = Cholesky::new(unit_covariance * sigma2).ok_or_else(|| {
        Error::Generation(format!(
            "requested {what} noise covariance is not positive definite"
        ))
    })?;
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

/// Draw portfolio weights summing to 1 exactly.
fn draw_portfolio(rng: &mut ChaCha8Rng, industries: usize) -> BusinessPortfolio {
    let mut weights: Vec<f64> = (0..industries).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    let head: f64 = weights[..industries - 1].iter().sum();
    weights[industries - 1] = 1.0 - head;
    BusinessPortfolio::new(weights).expect("normalized weights")
}

/// Generate a market snapshot from the configured true models.
///
/// Prices are exact model values plus a draw from the model covariance;
/// the output is bit-identical for a fixed seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticMarket> {
    let (deltas, cb_types) = config.validate_and_types()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Government bonds: schedules first, then one noise vector.
    let mut government_bonds = Vec::with_capacity(config.gb.count);
    let sched = &config.gb.schedule;
    for g in 0..config.gb.count {
        let coupon = rng.random_range(sched.coupon_min..=sched.coupon_max);
        let maturity = rng.random_range(sched.maturity_min..=sched.maturity_max);
        let mut bond =
            GovernmentBond::new(format!("GB{:03}", g + 1), 100.0, coupon, maturity, sched.frequency)?;
        bond.price = bond
            .schedule
            .times()
            .iter()
            .zip(bond.schedule.amounts())
            .map(|(&t, &c)| c * deltas.mean_discount(&bond.attributes, t))
            .sum();
        government_bonds.push(bond);
    }
    let unit = gb_covariance(
        &government_bonds,
        &GbCovarianceParams {
            sigma2: 1.0,
            theta: config.gb.theta,
            rho: config.gb.rho,
            xi: config.gb.xi,
        },
    )?;
    let gb_sigma2 = config.gb.noise.resolve(&unit);
    if gb_sigma2 > 0.0 {
        let eta = draw_noise(unit, gb_sigma2, &mut rng, "government-bond")?;
        for (bond, e) in government_bonds.iter_mut().zip(eta.iter()) {
            bond.price += e;
            if !(bond.price > 0.0) {
                return Err(Error::Generation(format!(
                    "noise drove the price of {} to {}; lower the noise level",
                    bond.id, bond.price
                )));
            }
        }
    }

    // Corporate bonds, grade by grade, then one stacked noise vector.
    let mut corporate_bonds = Vec::new();
    let mut cb_truth = None;
    if let (Some(cb), Some((tsdp, recovery))) = (&config.cb, cb_types) {
        let sched = &cb.schedule;
        for (i, &count) in cb.counts.iter().enumerate() {
            let grade = i + 1;
            for k in 0..count {
                let coupon = rng.random_range(sched.coupon_min..=sched.coupon_max);
                let maturity = rng.random_range(sched.maturity_min..=sched.maturity_max);
                let portfolio = draw_portfolio(&mut rng, cb.industries);
                let mut bond = CorporateBond::new(
                    format!("CB{grade}-{:03}", k + 1),
                    100.0,
                    coupon,
                    maturity,
                    sched.frequency,
                    grade,
                    portfolio,
                )?;
                let flows = expected_cashflow(&bond, &tsdp, &recovery)?;
                bond.price = bond
                    .schedule
                    .times()
                    .iter()
                    .zip(&flows)
                    .map(|(&t, &c)| c * deltas.mean_discount(&bond.attributes, t))
                    .sum();
                corporate_bonds.push(bond);
            }
        }
        let unit = cb_covariance(
            &corporate_bonds,
            &tsdp,
            &recovery,
            &CbCovarianceParams {
                sigma2: 1.0,
                theta: cb.theta,
                rho: cb.rho.clone(),
                xi: cb.xi.clone(),
            },
        )?;
        let cb_sigma2 = cb.noise.resolve(&unit);
        if cb_sigma2 > 0.0 {
            let eps = draw_noise(unit, cb_sigma2, &mut rng, "corporate-bond")?;
            for (bond, e) in corporate_bonds.iter_mut().zip(eps.iter()) {
                bond.price += e;
                if !(bond.price > 0.0) {
                    return Err(Error::Generation(format!(
                        "noise drove the price of {} to {}; lower the noise level",
                        bond.id, bond.price
                    )));
                }
            }
        }
        cb_truth = Some(CbTruth {
            tsdp,
            gamma: cb.gamma.clone(),
            sigma2: cb_sigma2,
            theta: cb.theta,
            rho: cb.rho.clone(),
            xi: cb.xi.clone(),
        });
    }

    let industries = config.cb.as_ref().map(|c| c.industries).unwrap_or(1);
    let grades = config.cb.as_ref().map(|c| c.counts.len()).unwrap_or(1);
    let industry_labels = match &config.industry_labels {
        Some(labels) if labels.len() == industries => labels.clone(),
        Some(labels) => {
            return Err(Error::InvalidInput(format!(
                "{} industry labels for {industries} industries",
                labels.len()
            )))
        }
        None => default_industry_labels(industries),
    };
    let rating_labels = match &config.rating_labels {
        Some(labels) if labels.len() == grades => labels.clone(),
        Some(labels) => {
            return Err(Error::InvalidInput(format!(
                "{} rating labels for {grades} grades",
                labels.len()
            )))
        }
        None => default_rating_labels(grades),
    };

    let dataset = MarketDataset {
        government_bonds,
        corporate_bonds,
        industry_labels,
        rating_labels,
        valuation_date: config.valuation_date.clone(),
        payment_frequency: config.gb.schedule.frequency,
    };
    dataset.validate()?;
    Ok(SyntheticMarket {
        dataset,
        truth: TrueParameters {
            seed: config.seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            gb: GbTruth {
                coefficients: deltas,
                attributes: config.gb.attributes,
                sigma2: gb_sigma2,
                theta: config.gb.theta,
                rho: config.gb.rho,
                xi: config.gb.xi,
            },
            cb: cb_truth,
        },
    })
}
