//! Market data files, model artifacts, and dataset assembly.
//!
//! Data files are CSV with declared headers — `gb.csv`
//! (`id,price,coupon,maturity`), `cb.csv` (`id,price,coupon,maturity,grade`),
//! `sales.csv` (`issuer_id` plus one column per industry), `positions.csv`
//! (`bond_id,units`) — and a JSON dataset config carrying the labels,
//! valuation date and payment frequency that the row formats cannot.  Model
//! artifacts are JSON with an explicit schema-version field.  Numeric fields
//! are written with full round-trip precision; six-decimal rounding is a
//! presentation concern of the CLI reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytics::PortfolioPosition;
use crate::cb::CreditFit;
use crate::error::{Error, Result};
use crate::gb::GbCurveModel;
use crate::instruments::{BusinessPortfolio, CorporateBond, GovernmentBond};

/// Version stamp of every JSON artifact this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Conventional rating ladder used when no labels are declared.
pub const DEFAULT_RATING_LABELS: [&str; 7] = ["AAA", "AA", "A", "BBB", "BB", "B", "CCC"];

/// Rating labels for `count` grades: the conventional ladder when it is long
/// enough, generic `G<i>` names otherwise.
pub fn default_rating_labels(count: usize) -> Vec<String> {
    if count <= DEFAULT_RATING_LABELS.len() {
        DEFAULT_RATING_LABELS[..count].iter().map(|s| s.to_string()).collect()
    } else {
        (1..=count).map(|i| format!("G{i}")).collect()
    }
}

/// Generic industry labels `IND1..INDj`.
pub fn default_industry_labels(count: usize) -> Vec<String> {
    (1..=count).map(|j| format!("IND{j}")).collect()
}

fn default_frequency() -> u32 {
    2
}

/// Dataset-level metadata that the CSV row formats cannot carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub valuation_date: String,
    pub industry_labels: Vec<String>,
    pub rating_labels: Vec<String>,
    /// Coupon payments per year for every bond in the dataset.
    #[serde(default = "default_frequency")]
    pub payment_frequency: u32,
}

fn check_labels(kind: &str, labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Validation(format!("no {kind} labels declared")));
    }
    for (i, label) in labels.iter().enumerate() {
        if label.trim().is_empty() {
            return Err(Error::Validation(format!("{kind} label {} is blank", i + 1)));
        }
        if labels[..i].contains(label) {
            return Err(Error::Validation(format!("duplicate {kind} label {label}")));
        }
    }
    Ok(())
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        check_labels("industry", &self.industry_labels)?;
        check_labels("rating", &self.rating_labels)?;
        if self.payment_frequency == 0 {
            return Err(Error::Validation("payment frequency must be at least 1".into()));
        }
        Ok(())
    }
}

/// A validated market snapshot: bond quotes plus the declared label spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketDataset {
    pub government_bonds: Vec<GovernmentBond>,
    pub corporate_bonds: Vec<CorporateBond>,
    pub industry_labels: Vec<String>,
    pub rating_labels: Vec<String>,
    pub valuation_date: String,
    pub payment_frequency: u32,
}

impl MarketDataset {
    /// Check every declared invariant: label spaces well-formed, identifiers
    /// unique, every corporate bond's grade and portfolio within the
    /// declared ranges.
    pub fn validate(&self) -> Result<()> {
        self.config().validate()?;
        let mut seen = std::collections::HashSet::new();
        for id in self
            .government_bonds
            .iter()
            .map(|b| &b.id)
            .chain(self.corporate_bonds.iter().map(|b| &b.id))
        {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate bond id {id}")));
            }
        }
        for bond in &self.corporate_bonds {
            if bond.grade > self.rating_labels.len() {
                return Err(Error::Validation(format!(
                    "bond {}: grade {} beyond the {} declared ratings",
                    bond.id,
                    bond.grade,
                    self.rating_labels.len()
                )));
            }
            if bond.portfolio.weights().len() != self.industry_labels.len() {
                return Err(Error::Validation(format!(
                    "bond {}: portfolio spans {} industries, {} declared",
                    bond.id,
                    bond.portfolio.weights().len(),
                    self.industry_labels.len()
                )));
            }
        }
        Ok(())
    }

    /// The metadata block as written to `config.json`.
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            valuation_date: self.valuation_date.clone(),
            industry_labels: self.industry_labels.clone(),
            rating_labels: self.rating_labels.clone(),
            payment_frequency: self.payment_frequency,
        }
    }

    /// Resolve a grade given as a rating label or a 1-based integer.
    pub fn grade_index(&self, token: &str) -> Result<usize> {
        parse_grade(token, &self.rating_labels)
    }
}

/// Resolve a grade token: a declared rating label, or a 1-based index.
pub fn parse_grade(token: &str, rating_labels: &[String]) -> Result<usize> {
    if let Some(pos) = rating_labels.iter().position(|l| l == token.trim()) {
        return Ok(pos + 1);
    }
    match token.trim().parse::<usize>() {
        Ok(idx) if idx >= 1 && idx <= rating_labels.len() => Ok(idx),
        Ok(idx) => Err(Error::Validation(format!(
            "grade {idx} outside the declared 1..={}",
            rating_labels.len()
        ))),
        Err(_) => Err(Error::Validation(format!(
            "unknown grade {token:?}; declared ratings: {}",
            rating_labels.join(", ")
        ))),
    }
}

/// Annualize a per-payment premium: payments per year times the per-payment
/// rate.
pub fn annualize_premium(per_payment: f64, payments_per_year: usize) -> f64 {
    per_payment * payments_per_year as f64
}

// ---------------------------------------------------------------------------
// CSV readers
// ---------------------------------------------------------------------------

struct RowErrors {
    path: String,
    rows: Vec<(usize, String)>,
}

impl RowErrors {
    fn new(path: &Path) -> Self {
        Self { path: path.display().to_string(), rows: Vec::new() }
    }

    fn push(&mut self, line: usize, message: impl Into<String>) {
        self.rows.push((line, message.into()));
    }

    fn finish(self) -> Result<()> {
        if self.rows.is_empty() {
            return Ok(());
        }
        // The error display already names the first failing line, so only
        // rows after the first need their own line tag.
        let first = self.rows[0].0;
        let message = self
            .rows
            .iter()
            .enumerate()
            .map(|(k, (line, msg))| {
                if k == 0 {
                    msg.clone()
                } else {
                    format!("line {line}: {msg}")
                }
            })
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Parse { path: self.path, line: first, message })
    }
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn parse_field<T: FromStr>(
    record: &csv::StringRecord,
    index: usize,
    name: &str,
) -> std::result::Result<T, String> {
    let raw = record
        .get(index)
        .ok_or_else(|| format!("missing {name} column"))?
        .trim();
    raw.parse::<T>().map_err(|_| format!("cannot parse {name} from {raw:?}"))
}

/// Open a CSV file and check its header row; a file with no content at all
/// yields `None` (an absent table, not an error).
fn open_csv(path: &Path, expected: &[&str]) -> Result<Option<csv::Reader<fs::File>>> {
    let metadata = fs::metadata(path)?;
    if metadata.len() == 0 {
        return Ok(None);
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> =
        reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Ok(None);
    }
    if headers != expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("expected header {:?}, got {:?}", expected.join(","), headers.join(",")),
        });
    }
    Ok(Some(reader))
}

/// Read `gb.csv` (`id,price,coupon,maturity`), building level-coupon
/// schedules at the dataset payment frequency.
pub fn load_gb_csv(path: &Path, frequency: u32) -> Result<Vec<GovernmentBond>> {
    let Some(mut reader) = open_csv(path, &["id", "price", "coupon", "maturity"])? else {
        return Ok(Vec::new());
    };
    let mut bonds = Vec::new();
    let mut errors = RowErrors::new(path);
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        let parsed = (|| -> std::result::Result<GovernmentBond, String> {
            let id: String = parse_field(&record, 0, "id")?;
            let price: f64 = parse_field(&record, 1, "price")?;
            let coupon: f64 = parse_field(&record, 2, "coupon")?;
            let maturity: f64 = parse_field(&record, 3, "maturity")?;
            GovernmentBond::new(id, price, coupon, maturity, frequency)
                .map_err(|e| e.to_string())
        })();
        match parsed {
            Ok(bond) => bonds.push(bond),
            Err(message) => errors.push(line, message),
        }
    }
    errors.finish()?;
    Ok(bonds)
}

/// Read `sales.csv` (`issuer_id` plus one weight column per declared
/// industry) into issuer portfolios.
///
/// Weight rows must sum to 1 within 1e-6; sums off by more than the
/// portfolio tolerance but within 1e-6 are renormalized with a warning.
pub fn load_sales_csv(
    path: &Path,
    industry_labels: &[String],
) -> Result<BTreeMap<String, BusinessPortfolio>> {
    let mut expected: Vec<&str> = vec!["issuer_id"];
    expected.extend(industry_labels.iter().map(String::as_str));
    let Some(mut reader) = open_csv(path, &expected)? else {
        return Ok(BTreeMap::new());
    };
    let mut portfolios = BTreeMap::new();
    let mut errors = RowErrors::new(path);
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        let issuer = match parse_field::<String>(&record, 0, "issuer_id") {
            Ok(id) => id,
            Err(message) => {
                errors.push(line, message);
                continue;
            }
        };
        let mut weights = Vec::with_capacity(industry_labels.len());
        let mut bad = false;
        for (j, label) in industry_labels.iter().enumerate() {
            match parse_field::<f64>(&record, j + 1, label) {
                Ok(w) => weights.push(w),
                Err(message) => {
                    errors.push(line, message);
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            continue;
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "issuer {issuer}: sales weights sum to {sum}, not 1"
            )));
        }
        if (sum - 1.0).abs() > BusinessPortfolio::SUM_TOLERANCE {
            log::warn!("issuer {issuer}: sales weights sum to {sum}; renormalizing");
            for w in &mut weights {
                *w /= sum;
            }
        }
        match BusinessPortfolio::new(weights) {
            Ok(p) => {
                if portfolios.insert(issuer.clone(), p).is_some() {
                    return Err(Error::Validation(format!("duplicate sales row for issuer {issuer}")));
                }
            }
            Err(e) => errors.push(line, format!("issuer {issuer}: {e}")),
        }
    }
    errors.finish()?;
    Ok(portfolios)
}

/// Recover the industry labels from a `sales.csv` header (every column
/// after `issuer_id`), for callers without a dataset config.
pub fn sales_industry_labels(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> =
        reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.first().map(String::as_str) != Some("issuer_id") || headers.len() < 2 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!(
                "expected header issuer_id,<industry...>, got {:?}",
                headers.join(",")
            ),
        });
    }
    Ok(headers[1..].to_vec())
}

/// Read `cb.csv` (`id,price,coupon,maturity,grade`); the grade column takes
/// a declared rating label or a 1-based index, and each bond id must have a
/// sales row supplying its portfolio.
pub fn load_cb_csv(
    path: &Path,
    frequency: u32,
    rating_labels: &[String],
    sales: &BTreeMap<String, BusinessPortfolio>,
) -> Result<Vec<CorporateBond>> {
    let Some(mut reader) = open_csv(path, &["id", "price", "coupon", "maturity", "grade"])? else {
        return Ok(Vec::new());
    };
    let mut bonds = Vec::new();
    let mut errors = RowErrors::new(path);
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        let parsed = (|| -> std::result::Result<CorporateBond, String> {
            let id: String = parse_field(&record, 0, "id")?;
            let price: f64 = parse_field(&record, 1, "price")?;
            let coupon: f64 = parse_field(&record, 2, "coupon")?;
            let maturity: f64 = parse_field(&record, 3, "maturity")?;
            let grade_token: String = parse_field(&record, 4, "grade")?;
            let grade = parse_grade(&grade_token, rating_labels).map_err(|e| e.to_string())?;
            let portfolio = sales
                .get(&id)
                .cloned()
                .ok_or_else(|| format!("no sales row for issuer {id}"))?;
            CorporateBond::new(id, price, coupon, maturity, frequency, grade, portfolio)
                .map_err(|e| e.to_string())
        })();
        match parsed {
            Ok(bond) => bonds.push(bond),
            Err(message) => errors.push(line, message),
        }
    }
    errors.finish()?;
    Ok(bonds)
}

/// Load and validate a full market snapshot from its four files.
pub fn load_market_data(
    gb_path: &Path,
    cb_path: &Path,
    sales_path: &Path,
    config_path: &Path,
) -> Result<MarketDataset> {
    let config: DatasetConfig = serde_json::from_str(&fs::read_to_string(config_path)?)?;
    config.validate()?;
    let sales = load_sales_csv(sales_path, &config.industry_labels)?;
    let government_bonds = load_gb_csv(gb_path, config.payment_frequency)?;
    let corporate_bonds =
        load_cb_csv(cb_path, config.payment_frequency, &config.rating_labels, &sales)?;
    let dataset = MarketDataset {
        government_bonds,
        corporate_bonds,
        industry_labels: config.industry_labels,
        rating_labels: config.rating_labels,
        valuation_date: config.valuation_date,
        payment_frequency: config.payment_frequency,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

/// Write a dataset to `gb.csv`, `cb.csv`, `sales.csv` and `config.json`
/// under `dir`, with full numeric precision so a reload reproduces the
/// dataset exactly.
pub fn save_market_data(dataset: &MarketDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;

    let mut gb = csv::Writer::from_path(dir.join("gb.csv"))?;
    gb.write_record(["id", "price", "coupon", "maturity"])?;
    for bond in &dataset.government_bonds {
        gb.write_record([
            bond.id.clone(),
            format!("{}", bond.price),
            format!("{}", bond.attributes.coupon_rate),
            format!("{}", bond.attributes.maturity),
        ])?;
    }
    gb.flush()?;

    let mut cb = csv::Writer::from_path(dir.join("cb.csv"))?;
    cb.write_record(["id", "price", "coupon", "maturity", "grade"])?;
    for bond in &dataset.corporate_bonds {
        cb.write_record([
            bond.id.clone(),
            format!("{}", bond.price),
            format!("{}", bond.attributes.coupon_rate),
            format!("{}", bond.attributes.maturity),
            dataset.rating_labels[bond.grade - 1].clone(),
        ])?;
    }
    cb.flush()?;

    let mut sales = csv::Writer::from_path(dir.join("sales.csv"))?;
    let mut header = vec!["issuer_id".to_string()];
    header.extend(dataset.industry_labels.iter().cloned());
    sales.write_record(&header)?;
    for bond in &dataset.corporate_bonds {
        let mut row = vec![bond.id.clone()];
        row.extend(bond.portfolio.weights().iter().map(|w| format!("{w}")));
        sales.write_record(&row)?;
    }
    sales.flush()?;

    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&dataset.config())?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Model artifacts
// ---------------------------------------------------------------------------

/// `gb_model.json`: a fitted discount curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbModelArtifact {
    pub schema_version: u32,
    pub model: GbCurveModel,
}

/// `credit_fit.json`: a credit fit together with the bonds it was estimated
/// on (so downstream commands can price them by id) and the label spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditFitArtifact {
    pub schema_version: u32,
    pub fit: CreditFit,
    pub bonds: Vec<CorporateBond>,
    pub industry_labels: Vec<String>,
    pub rating_labels: Vec<String>,
}

fn check_schema(version: u32, path: &Path) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Validation(format!(
            "{}: schema version {version} unsupported (this build reads {SCHEMA_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn save_gb_model(path: &Path, model: &GbCurveModel) -> Result<()> {
    let artifact = GbModelArtifact { schema_version: SCHEMA_VERSION, model: model.clone() };
    fs::write(path, serde_json::to_string_pretty(&artifact)?)?;
    Ok(())
}

pub fn load_gb_model(path: &Path) -> Result<GbCurveModel> {
    let artifact: GbModelArtifact = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(artifact.schema_version, path)?;
    Ok(artifact.model)
}

pub fn save_credit_fit(path: &Path, artifact: &CreditFitArtifact) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(artifact)?)?;
    Ok(())
}

pub fn load_credit_fit(path: &Path) -> Result<CreditFitArtifact> {
    let artifact: CreditFitArtifact = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(artifact.schema_version, path)?;
    Ok(artifact)
}

/// Read `positions.csv` (`bond_id,units`), resolving each id against the
/// bonds embedded in a credit-fit artifact.
pub fn load_positions(path: &Path, bonds: &[CorporateBond]) -> Result<Vec<PortfolioPosition>> {
    let Some(mut reader) = open_csv(path, &["bond_id", "units"])? else {
        return Ok(Vec::new());
    };
    let by_id: BTreeMap<&str, &CorporateBond> =
        bonds.iter().map(|b| (b.id.as_str(), b)).collect();
    let mut positions = Vec::new();
    let mut errors = RowErrors::new(path);
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        let parsed = (|| -> std::result::Result<PortfolioPosition, String> {
            let id: String = parse_field(&record, 0, "bond_id")?;
            let units: f64 = parse_field(&record, 1, "units")?;
            let bond = by_id
                .get(id.as_str())
                .ok_or_else(|| format!("bond {id} not present in the credit fit"))?;
            PortfolioPosition::new((*bond).clone(), units).map_err(|e| e.to_string())
        })();
        match parsed {
            Ok(position) => positions.push(position),
            Err(message) => errors.push(line, message),
        }
    }
    errors.finish()?;
    Ok(positions)
}
