//! Command-line interface to the credit curve calibration engine.
//!
//! Subcommands mirror the library pipeline: fit a government-bond discount
//! curve, fit corporate-bond default probabilities and recovery rates
//! against it, then query the fitted models (TSDP curves, fair spreads,
//! portfolio decompositions, CDS premia) or generate synthetic markets.
//!
//! Exit codes: 0 on success, 1 for invalid input or validation problems,
//! 2 for numerical failures.  `CREDITCURVE_THREADS` caps worker parallelism
//! (0 or unset = automatic).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use creditcurve::analytics;
use creditcurve::cb;
use creditcurve::cds;
use creditcurve::gb;
use creditcurve::gls::GridSpec;
use creditcurve::instruments::DAYS_PER_YEAR;
use creditcurve::io;
use creditcurve::synth;
use creditcurve::{Error, Result};

#[derive(Parser)]
#[command(
    name = "creditcurve",
    version,
    about = "Calibrate discount curves, default probabilities and recovery rates from bond prices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the government-bond mean discount curve.
    FitGb(FitGbArgs),
    /// Fit default probabilities and recovery rates from corporate bonds.
    FitCb(FitCbArgs),
    /// Sample an implied default-probability curve to CSV.
    Tsdp(TsdpArgs),
    /// Fair spread of one fitted corporate bond.
    Spread(SpreadArgs),
    /// Decompose a bond portfolio into expected inflow and loss flows.
    Portfolio(PortfolioArgs),
    /// Price a credit default swap on a fitted issuer.
    Cds(CdsArgs),
    /// Generate a synthetic market with known true parameters.
    Synth(SynthArgs),
}

#[derive(Args)]
struct FitGbArgs {
    /// Government bond quotes (id,price,coupon,maturity).
    #[arg(long)]
    input: PathBuf,
    /// Dataset config JSON (labels, payment frequency); frequency defaults
    /// to biannual without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Discount polynomial order p.
    #[arg(long)]
    order: usize,
    /// Covariance search grid: "default" or a path to a grid JSON.
    #[arg(long, default_value = "default")]
    grid: String,
    /// Output model artifact (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Switch off the coupon and maturity attribute loadings.
    #[arg(long)]
    attribute_free: bool,
}

#[derive(Args)]
struct FitCbArgs {
    /// Fitted government-bond model artifact.
    #[arg(long)]
    gb_model: PathBuf,
    /// Corporate bond quotes (id,price,coupon,maturity,grade).
    #[arg(long)]
    cb: PathBuf,
    /// Issuer sales portfolios (issuer_id plus one column per industry).
    #[arg(long)]
    sales: PathBuf,
    /// Dataset config JSON; without it industry labels come from the sales
    /// header and ratings default to the conventional ladder.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TSDP polynomial orders to consider: "2:6" or a single "3".
    #[arg(long)]
    q_range: String,
    /// Per-grade search grid (gamma, rho, xi, theta): "default" or a path.
    #[arg(long, default_value = "default")]
    grade_grid: String,
    /// Cross-grade search grid (rho, xi): "default" or a path.
    #[arg(long, default_value = "default")]
    cross_grid: String,
    /// Output credit-fit artifact (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TsdpArgs {
    /// Credit-fit artifact.
    #[arg(long)]
    fit: PathBuf,
    /// Rating grade: a declared label (AA) or 1-based index.
    #[arg(long)]
    grade: String,
    /// Industry: a declared label or 1-based index.
    #[arg(long)]
    industry: String,
    /// Tenor grid start:end:step in years, e.g. 0:10:0.25.
    #[arg(long)]
    grid: String,
    /// Output CSV (s,probability).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpreadArgs {
    /// Credit-fit artifact.
    #[arg(long)]
    fit: PathBuf,
    /// Fitted government-bond model artifact.
    #[arg(long)]
    gb_model: PathBuf,
    /// Bond to price, by id from the fit's embedded bonds.
    #[arg(long)]
    bond_id: String,
}

#[derive(Args)]
struct PortfolioArgs {
    /// Credit-fit artifact.
    #[arg(long)]
    fit: PathBuf,
    /// Fitted government-bond model artifact.
    #[arg(long)]
    gb_model: PathBuf,
    /// Holdings (bond_id,units) referencing the fit's embedded bonds.
    #[arg(long)]
    positions: PathBuf,
    /// Output CSV (time,inflow,loss,combined); durations print to stdout.
    #[arg(long)]
    out: PathBuf,
    /// Accept negative unit counts.
    #[arg(long)]
    allow_short: bool,
}

#[derive(Args)]
struct CdsArgs {
    /// Credit-fit artifact.
    #[arg(long)]
    fit: PathBuf,
    /// Attribute-free government-bond model artifact used for discounting.
    #[arg(long)]
    discount: PathBuf,
    /// Reference issuer, by bond id from the fit's embedded bonds.
    #[arg(long)]
    issuer: String,
    /// Contract horizon in years.
    #[arg(long)]
    horizon_years: f64,
    /// Premium payments per year.
    #[arg(long)]
    freq: usize,
    /// Also price by Monte Carlo with this many paths.
    #[arg(long)]
    mc_paths: Option<usize>,
    /// Monte Carlo seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Days between default and the protection payment (Monte Carlo only).
    #[arg(long, default_value_t = 0)]
    pay_lag_days: usize,
    /// Days between default and the recovery payment (Monte Carlo only).
    #[arg(long, default_value_t = 0)]
    recovery_lag_days: usize,
    /// Quadrature step (years) for the continuous-time premium.
    #[arg(long, default_value_t = 1.0 / DAYS_PER_YEAR)]
    quad_step: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory for gb.csv, cb.csv, sales.csv, config.json, truth.json.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CREDITCURVE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Error::InvalidInput(format!("CREDITCURVE_THREADS = {raw:?} is not a number"))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("cannot build thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitGb(args) => fit_gb_cmd(args),
        Command::FitCb(args) => fit_cb_cmd(args),
        Command::Tsdp(args) => tsdp_cmd(args),
        Command::Spread(args) => spread_cmd(args),
        Command::Portfolio(args) => portfolio_cmd(args),
        Command::Cds(args) => cds_cmd(args),
        Command::Synth(args) => synth_cmd(args),
    }
}

/// Resolve a grid argument: the literal "default" or a GridSpec JSON path.
fn parse_grid(token: &str, default_names: &[&str]) -> Result<GridSpec> {
    if token == "default" {
        return Ok(GridSpec::default_for(default_names));
    }
    let spec: GridSpec = serde_json::from_str(&fs::read_to_string(token)?)?;
    Ok(spec)
}

/// Parse "a:b" or a single "q" into an inclusive order range.
fn parse_q_range(token: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || Error::InvalidInput(format!("cannot parse q range {token:?}; expected q or lo:hi"));
    match token.split_once(':') {
        None => {
            let q: usize = token.trim().parse().map_err(|_| bad())?;
            Ok(q..=q)
        }
        Some((lo, hi)) => {
            let lo: usize = lo.trim().parse().map_err(|_| bad())?;
            let hi: usize = hi.trim().parse().map_err(|_| bad())?;
            if lo == 0 || hi < lo {
                return Err(bad());
            }
            Ok(lo..=hi)
        }
    }
}

/// Parse "start:end:step" into a tenor grid with `floor((end-start)/step)+1`
/// points.
fn parse_sample_grid(token: &str) -> Result<Vec<f64>> {
    let bad =
        || Error::InvalidInput(format!("cannot parse grid {token:?}; expected start:end:step"));
    let parts: Vec<&str> = token.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let end: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let step: f64 = parts[2].trim().parse().map_err(|_| bad())?;
    if !start.is_finite() || !end.is_finite() || !(step > 0.0) || end < start || start < 0.0 {
        return Err(bad());
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// Resolve a 1-based index given as a label or an integer.
fn parse_label_index(token: &str, labels: &[String], kind: &str) -> Result<usize> {
    if let Some(pos) = labels.iter().position(|l| l == token.trim()) {
        return Ok(pos + 1);
    }
    match token.trim().parse::<usize>() {
        Ok(idx) if idx >= 1 && idx <= labels.len() => Ok(idx),
        _ => Err(Error::Validation(format!(
            "unknown {kind} {token:?}; declared: {}",
            labels.join(", ")
        ))),
    }
}

fn find_bond<'a>(
    bonds: &'a [creditcurve::instruments::CorporateBond],
    id: &str,
) -> Result<&'a creditcurve::instruments::CorporateBond> {
    bonds.iter().find(|b| b.id == id).ok_or_else(|| {
        Error::Validation(format!("bond {id} is not among the fit's {} bonds", bonds.len()))
    })
}

fn attribute_name(attrs: &gb::AttributeSet) -> &'static str {
    if *attrs == gb::AttributeSet::constant_only() {
        "constant only"
    } else if *attrs == gb::AttributeSet::full() {
        "constant+coupon+maturity"
    } else {
        "custom"
    }
}

fn fit_gb_cmd(args: FitGbArgs) -> Result<()> {
    let frequency = match &args.config {
        Some(path) => {
            let config: io::DatasetConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
            config.validate()?;
            config.payment_frequency
        }
        None => 2,
    };
    let bonds = io::load_gb_csv(&args.input, frequency)?;
    let grid = parse_grid(&args.grid, &["theta", "rho", "xi"])?;
    let model = if args.attribute_free {
        gb::fit_attribute_free(&bonds, args.order, &grid)?
    } else {
        gb::fit_gb(&bonds, args.order, &grid)?
    };
    io::save_gb_model(&args.out, &model)?;
    let cov = &model.covariance;
    println!("government-bond curve fit");
    println!(
        "  bonds: {}, order: {}, attributes: {}",
        bonds.len(),
        args.order,
        attribute_name(&model.attributes)
    );
    println!(
        "  theta: {:.6}  rho: {:.6}  xi: {:.6}  sigma2: {:.6e}",
        cov.theta, cov.rho, cov.xi, cov.sigma2
    );
    println!("  residual std: {:.6e}", model.diagnostics.residual_std);
    println!(
        "  objective: {:.6}  grid evaluations: {}",
        model.diagnostics.objective, model.diagnostics.grid_evaluations
    );
    println!("  model written to {}", args.out.display());
    Ok(())
}

fn fit_cb_cmd(args: FitCbArgs) -> Result<()> {
    let (industry_labels, mut rating_labels, frequency) = match &args.config {
        Some(path) => {
            let config: io::DatasetConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
            config.validate()?;
            (config.industry_labels, config.rating_labels, config.payment_frequency)
        }
        None => (
            io::sales_industry_labels(&args.sales)?,
            io::default_rating_labels(io::DEFAULT_RATING_LABELS.len()),
            2,
        ),
    };
    let sales = io::load_sales_csv(&args.sales, &industry_labels)?;
    let bonds = io::load_cb_csv(&args.cb, frequency, &rating_labels, &sales)?;
    if bonds.is_empty() {
        return Err(Error::InvalidInput("no corporate bonds to fit".into()));
    }
    let gb_model = io::load_gb_model(&args.gb_model)?;
    let q_range = parse_q_range(&args.q_range)?;
    let grade_grid = parse_grid(&args.grade_grid, &["gamma", "rho", "xi", "theta"])?;
    let cross_grid = parse_grid(&args.cross_grid, &["rho", "xi"])?;
    let fit = cb::select_order(&bonds, &gb_model, q_range, &grade_grid, &cross_grid)?;
    rating_labels.truncate(fit.grades());

    println!("corporate-bond credit fit");
    println!(
        "  bonds: {}, grades: {}, industries: {}, selected order q: {}",
        bonds.len(),
        fit.grades(),
        fit.industries(),
        fit.order()
    );
    for diag in &fit.diagnostics.per_grade {
        println!(
            "  grade {} ({}): K = {}, gamma: {:.6}, rho: {:.6}, xi: {:.6}, residual std: {:.6e}",
            rating_labels[diag.grade - 1],
            diag.grade,
            diag.bond_count,
            diag.gamma,
            diag.rho,
            diag.xi,
            diag.residual_std
        );
    }
    println!(
        "  pooled theta: {:.6}  sigma2: {:.6e}",
        fit.covariance.theta, fit.covariance.sigma2
    );
    for i in 0..fit.grades() {
        for j in (i + 1)..fit.grades() {
            println!(
                "  cross grade ({}, {}): rho: {:.6}, xi: {:.6}",
                i + 1,
                j + 1,
                fit.covariance.rho[i][j],
                fit.covariance.xi[i][j]
            );
        }
    }
    for candidate in &fit.diagnostics.selection {
        println!(
            "  order candidate q = {}: criterion {:.6}",
            candidate.order, candidate.criterion
        );
    }
    for curve in &fit.diagnostics.curves {
        if curve.exits_unit_interval || curve.decreasing {
            println!(
                "  warning: TSDP (grade {}, industry {}) {}{} on ({:.2}, {:.2})",
                curve.grade,
                curve.industry,
                if curve.exits_unit_interval { "leaves [0,1] " } else { "" },
                if curve.decreasing { "decreases" } else { "" },
                curve.maturity_span.0,
                curve.maturity_span.1
            );
        }
    }
    let artifact = io::CreditFitArtifact {
        schema_version: io::SCHEMA_VERSION,
        fit,
        bonds,
        industry_labels,
        rating_labels,
    };
    io::save_credit_fit(&args.out, &artifact)?;
    println!("  fit written to {}", args.out.display());
    Ok(())
}

fn tsdp_cmd(args: TsdpArgs) -> Result<()> {
    let artifact = io::load_credit_fit(&args.fit)?;
    let grade = io::parse_grade(&args.grade, &artifact.rating_labels)?;
    let industry = parse_label_index(&args.industry, &artifact.industry_labels, "industry")?;
    let grid = parse_sample_grid(&args.grid)?;
    let curve = analytics::implied_tsdp_curve(&artifact.fit, grade, industry, &grid)?;
    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["s", "probability"])?;
    for sample in &curve.samples {
        writer.write_record([format!("{}", sample.s), format!("{}", sample.probability)])?;
    }
    writer.flush()?;
    println!(
        "implied TSDP for grade {} ({grade}), industry {} ({industry}), gamma {:.6}",
        artifact.rating_labels[grade - 1],
        artifact.industry_labels[industry - 1],
        curve.gamma
    );
    println!("  wrote {} samples to {}", curve.samples.len(), args.out.display());
    Ok(())
}

fn spread_cmd(args: SpreadArgs) -> Result<()> {
    let artifact = io::load_credit_fit(&args.fit)?;
    let gb_model = io::load_gb_model(&args.gb_model)?;
    let bond = find_bond(&artifact.bonds, &args.bond_id)?;
    let discount = analytics::credit_discount(&artifact.fit, bond, &gb_model);
    let spread = analytics::fair_spread(&artifact.fit, bond, &gb_model)?;
    let p_hat = gb_model.theoretical_price(&bond.schedule, &bond.attributes);
    println!("bond {}", bond.id);
    println!("  market price:            {:.6}", bond.price);
    println!("  default-free price:      {:.6}", p_hat);
    println!("  credit risk discount:    {:.6}", discount.y_hat);
    println!("  model value:             {:.6}", p_hat + discount.y_hat);
    println!("  fair spread:             {:.6}", spread);
    Ok(())
}

fn portfolio_cmd(args: PortfolioArgs) -> Result<()> {
    let artifact = io::load_credit_fit(&args.fit)?;
    let gb_model = io::load_gb_model(&args.gb_model)?;
    let positions = io::load_positions(&args.positions, &artifact.bonds)?;
    let decomp = analytics::portfolio_decompose_with(
        &positions,
        &artifact.fit,
        &gb_model,
        args.allow_short,
    )?;
    let durations = analytics::durations(&decomp);
    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["time", "inflow", "loss", "combined"])?;
    for (m, &time) in decomp.times.iter().enumerate() {
        writer.write_record([
            format!("{time}"),
            format!("{}", decomp.inflow[m]),
            format!("{}", decomp.loss[m]),
            format!("{}", decomp.combined[m]),
        ])?;
    }
    writer.flush()?;
    let fmt = |d: Option<f64>| match d {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    };
    println!("portfolio of {} positions over {} flow dates", positions.len(), decomp.times.len());
    println!("  expected inflow total:   {:.6}", decomp.total_inflow);
    println!("  expected loss total:     {:.6}", decomp.total_loss);
    println!("  fair value:              {:.6}", decomp.total_value);
    println!("  inflow duration:         {}", fmt(durations.inflow));
    println!("  loss duration:           {}", fmt(durations.loss));
    println!("  actual duration:         {}", fmt(durations.actual));
    if decomp.mixed_sign_weights {
        println!("  note: some weights are negative; durations are signed averages");
    }
    println!("  decomposition written to {}", args.out.display());
    Ok(())
}

fn cds_cmd(args: CdsArgs) -> Result<()> {
    let artifact = io::load_credit_fit(&args.fit)?;
    let gb_model = io::load_gb_model(&args.discount)?;
    let bond = find_bond(&artifact.bonds, &args.issuer)?;
    if !(args.horizon_years > 0.0) || !args.horizon_years.is_finite() {
        return Err(Error::InvalidInput(format!(
            "horizon {} years must be positive",
            args.horizon_years
        )));
    }
    let horizon_days = (args.horizon_years * DAYS_PER_YEAR).round() as usize;
    let premium_days = cds::CdsContract::evenly_spaced_premium_days(horizon_days, args.freq)?;
    let contract =
        cds::CdsContract::new(horizon_days, premium_days, bond.grade, bond.portfolio.clone())?
            .with_lags(args.pay_lag_days, args.recovery_lag_days);
    let gamma = artifact.fit.recovery.gamma(bond.grade);
    let curve = cds::default_curve(&artifact.fit, &bond.portfolio, bond.grade, horizon_days)?;
    let max_lag = args.pay_lag_days.max(args.recovery_lag_days);
    let disc = cds::DiscountGrid::from_gb(&gb_model, horizon_days + max_lag)?;

    println!(
        "CDS on {} (grade {}, {} payments/year, {:.2}y horizon, gamma {:.6})",
        bond.id,
        artifact.rating_labels[bond.grade - 1],
        args.freq,
        args.horizon_years,
        gamma
    );
    for (flag, text) in [
        (curve.clamped, "TSDP clamped to [0, 1] on the day grid"),
        (curve.monotonized, "TSDP forced non-decreasing on the day grid"),
        (curve.extrapolated, "horizon extends beyond the fitted maturity span"),
    ] {
        if flag {
            println!("  warning: {text}");
        }
    }
    let lag_free = args.pay_lag_days == 0 && args.recovery_lag_days == 0;
    if lag_free {
        let x = cds::cds_premium(&contract, &curve, &disc, gamma)?;
        let x_cont = cds::cds_premium_continuous(&contract, &artifact.fit, &disc, gamma, args.quad_step)?;
        println!("  premium per payment per 100 notional:   {x:.6}");
        println!("  annualized premium:                      {:.6}", io::annualize_premium(x, args.freq));
        println!("  continuous-time premium per payment:     {x_cont:.6}");
    } else if args.mc_paths.is_none() {
        return Err(Error::InvalidInput(
            "settlement lags are priced by Monte Carlo only; pass --mc-paths".into(),
        ));
    }
    if let Some(paths) = args.mc_paths {
        let x_mc = cds::mc_premium(&contract, &curve, &disc, gamma, paths, args.seed)?;
        println!(
            "  Monte Carlo premium per payment ({} paths, seed {}): {x_mc:.6}",
            paths, args.seed
        );
        println!(
            "  annualized Monte Carlo premium:          {:.6}",
            io::annualize_premium(x_mc, args.freq)
        );
    }
    Ok(())
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let config: synth::SyntheticConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    let market = synth::generate_synthetic(&config)?;
    fs::create_dir_all(&args.out_dir)?;
    io::save_market_data(&market.dataset, &args.out_dir)?;
    let truth = serde_json::json!({
        "schema_version": io::SCHEMA_VERSION,
        "truth": market.truth,
    });
    fs::write(args.out_dir.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
    println!(
        "synthetic market: {} government bonds, {} corporate bonds (seed {})",
        market.dataset.government_bonds.len(),
        market.dataset.corporate_bonds.len(),
        config.seed
    );
    println!("  files written to {}", args.out_dir.display());
    Ok(())
}
