//! `ptloop`: simulate virtual patients, run the estimator, check
//! detectability and reproduce the scheme comparison.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ptloop_core::detectability::{sample_pairs, verify_pairs, IossCertificate, VerificationReport};
use ptloop_core::integrator::IntegratorConfig;
use ptloop_core::sampling::{delta, delta0, realize, Scheme};
use ptloop_core::scenario::{run_virtual_patient, simulate_truth, ScenarioConfig};
use ptloop_core::{ModelParameters, Variant};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "ptloop", version, about = "Pituitary-thyroid loop simulation and sample-based estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the true patient with protocol dosing.
    Simulate(Common),
    /// Simulate the patient and run the estimator for the selected schemes.
    Estimate(Common),
    /// Check the sample-based i-IOSS certificates on random trajectory pairs.
    #[command(name = "verify-iioss")]
    VerifyIioss(VerifyArgs),
    /// Write the sampling sets and interval sequences.
    #[command(name = "sampling-dump")]
    SamplingDump(DumpArgs),
    /// Run detectability checks and both scenarios over all schemes.
    Reproduce(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON scenario (or verification) config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SchemeArg::All)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Patient model; commands that handle both default to both.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Args, Clone)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Number of trajectory pairs (overrides the scale).
    #[arg(long)]
    pairs: Option<usize>,
    /// Horizon in days (overrides the scale).
    #[arg(long)]
    days: Option<usize>,
    /// Index i of the sampling set K_i.
    #[arg(long)]
    start: Option<usize>,
}

#[derive(Args, Clone)]
struct DumpArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SchemeArg::All)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 300)]
    days: usize,
    #[arg(long, default_value_t = 1)]
    start: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    A,
    B,
    C,
    D,
    All,
}

impl SchemeArg {
    fn schemes(self) -> Vec<Scheme> {
        match self {
            SchemeArg::A => vec![Scheme::A],
            SchemeArg::B => vec![Scheme::B],
            SchemeArg::C => vec![Scheme::C],
            SchemeArg::D => vec![Scheme::D],
            SchemeArg::All => Scheme::ALL.to_vec(),
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

impl Scale {
    /// Pairs and horizon (days) of the detectability check.
    fn detectability(self) -> (usize, usize) {
        match self {
            Scale::Desk => (500, 100),
            Scale::Full => (19_800, 300),
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Hypo,
    Hyper,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Hypo => Variant::Hypo,
            VariantArg::Hyper => Variant::Hyper,
        }
    }
}

fn variants(arg: Option<VariantArg>) -> Vec<Variant> {
    match arg {
        Some(v) => vec![v.into()],
        None => vec![Variant::Hypo, Variant::Hyper],
    }
}

/// Optional settings of `verify-iioss`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyConfig {
    #[serde(default)]
    parameters: BTreeMap<String, f64>,
    #[serde(default)]
    integrator: IntegratorConfig,
    /// Certificates keyed by scheme name.
    #[serde(default)]
    certificates: BTreeMap<Scheme, IossCertificate>,
    pairs: Option<usize>,
    days: Option<usize>,
    start: Option<usize>,
}

fn scenario_config(common: &Common, variant: Option<Variant>) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::from_path(path).with_context(|| format!("scenario: reading {}", path.display()))?,
        None => ScenarioConfig::for_variant(variant.unwrap_or(Variant::Hypo)),
    };
    if let Some(v) = variant {
        if cfg.patient.variant != v {
            bail!("scenario: config describes a {} patient but --variant {v} was given", cfg.patient.variant);
        }
    }
    cfg.patient.seed = common.seed;
    Ok(cfg)
}

fn file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = scenario_config(common, common.variant.map(Into::into))?;
    std::fs::create_dir_all(&common.out)?;
    let t = Instant::now();
    let truth = simulate_truth(&cfg).context("scenario: truth simulation failed")?;
    let v = cfg.patient.variant.as_str();
    truth.trajectory.write_csv(file(&common.out, &format!("{v}_truth.csv"))?)?;
    truth.write_dosing_csv(file(&common.out, &format!("{v}_dosing.csv"))?)?;
    truth.write_measurements_csv(file(&common.out, &format!("{v}_measurements.csv"))?)?;
    for d in &truth.decisions {
        println!("step {:>4} day {:>3}: measured {:.3} -> dose {}", d.step, d.day, d.measured, d.dose);
    }
    println!("{v}: {} steps simulated in {:.1} s", truth.trajectory.len() - 1, t.elapsed().as_secs_f64());
    Ok(())
}

fn estimate(common: &Common) -> Result<()> {
    let cfg = scenario_config(common, common.variant.map(Into::into))?;
    let t = Instant::now();
    let result = run_virtual_patient(&cfg, &common.scheme.schemes()).context("scenario: virtual patient run failed")?;
    let table = result.write_outputs(&common.out)?;
    for (scheme, m) in &table {
        println!("{} {scheme}: RMSE {:.4} ({} windows, {} unconverged)", cfg.patient.variant, m.rmse, m.solved_windows, m.unconverged_windows);
    }
    println!("done in {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}

fn load_verify_config(path: Option<&Path>) -> Result<VerifyConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("detectability: reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("detectability: parsing {}", p.display()))?)
        }
        None => Ok(VerifyConfig::default()),
    }
}

fn run_verification(
    variant: Variant,
    schemes: &[Scheme],
    n_pairs: usize,
    days: usize,
    start: Option<usize>,
    seed: u64,
    vc: &VerifyConfig,
) -> Result<Vec<VerificationReport>> {
    let p = ModelParameters::for_variant(variant).with_overrides(&vc.parameters)?;
    let t = Instant::now();
    let pairs = sample_pairs(seed, n_pairs, variant, 3 * days, &p, &vc.integrator)
        .with_context(|| format!("detectability: simulating {variant} pairs"))?;
    let mut reports = Vec::new();
    for &scheme in schemes {
        let cert = vc
            .certificates
            .get(&scheme)
            .cloned()
            .unwrap_or_else(|| IossCertificate::published(variant, scheme));
        let i = start.unwrap_or(IossCertificate::default_start(variant));
        let report = verify_pairs(&pairs, &cert, scheme, i, seed)?;
        println!(
            "{variant} {scheme}: {} pairs x {days} days, {} violations, max ratio {:.4}, recursion mismatch {:.1e} ({:.0} s)",
            n_pairs,
            report.violations,
            report.max_ratio,
            report.max_recursion_mismatch,
            t.elapsed().as_secs_f64()
        );
        reports.push(report);
    }
    Ok(reports)
}

fn write_reports(dir: &Path, reports: &[VerificationReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in reports {
        let name = format!("{}_iioss_{}.json", r.variant, r.scheme);
        serde_json::to_writer_pretty(file(dir, &name)?, r)?;
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let c = &args.common;
    let vc = load_verify_config(c.config.as_deref())?;
    let (scale_pairs, scale_days) = c.scale.detectability();
    let n_pairs = args.pairs.or(vc.pairs).unwrap_or(scale_pairs);
    let days = args.days.or(vc.days).unwrap_or(scale_days);
    let start = args.start.or(vc.start);
    let mut all = Vec::new();
    for v in variants(c.variant) {
        all.extend(run_verification(v, &c.scheme.schemes(), n_pairs, days, start, c.seed, &vc)?);
    }
    write_reports(&c.out, &all)?;
    let violations: usize = all.iter().map(|r| r.violations).sum();
    if violations > 0 {
        bail!("detectability: {violations} inequality violations");
    }
    Ok(())
}

fn sampling_dump(args: &DumpArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let horizon = 3 * args.days;
    let schemes = args.scheme.schemes();
    for &s in &schemes {
        let set = realize(s, args.start, horizon)?;
        set.write_csv(file(&args.out, &format!("sampling_{s}.csv"))?)?;
        println!("K^{s}_{}: {} instants up to step {horizon}", args.start, set.len());
    }
    let mut wtr = csv::Writer::from_writer(file(&args.out, "intervals.csv")?);
    let mut header = vec!["i".to_string(), "delta0".to_string()];
    header.extend(schemes.iter().map(|s| format!("delta_{s}")));
    wtr.write_record(&header)?;
    let n = realize(Scheme::A, 1, horizon)?.len();
    for i in 1..=n {
        let mut row = vec![i.to_string(), delta0(i)?.to_string()];
        for &s in &schemes {
            row.push(delta(s, i)?.to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn reproduce(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    let t = Instant::now();
    let schemes = common.scheme.schemes();
    let (n_pairs, days) = common.scale.detectability();
    let vc = load_verify_config(None)?;
    let mut reports = Vec::new();
    let mut rows: Vec<(Variant, Scheme, f64)> = Vec::new();
    let mut failures = Vec::new();
    for v in variants(common.variant) {
        match run_verification(v, &schemes, n_pairs, days, None, common.seed, &vc) {
            Ok(r) => reports.extend(r),
            Err(e) => failures.push(format!("{v} detectability: {e:#}")),
        }
        let cfg = scenario_config(&Common { config: None, ..common.clone() }, Some(v))?;
        match run_virtual_patient(&cfg, &schemes) {
            Ok(result) => {
                let table = result.write_outputs(&common.out)?;
                for (scheme, m) in table {
                    println!("{v} {scheme}: RMSE {:.4}", m.rmse);
                    rows.push((v, scheme, m.rmse));
                }
            }
            Err(e) => failures.push(format!("{v} scenario: {e:#}")),
        }
    }
    write_reports(&common.out, &reports)?;
    serde_json::to_writer_pretty(file(&common.out, "detectability.json")?, &reports)?;

    let mut wtr = csv::Writer::from_writer(file(&common.out, "rmse.csv")?);
    wtr.write_record(["variant", "scheme", "rmse"])?;
    for (v, s, r) in &rows {
        wtr.write_record([v.as_str().to_string(), s.as_str().to_string(), format!("{r:.17e}")])?;
    }
    wtr.flush()?;
    let json: BTreeMap<String, BTreeMap<String, f64>> = rows.iter().fold(BTreeMap::new(), |mut m, (v, s, r)| {
        m.entry(v.as_str().to_string()).or_default().insert(s.as_str().to_string(), *r);
        m
    });
    serde_json::to_writer_pretty(file(&common.out, "rmse.json")?, &json)?;

    for v in variants(common.variant) {
        let r: Vec<f64> = rows.iter().filter(|x| x.0 == v).map(|x| x.2).collect();
        if r.len() == Scheme::ALL.len() {
            let ordered = r.windows(2).all(|w| w[0] < w[1]);
            println!("{v}: RMSE ordering a < b < c < d {}", if ordered { "holds" } else { "does NOT hold" });
        }
    }
    println!("reproduce finished in {:.1} min", t.elapsed().as_secs_f64() / 60.0);
    if !failures.is_empty() {
        bail!("partial failure:\n{}", failures.join("\n"));
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Estimate(c) => estimate(c),
        Command::VerifyIioss(a) => verify(a),
        Command::SamplingDump(a) => sampling_dump(a),
        Command::Reproduce(c) => reproduce(c),
    }
}
