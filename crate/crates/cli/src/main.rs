use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use closeness::adversarial::{
    self, barrho_bound, build_prior, check_eps, sample_alt, sample_alt_smalltail, sample_null,
    PriorParams,
};
use closeness::harness::{
    self, compare_report, default_suite, empirical_separation, estimate_risk, preset,
    AdversarialScaling, FixedPair, ReportOptions, TailTransport,
};
use closeness::io::{read_counts, read_distribution, read_samples};
use closeness::rates::{self, dk16_rate, identity_rate, lower_rate, regime_table, upper_rate};
use closeness::sampling::split_and_poissonize;
use closeness::{
    calibrate_constants, combined_test, DiscreteDistribution, RngStream, TestConstants,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "closeness",
    version,
    about = "Two-sample closeness testing for discrete distributions"
)]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run the combined test on two samples.
    Test(TestArgs),
    /// Calibrate the test multipliers on a null suite.
    Calibrate(CalibrateArgs),
    /// Evaluate rate functionals for a distribution.
    Rates(RatesArgs),
    /// Estimate type-I and type-II error for a null and an alternative.
    Simulate(SimulateArgs),
    /// Bisect for the empirical separation distance.
    Separation(SeparationArgs),
    /// Build an adversarial prior and sample from it.
    Adversarial(AdversarialArgs),
    /// Side-by-side comparison of all rates, with optional separation search.
    Report(ReportArgs),
}

/// Where the multipliers come from: a file, or calibration on the default
/// suite for the support size at hand.
#[derive(Args)]
struct ConstantsArgs {
    /// JSON file written by `calibrate`.
    #[arg(long)]
    constants_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Null trials per suite member when calibrating on the fly.
    #[arg(long, default_value_t = 1000)]
    calibration_trials: usize,
}

#[derive(Args)]
struct TestArgs {
    /// First sample: counts per category, or category labels with --samples.
    x: PathBuf,
    /// Second sample, same format as the first.
    y: PathBuf,
    /// Treat the inputs as one category label per line instead of counts.
    #[arg(long)]
    samples: bool,
    /// Support size (required with --samples).
    #[arg(long)]
    d: Option<usize>,
    /// Sample size used; defaults to the smaller of the two samples.
    #[arg(long)]
    k: Option<u64>,
    /// Same as --format json.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    constants: ConstantsArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long)]
    k: u64,
    /// Support size of the default suite (uniform, Zipf, two-level).
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    /// Extra suite members (files or presets).
    #[arg(long = "suite")]
    extra: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RateKind {
    Upper,
    Lower,
    Identity,
    Dk16,
    Regimes,
    All,
}

#[derive(Args)]
struct RatesArgs {
    /// Distribution file or preset (uniform:d, zipf:d:s, two-spike:k:h, two-level:d, dirichlet:d:alpha[:seed]).
    #[arg(long)]
    dist: String,
    #[arg(long)]
    k: u64,
    #[arg(long, default_value_t = rates::DEFAULT_U)]
    u: f64,
    #[arg(long, default_value_t = rates::DEFAULT_V)]
    v: f64,
    #[arg(long, value_enum, default_value_t = RateKind::All)]
    kind: RateKind,
}

#[derive(Args)]
struct SimulateArgs {
    /// Null distribution; the null pair is (null, null).
    #[arg(long)]
    null: String,
    /// Alternative p, paired with the null distribution as q.
    #[arg(long, conflicts_with = "transport")]
    alt: Option<String>,
    /// Build the alternative by moving this much L1 distance off the null's tail.
    #[arg(long)]
    transport: Option<f64>,
    #[arg(long)]
    k: u64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[command(flatten)]
    constants: ConstantsArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionKind {
    Transport,
    Adversarial,
}

#[derive(Args)]
struct SeparationArgs {
    #[arg(long)]
    dist: String,
    #[arg(long)]
    k: u64,
    #[arg(long, value_enum, default_value_t = DirectionKind::Transport)]
    direction: DirectionKind,
    /// Trials per bisection evaluation.
    #[arg(long, default_value_t = 400)]
    trials: usize,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    constants: ConstantsArgs,
}

#[derive(Args)]
struct PriorArgs {
    #[arg(long, default_value_t = adversarial::DEFAULT_U)]
    prior_u: f64,
    #[arg(long, default_value_t = rates::DEFAULT_V)]
    prior_v: f64,
    /// Level thinning factor M.
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = 3.0)]
    a: f64,
    #[arg(long, default_value_t = 0.125)]
    delta: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma_lb: f64,
}

impl PriorArgs {
    fn params(&self, k: u64) -> PriorParams {
        PriorParams {
            k,
            u: self.prior_u,
            v: self.prior_v,
            m: self.m,
            a: self.a,
            delta: self.delta,
            gamma_lb: self.gamma_lb,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DrawKind {
    Null,
    Alt,
    Smalltail,
}

#[derive(Args)]
struct AdversarialArgs {
    #[arg(long)]
    dist: String,
    #[arg(long)]
    k: u64,
    #[command(flatten)]
    prior: PriorArgs,
    /// Number of draws to sample (0 only describes the prior).
    #[arg(long, default_value_t = 0)]
    draws: usize,
    #[arg(long, value_enum, default_value_t = DrawKind::Alt)]
    kind: DrawKind,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required_unless_present = "preset")]
    dist: Option<String>,
    /// Named preset, e.g. two-spike (k=10, h=0.3) or any preset string.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<u64>,
    /// Run a tail-transport separation search with this many trials per evaluation.
    #[arg(long)]
    separation_trials: Option<usize>,
    #[command(flatten)]
    constants: ConstantsArgs,
}

/// Errors from bad input map to exit code 1, numerical or guard failures to 2.
enum Failure {
    Usage(anyhow::Error),
    Numeric(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numeric = e.chain().any(|cause| {
            matches!(
                cause.downcast_ref::<closeness::Error>(),
                Some(err) if !matches!(
                    err,
                    closeness::Error::Parse(_) | closeness::Error::CategoryOutOfRange { .. }
                )
            )
        });
        if numeric {
            Failure::Numeric(e)
        } else {
            Failure::Usage(e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut format = cli.format;
    let stream = RngStream::new(cli.seed);
    let output = match cli.command {
        Command::Test(args) => {
            if args.json {
                format = Format::Json;
            }
            cmd_test(&args, stream, format)?
        }
        Command::Calibrate(args) => cmd_calibrate(&args, stream, format)?,
        Command::Rates(args) => cmd_rates(&args, format)?,
        Command::Simulate(args) => cmd_simulate(&args, stream, format)?,
        Command::Separation(args) => cmd_separation(&args, stream, format)?,
        Command::Adversarial(args) => cmd_adversarial(&args, stream, format)?,
        Command::Report(args) => cmd_report(&args, cli.seed, stream, format)?,
    };
    emit(&output, cli.out.as_deref()).map_err(Failure::Usage)
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// `name,value` rows for a flat JSON object; nested values are written as JSON.
fn flat_csv(value: &Value) -> String {
    let mut out = String::from("name,value\n");
    if let Value::Object(map) = value {
        for (name, v) in map {
            let cell = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let cell = if cell.contains([',', '"', '\n']) {
                format!("\"{}\"", cell.replace('"', "\"\""))
            } else {
                cell
            };
            let _ = writeln!(out, "{name},{cell}");
        }
    }
    out
}

fn render<T: serde::Serialize>(value: &T, format: Format) -> anyhow::Result<String> {
    match format {
        Format::Json => to_json(value),
        Format::Csv => Ok(flat_csv(&serde_json::to_value(value)?)),
    }
}

/// A file path if it exists, otherwise a preset string.
fn load_distribution(spec: &str) -> anyhow::Result<DiscreteDistribution> {
    let path = Path::new(spec);
    if path.exists() {
        return read_distribution(path).with_context(|| format!("reading {spec}"));
    }
    preset(spec).map_err(|e| anyhow!("'{spec}' is neither a file nor a preset ({e})"))
}

fn resolve_constants(
    args: &ConstantsArgs,
    d: usize,
    k: u64,
    stream: RngStream,
) -> anyhow::Result<TestConstants> {
    if let Some(path) = &args.constants_file {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let constants: TestConstants = serde_json::from_str(&text)
            .with_context(|| format!("parsing constants in {}", path.display()))?;
        constants.validate()?;
        return Ok(constants);
    }
    log::info!("calibrating on the default suite at d={d}, k={k}");
    Ok(calibrate_constants(
        &default_suite(d)?,
        k,
        args.gamma,
        args.calibration_trials,
        stream,
    )?)
}

fn expand_counts(counts: &[u64]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c as usize))
        .collect()
}

fn cmd_test(args: &TestArgs, stream: RngStream, format: Format) -> anyhow::Result<String> {
    let (xs, ys, d) = if args.samples {
        let d = args
            .d
            .ok_or_else(|| anyhow!("--d is required with --samples"))?;
        (read_samples(&args.x, d)?, read_samples(&args.y, d)?, d)
    } else {
        let cx = read_counts(&args.x)?;
        let cy = read_counts(&args.y)?;
        if cx.len() != cy.len() {
            bail!(
                "count files have different lengths ({} and {})",
                cx.len(),
                cy.len()
            );
        }
        let d = cx.len();
        (expand_counts(&cx), expand_counts(&cy), d)
    };
    let available = xs.len().min(ys.len()) as u64;
    let k = args.k.unwrap_or(available);
    if k > available {
        bail!("--k {k} exceeds the smaller sample size {available}");
    }
    let constants = resolve_constants(&args.constants, d, k, stream.substream(0))?;
    let counts = split_and_poissonize(&xs, &ys, d, k, stream.substream(1))?;
    let report = combined_test(&counts, &constants);
    match format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut v = serde_json::to_value(&report)?;
            if let Value::Object(map) = &mut v {
                if let Some(Value::Object(verdicts)) = map.remove("verdicts") {
                    for (name, b) in verdicts {
                        map.insert(format!("reject_{name}"), b);
                    }
                }
            }
            Ok(flat_csv(&v))
        }
    }
}

fn cmd_calibrate(
    args: &CalibrateArgs,
    stream: RngStream,
    format: Format,
) -> anyhow::Result<String> {
    let mut suite = default_suite(args.d)?;
    for spec in &args.extra {
        let member = load_distribution(spec)?;
        if member.d() != args.d {
            bail!(
                "suite member '{spec}' has d={} but --d is {}",
                member.d(),
                args.d
            );
        }
        suite.push(member);
    }
    let constants = calibrate_constants(&suite, args.k, args.gamma, args.trials, stream)?;
    render(&constants, format)
}

fn cmd_rates(args: &RatesArgs, format: Format) -> anyhow::Result<String> {
    let pi = load_distribution(&args.dist)?;
    let k = args.k;
    let single = match args.kind {
        RateKind::Upper => Some(upper_rate(&pi, k, args.u)?),
        RateKind::Lower => Some(lower_rate(&pi, k, args.v)?),
        RateKind::Identity => Some(identity_rate(&pi, k)?),
        RateKind::Dk16 => Some(dk16_rate(&pi, k)?),
        RateKind::Regimes | RateKind::All => None,
    };
    if let Some(r) = single {
        return match format {
            Format::Json => to_json(&r),
            Format::Csv => Ok(r.to_csv()),
        };
    }
    let table = regime_table(&pi, k)?;
    if args.kind == RateKind::Regimes {
        return match format {
            Format::Json => to_json(&table),
            Format::Csv => Ok(table.to_csv()),
        };
    }
    let all = [
        ("upper", upper_rate(&pi, k, args.u)?),
        ("lower", lower_rate(&pi, k, args.v)?),
        ("identity", identity_rate(&pi, k)?),
        ("dk16", dk16_rate(&pi, k)?),
    ];
    match format {
        Format::Json => {
            let mut map = serde_json::Map::new();
            for (name, r) in &all {
                map.insert(name.to_string(), serde_json::to_value(r)?);
            }
            map.insert("regimes".into(), serde_json::to_value(&table)?);
            to_json(&Value::Object(map))
        }
        Format::Csv => {
            let mut out = String::from("rate,name,value\n");
            for (name, r) in &all {
                let _ = writeln!(out, "{name},rho,{}", r.rho);
                if let Some(m) = r.minimizer {
                    let _ = writeln!(out, "{name},minimizer,{m}");
                }
                for (term, value) in &r.terms {
                    let _ = writeln!(out, "{name},{term},{value}");
                }
            }
            Ok(out)
        }
    }
}

fn cmd_simulate(args: &SimulateArgs, stream: RngStream, format: Format) -> anyhow::Result<String> {
    let q = load_distribution(&args.null)?;
    let p = match (&args.alt, args.transport) {
        (Some(spec), _) => load_distribution(spec)?,
        (None, Some(l1)) => harness::transport(&q, l1)?,
        (None, None) => bail!("give either --alt or --transport"),
    };
    if p.d() != q.d() {
        bail!("alternative has d={} but the null has d={}", p.d(), q.d());
    }
    let constants = resolve_constants(&args.constants, q.d(), args.k, stream.substream(0))?;
    let null = FixedPair::null(q.clone());
    let alt = FixedPair { p, q };
    let risk = estimate_risk(
        &constants,
        &null,
        &alt,
        args.k,
        args.trials,
        stream.substream(1),
    )?;
    match format {
        Format::Json => to_json(&risk),
        Format::Csv => Ok(risk.to_csv()),
    }
}

fn cmd_separation(
    args: &SeparationArgs,
    stream: RngStream,
    format: Format,
) -> anyhow::Result<String> {
    let pi = load_distribution(&args.dist)?;
    let constants = resolve_constants(&args.constants, pi.d(), args.k, stream.substream(0))?;
    let gamma = args.constants.gamma;
    let estimate = match args.direction {
        DirectionKind::Transport => {
            let dir = TailTransport::new(pi.clone(), TailTransport::capacity(&pi))?;
            empirical_separation(
                &constants,
                &dir,
                args.k,
                gamma,
                args.trials,
                stream.substream(1),
            )?
        }
        DirectionKind::Adversarial => {
            let prior = build_prior(&pi, args.prior.params(args.k))?;
            let dir = AdversarialScaling { prior };
            empirical_separation(
                &constants,
                &dir,
                args.k,
                gamma,
                args.trials,
                stream.substream(1),
            )?
        }
    };
    render(&estimate, format)
}

fn cmd_adversarial(
    args: &AdversarialArgs,
    stream: RngStream,
    format: Format,
) -> anyhow::Result<String> {
    let pi = load_distribution(&args.dist)?;
    let prior = build_prior(&pi, args.prior.params(args.k))?;
    let check = check_eps(&prior);
    let draws = (0..args.draws)
        .map(|t| {
            let s = stream.substream(t as u64);
            match args.kind {
                DrawKind::Null => sample_null(&prior, &s),
                DrawKind::Alt => sample_alt(&prior, &s),
                DrawKind::Smalltail => sample_alt_smalltail(&prior, &s),
            }
        })
        .collect::<closeness::Result<Vec<_>>>()?;
    match format {
        Format::Json => {
            let draws: Vec<Value> = draws
                .iter()
                .map(|d| {
                    json!({
                        "l1_distance": d.l1_distance,
                        "l1_on_set": d.l1_on_set,
                        "q_in_class": d.q_in_class,
                        "p_in_class": d.p_in_class,
                        "retries": d.retries,
                        "q_tilde": d.q_tilde,
                        "p_tilde": d.p_tilde,
                    })
                })
                .collect();
            to_json(&json!({
                "prior": prior,
                "check": check,
                "barrho_bound": barrho_bound(&prior),
                "draws": draws,
            }))
        }
        Format::Csv => {
            let mut out =
                String::from("draw,l1_distance,l1_on_set,q_in_class,p_in_class,retries\n");
            for (t, d) in draws.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{t},{},{},{},{},{}",
                    d.l1_distance, d.l1_on_set, d.q_in_class, d.p_in_class, d.retries
                );
            }
            Ok(out)
        }
    }
}

fn cmd_report(
    args: &ReportArgs,
    seed: u64,
    stream: RngStream,
    format: Format,
) -> anyhow::Result<String> {
    let (pi, default_k) = match (&args.dist, args.preset.as_deref()) {
        (Some(spec), _) => (load_distribution(spec)?, None),
        (None, Some("two-spike")) => (preset("two-spike:10:0.3")?, Some(10)),
        (None, Some(spec)) => (preset(spec)?, None),
        (None, None) => bail!("give --dist or --preset"),
    };
    let k = args
        .k
        .or(default_k)
        .ok_or_else(|| anyhow!("--k is required for this distribution"))?;
    let constants = match (args.separation_trials, &args.constants.constants_file) {
        (None, None) => None,
        _ => Some(resolve_constants(
            &args.constants,
            pi.d(),
            k,
            stream.substream(0),
        )?),
    };
    let options = ReportOptions {
        separation_trials: args.separation_trials,
        seed,
    };
    let report = compare_report(&pi, k, args.constants.gamma, constants.as_ref(), &options)?;
    match format {
        Format::Json => to_json(&report),
        Format::Csv => Ok(report.to_csv()),
    }
}
