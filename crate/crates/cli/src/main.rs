mod error;
mod manifest;
mod report;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use touchpit::config;
use touchpit::dataset::{self, Dataset, DeviceSpec};
use touchpit::experiments::{self, ExperimentSpec, Variant};
use touchpit::features;
use touchpit::preprocess::{self, Direction};
use touchpit::protocol::ProtocolConfig;
use touchpit::synthgen::{self, SynthConfig, SynthDevice};

use error::CliError;
use manifest::{InputFile, RunManifest, MANIFEST_FILE};

#[derive(Parser, Debug)]
#[command(name = "touchpit", version, about = "Touch-dynamics authentication evaluation harness")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a raw touch CSV and write it back in canonical form.
    Ingest {
        /// Input CSV, or `-` for stdin.
        input: String,
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Output file (stdout when omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check a touch CSV and print a report.
    Validate {
        input: String,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Generate a synthetic touch CSV.
    Synth(SynthArgs),
    /// Dump the per-stroke feature matrix.
    Features {
        input: String,
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Stroke direction to keep, or `all`.
        #[arg(long, default_value = "all")]
        direction: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run an experiment variant.
    Run {
        /// One of: baseline, p1, p1-sessions, p2, p2-identify, p3, p4, p5,
        /// cumulative, threshold-transfer, partial-window.
        variant: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        opts: SpecArgs,
    },
    /// Turn a results file into summary and ROC tables.
    Report {
        results: PathBuf,
        /// Output directory (defaults to the results file's directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the same protocol on two datasets and test the difference.
    Compare {
        first: PathBuf,
        second: PathBuf,
        #[command(flatten)]
        opts: SpecArgs,
    },
    /// Repeat a run recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        /// Output directory (defaults to the manifest's directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SpecArgs {
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    attacker_mode: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    classifier: Option<String>,
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    f_train: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    /// Any config key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    users: usize,
    #[arg(long, default_value_t = 5)]
    sessions: usize,
    #[arg(long, default_value_t = 30)]
    strokes: usize,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    between: Option<f64>,
    #[arg(long)]
    within: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    /// Comma-separated phone models from the built-in catalog.
    #[arg(long, default_value = "iPhone 7")]
    devices: String,
    #[arg(long, default_value_t = 0.0)]
    device_offset: f64,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value = "left")]
    direction: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn open_input(input: &str) -> Result<Box<dyn Read>, CliError> {
    if input == "-" {
        Ok(Box::new(io::stdin().lock()))
    } else {
        let f = File::open(input).map_err(|e| CliError::Data(format!("{input}: {e}")))?;
        Ok(Box::new(BufReader::new(f)))
    }
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_catalog(path: &Option<PathBuf>) -> Result<Vec<DeviceSpec>, CliError> {
    match path {
        Some(p) => {
            let f = File::open(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok(dataset::read_catalog(BufReader::new(f))?)
        }
        None => Ok(dataset::builtin_catalog()),
    }
}

fn load_dataset(input: &str, catalog: &Option<PathBuf>) -> Result<(Dataset, dataset::IngestReport), CliError> {
    let cat = load_catalog(catalog)?;
    let (d, rep) = dataset::ingest_reader(open_input(input)?, &cat)?;
    for line in &rep.dropped_non_monotonic {
        log::warn!("line {line}: timestamp went backwards, point dropped");
    }
    Ok((d, rep))
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Resolves defaults, then the config file, then flags, then `--set` pairs.
fn resolve_spec(variant: Variant, a: &SpecArgs) -> Result<ExperimentSpec, CliError> {
    let mut spec = ExperimentSpec::new(variant, ProtocolConfig::default());
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        config::apply_all(&mut spec, &config::parse(&text)?)?;
    }
    let flags = [
        ("seed", &a.seed),
        ("split", &a.split),
        ("attacker_mode", &a.attacker_mode),
        ("window", &a.window),
        ("classifier", &a.classifier),
        ("direction", &a.direction),
        ("f_train", &a.f_train),
        ("reps", &a.reps),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            config::apply(&mut spec, k, v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config::apply(&mut spec, k.trim(), v.trim())?;
    }
    spec.validate()?;
    Ok(spec)
}

fn spec_from_text(variant: Variant, text: &str) -> Result<ExperimentSpec, CliError> {
    let mut spec = ExperimentSpec::new(variant, ProtocolConfig::default());
    config::apply_all(&mut spec, &config::parse(text)?)?;
    spec.validate()?;
    Ok(spec)
}

struct RunJob {
    action: &'static str,
    variant: Option<Variant>,
    spec: ExperimentSpec,
    inputs: Vec<InputFile>,
    catalog: Option<PathBuf>,
    out: PathBuf,
    command: Vec<String>,
}

fn execute(job: RunJob) -> Result<(), CliError> {
    std::fs::create_dir_all(&job.out)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: job.command.clone(),
        action: job.action.to_string(),
        variant: job.variant.map(|v| v.to_string()),
        config: config::render(&job.spec),
        seed: job.spec.protocol.seed,
        inputs: job.inputs.clone(),
        outputs: vec![
            report::RESULTS_FILE.into(),
            report::SUMMARY_FILE.into(),
            "roc_*.csv".into(),
            "timings.json".into(),
        ],
    };
    manifest.write(&job.out)?;

    let cat = load_catalog(&job.catalog)?;
    let data: Vec<Dataset> = job
        .inputs
        .iter()
        .filter(|i| i.role != "catalog")
        .map(|i| Ok(dataset::ingest(&i.path, &cat)?))
        .collect::<Result<_, CliError>>()?;
    let started = Instant::now();
    let records = match job.variant {
        Some(_) => experiments::run(&job.spec, &data[0])?,
        None => experiments::compare_datasets(&job.spec.protocol, &data[0], &data[1])?,
    };
    let seconds = started.elapsed().as_secs_f64();
    report::write_jsonl(&job.out.join(report::RESULTS_FILE), &records)?;
    let tables = report::write_tables(&job.out, &records)?;
    std::fs::write(
        job.out.join("timings.json"),
        serde_json::json!({ "wall_seconds": seconds, "records": records.len() }).to_string() + "\n",
    )?;
    eprintln!(
        "{} records, {} tables written to {} in {seconds:.1}s",
        records.len(),
        tables.len(),
        job.out.display()
    );
    Ok(())
}

fn input_files(data: &[(&str, &Path)], catalog: &Option<PathBuf>) -> Result<Vec<InputFile>, CliError> {
    let mut v: Vec<InputFile> = data.iter().map(|(r, p)| InputFile::hash(r, p)).collect::<Result<_, _>>()?;
    if let Some(c) = catalog {
        v.push(InputFile::hash("catalog", c)?);
    }
    Ok(v)
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let cat = dataset::builtin_catalog();
    let devices = a
        .devices
        .split(',')
        .map(|name| {
            let name = name.trim();
            cat.iter()
                .find(|d| d.model_name == name)
                .map(|spec| SynthDevice {
                    spec: spec.clone(),
                    offset_scale: a.device_offset,
                })
                .ok_or_else(|| usage(format!("unknown device model `{name}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_users: a.users,
        sessions_per_user: a.sessions,
        strokes_per_session: a.strokes,
        session_length_spread: a.spread.unwrap_or(d.session_length_spread),
        devices,
        between: a.between.unwrap_or(d.between),
        within: a.within.unwrap_or(d.within),
        session_drift: a.drift.unwrap_or(d.session_drift),
        sampling_rate_hz: a.rate.unwrap_or(d.sampling_rate_hz),
        direction: a.direction.parse().map_err(usage)?,
        seed: a.seed,
    };
    let data = synthgen::generate(&cfg).map_err(|e| usage(e.to_string()))?;
    let mut out = open_output(&a.output)?;
    dataset::write_csv(&data, &mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_validate(input: &str, catalog: &Option<PathBuf>) -> Result<(), CliError> {
    let (d, rep) = match load_dataset(input, catalog) {
        Ok(x) => x,
        Err(e) => {
            println!("errors: 1");
            return Err(e);
        }
    };
    let mut strokes = 0;
    let mut kept = 0;
    let mut unterminated = 0;
    let mut stray = 0;
    for (uid, sessions) in &d.users {
        for s in sessions {
            let (st, r) = preprocess::segment(uid, s);
            strokes += st.len();
            kept += preprocess::filter(st).len();
            unterminated += r.unterminated;
            stray += r.stray;
        }
    }
    let invariant = d.check_invariants().err();
    println!("rows: {}", rep.rows);
    println!("users: {}", d.user_count());
    println!("sessions: {}", d.session_count());
    println!("strokes: {strokes}");
    println!("strokes_kept: {kept}");
    println!("unterminated_strokes: {unterminated}");
    println!("stray_points: {stray}");
    println!("dropped_non_monotonic: {}", rep.warning_count());
    match invariant {
        None => {
            println!("errors: 0");
            Ok(())
        }
        Some(msg) => {
            println!("errors: 1");
            Err(CliError::Data(msg))
        }
    }
}

fn cmd_features(input: &str, catalog: &Option<PathBuf>, direction: &str, output: &Option<PathBuf>) -> Result<(), CliError> {
    let keep: Option<Direction> = if direction.eq_ignore_ascii_case("all") {
        None
    } else {
        Some(direction.parse().map_err(usage)?)
    };
    let (d, _) = load_dataset(input, catalog)?;
    let per_user: Vec<_> = d.user_ids().iter().map(|uid| preprocess::user_strokes(&d, uid)).collect();
    let mut rows = Vec::new();
    for strokes in &per_user {
        for (i, f) in features::extract_sequence(strokes) {
            if keep.is_none_or(|k| strokes[i].direction == k) {
                rows.push((&strokes[i], f));
            }
        }
    }
    let mut out = open_output(output)?;
    features::write_feature_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn default_out(out: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.clone().ok_or_else(|| usage("--out DIR is required"))
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { input, catalog, output } => {
            let (d, rep) = load_dataset(&input, &catalog)?;
            let mut out = open_output(&output)?;
            dataset::write_csv(&d, &mut out)?;
            out.flush()?;
            eprintln!(
                "{} rows, {} users, {} sessions, {} points dropped",
                rep.rows,
                d.user_count(),
                d.session_count(),
                rep.warning_count()
            );
            Ok(())
        }
        Command::Validate { input, catalog } => cmd_validate(&input, &catalog),
        Command::Synth(a) => cmd_synth(&a),
        Command::Features {
            input,
            catalog,
            direction,
            output,
        } => cmd_features(&input, &catalog, &direction, &output),
        Command::Run { variant, data, opts } => {
            let v: Variant = variant.parse().map_err(usage)?;
            let spec = resolve_spec(v, &opts)?;
            if opts.print_config {
                print!("{}", config::render(&spec));
                return Ok(());
            }
            let data = data.ok_or_else(|| usage("--data FILE is required"))?;
            execute(RunJob {
                action: "run",
                variant: Some(v),
                inputs: input_files(&[("data", &data)], &opts.catalog)?,
                catalog: opts.catalog.clone(),
                out: default_out(&opts.out)?,
                spec,
                command: argv,
            })
        }
        Command::Compare { first, second, opts } => {
            let spec = resolve_spec(Variant::Baseline, &opts)?;
            if opts.print_config {
                print!("{}", config::render(&spec));
                return Ok(());
            }
            execute(RunJob {
                action: "compare",
                variant: None,
                inputs: input_files(&[("data", &first), ("data", &second)], &opts.catalog)?,
                catalog: opts.catalog.clone(),
                out: default_out(&opts.out)?,
                spec,
                command: argv,
            })
        }
        Command::Report { results, out } => {
            let records = report::read_jsonl(&results)?;
            let dir = match out {
                Some(d) => d,
                None => results.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            std::fs::create_dir_all(&dir)?;
            let written = report::write_tables(&dir, &records)?;
            eprintln!("{} tables written to {}", written.len(), dir.display());
            Ok(())
        }
        Command::Rerun { manifest, out } => {
            let manifest = if manifest.is_dir() { manifest.join(MANIFEST_FILE) } else { manifest };
            let m = RunManifest::read(&manifest)?;
            for i in &m.inputs {
                i.verify()?;
            }
            let (variant, base) = match (m.action.as_str(), &m.variant) {
                ("run", Some(v)) => {
                    let v: Variant = v.parse().map_err(CliError::Data)?;
                    (Some(v), v)
                }
                ("compare", _) => (None, Variant::Baseline),
                _ => return Err(CliError::Data(format!("{}: unrecognised action", manifest.display()))),
            };
            let spec = spec_from_text(base, &m.config)?;
            let out = match out {
                Some(d) => d,
                None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let catalog = m.inputs.iter().find(|i| i.role == "catalog").map(|i| i.path.clone());
            execute(RunJob {
                action: if variant.is_some() { "run" } else { "compare" },
                variant,
                spec,
                inputs: m.inputs.clone(),
                catalog,
                out,
                command: m.command.clone(),
            })
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_and_set_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "split = random\nwindow = 3\nseed = 1\n").unwrap();
        let cli = Cli::try_parse_from([
            "touchpit", "run", "baseline", "--config", cfg.to_str().unwrap(), "--window", "5", "--set", "seed=9",
        ])
        .unwrap();
        let Command::Run { opts, .. } = cli.command else { panic!() };
        let spec = resolve_spec(Variant::Baseline, &opts).unwrap();
        assert_eq!(spec.protocol.window, 5);
        assert_eq!(spec.protocol.seed, 9);
        assert_eq!(spec.protocol.split, touchpit::protocol::SplitStrategy::Random);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Data(String::new()).exit_code(), 2);
        assert_eq!(CliError::Precondition(String::new()).exit_code(), 3);
    }
}
