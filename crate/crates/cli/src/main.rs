use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ntckit::audit::{audit_dataset, render_percentages, to_json, write_csv};
use ntckit::dataset::{
    encode_record, export_bundle, filter_noise, label_by_sni, sessions_of_capture, split_train_test, write_label_csv, ExportConfig,
    SplitRatios,
};
use ntckit::extraction::{extract, spans_to_fields, ExtractionSpec, Preset, Selection, Strategy};
use ntckit::granularity::{split_bursts, split_flows, split_packets, split_sessions, Granularity, TrafficUnit, DEFAULT_BURST_GAP_SECS};
use ntckit::occlusion::{applicability, apply_strategy, occlude_frame, OcclusionSeed, OcclusionStrategy, StrategyId};
use ntckit::pipeline::{load_capture, LoadedCapture};
use ntckit::{write_capture, RawPacket};
use tracing::{info, warn};
use walkdir::WalkDir;

#[derive(Debug, Parser)]
#[command(name = "ntckit", version, about = "Traffic capture processing for classification datasets")]
struct Cli {
    /// Global seed for every randomized step.
    #[arg(long, global = true, env = "NTC_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More logging; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count encrypted sessions and cipher buckets per file.
    Audit(AuditArgs),
    /// Write one capture per packet, burst, flow or session.
    Split(SplitArgs),
    /// Extract (and optionally occlude) fixed-size samples to a record file.
    Extract(ExtractArgs),
    /// Apply an occlusion strategy to every frame of a capture.
    Occlude(OccludeArgs),
    /// Label sessions by TLS SNI.
    Label(LabelArgs),
    /// Label, split, extract, occlude and export a sample bundle.
    Dataset(DatasetArgs),
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Capture files or directories to scan.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "session")]
    granularity: Granularity,
    /// Burst inter-arrival threshold in seconds.
    #[arg(long, default_value_t = DEFAULT_BURST_GAP_SECS)]
    burst_gap: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExtractionArgs {
    #[arg(long, default_value = "session")]
    granularity: Granularity,
    /// T1, T2 or T3.
    #[arg(long, default_value = "T1")]
    extraction: Strategy,
    #[arg(long, default_value = "first-n")]
    selection: Selection,
    /// Size preset: etbert or yatc.
    #[arg(long, default_value = "etbert")]
    preset: Preset,
    /// Override bytes per sample (T1, T2) or per packet (T3).
    #[arg(long)]
    m: Option<usize>,
    /// Override packets per window.
    #[arg(long)]
    n: Option<usize>,
    /// Packets between consecutive windows (default: n).
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    drop_short: bool,
    #[arg(long)]
    payload_only_concat: bool,
    #[arg(long, default_value_t = DEFAULT_BURST_GAP_SECS)]
    burst_gap: f64,
}

impl ExtractionArgs {
    fn spec(&self) -> ExtractionSpec {
        let mut spec = match (self.granularity, self.extraction) {
            (Granularity::Packet, Strategy::T1) => self.preset.for_granularity(Granularity::Packet, Strategy::T1, self.selection),
            _ => self.preset.spec(self.extraction, self.selection),
        };
        if let Some(m) = self.m {
            spec.m = m;
        }
        if let Some(n) = self.n {
            spec.n = n;
            spec.stride = n;
        }
        if let Some(s) = self.stride {
            spec.stride = s;
        }
        spec.drop_short = self.drop_short;
        spec.payload_only = self.payload_only_concat;
        spec
    }
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[command(flatten)]
    extraction: ExtractionArgs,
    /// Occlusion strategy applied to each sample.
    #[arg(long, default_value = "A1")]
    strategy: StrategyId,
    /// Record file to write; an index CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OccludeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    strategy: StrategyId,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Label by the last two hostname labels.
    #[arg(long)]
    collapse_subdomains: bool,
    /// Keep unencrypted and infrastructure sessions.
    #[arg(long)]
    keep_noise: bool,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[command(flatten)]
    extraction: ExtractionArgs,
    #[arg(long, default_value = "A1")]
    strategy: StrategyId,
    /// Comma-separated split ratios.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    #[arg(long)]
    allow_small: bool,
    #[arg(long)]
    collapse_subdomains: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg))
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_target(false).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(&cli);
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size worker pool: {e}");
        }
    }
    info!(config = ?cli, "resolved configuration");
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Audit(a) => cmd_audit(a),
        Command::Split(a) => cmd_split(a),
        Command::Extract(a) => cmd_extract(a, cli.seed),
        Command::Occlude(a) => cmd_occlude(a, cli.seed),
        Command::Label(a) => cmd_label(a),
        Command::Dataset(a) => cmd_dataset(a, cli.seed),
    }
}

fn is_capture(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pcap" | "cap"))
}

/// Files as given, plus every capture file under each directory, sorted.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = WalkDir::new(input)
                .into_iter()
                .filter_map(Result::ok)
                .filter(|e| e.file_type().is_file() && is_capture(e.path()))
                .map(|e| e.into_path())
                .collect();
            found.sort();
            out.extend(found);
        } else if input.exists() {
            out.push(input.clone());
        } else {
            return Err(usage(format!("input {} does not exist", input.display())));
        }
    }
    Ok(out)
}

fn write_file(path: &Path, data: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

fn cmd_audit(a: &AuditArgs) -> Result<(), Failure> {
    let files = expand_inputs(&a.input)?;
    let stats = audit_dataset(&files);
    for f in stats.files.iter().filter(|f| f.error.is_some()) {
        warn!(file = %f.file, error = f.error.as_deref().unwrap_or_default(), "file not fully read");
    }
    if let Some(path) = &a.csv {
        let mut buf = Vec::new();
        write_csv(&stats, &mut buf).context("rendering CSV")?;
        write_file(path, &buf)?;
    }
    if let Some(path) = &a.json {
        write_file(path, (to_json(&stats) + "\n").as_bytes())?;
    }
    print!("{}", render_percentages(&stats.aggregate));
    Ok(())
}

fn load_strict(path: &Path) -> Result<LoadedCapture, Failure> {
    let cap = load_capture(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(e) = &cap.error {
        warn!(file = %path.display(), "capture damaged after {} packets: {e}", cap.packets.len());
    }
    Ok(cap)
}

fn units(cap: &LoadedCapture, granularity: Granularity, gap: f64) -> Result<Vec<TrafficUnit>, Failure> {
    Ok(match granularity {
        Granularity::Packet => split_packets(&cap.packets),
        Granularity::Burst => split_bursts(&cap.packets, gap).map_err(|e| usage(e.to_string()))?,
        Granularity::Flow => split_flows(&cap.packets).into_values().collect(),
        Granularity::Session => split_sessions(&cap.packets).into_values().collect(),
    })
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' }).collect()
}

fn cmd_split(a: &SplitArgs) -> Result<(), Failure> {
    let cap = load_strict(&a.input)?;
    let stem = a.input.file_stem().map_or("capture".into(), |s| s.to_string_lossy().into_owned());
    let units = units(&cap, a.granularity, a.burst_gap)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for u in &units {
        let raw: Vec<RawPacket> = u.packets.iter().map(|p| p.raw.clone()).collect();
        let path = a.out.join(format!("{}.{}.pcap", file_safe(&stem), file_safe(&u.key.to_string())));
        write_capture(&cap.meta, &raw, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    info!(units = units.len(), out = %a.out.display(), "split written");
    Ok(())
}

fn checked_spec(x: &ExtractionArgs, strategy: StrategyId) -> Result<ExtractionSpec, Failure> {
    let spec = x.spec();
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if !spec.compatible_with(x.granularity) {
        return Err(usage(format!("{} cannot be applied to {} units", spec.strategy, x.granularity)));
    }
    if !applicability(strategy, x.granularity, &spec) {
        return Err(usage(format!(
            "strategy {strategy} is not applicable to {} units with {} {} extraction",
            x.granularity, spec.strategy, spec.selection
        )));
    }
    Ok(spec)
}

fn cmd_extract(a: &ExtractArgs, seed: u64) -> Result<(), Failure> {
    let spec = checked_spec(&a.extraction, a.strategy)?;
    let strategy = OcclusionStrategy::get(a.strategy);
    let mut data = Vec::new();
    let mut index = String::from("file,unit,window,sni_outside_sample\n");
    let mut count = 0usize;
    for path in expand_inputs(&a.input)? {
        let cap = load_strict(&path)?;
        let name = cap.name();
        for u in units(&cap, a.extraction.granularity, a.extraction.burst_gap)? {
            for s in extract(&u, &spec).context("extracting")? {
                let fields = spans_to_fields(&s, &u.packets);
                let occ = apply_strategy(&s, &fields, &strategy, &OcclusionSeed::for_sample(seed, &name, &s));
                encode_record(0, &occ.sample.bytes, &mut data);
                index.push_str(&format!("{},{},{},{}\n", name, u.key, s.window_index, u8::from(occ.sni_outside_sample)));
                count += 1;
            }
        }
    }
    write_file(&a.out, &data)?;
    let mut index_path = a.out.clone().into_os_string();
    index_path.push(".index.csv");
    write_file(Path::new(&index_path), index.as_bytes())?;
    info!(samples = count, bytes = spec.sample_len(), out = %a.out.display(), "samples written");
    Ok(())
}

fn cmd_occlude(a: &OccludeArgs, seed: u64) -> Result<(), Failure> {
    let cap = load_strict(&a.input)?;
    let strategy = OcclusionStrategy::get(a.strategy);
    let name = cap.name();
    let frames: Vec<RawPacket> =
        cap.packets.iter().map(|p| RawPacket { data: occlude_frame(p, &strategy, seed, &name), ..p.raw.clone() }).collect();
    write_capture(&cap.meta, &frames, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!(frames = frames.len(), strategy = %a.strategy, "occluded capture written");
    Ok(())
}

fn load_sessions(inputs: &[PathBuf]) -> Result<Vec<ntckit::dataset::SourcedSession>, Failure> {
    let mut sessions = Vec::new();
    for path in expand_inputs(inputs)? {
        match load_capture(&path) {
            Ok(cap) => sessions.extend(sessions_of_capture(&cap)),
            Err(e) => warn!(file = %path.display(), "skipped: {e}"),
        }
    }
    Ok(sessions)
}

fn cmd_label(a: &LabelArgs) -> Result<(), Failure> {
    let mut sessions = load_sessions(&a.input)?;
    if !a.keep_noise {
        sessions = filter_noise(sessions);
    }
    let (labeled, unlabeled) = label_by_sni(sessions, a.collapse_subdomains);
    let mut buf = Vec::new();
    write_label_csv(&labeled, &mut buf).context("rendering CSV")?;
    write_file(&a.out, &buf)?;
    info!(labeled = labeled.len(), unlabeled = unlabeled.len(), "labels written");
    Ok(())
}

fn cmd_dataset(a: &DatasetArgs, seed: u64) -> Result<(), Failure> {
    let spec = checked_spec(&a.extraction, a.strategy)?;
    let ratios = SplitRatios::parse(&a.split).map_err(|e| usage(e.to_string()))?;
    let sessions = filter_noise(load_sessions(&a.input)?);
    let (labeled, unlabeled) = label_by_sni(sessions, a.collapse_subdomains);
    let split = split_train_test(&labeled, &ratios, seed, a.allow_small);
    for (class, n) in &split.dropped_classes {
        warn!(class = %class, sessions = n, "class has fewer sessions than splits; dropped");
    }
    let cfg = ExportConfig {
        granularity: a.extraction.granularity,
        extraction: spec,
        strategy: a.strategy,
        seed,
        burst_gap_secs: a.extraction.burst_gap,
    };
    if split.assignment.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("no labeled sessions to export")));
    }
    let manifest = export_bundle(&labeled, &split, &ratios, &cfg, &a.out).context("exporting bundle")?;
    info!(
        classes = manifest.classes.len(),
        unlabeled = unlabeled.len(),
        records = manifest.splits.iter().map(|s| s.records).sum::<usize>(),
        out = %a.out.display(),
        "bundle written"
    );
    Ok(())
}
