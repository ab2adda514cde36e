//! Command-line interface: ingest, fit, simulate, cluster, bootstrap and
//! report.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::analyze::{bootstrap_se, features_from_gammas, kmeans, length_templates, silhouette_range};
use crate::bundle::{self, fmt_sig, read_bundle, summary_text};
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig};
use crate::ingest::{
    build_codebook, clean_all, load_codebook, load_corpus, parse_log_file, save_codebook, save_corpus, CleaningProfile,
    Codebook, ParseOptions,
};
use crate::model::{EventSequence, ModelParams, Timing};
use crate::params_io::{self, fmt_f64};
use crate::seeds::with_pool;
use crate::simulate::{self, simulate_corpus, StopRule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_FIT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "proctopic", version, about = "Topic model with Markovian topic transitions for process data")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "PROCTOPIC_THREADS")]
    pub threads: Option<usize>,
    /// TOML file with defaults for any command; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean a raw log into a canonical corpus and codebook.
    Ingest(IngestArgs),
    /// Fit the model to a corpus.
    Fit(FitArgs),
    /// Simulate a corpus from a preset or parameter file.
    Simulate(SimulateArgs),
    /// Cluster examinees on their fitted transition profiles.
    Cluster(ClusterArgs),
    /// Parametric bootstrap standard errors for a fit.
    Bootstrap(BootstrapArgs),
    /// Print the summary tables of a fit bundle.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Output directory for corpus.tsv, codebook.tsv and excluded.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub id_column: Option<String>,
    /// Cleaning profile (TOML); defaults to the Climate Control rules.
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Codebook fixing V and the labels; inferred from the corpus otherwise.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop gap times from the model.
    #[arg(long)]
    pub ignore_time: bool,
    /// Parameter file used as the first restart's starting point.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Study1,
    Study2,
    Study3,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, conflicts_with = "params")]
    pub preset: Option<Preset>,
    /// Parameter file to simulate from.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 1-based event id that ends each process.
    #[arg(long)]
    pub stop_event: Option<usize>,
    #[arg(long)]
    pub max_events: Option<usize>,
    #[arg(long)]
    pub max_time: Option<f64>,
    /// Study 3 at full length (terminal event only).
    #[arg(long)]
    pub full: bool,
    /// Also write the true parameters and latent paths.
    #[arg(long)]
    pub emit_truth: bool,
    /// Corpus file; the codebook goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub n_clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Corpus the bundle was fitted on; its sequence lengths are reused.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub n_boot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub ignore_time: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Values a config file may supply.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub k: Option<usize>,
    pub restarts: Option<usize>,
    pub max_iters: Option<usize>,
    pub rel_tol: Option<f64>,
    pub ignore_time: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub m: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub n_clusters: Option<usize>,
    pub restarts: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    pub n_boot: Option<usize>,
    pub restarts: Option<usize>,
    pub max_iters: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    let profile = match &args.profile {
        Some(p) => CleaningProfile::from_toml_str(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => CleaningProfile::climate(),
    };
    let mut options = ParseOptions::default();
    if let Some(c) = &args.id_column {
        options.id_column.clone_from(c);
    }
    let groups = parse_log_file(&args.log, &options)?;
    let (kept, excluded) = clean_all(&groups, &profile)?;
    let (codebook, seqs) = build_codebook(&kept)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    save_corpus(&args.out.join("corpus.tsv"), &seqs, &codebook)?;
    save_codebook(&args.out.join("codebook.tsv"), &codebook)?;
    let mut report = String::from("examinee_id\treason\n");
    for id in &excluded {
        let _ = writeln!(report, "{id}\tempty after cleaning");
    }
    write_text(&args.out.join("excluded.tsv"), &report)?;
    log::info!(
        "ingested {} examinees ({} excluded), V = {}",
        seqs.len(),
        excluded.len(),
        codebook.v()
    );
    Ok(())
}

fn load_fit_input(corpus: &Path, codebook: Option<&Path>) -> Result<(Codebook, Vec<EventSequence>)> {
    let (from_corpus, seqs) = load_corpus(corpus)?;
    let codebook = match codebook {
        Some(p) => load_codebook(p)?,
        None => from_corpus,
    };
    if seqs.is_empty() {
        return Err(Error::EmptySequence(corpus.display().to_string()));
    }
    for s in &seqs {
        s.check_vocabulary(codebook.v())?;
    }
    Ok((codebook, seqs))
}

fn cmd_fit(args: &FitArgs, cfg: &ConfigFile) -> Result<()> {
    let k = args
        .k
        .or(cfg.fit.k)
        .ok_or_else(|| Error::InvalidConfig("--k is required".into()))?;
    let (codebook, seqs) = load_fit_input(&args.corpus, args.codebook.as_deref())?;
    let mut config = FitConfig::new(k);
    config.restarts = args.restarts.or(cfg.fit.restarts).unwrap_or(config.restarts);
    config.max_iters = args.max_iters.or(cfg.fit.max_iters).unwrap_or(config.max_iters);
    config.rel_tol = args.rel_tol.or(cfg.fit.rel_tol).unwrap_or(config.rel_tol);
    config.seed = args.seed.or(cfg.seed).unwrap_or(0);
    if args.ignore_time || cfg.fit.ignore_time == Some(true) {
        config.timing = Timing::Ignored;
    }
    if let Some(p) = &args.init {
        let init = params_io::load(p)?;
        if init.v() != codebook.v() {
            return Err(Error::DimensionMismatch {
                field: "B",
                detail: format!("initial parameters have V = {}, corpus has {}", init.v(), codebook.v()),
            });
        }
        config.init = Some(init);
    }
    let report = fit(&seqs, &config)?;
    bundle::write_bundle(&args.out, &report, &seqs, &codebook)
}

fn study_labels(preset: Option<Preset>, v: usize) -> Codebook {
    let labels: Vec<String> = match preset {
        Some(Preset::Study1) => simulate::STUDY1_LABELS.iter().map(|s| s.to_string()).collect(),
        _ => (1..=v).map(|i| i.to_string()).collect(),
    };
    Codebook::from_labels(labels).expect("distinct labels")
}

fn cmd_simulate(args: &SimulateArgs, cfg: &ConfigFile) -> Result<()> {
    let m = args
        .m
        .or(cfg.simulate.m)
        .ok_or_else(|| Error::InvalidConfig("--m is required".into()))?;
    if m == 0 {
        return Err(Error::InvalidConfig("--m must be at least 1".into()));
    }
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let codebook_path = args.out.with_extension("codebook.tsv");

    if args.preset == Some(Preset::Study1) {
        let seqs = simulate::study1_generator(m, seed)?;
        let cb = study_labels(args.preset, 6);
        if args.emit_truth {
            log::warn!("study1 has no latent truth; --emit-truth ignored");
        }
        if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_corpus(&args.out, &seqs, &cb)?;
        return save_codebook(&codebook_path, &cb);
    }

    let (params, mut stop) = match (args.preset, &args.params) {
        (Some(Preset::Study2), _) => (simulate::study2_params(), StopRule::terminal_event(simulate::STUDY2_TERMINAL)),
        (Some(Preset::Study3), _) => {
            let stop = if args.full {
                StopRule::terminal_event(999)
            } else {
                simulate::study3_stop()
            };
            (simulate::study3_params(seed)?, stop)
        }
        (None, Some(p)) => (params_io::load(p)?, StopRule::default()),
        _ => return Err(Error::InvalidConfig("one of --preset or --params is required".into())),
    };
    if let Some(v) = args.stop_event {
        if v == 0 || v > params.v() {
            return Err(Error::InvalidConfig(format!("--stop-event must be in 1..={}", params.v())));
        }
        stop.terminal_event = Some(v - 1);
    }
    if args.max_events.is_some() {
        stop.max_events = args.max_events;
    }
    if args.max_time.is_some() {
        stop.max_time = args.max_time;
    }
    if stop == StopRule::default() {
        return Err(Error::InvalidConfig(
            "a stop rule is required (--stop-event, --max-events or --max-time)".into(),
        ));
    }

    let draws = simulate_corpus(&params, &stop, m, seed)?;
    let cb = study_labels(args.preset, params.v());
    let seqs: Vec<EventSequence> = draws.iter().map(|(s, _)| s.clone()).collect();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_corpus(&args.out, &seqs, &cb)?;
    save_codebook(&codebook_path, &cb)?;
    if args.emit_truth {
        params_io::save(&params, &args.out.with_extension("truth.toml"))?;
        let mut paths = String::from("examinee_id\tn\ttopic\txi\n");
        for (s, path) in &draws {
            for (n, &z) in path.topics.iter().enumerate() {
                let _ = writeln!(paths, "{}\t{}\t{}\t{}", s.id(), n + 1, z + 1, fmt_f64(path.xi));
            }
        }
        write_text(&args.out.with_extension("paths.tsv"), &paths)?;
    }
    Ok(())
}

fn cmd_cluster(args: &ClusterArgs, cfg: &ConfigFile) -> Result<()> {
    let n_clusters = args
        .n_clusters
        .or(cfg.cluster.n_clusters)
        .ok_or_else(|| Error::InvalidConfig("--n-clusters is required".into()))?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let restarts = args.restarts.or(cfg.cluster.restarts).unwrap_or(50);
    let b = read_bundle(&args.bundle)?;
    let features = features_from_gammas(b.states.iter().map(|s| &s.gamma));
    let km = kmeans(&features, n_clusters, seed, restarts)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut assignments = String::from("examinee_id\tcluster\n");
    for (s, &c) in b.states.iter().zip(&km.assignments) {
        let _ = writeln!(assignments, "{}\t{}", s.id, c + 1);
    }
    write_text(&args.out.join("assignments.tsv"), &assignments)?;

    let k = b.params.k();
    let mut centers = String::from("cluster\tsize");
    for i in 1..=k {
        for j in 1..=k {
            let _ = write!(centers, "\tp_{i}_{j}");
        }
    }
    centers.push('\n');
    for (c, row) in km.centers.outer_iter().enumerate() {
        let size = km.assignments.iter().filter(|&&a| a == c).count();
        let _ = writeln!(centers, "{}\t{}\t{}", c + 1, size, bundle::vector_line(&row.to_owned()));
    }
    write_text(&args.out.join("centers.tsv"), &centers)?;

    let mut sil = String::from("n_clusters\tsilhouette\n");
    for (c, s) in silhouette_range(&features, 2..=8, seed, restarts)? {
        let _ = writeln!(sil, "{c}\t{}", fmt_f64(s));
    }
    write_text(&args.out.join("silhouette.tsv"), &sil)
}

fn cmd_bootstrap(args: &BootstrapArgs, cfg: &ConfigFile, threads: Option<usize>) -> Result<()> {
    let n_boot = args.n_boot.or(cfg.bootstrap.n_boot).unwrap_or(100);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let b = read_bundle(&args.bundle)?;
    let (_, seqs) = load_fit_input(&args.corpus, None)?;
    let mut config = FitConfig::new(b.params.k());
    config.restarts = args.restarts.or(cfg.bootstrap.restarts).unwrap_or(1);
    config.max_iters = args.max_iters.or(cfg.bootstrap.max_iters).unwrap_or(config.max_iters);
    config.threads = threads;
    config.init = Some(b.params.clone());
    if args.ignore_time {
        config.timing = Timing::Ignored;
    }
    let se = bootstrap_se(&b.params, &config, n_boot, &length_templates(&seqs), seed)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut tsv = String::from("parameter\trow\tcol\tse\n");
    let mut push = |name: &str, m: &ndarray::Array2<f64>| {
        for ((i, j), &x) in m.indexed_iter() {
            let _ = writeln!(tsv, "{name}\t{}\t{}\t{}", i + 1, j + 1, fmt_f64(x));
        }
    };
    push("B", &se.b);
    push("G", &se.g);
    push("normR", &se.norm_r);
    push("p0", &se.p0.clone().insert_axis(ndarray::Axis(0)));
    push("a", &ndarray::arr2(&[[se.a]]));
    push("d", &ndarray::arr2(&[[se.d]]));
    write_text(&args.out.join("se.tsv"), &tsv)?;

    let mut text = format!(
        "replicates {} succeeded, {} failed\n\nG standard errors (x10^2)\n",
        se.succeeded, se.failed
    );
    for row in se.g.outer_iter() {
        let cells: Vec<String> = row.iter().map(|&x| format!("{:>9}", fmt_sig(100.0 * x, 2))).collect();
        let _ = writeln!(text, "{}", cells.join(""));
    }
    let p0: Vec<String> = se.p0.iter().map(|&x| fmt_sig(1000.0 * x, 2)).collect();
    let _ = writeln!(text, "\np0 standard errors (x10^3)\n{}", p0.join("  "));
    write_text(&args.out.join("se_summary.txt"), &text)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let b = read_bundle(&args.bundle)?;
    let text = summary_text(&b.params, &b.codebook, 7);
    match &args.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => EXIT_USAGE,
        Error::AllRestartsFailed(_) => EXIT_FIT,
        _ => EXIT_DATA,
    }
}

fn stage(cmd: &Command) -> &'static str {
    match cmd {
        Command::Ingest(_) => "ingest",
        Command::Fit(_) => "fit",
        Command::Simulate(_) => "simulate",
        Command::Cluster(_) => "cluster",
        Command::Bootstrap(_) => "bootstrap",
        Command::Report(_) => "report",
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let threads = cli.threads.or(cfg.threads);
    if threads == Some(0) {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    with_pool(threads, || match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Fit(a) => cmd_fit(a, &cfg),
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::Cluster(a) => cmd_cluster(a, &cfg),
        Command::Bootstrap(a) => cmd_bootstrap(a, &cfg, threads),
        Command::Report(a) => cmd_report(a),
    })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("proctopic {}: {e}", stage(&cli.command));
            exit_code(&e)
        }
    }
}

/// Builds a [`ModelParams`] preset by name, for callers outside the CLI.
pub fn preset_params(preset: Preset) -> Result<Option<ModelParams>> {
    match preset {
        Preset::Study1 => Ok(None),
        Preset::Study2 => Ok(Some(simulate::study2_params())),
        Preset::Study3 => simulate::study3_params(0).map(Some),
    }
}
