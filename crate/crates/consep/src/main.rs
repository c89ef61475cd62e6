//! Command-line facade: every subcommand is a thin composition of library
//! calls, so CLI results are bit-identical to direct API use.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use consep::analysis::{bad_case_partition, evaluate, gender_profile, quantity_report};
use consep::audio::{read_wav, write_wav, WavEncoding};
use consep::consistency::{build_sci, SourceSet};
use consep::cps::{select, SelectionConfig};
use consep::driver::{resume, run_sct, SctConfig};
use consep::error::{Error, Result};
use consep::fusion::{hkf_rewrite, linear_fuse};
use consep::manifest::{read_manifest, write_manifest, Manifest, ManifestMeta};
use consep::mixsim::{build_dataset, read_source_list, DatasetConfig};
use consep::separators::{separate_batch, BackendSpec};

#[derive(Parser)]
#[command(name = "consep", version, about = "Two-model separation consistency pipeline")]
struct Cli {
    /// Seed for all randomness in the invoked subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for batch operations.
    #[arg(long, global = true, env = "CONSEP_PARALLELISM", default_value_t = 1)]
    parallelism: usize,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,
    /// Base directory for run state (checkpoints, stage outputs).
    #[arg(long, global = true, env = "CONSEP_WORKDIR")]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a two-speaker mixture dataset from a source list.
    Mix(MixArgs),
    /// Run a separation backend over every mixture in a manifest.
    Separate(SeparateArgs),
    /// Score agreement between two separators' outputs for each mixture.
    Score(ScoreArgs),
    /// Select pseudo-labeled mixtures from a scored manifest.
    Cps(CpsArgs),
    /// Rewrite a selection's pseudo labels to another model's outputs.
    Hkf(HkfArgs),
    /// Fuse two separators' outputs in the spectrogram domain.
    Fuse(FuseArgs),
    /// Run the full adaptation loop from a config file.
    SctRun(SctRunArgs),
    /// Continue an interrupted loop from its work dir.
    Resume,
    /// Reports: evaluation tables and selection diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args)]
struct MixArgs {
    /// Source list: one {"path", "speaker_id", "gender"?} JSON object per line.
    #[arg(long)]
    sources: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0.0)]
    snr_min_db: f64,
    #[arg(long, default_value_t = 5.0)]
    snr_max_db: f64,
    #[arg(long, default_value_t = 4.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 8000)]
    rate_hz: u32,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Backend: "identity", "oracle", "noisy_oracle:<snr_db>[:<seed>]", or a
    /// JSON object (see the library's backend spec).
    #[arg(long)]
    backend: String,
    #[arg(long, default_value_t = 2)]
    num_sources: usize,
    /// Keep already-present output files instead of recomputing them.
    #[arg(long)]
    skip_existing: bool,
    /// Path for the output manifest (default: <out_dir>/manifest.jsonl).
    #[arg(long)]
    out_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Manifest listing the mixtures to score.
    #[arg(long)]
    mix_manifest: PathBuf,
    /// Directory with the primary model's outputs (<id>.s1.wav ...).
    #[arg(long)]
    primary_dir: PathBuf,
    /// Directory with the reviewer model's outputs.
    #[arg(long)]
    reviewer_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    num_sources: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CpsArgs {
    /// Scored manifest to select from.
    #[arg(long)]
    scored: PathBuf,
    #[arg(long, value_enum)]
    mode: CpsMode,
    /// cps1: keep the top p percent by agreement score.
    #[arg(long, default_value_t = 50.0)]
    p: f64,
    /// cps2: agreement score must exceed alpha.
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// cps2: mixture-similarity score must stay below beta.
    #[arg(long, default_value_t = 5.0)]
    beta: f64,
    /// oracle: ground-truth score must exceed eta.
    #[arg(long, default_value_t = 5.0)]
    eta: f64,
    /// oracle mode: manifest carrying ground-truth reference paths.
    #[arg(long)]
    gt_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CpsMode {
    Cps1,
    Cps2,
    Oracle,
}

#[derive(Args)]
struct HkfArgs {
    /// Selection manifest whose selected records get their labels rewritten.
    #[arg(long)]
    selected: PathBuf,
    /// Directory with the replacement outputs (<id>.s1.wav ...).
    #[arg(long)]
    reviewer_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    num_sources: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// Manifest listing the ids to fuse.
    #[arg(long)]
    mix_manifest: PathBuf,
    #[arg(long)]
    primary_dir: PathBuf,
    #[arg(long)]
    reviewer_dir: PathBuf,
    /// Weight of the primary magnitude in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    lambda: f64,
    #[arg(long, default_value_t = 2)]
    num_sources: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SctRunArgs {
    /// TOML configuration for the loop.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// SDRi/SI-SNRi scoreboard of separations against ground truth.
    Evaluate(EvaluateArgs),
    /// Success/failure partition across two systems.
    Badcases(BadcasesArgs),
    /// Gender makeup of a selection, ranked by agreement score.
    Gender(GenderArgs),
    /// Per-iteration selection quantities of a finished or running loop.
    Quantity,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt_manifest: PathBuf,
    #[arg(long)]
    sep_manifest: PathBuf,
    #[command(flatten)]
    output: ReportOutput,
}

#[derive(Args)]
struct BadcasesArgs {
    #[arg(long)]
    gt_manifest: PathBuf,
    #[arg(long)]
    primary_manifest: PathBuf,
    #[arg(long)]
    reviewer_manifest: PathBuf,
    /// A system fails a mixture when its SI-SNRi falls below this.
    #[arg(long)]
    threshold_db: f64,
    #[command(flatten)]
    output: ReportOutput,
}

#[derive(Args)]
struct GenderArgs {
    #[arg(long)]
    selection: PathBuf,
    #[arg(long, default_value_t = 500)]
    top_k: usize,
    #[command(flatten)]
    output: ReportOutput,
}

#[derive(Args)]
struct ReportOutput {
    /// Emit machine-readable JSON instead of a text table.
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ReportOutput {
    fn emit(&self, text: String, json: String) -> Result<()> {
        let body = if self.json { json } else { text };
        match &self.out {
            Some(path) => std::fs::write(path, body).map_err(|e| Error::io(path, e)),
            None => {
                print!("{body}");
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.log_level {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn parse_backend(s: &str, default_seed: u64) -> Result<BackendSpec> {
    match s {
        "identity" => return Ok(BackendSpec::Identity),
        "oracle" => return Ok(BackendSpec::Oracle),
        _ => {}
    }
    if let Some(rest) = s.strip_prefix("noisy_oracle:") {
        let mut parts = rest.splitn(2, ':');
        let snr = parts
            .next()
            .unwrap_or_default()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad noise SNR in backend {s:?}: {e}")))?;
        let seed = match parts.next() {
            Some(p) => p
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("bad seed in backend {s:?}: {e}")))?,
            None => default_seed,
        };
        return Ok(BackendSpec::NoisyOracle {
            noise_snr_db: snr,
            seed,
        });
    }
    serde_json::from_str(s).map_err(|e| Error::Config(format!("unrecognized backend {s:?}: {e}")))
}

/// Load the outputs `<dir>/<id>.s1.wav .. .sM.wav` produced by a separation
/// run, together with their paths.
fn load_sep_dir(dir: &Path, id: &str, num_sources: usize) -> Result<(SourceSet, Vec<PathBuf>)> {
    let paths: Vec<PathBuf> = (1..=num_sources)
        .map(|k| dir.join(format!("{id}.s{k}.wav")))
        .collect();
    let set = SourceSet::new(paths.iter().map(read_wav).collect::<Result<Vec<_>>>()?)?;
    Ok((set, paths))
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mix(args) => {
            let sources = read_source_list(&args.sources)?;
            let cfg = DatasetConfig {
                count: args.count,
                snr_range_db: (args.snr_min_db, args.snr_max_db),
                duration_s: args.duration_s,
                rate_hz: args.rate_hz,
                seed: cli.seed,
            };
            build_dataset(&sources, &cfg, &args.out_dir)?;
            Ok(())
        }
        Command::Separate(args) => {
            let backend = parse_backend(&args.backend, cli.seed)?;
            let manifest = read_manifest(&args.manifest)?;
            let out = separate_batch(
                &backend,
                &manifest,
                &args.out_dir,
                args.num_sources,
                cli.parallelism,
                args.skip_existing,
            )?;
            let out_path = args
                .out_manifest
                .unwrap_or_else(|| args.out_dir.join("manifest.jsonl"));
            write_manifest(&out, out_path)
        }
        Command::Score(args) => {
            let manifest = read_manifest(&args.mix_manifest)?;
            let scored = score_dirs(
                &manifest,
                &args.primary_dir,
                &args.reviewer_dir,
                args.num_sources,
                cli.parallelism,
            )?;
            write_manifest(&scored, &args.out)
        }
        Command::Cps(args) => {
            let scored = read_manifest(&args.scored)?;
            let selection = match args.mode {
                CpsMode::Cps1 => SelectionConfig::Cps1 { p_percent: args.p },
                CpsMode::Cps2 => SelectionConfig::Cps2 {
                    alpha_db: args.alpha,
                    beta_db: args.beta,
                },
                CpsMode::Oracle => SelectionConfig::Oracle { eta_db: args.eta },
            };
            let out = apply_selection(&scored, &selection, args.gt_manifest.as_deref())?;
            write_manifest(&out, &args.out)
        }
        Command::Hkf(args) => {
            let selected_manifest = read_manifest(&args.selected)?;
            let tuples = selected_manifest
                .records
                .iter()
                .filter(|r| r.selected == Some(true))
                .map(consep::SciTuple::from_record)
                .collect::<Result<Vec<_>>>()?;
            let mut reviewer_map = HashMap::new();
            for t in &tuples {
                let paths: Vec<PathBuf> = (1..=args.num_sources)
                    .map(|k| args.reviewer_dir.join(format!("{}.s{k}.wav", t.id)))
                    .collect();
                for p in &paths {
                    if !p.exists() {
                        return Err(Error::Lookup(format!(
                            "replacement output {} is missing",
                            p.display()
                        )));
                    }
                }
                reviewer_map.insert(t.id.clone(), paths);
            }
            let rewritten = hkf_rewrite(&tuples, &reviewer_map)?;
            let by_id: HashMap<&str, &consep::SciTuple> =
                rewritten.iter().map(|t| (t.id.as_str(), t)).collect();
            let mut out = selected_manifest.clone();
            out.meta.kind = "t_set".into();
            for rec in &mut out.records {
                if let Some(t) = by_id.get(rec.id.as_str()) {
                    rec.seps = t.seps.clone();
                    rec.origin = Some(consep::Origin::Reviewer);
                }
            }
            write_manifest(&out, &args.out)
        }
        Command::Fuse(args) => {
            let manifest = read_manifest(&args.mix_manifest)?;
            std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
            for rec in &manifest.records {
                let (p, _) = load_sep_dir(&args.primary_dir, &rec.id, args.num_sources)?;
                let (r, _) = load_sep_dir(&args.reviewer_dir, &rec.id, args.num_sources)?;
                let fused = linear_fuse(&p, &r, args.lambda)?;
                for (k, w) in fused.sources().iter().enumerate() {
                    let path = args.out_dir.join(format!("{}.s{}.wav", rec.id, k + 1));
                    write_wav(path, w, WavEncoding::Float32)?;
                }
            }
            Ok(())
        }
        Command::SctRun(args) => {
            let mut cfg = SctConfig::from_toml_file(&args.config)?;
            if let Some(dir) = &cli.work_dir {
                cfg.work_dir = dir.clone();
            }
            let reports = run_sct(&cfg)?;
            print!("{}", quantity_report(&reports)?.to_text());
            Ok(())
        }
        Command::Resume => {
            let dir = cli
                .work_dir
                .ok_or_else(|| Error::Config("resume requires --work-dir".into()))?;
            let reports = resume(&dir)?;
            print!("{}", quantity_report(&reports)?.to_text());
            Ok(())
        }
        Command::Analyze(cmd) => match cmd {
            AnalyzeCommand::Evaluate(args) => {
                let gt = read_manifest(&args.gt_manifest)?;
                let sep = read_manifest(&args.sep_manifest)?;
                let pool = thread_pool(cli.parallelism)?;
                let report = pool.install(|| evaluate(&gt, &sep))?;
                args.output.emit(report.to_text(), report.to_json())
            }
            AnalyzeCommand::Badcases(args) => {
                let gt = read_manifest(&args.gt_manifest)?;
                let p = read_manifest(&args.primary_manifest)?;
                let r = read_manifest(&args.reviewer_manifest)?;
                let pool = thread_pool(cli.parallelism)?;
                let report =
                    pool.install(|| bad_case_partition(&gt, &p, &r, args.threshold_db))?;
                args.output.emit(report.to_text(), report.to_json())
            }
            AnalyzeCommand::Gender(args) => {
                let selection = read_manifest(&args.selection)?;
                let report = gender_profile(&selection, args.top_k)?;
                args.output.emit(report.to_text(), report.to_json())
            }
            AnalyzeCommand::Quantity => {
                let dir = cli
                    .work_dir
                    .ok_or_else(|| Error::Config("analyze quantity requires --work-dir".into()))?;
                let path = dir.join("checkpoint.json");
                let text =
                    std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let ckpt: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
                let reports: Vec<consep::driver::IterationReport> =
                    serde_json::from_value(ckpt["reports"].clone())
                        .map_err(|e| Error::Checkpoint(format!("corrupt reports: {e}")))?;
                print!("{}", quantity_report(&reports)?.to_text());
                Ok(())
            }
        },
    }
}

/// Score every mixture of `manifest` against per-id output files in two
/// directories, producing a scored manifest with absolute sep paths.
fn score_dirs(
    manifest: &Manifest,
    primary_dir: &Path,
    reviewer_dir: &Path,
    num_sources: usize,
    parallelism: usize,
) -> Result<Manifest> {
    use rayon::prelude::*;
    let pool = thread_pool(parallelism)?;
    let mut records: Vec<(usize, consep::ManifestRecord)> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(idx, rec)| {
                let mut out =
                    consep::ManifestRecord::new(rec.id.clone(), manifest.resolve(&rec.mix));
                out.speakers = rec.speakers.clone();
                out.genders = rec.genders.clone();
                out.snr_db = rec.snr_db;
                let result = (|| -> Result<()> {
                    let mix = read_wav(manifest.resolve(&rec.mix))?;
                    let (x, x_paths) = load_sep_dir(primary_dir, &rec.id, num_sources)?;
                    let (v, _) = load_sep_dir(reviewer_dir, &rec.id, num_sources)?;
                    let t = build_sci(
                        rec.id.clone(),
                        &mix,
                        &x,
                        &v,
                        manifest.resolve(&rec.mix),
                        x_paths,
                    )?;
                    out.scm_db = Some(t.scm_db);
                    out.mscm_db = Some(t.mscm_db);
                    out.seps = t.seps;
                    out.origin = Some(consep::Origin::Primary);
                    out.status = Some("ok".into());
                    Ok(())
                })();
                if let Err(e) = result {
                    out.status = Some(format!("unscorable: {e}"));
                }
                (idx, out)
            })
            .collect()
    });
    records.sort_by_key(|(idx, _)| *idx);
    let mut out = Manifest::new(ManifestMeta::new("scored"), std::path::Path::new("."));
    out.records = records.into_iter().map(|(_, r)| r).collect();
    Ok(out)
}

/// Run a selection rule over a scored manifest and flag each scorable record.
fn apply_selection(
    scored: &Manifest,
    selection: &SelectionConfig,
    gt_manifest: Option<&Path>,
) -> Result<Manifest> {
    let tuples: Vec<consep::SciTuple> = scored
        .records
        .iter()
        .filter(|r| r.is_ok() && r.scm_db.is_some())
        .map(consep::SciTuple::from_record)
        .collect::<Result<_>>()?;

    let selected = if matches!(selection, SelectionConfig::Oracle { .. }) {
        let gt_path = gt_manifest.ok_or_else(|| {
            Error::Config("oracle selection requires --gt-manifest".into())
        })?;
        let gt_man = read_manifest(gt_path)?;
        let mut gt = HashMap::new();
        let mut seps = HashMap::new();
        for t in &tuples {
            let rec = gt_man
                .get(&t.id)
                .ok_or_else(|| Error::Lookup(format!("no ground truth for id {:?}", t.id)))?;
            gt.insert(
                t.id.clone(),
                SourceSet::new(
                    rec.refs
                        .iter()
                        .map(|p| read_wav(gt_man.resolve(p)))
                        .collect::<Result<Vec<_>>>()?,
                )?,
            );
            seps.insert(
                t.id.clone(),
                SourceSet::new(
                    t.seps
                        .iter()
                        .map(|p| read_wav(scored.resolve(p)))
                        .collect::<Result<Vec<_>>>()?,
                )?,
            );
        }
        select(selection, &tuples, Some(&gt), Some(&seps))?
    } else {
        select(selection, &tuples, None, None)?
    };
    let selected_ids: std::collections::HashSet<&str> =
        selected.iter().map(|t| t.id.as_str()).collect();

    let mut out = scored.clone();
    out.meta.kind = "d_set".into();
    out.meta.config = Some(serde_json::to_value(selection).expect("serializable selection"));
    for rec in &mut out.records {
        if rec.is_ok() && rec.scm_db.is_some() {
            rec.selected = Some(selected_ids.contains(rec.id.as_str()));
        }
    }
    Ok(out)
}
