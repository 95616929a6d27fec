use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use trainlab::model::Site;
use trainlab::telemetry::{export_stats, load_stats, StatsTable};
use trainlab::train::RunLog;
use trainlab::Exec;
use trainlab_cli::commands::{self, NiahArgs};
use trainlab_cli::{experiment, plot, presets, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(
    name = "trainlab",
    version,
    about = "Desk-scale training stability and parallelism lab"
)]
struct Cli {
    /// Evaluate everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every variant of an experiment and write a run directory.
    Run(RunArgs),
    /// List the shipped presets, or print one.
    Presets {
        /// Print this preset's TOML.
        name: Option<String>,
    },
    /// Simulate an interleaved 1F1B pipeline and compare with the closed form.
    SimulatePp(PpArgs),
    /// Split a packed sequence across context-parallel ranks.
    PartitionCp(CpArgs),
    /// Train per-domain BPE vocabularies and merge them.
    BuildVocab(VocabArgs),
    /// Export activation and gamma statistics of a checkpoint.
    Stats(StatsArgs),
    /// Render run logs or stats tables as SVG.
    Plot(PlotArgs),
    /// Needle-in-a-haystack retrieval probe of a checkpoint.
    Niah(NiahCli),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Name of a shipped preset.
    #[arg(long)]
    preset: Option<String>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Stop every variant after this many steps.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct PpArgs {
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    v: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    fwd: u64,
    #[arg(long, default_value_t = 2)]
    bwd: u64,
    /// Comma-separated per-layer costs to balance over the p*v stages.
    #[arg(long, value_delimiter = ',')]
    layer_costs: Option<Vec<u64>>,
    /// Write a Gantt chart of the uniform schedule here.
    #[arg(long)]
    gantt: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CpArgs {
    /// Comma-separated document lengths of the packed sequence.
    #[arg(long, value_delimiter = ',', required = true)]
    lens: Vec<usize>,
    #[arg(long)]
    cp: usize,
    /// naive, megatron_2cp or balanced_subseq.
    #[arg(long, default_value = "balanced_subseq")]
    strategy: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VocabArgs {
    /// JSON or TOML manifest: specials and [{domain, path, target_size}].
    #[arg(long)]
    manifest: PathBuf,
    /// Unified vocabulary file to write.
    #[arg(long)]
    out: PathBuf,
    /// Write the provenance report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output file; `.csv` or `.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Comma-separated sites; all by default.
    #[arg(long, value_delimiter = ',')]
    sites: Option<Vec<String>>,
}

#[derive(Args)]
struct PlotArgs {
    /// RunLog `.jsonl` files (overlaid) or stats `.csv`/`.jsonl` files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Directory for the images; defaults to the first input's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct NiahCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    context_len: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    depths: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    value_start: usize,
    /// Override the checkpoint's RoPE base.
    #[arg(long)]
    rope_base: Option<f64>,
    /// Candidate RoPE bases swept at the longest context length.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    sweep_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_site(name: &str) -> Result<Site> {
    match Site::ALL.into_iter().find(|s| s.name() == name) {
        Some(s) => Ok(s),
        None => bail!(
            "unknown site `{name}` (expected one of {})",
            Site::ALL.map(Site::name).join(", ")
        ),
    }
}

fn run(args: RunArgs, exec: Exec) -> Result<()> {
    let cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => presets::load(name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    fs::create_dir_all(&args.runs_dir)
        .with_context(|| format!("creating {}", args.runs_dir.display()))?;
    let opts = RunOptions {
        exec,
        max_steps: args.max_steps,
    };
    let outcome = experiment::run_experiment(&cfg, &args.runs_dir, &opts)?;
    eprintln!("run directory: {}", outcome.dir.display());
    emit_json(&outcome.summary, None)
}

fn plot_cmd(args: PlotArgs) -> Result<()> {
    let first = &args.inputs[0];
    let out_dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => first.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out_dir).ok();
    let stem = first
        .file_stem()
        .and_then(|s| s.to_str())
        .context("input has no file name")?
        .to_string();
    let bytes = args
        .inputs
        .iter()
        .map(|p| fs::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let hash = plot::data_hash(bytes.iter().map(Vec::as_slice));
    let label = |p: &Path| {
        p.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("?")
            .to_string()
    };
    let logs: Option<Vec<RunLog>> = args
        .inputs
        .iter()
        .zip(&bytes)
        .map(|(p, b)| {
            let is_jsonl = p.extension().and_then(|e| e.to_str()) == Some("jsonl");
            is_jsonl
                .then(|| RunLog::read_jsonl(b.as_slice()).ok())
                .flatten()
        })
        .collect();
    let mut written = Vec::new();
    if let Some(logs) = logs {
        let runs: Vec<(String, &RunLog)> =
            args.inputs.iter().map(|p| label(p)).zip(&logs).collect();
        for (name, svg) in [
            ("loss", plot::loss_chart(&runs, &hash)),
            ("grad_norm", plot::grad_norm_chart(&runs, &hash)),
        ] {
            let path = out_dir.join(format!("{stem}-{name}.svg"));
            fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
    } else {
        let tables = args
            .inputs
            .iter()
            .map(|p| {
                load_stats(p).with_context(|| {
                    format!("{} is neither a RunLog nor a stats table", p.display())
                })
            })
            .collect::<Result<Vec<StatsTable>>>()?;
        let named: Vec<(String, &StatsTable)> =
            args.inputs.iter().map(|p| label(p)).zip(&tables).collect();
        for (kind, metric) in plot::stat_metrics(&tables[0]) {
            let path = out_dir.join(format!("{stem}-{kind}_{metric}.svg"));
            fs::write(&path, plot::stats_chart(&named, &kind, &metric, &hash))
                .with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Run(args) => run(args, exec),
        Command::Presets { name: None } => {
            presets::names().for_each(|n| println!("{n}"));
            Ok(())
        }
        Command::Presets { name: Some(n) } => {
            print!("{}", presets::source(&n)?);
            Ok(())
        }
        Command::SimulatePp(a) => {
            let (report, timeline) =
                commands::simulate_pp(a.p, a.v, a.n, a.fwd, a.bwd, a.layer_costs.as_deref())?;
            if let Some(path) = &a.gantt {
                let json = serde_json::to_string(&timeline)?;
                let svg = trainlab::svg::gantt(
                    &timeline,
                    &plot::hash_comment(&plot::data_hash([json.as_bytes()])),
                );
                fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
            }
            emit_json(&report, a.out.as_deref())
        }
        Command::PartitionCp(a) => emit_json(
            &commands::partition_cp(&a.lens, a.cp, &a.strategy)?,
            a.out.as_deref(),
        ),
        Command::BuildVocab(a) => {
            let (vocab, report) = commands::build_vocab(&a.manifest, exec)?;
            vocab.save(&a.out)?;
            match &a.report {
                Some(_) => emit_json(&report, a.report.as_deref()),
                None => {
                    println!("{report}");
                    Ok(())
                }
            }
        }
        Command::Stats(a) => {
            let sites = match &a.sites {
                None => Site::ALL.to_vec(),
                Some(names) => names.iter().map(|n| parse_site(n)).collect::<Result<_>>()?,
            };
            let table = commands::checkpoint_stats(
                &a.checkpoint,
                a.seed,
                a.batch,
                a.seq_len,
                &sites,
                exec,
            )?;
            export_stats(&table, &a.out)?;
            Ok(())
        }
        Command::Plot(a) => plot_cmd(a),
        Command::Niah(a) => {
            let args = NiahArgs {
                context_lens: a.context_len,
                cases_per_depth: a.cases,
                depths: a.depths,
                seed: a.seed,
                value_start: a.value_start,
                rope_base: a.rope_base,
                sweep: a.sweep,
                sweep_seed: a.sweep_seed,
            };
            emit_json(
                &commands::niah(&a.checkpoint, &args, exec)?,
                a.out.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
