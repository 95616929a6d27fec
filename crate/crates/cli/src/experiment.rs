//! Training runs described by an [`ExperimentConfig`].
//!
//! Run directory layout:
//!
//! ```text
//! <hash>-<UTC timestamp>/
//!   config.json           resolved config
//!   summary.json          per-variant summary
//!   logs/<variant>.jsonl  RunLog, one StepRecord per line
//!   stats/<variant>/step-<N>.csv
//!   ckpt/<variant>.json
//!   plots/*.svg
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use trainlab::model::{checkpoint, Model, ModelConfig};
use trainlab::telemetry::{
    collect_activation_stats, collect_gamma_stats, export_stats, StatsTable,
};
use trainlab::train::{
    detect_spike, niah_probe, run_phase_plan, select_rope_base, DataSource, NiahCorpus, NiahReport,
    RopeSelection, RunLog, Sequence, StepRecord, SyntheticCorpus, TrainOptions,
};
use trainlab::Exec;

use crate::config::{DataConfig, ExperimentConfig, Variant};
use crate::plot;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Caps optimizer steps across all phases, for smoke runs.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahOutcome {
    /// Probe at each configured length with the training base.
    pub reports: Vec<NiahReport>,
    pub selection: Option<RopeSelection>,
    /// Held-out comparison at the sweep length.
    pub held_out_original: Option<NiahReport>,
    pub held_out_selected: Option<NiahReport>,
}

pub struct VariantResult {
    pub name: String,
    pub model_config: ModelConfig,
    pub log: RunLog,
    /// `(step, stats)` snapshots; the last one is taken after training.
    pub snapshots: Vec<(u64, StatsTable)>,
    pub model: Model,
    pub niah: Option<NiahOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub steps: usize,
    pub stopped_early: bool,
    /// Mean of the last (up to) 100 finite losses.
    pub final_loss: Option<f64>,
    pub non_finite_steps: usize,
    pub spike_events: usize,
    /// Population std / mean of finite gradient norms.
    pub grad_norm_cv: Option<f64>,
    pub niah: Option<NiahOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub variants: Vec<VariantSummary>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: ExperimentSummary,
}

fn data_source(cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn DataSource>> {
    Ok(match &cfg.data {
        DataConfig::Synthetic { .. } => Box::new(SyntheticCorpus::new(cfg.corpus_spec(seed))?),
        DataConfig::Niah { min_len, .. } => {
            Box::new(NiahCorpus::new(cfg.niah_task()?, *min_len, seed)?)
        }
    })
}

/// Fixed batch the activation stats are measured on.
pub fn probe_batch(cfg: &ExperimentConfig) -> Result<Vec<Sequence>> {
    let t = &cfg.telemetry;
    let mut src = data_source(cfg, cfg.seeds()?.probe)?;
    let mut batch = Vec::with_capacity(t.probe_batch);
    for _ in 0..t.probe_batch {
        batch.push(
            src.next_sequence(t.probe_seq_len)?
                .context("probe data ran out")?,
        );
    }
    Ok(batch)
}

fn snapshot(
    cfg: &ExperimentConfig,
    model: &Model,
    batch: &[Sequence],
    exec: Exec,
) -> trainlab::Result<StatsTable> {
    let mut table = StatsTable::from(&collect_activation_stats(
        model,
        batch,
        &cfg.telemetry.sites,
        exec,
    )?);
    table.extend(StatsTable::from(&collect_gamma_stats(model)?));
    Ok(table)
}

/// Trains one variant in memory; nothing is written to disk.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: &Variant,
    opts: &RunOptions,
) -> Result<VariantResult> {
    cfg.validate()?;
    let seeds = cfg.seeds()?;
    let model_config = cfg.model_for(variant);
    let mut model = Model::build(model_config.clone(), seeds.model)?;
    let mut data = data_source(cfg, seeds.data)?;
    let probe = probe_batch(cfg)?;
    let every = cfg.telemetry.stats_every;
    let mut snapshots = Vec::new();
    let mut sink = |r: &StepRecord, m: &Model| -> trainlab::Result<()> {
        if every > 0 && (r.step + 1).is_multiple_of(every) {
            snapshots.push((r.step + 1, snapshot(cfg, m, &probe, opts.exec)?));
        }
        Ok(())
    };
    let train_opts = TrainOptions {
        optim: cfg.optim,
        exec: opts.exec,
        max_steps: opts.max_steps,
    };
    let log = run_phase_plan(&cfg.plan, &mut model, data.as_mut(), &mut sink, &train_opts)
        .with_context(|| format!("training variant `{}`", variant.name))?;
    let done = log.records.len() as u64;
    if snapshots.last().map(|s| s.0) != Some(done) {
        snapshots.push((done, snapshot(cfg, &model, &probe, opts.exec)?));
    }
    let niah = match &cfg.niah {
        Some(_) => Some(run_niah(cfg, &mut model, opts.exec)?),
        None => None,
    };
    Ok(VariantResult {
        name: variant.name.clone(),
        model_config,
        log,
        snapshots,
        model,
        niah,
    })
}

/// Probes the trained model. The RoPE-base sweep picks a winner on the
/// selection seed and both bases are then scored on a held-out seed.
pub fn run_niah(cfg: &ExperimentConfig, model: &mut Model, exec: Exec) -> Result<NiahOutcome> {
    let eval = cfg.niah.as_ref().context("config has no niah section")?;
    let seeds = cfg.seeds()?;
    let task = cfg.niah_task()?;
    let reports = eval
        .context_lens
        .iter()
        .map(|&len| {
            niah_probe(
                model,
                &task,
                len,
                eval.cases_per_depth,
                &eval.depths,
                seeds.held_out,
                exec,
            )
        })
        .collect::<trainlab::Result<Vec<_>>>()?;
    let mut out = NiahOutcome {
        reports,
        selection: None,
        held_out_original: None,
        held_out_selected: None,
    };
    if let (Some(len), false) = (eval.sweep_len, eval.rope_candidates.is_empty()) {
        let sel = select_rope_base(
            model,
            &eval.rope_candidates,
            &task,
            len,
            eval.cases_per_depth,
            &eval.depths,
            seeds.selection,
            exec,
        )?;
        let original = model.config().rope_base;
        let held = |m: &Model| {
            niah_probe(
                m,
                &task,
                len,
                eval.cases_per_depth,
                &eval.depths,
                seeds.held_out,
                exec,
            )
        };
        out.held_out_original = Some(held(model)?);
        model.set_rope_base(sel.best_base)?;
        let selected = held(model);
        model.set_rope_base(original)?;
        out.held_out_selected = Some(selected?);
        out.selection = Some(sel);
    }
    Ok(out)
}

pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean != 0.0).then(|| var.sqrt() / mean)
}

impl VariantResult {
    pub fn summary(&self, cfg: &ExperimentConfig) -> VariantSummary {
        let losses = self.log.losses();
        let finite: Vec<f64> = losses.iter().copied().filter(|l| l.is_finite()).collect();
        let tail = &finite[finite.len().saturating_sub(100)..];
        VariantSummary {
            name: self.name.clone(),
            steps: self.log.records.len(),
            stopped_early: self.log.stopped_early,
            final_loss: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
            non_finite_steps: self.log.non_finite_steps(),
            spike_events: detect_spike(&losses, &cfg.telemetry.spike).len(),
            grad_norm_cv: coefficient_of_variation(&self.log.grad_norms()),
            niah: self.niah.clone(),
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn json_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// `<hash>-<UTC timestamp>` under `root`, suffixed if that name is taken.
pub fn create_run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{}-{stamp}", cfg.hash());
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = root.join(format!("{base}-{k}"));
    }
    for sub in ["logs", "stats", "ckpt", "plots"] {
        fs::create_dir_all(dir.join(sub))
            .with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    Ok(dir)
}

/// Runs every variant and writes all artifacts under a fresh run directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    runs_root: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = create_run_dir(runs_root, cfg)?;
    write(&dir.join("config.json"), json_pretty(cfg)?)?;
    let mut results = Vec::new();
    for v in cfg.resolved_variants() {
        let r = run_variant(cfg, &v, opts)?;
        write(
            &dir.join("logs").join(format!("{}.jsonl", r.name)),
            r.log.to_jsonl(),
        )?;
        let stats_dir = dir.join("stats").join(&r.name);
        fs::create_dir_all(&stats_dir)?;
        for (step, table) in &r.snapshots {
            export_stats(table, &stats_dir.join(format!("step-{step:06}.csv")))?;
        }
        if cfg.telemetry.checkpoint {
            checkpoint::save(&r.model, &dir.join("ckpt").join(format!("{}.json", r.name)))?;
        }
        results.push(r);
    }
    write_plots(&dir.join("plots"), &results)?;
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed.expect("validated"),
        variants: results.iter().map(|r| r.summary(cfg)).collect(),
    };
    write(&dir.join("summary.json"), json_pretty(&summary)?)?;
    Ok(RunOutcome { dir, summary })
}

fn write_plots(dir: &Path, results: &[VariantResult]) -> Result<()> {
    let logs: Vec<String> = results.iter().map(|r| r.log.to_jsonl()).collect();
    let hash = plot::data_hash(logs.iter().map(|s| s.as_bytes()));
    let runs: Vec<(String, &RunLog)> = results.iter().map(|r| (r.name.clone(), &r.log)).collect();
    write(&dir.join("loss.svg"), plot::loss_chart(&runs, &hash))?;
    write(
        &dir.join("grad_norm.svg"),
        plot::grad_norm_chart(&runs, &hash),
    )?;
    let finals: Vec<(String, &StatsTable)> = results
        .iter()
        .filter_map(|r| r.snapshots.last().map(|(_, t)| (r.name.clone(), t)))
        .collect();
    let mut csv = Vec::new();
    for (_, t) in &finals {
        t.write(&mut csv, trainlab::telemetry::StatsFormat::Csv)?;
    }
    let hash = plot::data_hash([csv.as_slice()]);
    if let Some((_, first)) = finals.first() {
        for (kind, metric) in plot::stat_metrics(first) {
            if matches!(metric.as_str(), "mean" | "top1_abs") {
                let svg = plot::stats_chart(&finals, &kind, &metric, &hash);
                write(&dir.join(format!("{kind}_{metric}.svg")), svg)?;
            }
        }
    }
    Ok(())
}
