//! Subcommand bodies. Each returns a serializable report; the binary only
//! handles argument parsing and output placement.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trainlab::mask::CompressedMask;
use trainlab::model::{checkpoint, Site};
use trainlab::parallel::{
    assignment_idle_fraction, balance_stages, bubble_ratio_1f1b, bubble_ratio_1f1b_exact,
    bubble_ratio_interleaved, bubble_ratio_interleaved_exact, cp_partition, simulate_schedule,
    CpStrategy, PipelineSpec, ScheduleTimeline, StageCost,
};
use trainlab::telemetry::{collect_activation_stats, collect_gamma_stats, StatsTable};
use trainlab::tokenizer::{
    merge_vocabs, train_domains, DomainCorpus, ProvenanceReport, UnifiedVocab,
};
use trainlab::train::{
    niah_probe, select_rope_base, CorpusSpec, DataSource, NiahReport, NiahTask, RopeSelection,
    SyntheticCorpus,
};
use trainlab::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub layer_costs: Vec<u64>,
    /// `[first_layer, end_layer)` per virtual stage.
    pub groups: Vec<(usize, usize)>,
    pub group_costs: Vec<u64>,
    pub max_cost: u64,
    pub simulated_idle_fraction: f64,
    pub simulated_idle_fraction_exact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpReport {
    pub p: usize,
    pub v: usize,
    pub n: usize,
    pub fwd_cost: u64,
    pub bwd_cost: u64,
    /// `(p-1)/(v*n+p-1)`; equals the 1F1B ratio when `v = 1`.
    pub closed_form: f64,
    pub closed_form_exact: String,
    pub closed_form_1f1b: f64,
    pub simulated_idle_fraction: f64,
    pub simulated_idle_fraction_exact: String,
    pub matches_closed_form: bool,
    pub makespan: u64,
    pub busy_time: u64,
    pub balance: Option<Balance>,
}

fn ratio_f64(r: num_rational::Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Simulates a uniform pipeline; with `layer_costs` also balances them over
/// the `p * v` virtual stages and simulates that assignment.
pub fn simulate_pp(
    p: usize,
    v: usize,
    n: usize,
    fwd: u64,
    bwd: u64,
    layer_costs: Option<&[u64]>,
) -> Result<(PpReport, ScheduleTimeline)> {
    let spec = PipelineSpec {
        stage_costs: vec![StageCost { fwd, bwd }; p * v],
        ..PipelineSpec::uniform(p, v, n)
    };
    let timeline = simulate_schedule(&spec)?;
    let (pu, vu, nu) = (p as u64, v as u64, n as u64);
    let exact = bubble_ratio_interleaved_exact(pu, vu, nu);
    let sim = timeline.idle_fraction();
    let balance = match layer_costs {
        None => None,
        Some(costs) => {
            let a = balance_stages(costs, p, v)?;
            let idle = assignment_idle_fraction(&a, p, v, n)?;
            Some(Balance {
                layer_costs: costs.to_vec(),
                groups: a.groups.clone(),
                group_costs: a.group_costs.clone(),
                max_cost: a.max_cost,
                simulated_idle_fraction: ratio_f64(idle),
                simulated_idle_fraction_exact: idle.to_string(),
            })
        }
    };
    let report = PpReport {
        p,
        v,
        n,
        fwd_cost: fwd,
        bwd_cost: bwd,
        closed_form: bubble_ratio_interleaved(pu, vu, nu),
        closed_form_exact: exact.to_string(),
        closed_form_1f1b: bubble_ratio_1f1b(pu, nu),
        simulated_idle_fraction: ratio_f64(sim),
        simulated_idle_fraction_exact: sim.to_string(),
        matches_closed_form: sim == exact && (v > 1 || sim == bubble_ratio_1f1b_exact(pu, nu)),
        makespan: timeline.makespan,
        busy_time: timeline.busy_time(),
        balance,
    };
    Ok((report, timeline))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpReport {
    pub cp: usize,
    pub strategy: String,
    pub seq_lens: Vec<usize>,
    /// `[start, end)` position ranges per rank.
    pub chunks: Vec<Vec<(usize, usize)>>,
    pub workloads: Vec<u64>,
    /// Largest over smallest workload.
    pub imbalance: f64,
}

pub fn partition_cp(seq_lens: &[usize], cp: usize, strategy: &str) -> Result<CpReport> {
    let strategy: CpStrategy = strategy.parse()?;
    let mask = CompressedMask::new(seq_lens.to_vec())?;
    let plan = cp_partition(&mask, cp, strategy)?;
    let max = plan.workloads.iter().copied().max().unwrap_or(0);
    let min = plan.workloads.iter().copied().min().unwrap_or(0);
    Ok(CpReport {
        cp,
        strategy: strategy.name().into(),
        seq_lens: seq_lens.to_vec(),
        chunks: plan
            .chunks
            .iter()
            .map(|r| r.iter().map(|c| (c.start, c.end)).collect())
            .collect(),
        workloads: plan.workloads,
        imbalance: if min == 0 {
            f64::INFINITY
        } else {
            max as f64 / min as f64
        },
    })
}

/// Input of `build-vocab`. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabManifest {
    #[serde(default)]
    pub specials: Vec<String>,
    /// In priority order: earlier domains own shared tokens.
    pub domains: Vec<ManifestDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDomain {
    pub domain: String,
    /// A text file with one document per line, or a directory whose files
    /// are each one document.
    pub path: PathBuf,
    pub target_size: usize,
}

impl VocabManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            _ => serde_json::from_str(&text)?,
        };
        Ok(m)
    }
}

fn read_documents(path: &Path) -> Result<Vec<Vec<u8>>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|f| f.is_file());
        files.sort();
        files
            .iter()
            .map(|f| std::fs::read(f).with_context(|| format!("reading {}", f.display())))
            .collect()
    } else {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(bytes
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(<[u8]>::to_vec)
            .collect())
    }
}

pub fn build_vocab(manifest_path: &Path, exec: Exec) -> Result<(UnifiedVocab, ProvenanceReport)> {
    let manifest = VocabManifest::load(manifest_path)?;
    if manifest.domains.is_empty() {
        bail!("domains: at least one domain is required");
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let corpora = manifest
        .domains
        .iter()
        .map(|d| {
            let docs = read_documents(&root.join(&d.path))
                .with_context(|| format!("domain `{}`", d.domain))?;
            Ok((DomainCorpus::new(d.domain.clone(), docs), d.target_size))
        })
        .collect::<Result<Vec<_>>>()?;
    let vocabs = train_domains(&corpora, exec)?;
    let unified = merge_vocabs(&vocabs, &manifest.specials)?;
    let report = unified.provenance();
    Ok((unified, report))
}

/// Activation stats on a synthetic probe batch plus gamma stats.
pub fn checkpoint_stats(
    ckpt: &Path,
    seed: u64,
    batch: usize,
    seq_len: usize,
    sites: &[Site],
    exec: Exec,
) -> Result<StatsTable> {
    let model = checkpoint::load(ckpt)?;
    if batch == 0 {
        bail!("--batch must be positive");
    }
    let mut corpus = SyntheticCorpus::new(CorpusSpec::toy(model.config().vocab_size, seed))?;
    let seqs = (0..batch)
        .map(|_| {
            corpus
                .next_sequence(seq_len)?
                .context("probe corpus ran out")
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = StatsTable::from(&collect_activation_stats(&model, &seqs, sites, exec)?);
    table.extend(StatsTable::from(&collect_gamma_stats(&model)?));
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahCommandReport {
    pub rope_base: f64,
    pub reports: Vec<NiahReport>,
    pub selection: Option<RopeSelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahArgs {
    pub context_lens: Vec<usize>,
    pub cases_per_depth: usize,
    pub depths: Vec<f64>,
    pub seed: u64,
    pub value_start: usize,
    pub rope_base: Option<f64>,
    /// Candidates swept at the longest context length on `sweep_seed`.
    pub sweep: Vec<f64>,
    pub sweep_seed: u64,
}

pub fn niah(ckpt: &Path, args: &NiahArgs, exec: Exec) -> Result<NiahCommandReport> {
    let mut model = checkpoint::load(ckpt)?;
    if let Some(b) = args.rope_base {
        model.set_rope_base(b)?;
    }
    let task = NiahTask {
        value_start: args.value_start,
        vocab_size: model.config().vocab_size,
    };
    task.validate()?;
    if args.context_lens.is_empty() {
        bail!("--context-len: at least one length is required");
    }
    let selection = if args.sweep.is_empty() {
        None
    } else {
        let len = *args.context_lens.iter().max().expect("non-empty");
        Some(select_rope_base(
            &mut model,
            &args.sweep,
            &task,
            len,
            args.cases_per_depth,
            &args.depths,
            args.sweep_seed,
            exec,
        )?)
    };
    let reports = args
        .context_lens
        .iter()
        .map(|&len| {
            niah_probe(
                &model,
                &task,
                len,
                args.cases_per_depth,
                &args.depths,
                args.seed,
                exec,
            )
        })
        .collect::<trainlab::Result<Vec<_>>>()?;
    Ok(NiahCommandReport {
        rope_base: model.config().rope_base,
        reports,
        selection,
    })
}
