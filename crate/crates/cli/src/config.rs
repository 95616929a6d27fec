//! Declarative experiment files (TOML).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trainlab::model::{InitScheme, ModelConfig, NormScheme, Site};
use trainlab::train::{CorpusSpec, NiahTask, OptimHyper, PhasePlan, SpikeDetector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Required. Model init, data and probe seeds are derived from it.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub plan: PhasePlan,
    #[serde(default)]
    pub optim: OptimHyper,
    pub data: DataConfig,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    /// Each variant is one training run. No variants means a single run of
    /// the base config.
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub niah: Option<NiahEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Packed arithmetic-progression documents.
    Synthetic {
        min_doc_len: usize,
        max_doc_len: usize,
        max_stride: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        token_limit: Option<u64>,
    },
    /// Retrieval sequences of random length in `min_len..=seq_len`.
    Niah { value_start: usize, min_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    /// Snapshot activation and gamma stats every this many steps; 0 keeps
    /// only the final snapshot.
    pub stats_every: u64,
    pub sites: Vec<Site>,
    pub probe_batch: usize,
    pub probe_seq_len: usize,
    pub spike: SpikeDetector,
    /// Write a checkpoint for each variant at the end of training.
    pub checkpoint: bool,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            stats_every: 0,
            sites: Site::ALL.to_vec(),
            probe_batch: 4,
            probe_seq_len: 64,
            spike: SpikeDetector::default(),
            checkpoint: true,
        }
    }
}

/// Overrides applied to the base model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub norm_scheme: Option<NormScheme>,
    #[serde(default)]
    pub init_scheme: Option<InitScheme>,
    #[serde(default)]
    pub n_layers: Option<usize>,
}

/// Retrieval probe after training, with an optional RoPE-base sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiahEval {
    pub context_lens: Vec<usize>,
    pub cases_per_depth: usize,
    pub depths: Vec<f64>,
    /// Candidate bases tried at `sweep_len`; the winner is then scored on a
    /// held-out seed against the training base.
    #[serde(default)]
    pub rope_candidates: Vec<f64>,
    #[serde(default)]
    pub sweep_len: Option<usize>,
}

/// Independent sub-seeds for the parts of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub probe: u64,
    pub selection: u64,
    pub held_out: u64,
}

impl Seeds {
    pub fn from_root(seed: u64) -> Self {
        let at = |k: u64| seed.wrapping_add(k);
        Self {
            model: at(0),
            data: at(1),
            probe: at(2),
            selection: at(3),
            held_out: at(4),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("config does not parse")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn seeds(&self) -> Result<Seeds> {
        match self.seed {
            Some(s) => Ok(Seeds::from_root(s)),
            None => bail!("seed: required"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            bail!("name: must not be empty");
        }
        self.seeds()?;
        self.model
            .validate()
            .map_err(|e| anyhow::anyhow!("model: {e}"))?;
        self.plan
            .validate()
            .map_err(|e| anyhow::anyhow!("plan: {e}"))?;
        self.optim
            .validate()
            .map_err(|e| anyhow::anyhow!("optim: {e}"))?;
        for (i, v) in self.variants.iter().enumerate() {
            if v.name.is_empty() || v.name.contains(['/', '\\']) {
                bail!("variants[{i}].name: must be a non-empty file-name-safe string");
            }
            if self.variants[..i].iter().any(|o| o.name == v.name) {
                bail!("variants[{i}].name: duplicate `{}`", v.name);
            }
            let m = self.model_for(v);
            m.validate()
                .map_err(|e| anyhow::anyhow!("variants[{i}]: {e}"))?;
        }
        let max_len = self
            .plan
            .phases
            .iter()
            .map(|p| p.seq_len)
            .max()
            .unwrap_or(0);
        if max_len > self.model.max_seq_len {
            bail!(
                "plan: seq_len {max_len} exceeds model.max_seq_len {}",
                self.model.max_seq_len
            );
        }
        match &self.data {
            DataConfig::Synthetic { .. } => {
                self.corpus_spec(0)
                    .validate()
                    .map_err(|e| anyhow::anyhow!("data: {e}"))?;
            }
            DataConfig::Niah { min_len, .. } => {
                let task = self.niah_task()?;
                if *min_len < 4 {
                    bail!("data.min_len: must be at least 4");
                }
                if task.vocab_size != self.model.vocab_size {
                    bail!("data: retrieval task needs the model vocabulary");
                }
            }
        }
        let t = &self.telemetry;
        if t.probe_batch == 0 || t.probe_seq_len == 0 {
            bail!("telemetry: probe_batch and probe_seq_len must be positive");
        }
        if t.probe_seq_len > self.model.max_seq_len {
            bail!("telemetry.probe_seq_len: exceeds model.max_seq_len");
        }
        if t.spike.window == 0 || !(t.spike.k > 0.0) {
            bail!("telemetry.spike: window and k must be positive");
        }
        if let Some(n) = &self.niah {
            if !matches!(self.data, DataConfig::Niah { .. }) {
                bail!("niah: retrieval probe requires `data.kind = \"niah\"`");
            }
            if n.context_lens.is_empty() || n.cases_per_depth == 0 || n.depths.is_empty() {
                bail!("niah: context_lens, cases_per_depth and depths must be non-empty");
            }
            if n.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
                bail!("niah.depths: must lie in [0, 1]");
            }
            if n.context_lens.iter().any(|&c| c > self.model.max_seq_len) {
                bail!("niah.context_lens: exceeds model.max_seq_len");
            }
            if !n.rope_candidates.is_empty() && n.sweep_len.is_none() {
                bail!("niah.sweep_len: required when rope_candidates are given");
            }
            if n.rope_candidates
                .iter()
                .any(|b| !(*b > 0.0 && b.is_finite()))
            {
                bail!("niah.rope_candidates: must be positive");
            }
        }
        Ok(())
    }

    /// Variants to run; a lone unnamed run is called `base`.
    pub fn resolved_variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            vec![Variant {
                name: "base".into(),
                norm_scheme: None,
                init_scheme: None,
                n_layers: None,
            }]
        } else {
            self.variants.clone()
        }
    }

    pub fn model_for(&self, v: &Variant) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(s) = v.norm_scheme {
            m.norm_scheme = s;
        }
        if let Some(s) = v.init_scheme {
            m.init_scheme = s;
        }
        if let Some(l) = v.n_layers {
            m.n_layers = l;
        }
        m
    }

    pub fn corpus_spec(&self, seed: u64) -> CorpusSpec {
        match &self.data {
            DataConfig::Synthetic {
                min_doc_len,
                max_doc_len,
                max_stride,
                noise,
                token_limit,
            } => CorpusSpec {
                vocab_size: self.model.vocab_size,
                min_doc_len: *min_doc_len,
                max_doc_len: *max_doc_len,
                max_stride: *max_stride,
                noise: *noise,
                seed,
                token_limit: *token_limit,
            },
            DataConfig::Niah { .. } => CorpusSpec::toy(self.model.vocab_size, seed),
        }
    }

    pub fn niah_task(&self) -> Result<NiahTask> {
        let value_start = match &self.data {
            DataConfig::Niah { value_start, .. } => *value_start,
            DataConfig::Synthetic { .. } => NiahTask::default().value_start,
        };
        let task = NiahTask {
            value_start,
            vocab_size: self.model.vocab_size,
        };
        task.validate().map_err(|e| anyhow::anyhow!("data: {e}"))?;
        Ok(task)
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }
}
