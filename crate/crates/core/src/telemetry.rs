//! Layer statistics: activation moments at projection sites and the
//! distribution of norm scales, with lossless CSV and JSON-lines export.
//!
//! Export schema, one row per value: `kind,layer,site,metric,value` where
//! `kind` is `activation` or `gamma`, `site` is a probe site or norm name,
//! and `value` uses shortest round-trip formatting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::model::{Model, NormScheme, Site};
use crate::tensor::{Tape, Tensor};
use crate::train::Sequence;
use crate::Error;

/// `top1_abs` above this multiple of the median absolute value flags a
/// super activation.
pub const SUPER_ACTIVATION_RATIO: f64 = 100.0;

/// Summary of one set of values. `std` is the population deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub top1_abs: f64,
    pub median_abs: f64,
}

impl Moments {
    /// Sums run over sorted values so the result does not depend on order.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            bail!(Argument, "statistics of an empty set");
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        // constant input is reported exactly, free of summation rounding
        let mean = if sorted[0] == sorted[sorted.len() - 1] {
            sorted[0]
        } else {
            sorted.iter().sum::<f64>() / n
        };
        let mut dev: Vec<f64> = sorted.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        let std = (dev.iter().sum::<f64>() / n).sqrt();
        let mut abs: Vec<f64> = sorted.iter().map(|x| x.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let k = abs.len();
        let median_abs = if k % 2 == 1 {
            abs[k / 2]
        } else {
            0.5 * (abs[k / 2 - 1] + abs[k / 2])
        };
        Ok(Self {
            count: values.len(),
            mean,
            std,
            top1_abs: abs[k - 1],
            median_abs,
        })
    }

    pub fn super_activation(&self) -> bool {
        self.top1_abs > SUPER_ACTIVATION_RATIO * self.median_abs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub layer: usize,
    pub site: Site,
    pub moments: Moments,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub entries: Vec<SiteStats>,
}

impl ActivationStats {
    pub fn get(&self, layer: usize, site: Site) -> Option<&Moments> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.site == site)
            .map(|e| &e.moments)
    }

    pub fn super_activations(&self) -> Vec<(usize, Site)> {
        self.entries
            .iter()
            .filter(|e| e.moments.super_activation())
            .map(|e| (e.layer, e.site))
            .collect()
    }
}

/// Runs the forward pass over `batch` and summarizes `sites` in every layer
/// over all token positions. Also returns each sequence's logits.
pub fn collect_with_logits(
    model: &Model,
    batch: &[Sequence],
    sites: &[Site],
    exec: Exec,
) -> Result<(ActivationStats, Vec<Tensor>)> {
    if batch.is_empty() {
        bail!(Argument, "activation statistics need a non-empty batch");
    }
    let layers = model.config().n_layers;
    let per_seq = exec.map(batch, |s| -> Result<(Vec<Vec<Tensor>>, Tensor)> {
        let mut tape = Tape::new();
        let trace = model.forward_on(&mut tape, &s.tokens, &s.mask)?;
        let values = (0..layers)
            .map(|l| {
                sites
                    .iter()
                    .map(|&site| tape.value(trace.site(l, site)).clone())
                    .collect()
            })
            .collect();
        Ok((values, tape.value(trace.logits).clone()))
    });
    let per_seq = per_seq.into_iter().collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(layers * sites.len());
    for layer in 0..layers {
        for (j, &site) in sites.iter().enumerate() {
            let values: Vec<f64> = per_seq
                .iter()
                .flat_map(|(v, _)| v[layer][j].data().iter().copied())
                .collect();
            entries.push(SiteStats {
                layer,
                site,
                moments: Moments::of(&values)?,
            });
        }
    }
    let logits = per_seq.into_iter().map(|(_, l)| l).collect();
    Ok((ActivationStats { entries }, logits))
}

pub fn collect_activation_stats(
    model: &Model,
    batch: &[Sequence],
    sites: &[Site],
    exec: Exec,
) -> Result<ActivationStats> {
    collect_with_logits(model, batch, sites, exec).map(|(s, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSite {
    PreAttn,
    PostAttn,
    PreMlp,
    PostMlp,
}

impl NormSite {
    pub const ALL: [NormSite; 4] = [
        NormSite::PreAttn,
        NormSite::PostAttn,
        NormSite::PreMlp,
        NormSite::PostMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormSite::PreAttn => "pre_attn",
            NormSite::PostAttn => "post_attn",
            NormSite::PreMlp => "pre_mlp",
            NormSite::PostMlp => "post_mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaEntry {
    pub layer: usize,
    pub norm: NormSite,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub entries: Vec<GammaEntry>,
}

impl GammaStats {
    pub fn get(&self, layer: usize, norm: NormSite) -> Option<&GammaEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.norm == norm)
    }
}

/// Per-layer mean and population std of every norm scale. Pre-LN models have
/// no post norms and report only the pre entries.
pub fn collect_gamma_stats(model: &Model) -> Result<GammaStats> {
    let mut entries = Vec::new();
    for (layer, b) in model.blocks.iter().enumerate() {
        let norms = [
            (NormSite::PreAttn, Some(&b.gamma_pre_attn)),
            (NormSite::PostAttn, b.gamma_post_attn.as_ref()),
            (NormSite::PreMlp, Some(&b.gamma_pre_mlp)),
            (NormSite::PostMlp, b.gamma_post_mlp.as_ref()),
        ];
        for (norm, gamma) in norms {
            if let Some(g) = gamma {
                let m = Moments::of(g.data())?;
                entries.push(GammaEntry {
                    layer,
                    norm,
                    mean: m.mean,
                    std: m.std,
                });
            }
        }
    }
    debug_assert!(
        model.config().norm_scheme != NormScheme::PreLn || entries.len() == 2 * model.blocks.len()
    );
    Ok(GammaStats { entries })
}

/// One exported value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub kind: String,
    pub layer: usize,
    pub site: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsTable {
    pub rows: Vec<StatRow>,
}

impl From<&ActivationStats> for StatsTable {
    fn from(stats: &ActivationStats) -> Self {
        let mut rows = Vec::new();
        for e in &stats.entries {
            let m = &e.moments;
            for (metric, value) in [
                ("mean", m.mean),
                ("std", m.std),
                ("top1_abs", m.top1_abs),
                ("median_abs", m.median_abs),
            ] {
                rows.push(StatRow {
                    kind: "activation".into(),
                    layer: e.layer,
                    site: e.site.name().into(),
                    metric: metric.into(),
                    value,
                });
            }
        }
        Self { rows }
    }
}

impl From<&GammaStats> for StatsTable {
    fn from(stats: &GammaStats) -> Self {
        let mut rows = Vec::new();
        for e in &stats.entries {
            for (metric, value) in [("mean", e.mean), ("std", e.std)] {
                rows.push(StatRow {
                    kind: "gamma".into(),
                    layer: e.layer,
                    site: e.norm.name().into(),
                    metric: metric.into(),
                    value,
                });
            }
        }
        Self { rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsFormat {
    Csv,
    Jsonl,
}

impl StatsFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Self::Csv),
            Some("jsonl") => Ok(Self::Jsonl),
            _ => bail!(Argument, "cannot infer stats format of {}", path.display()),
        }
    }
}

pub const CSV_HEADER: [&str; 5] = ["kind", "layer", "site", "metric", "value"];

impl StatsTable {
    pub fn extend(&mut self, other: StatsTable) {
        self.rows.extend(other.rows);
    }

    pub fn write<W: Write>(&self, w: W, format: StatsFormat) -> Result<()> {
        let err = |e: &dyn std::fmt::Display| Error::Internal(format!("stats export: {e}"));
        match format {
            StatsFormat::Csv => {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(CSV_HEADER).map_err(|e| err(&e))?;
                for r in &self.rows {
                    out.write_record([
                        r.kind.clone(),
                        r.layer.to_string(),
                        r.site.clone(),
                        r.metric.clone(),
                        format!("{:?}", r.value),
                    ])
                    .map_err(|e| err(&e))?;
                }
                out.flush().map_err(|e| err(&e))
            }
            StatsFormat::Jsonl => {
                let mut w = w;
                for r in &self.rows {
                    serde_json::to_writer(&mut w, r).map_err(|e| err(&e))?;
                    writeln!(w).map_err(|e| err(&e))?;
                }
                Ok(())
            }
        }
    }

    pub fn read<R: BufRead>(r: R, format: StatsFormat) -> Result<Self> {
        let mut rows = Vec::new();
        match format {
            StatsFormat::Csv => {
                let mut rdr = csv::Reader::from_reader(r);
                let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
                if header.iter().ne(CSV_HEADER) {
                    bail!(Parse, "unexpected stats header {header:?}");
                }
                for rec in rdr.deserialize() {
                    rows.push(rec.map_err(|e| Error::Parse(e.to_string()))?);
                }
            }
            StatsFormat::Jsonl => {
                for (i, line) in r.lines().enumerate() {
                    let line = line.map_err(|e| Error::Parse(e.to_string()))?;
                    if !line.trim().is_empty() {
                        rows.push(
                            serde_json::from_str(&line)
                                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?,
                        );
                    }
                }
            }
        }
        Ok(Self { rows })
    }
}

/// Writes `table` to `path`, format chosen by the `.csv` / `.jsonl` extension.
pub fn export_stats(table: &StatsTable, path: &Path) -> Result<()> {
    let format = StatsFormat::from_path(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    table.write(&mut w, format)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_stats(path: &Path) -> Result<StatsTable> {
    let format = StatsFormat::from_path(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    StatsTable::read(BufReader::new(file), format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn moments_examples() {
        let m = Moments::of(&[1.0; 7]).unwrap();
        assert_eq!((m.mean, m.std, m.top1_abs), (1.0, 0.0, 1.0));
        let m = Moments::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.std - 0.81650).abs() < 1e-5);
        assert_eq!(m.top1_abs, 3.0);
        assert!(Moments::of(&[]).is_err());
    }

    #[test]
    fn outlier_sets_super_activation() {
        let mut v: Vec<f64> = (0..200)
            .map(|i| ((i % 7) as f64 - 3.0) * 0.5 + 0.1)
            .collect();
        v[17] = 1e3;
        let m = Moments::of(&v).unwrap();
        assert_eq!(m.top1_abs, 1e3);
        assert!(m.super_activation());
        v[17] = 0.2;
        assert!(!Moments::of(&v).unwrap().super_activation());
    }

    #[test]
    fn gamma_stats_at_init() {
        let cfg = ModelConfig {
            n_layers: 4,
            ..ModelConfig::toy()
        };
        let mut model = Model::build(cfg, 0).unwrap();
        let g = collect_gamma_stats(&model).unwrap();
        assert_eq!(g.entries.len(), 16);
        for l in 0..4 {
            let post = g.get(l, NormSite::PostAttn).unwrap();
            assert!(
                (post.mean - 0.1415).abs() < 1e-12 && post.std == 0.0,
                "{post:?}"
            );
            let pre = g.get(l, NormSite::PreAttn).unwrap();
            assert_eq!((pre.mean, pre.std), (1.0, 0.0));
        }
        let gamma = model.blocks[2].gamma_post_mlp.as_mut().unwrap();
        let half = gamma.len() / 2;
        gamma.data_mut()[..half].iter_mut().for_each(|x| *x += 0.1);
        let before =
            collect_gamma_stats(&Model::build(model.config().clone(), 0).unwrap()).unwrap();
        let after = collect_gamma_stats(&model).unwrap();
        let (b, a) = (
            before.get(2, NormSite::PostMlp).unwrap(),
            after.get(2, NormSite::PostMlp).unwrap(),
        );
        assert!((a.mean - b.mean - 0.05).abs() < 1e-12);
        assert!((a.std - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pre_ln_reports_pre_norms_only() {
        let cfg = ModelConfig {
            n_layers: 3,
            norm_scheme: NormScheme::PreLn,
            ..ModelConfig::toy()
        };
        let g = collect_gamma_stats(&Model::build(cfg, 0).unwrap()).unwrap();
        assert_eq!(g.entries.len(), 6);
        assert!(g
            .entries
            .iter()
            .all(|e| matches!(e.norm, NormSite::PreAttn | NormSite::PreMlp)));
    }

    #[test]
    fn export_arithmetic_and_empty_csv() {
        let mut table = StatsTable::default();
        for layer in 0..2 {
            for site in ["attn_out_proj", "ffn_down_proj"] {
                for metric in ["mean", "std", "top1_abs"] {
                    table.rows.push(StatRow {
                        kind: "activation".into(),
                        layer,
                        site: site.into(),
                        metric: metric.into(),
                        value: 0.1 * layer as f64 + 1.0 / 3.0,
                    });
                }
            }
        }
        let mut buf = Vec::new();
        table.write(&mut buf, StatsFormat::Csv).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 13);
        let mut empty = Vec::new();
        StatsTable::default()
            .write(&mut empty, StatsFormat::Csv)
            .unwrap();
        assert_eq!(
            String::from_utf8(empty).unwrap(),
            "kind,layer,site,metric,value\n"
        );
    }
}
