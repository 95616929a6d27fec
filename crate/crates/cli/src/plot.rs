//! SVG renderings of run logs and stats tables. Every image carries the
//! SHA-256 of the data it was drawn from in a leading XML comment.

use sha2::{Digest, Sha256};
use trainlab::svg::{line_chart, Series};
use trainlab::telemetry::StatsTable;
use trainlab::train::RunLog;

pub fn data_hash<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    hex::encode(h.finalize())
}

pub fn hash_comment(hash: &str) -> String {
    format!("data-sha256: {hash}")
}

/// Extracts the hash written by [`hash_comment`] from an SVG document.
pub fn embedded_hash(svg: &str) -> Option<&str> {
    let start = svg.find("data-sha256: ")? + "data-sha256: ".len();
    svg.get(start..start + 64)
}

/// Skipped steps show up as gaps.
pub fn loss_chart(runs: &[(String, &RunLog)], hash: &str) -> String {
    let series = runs
        .iter()
        .map(|(name, log)| Series {
            name: name.clone(),
            points: log
                .records
                .iter()
                .map(|r| (r.step as f64, r.loss.unwrap_or(f64::NAN)))
                .collect(),
        })
        .collect::<Vec<_>>();
    line_chart(
        "Training loss",
        "step",
        "loss",
        &series,
        &hash_comment(hash),
    )
}

pub fn grad_norm_chart(runs: &[(String, &RunLog)], hash: &str) -> String {
    let series = runs
        .iter()
        .map(|(name, log)| Series {
            name: name.clone(),
            points: log
                .records
                .iter()
                .map(|r| (r.step as f64, r.grad_norm.unwrap_or(f64::NAN)))
                .collect(),
        })
        .collect::<Vec<_>>();
    line_chart(
        "Gradient norm (pre-clip)",
        "step",
        "global norm",
        &series,
        &hash_comment(hash),
    )
}

/// Distinct `(kind, metric)` pairs in first-seen order.
pub fn stat_metrics(table: &StatsTable) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for r in &table.rows {
        if !out.iter().any(|(k, m)| *k == r.kind && *m == r.metric) {
            out.push((r.kind.clone(), r.metric.clone()));
        }
    }
    out
}

/// One line per site of `metric` against layer index.
pub fn stats_chart(
    tables: &[(String, &StatsTable)],
    kind: &str,
    metric: &str,
    hash: &str,
) -> String {
    let mut series: Vec<Series> = Vec::new();
    for (label, table) in tables {
        for r in table
            .rows
            .iter()
            .filter(|r| r.kind == kind && r.metric == metric)
        {
            let name = if tables.len() > 1 {
                format!("{label}:{}", r.site)
            } else {
                r.site.clone()
            };
            match series.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push((r.layer as f64, r.value)),
                None => series.push(Series {
                    name,
                    points: vec![(r.layer as f64, r.value)],
                }),
            }
        }
    }
    line_chart(
        &format!("{kind} {metric} by layer"),
        "layer",
        metric,
        &series,
        &hash_comment(hash),
    )
}
