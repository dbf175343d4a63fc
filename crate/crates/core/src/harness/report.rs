use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{metric_ps, metric_sr, weight_entropy, EpisodeResult};
use crate::error::{Result, TmowError};

/// One line of metrics.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub domain: String,
    pub episodes: usize,
    pub sr: f64,
    pub ps: f64,
    /// Mean routing entropy over every recorded decision and layer.
    pub entropy: Option<f64>,
}

impl MetricRow {
    pub fn from_results(scenario: &str, domain: &str, results: &[EpisodeResult]) -> Result<Self> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for w in results.iter().flat_map(|r| &r.decisions).flatten() {
            sum += weight_entropy(w);
            count += 1;
        }
        Ok(Self {
            scenario: scenario.to_string(),
            domain: domain.to_string(),
            episodes: results.len(),
            sr: metric_sr(results)?,
            ps: metric_ps(results)?,
            entropy: (count > 0).then(|| sum / count as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub rows: Vec<MetricRow>,
    /// Mean entropy per layer over the decisions of the report's main variant.
    pub layer_entropy: Vec<f64>,
    /// Mean weight per `[layer][expert]` over the same decisions.
    pub heatmap: Vec<Vec<f64>>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
}

impl ScenarioReport {
    pub fn new(scenario: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            scenario: scenario.to_string(),
            rows: Vec::new(),
            layer_entropy: Vec::new(),
            heatmap: Vec::new(),
            config,
            seeds,
        }
    }

    /// Fills the layer entropy and heatmap from a set of episodes. Experts missing from
    /// shorter weight vectors count as zero weight.
    pub fn set_routing_summary(&mut self, results: &[EpisodeResult]) {
        let decisions: Vec<&Vec<Vec<f64>>> = results.iter().flat_map(|r| &r.decisions).collect();
        let Some(first) = decisions.first() else {
            self.layer_entropy.clear();
            self.heatmap.clear();
            return;
        };
        let layers = first.len();
        let experts = decisions.iter().flat_map(|d| d.iter().map(Vec::len)).max().unwrap_or(0);
        let mut heat = vec![vec![0.0; experts]; layers];
        let mut ent = vec![0.0; layers];
        for d in &decisions {
            for (l, w) in d.iter().enumerate() {
                ent[l] += weight_entropy(w);
                heat[l].iter_mut().zip(w).for_each(|(h, x)| *h += x);
            }
        }
        let n = decisions.len() as f64;
        self.layer_entropy = ent.into_iter().map(|x| x / n).collect();
        self.heatmap = heat
            .into_iter()
            .map(|row| row.into_iter().map(|x| x / n).collect())
            .collect();
    }

    pub fn row(&self, scenario: &str, domain: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.domain == domain)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("scenario,domain,episodes,sr,ps,entropy\n");
        for r in &self.rows {
            let ent = r.entropy.map(|e| format!("{e:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{:.6},{:.6},{}", r.scenario, r.domain, r.episodes, r.sr, r.ps, ent);
        }
        out
    }

    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("layer,expert,weight\n");
        for (l, row) in self.heatmap.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                let _ = writeln!(out, "{l},{j},{w:.6}");
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("scenario: {}\nseeds: {:?}\n\n", self.scenario, self.seeds);
        let _ = writeln!(out, "{:<28} {:<20} {:>8} {:>8} {:>8}", "variant", "domain", "SR", "PS", "entropy");
        for r in &self.rows {
            let ent = r.entropy.map(|e| format!("{e:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<28} {:<20} {:>8.3} {:>8.2} {:>8}", r.scenario, r.domain, r.sr, r.ps, ent);
        }
        if !self.layer_entropy.is_empty() {
            let layers: Vec<String> = self.layer_entropy.iter().map(|e| format!("{e:.3}")).collect();
            let _ = writeln!(out, "\nlayer entropy: {}", layers.join(" "));
        }
        out
    }
}

/// Writes metrics.csv, heatmap.csv, config.json and summary.txt into `dir`.
pub fn emit_report(report: &ScenarioReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| TmowError::io(dir, e))?;
    let config = serde_json::to_string_pretty(&serde_json::json!({
        "scenario": report.scenario,
        "seeds": report.seeds,
        "config": report.config,
    }))?;
    let files = [
        ("metrics.csv", report.metrics_csv()),
        ("heatmap.csv", report.heatmap_csv()),
        ("config.json", config + "\n"),
        ("summary.txt", report.summary()),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| TmowError::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
