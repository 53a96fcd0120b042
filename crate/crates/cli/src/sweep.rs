//! Grid sweeps with per-point result files, so an interrupted sweep resumes
//! where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use odyn_core::config::{ExperimentConfig, RegimeTag, SweepMetric, SweepPoint, SweepSpec};
use odyn_core::ode::{compare, run_ode};
use odyn_core::sgd::run_sgd;
use odyn_core::trajectory::Trajectory;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub index: usize,
    pub labels: Vec<(String, String)>,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

impl PointResult {
    pub fn ok(&self) -> bool {
        self.metric.is_some()
    }
}

pub struct SweepOutcome {
    pub results: Vec<PointResult>,
    pub resumed: usize,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.ok()).count()
    }
}

pub fn run_config(cfg: &ExperimentConfig) -> odyn_core::error::Result<Trajectory> {
    if cfg.regime == RegimeTag::Simulate {
        run_sgd(cfg, None)
    } else {
        run_ode(cfg)
    }
}

fn point_file(dir: &Path, index: usize) -> PathBuf {
    dir.join("points").join(format!("pt{index:05}.json"))
}

fn evaluate(spec: &SweepSpec, point: &SweepPoint, dir: &Path) -> Result<f64, String> {
    let traj = run_config(&point.config).map_err(|e| e.to_string())?;
    traj.write_files(&dir.join("points"), true, false).map_err(|e| e.to_string())?;
    let horizon = point.config.horizon;
    match spec.metric {
        SweepMetric::TerminalRisk => traj.final_risk().ok_or_else(|| "empty trajectory".to_string()),
        SweepMetric::PlateauLevel => traj
            .mean_risk_after(horizon * (1.0 - spec.plateau_fraction))
            .ok_or_else(|| "no records in the plateau window".to_string()),
        SweepMetric::SupRiskGap => {
            let mut reference = point.config.clone();
            reference.regime = spec.reference;
            reference.tag = format!("{}_ref", point.config.tag);
            let other = run_config(&reference).map_err(|e| format!("reference run: {e}"))?;
            other.write_files(&dir.join("points"), true, false).map_err(|e| e.to_string())?;
            compare(&traj, &other).map(|r| r.sup_risk_gap).map_err(|e| e.to_string())
        }
    }
}

/// Runs every point not already completed in `dir`, using `workers` threads.
pub fn run(spec: &SweepSpec, dir: &Path, workers: usize) -> anyhow::Result<SweepOutcome> {
    let points = spec.points()?;
    fs::create_dir_all(dir.join("points"))?;
    fs::write(dir.join("sweep.toml"), toml::to_string(spec)?)?;
    let done: Vec<Option<PointResult>> = points
        .iter()
        .map(|p| {
            let text = fs::read_to_string(point_file(dir, p.index)).ok()?;
            let r: PointResult = serde_json::from_str(&text).ok()?;
            (r.ok() && r.labels == p.labels).then_some(r)
        })
        .collect();
    let resumed = done.iter().filter(|r| r.is_some()).count();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let results: Vec<PointResult> = pool.install(|| {
        points
            .par_iter()
            .zip(done.into_par_iter())
            .map(|(p, prev)| {
                if let Some(r) = prev {
                    return Ok(r);
                }
                log::info!("sweep point {} {:?}", p.index, p.labels);
                let (metric, error) = match evaluate(spec, p, dir) {
                    Ok(m) => (Some(m), None),
                    Err(e) => {
                        log::warn!("sweep point {} failed: {e}", p.index);
                        (None, Some(e))
                    }
                };
                let r = PointResult { index: p.index, labels: p.labels.clone(), metric, error };
                fs::write(point_file(dir, p.index), serde_json::to_string_pretty(&r)?)?;
                Ok(r)
            })
            .collect::<anyhow::Result<_>>()
    })?;
    write_tables(&results, dir)?;
    Ok(SweepOutcome { results, resumed })
}

fn axis_names(results: &[PointResult]) -> Vec<String> {
    results.first().map(|r| r.labels.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default()
}

/// `sweep.csv` has one row per point; `phase_map.csv` averages the metric
/// over seeds at each remaining grid coordinate.
fn write_tables(results: &[PointResult], dir: &Path) -> anyhow::Result<()> {
    let axes = axis_names(results);
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    let mut header = vec!["index".to_string()];
    header.extend(axes.iter().cloned());
    header.extend(["metric".to_string(), "status".to_string(), "error".to_string()]);
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![r.index.to_string()];
        row.extend(r.labels.iter().map(|(_, v)| v.clone()));
        row.push(r.metric.map(|m| format!("{m:.16e}")).unwrap_or_default());
        row.push(if r.ok() { "ok" } else { "failed" }.to_string());
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut groups: BTreeMap<Vec<String>, (Vec<f64>, usize)> = BTreeMap::new();
    let keep: Vec<usize> = axes.iter().enumerate().filter(|(_, a)| a.as_str() != "seed").map(|(i, _)| i).collect();
    let mut order = Vec::new();
    for r in results {
        let key: Vec<String> = keep.iter().map(|&i| r.labels[i].1.clone()).collect();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let g = groups.entry(key).or_default();
        match r.metric {
            Some(m) => g.0.push(m),
            None => g.1 += 1,
        }
    }
    let mut w = csv::Writer::from_path(dir.join("phase_map.csv"))?;
    let mut header: Vec<String> = keep.iter().map(|&i| axes[i].clone()).collect();
    header.extend(["mean".into(), "std_err".into(), "n_ok".into(), "n_failed".into()]);
    w.write_record(&header)?;
    for key in order {
        let (vals, failed) = &groups[&key];
        let n = vals.len() as f64;
        let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / n };
        let se = if vals.len() > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { f64::NAN };
        let mut row = key.clone();
        row.extend([format!("{mean:.16e}"), format!("{se:.16e}"), vals.len().to_string(), failed.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
