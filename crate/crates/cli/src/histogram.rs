//! Cosine-similarity histograms at chosen times.

use std::path::Path;

use nalgebra::DMatrix;
use odyn_core::config::ExperimentConfig;
use odyn_core::sgd::{self, SgdRun, SimMode};
use odyn_core::trajectory::Trajectory;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub t: f64,
    /// Bin edges, `bins + 1` values spanning [-1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(t: f64, cosines: &DMatrix<f64>, bins: usize) -> Self {
        let edges: Vec<f64> = (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect();
        let mut counts = vec![0u64; bins];
        for &c in cosines.iter() {
            let c = c.clamp(-1.0, 1.0);
            let b = (((c + 1.0) / 2.0 * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { t, edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Runs the config's simulation and takes cosines at each requested time
/// (rounded to the nearest step).
pub fn from_simulation(cfg: &ExperimentConfig, times: &[f64], bins: usize) -> anyhow::Result<Vec<Histogram>> {
    let problem = cfg.problem()?;
    let (w_star, gram) = cfg.teacher()?;
    let w = cfg.initial_weights(&w_star)?;
    let mut run = match cfg.simulation.mode {
        SimMode::Weight => SgdRun::weight_space(problem, w, w_star, gram, cfg.seed)?,
        SimMode::Overlap => {
            let st = odyn_core::overlap::overlaps_of(&w, &w_star, &gram)?;
            SgdRun::overlap_space(problem, st, cfg.seed)?
        }
    };
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = vec![None; times.len()];
    for i in order {
        let target = run.problem.steps_for(times[i]);
        if target > cfg.simulation.max_steps {
            return Err(UsageError(format!("t = {} needs {target} steps, above max_steps = {}", times[i], cfg.simulation.max_steps)).into());
        }
        while run.step_index < target {
            run = sgd::step(run)?;
        }
        out[i] = Some(Histogram::of(times[i], &run.cosines(), bins));
    }
    Ok(out.into_iter().map(|h| h.expect("every time visited")).collect())
}

/// Uses the recorded snapshot nearest to each requested time.
pub fn from_trajectory(path: &Path, times: &[f64], bins: usize) -> anyhow::Result<Vec<Histogram>> {
    let traj = Trajectory::read_path(path)?;
    let snaps = traj.snapshots.as_ref().ok_or_else(|| UsageError(format!("{} has no overlap snapshots", path.display())))?;
    times
        .iter()
        .map(|&t| {
            let i = traj
                .times
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
                .map(|(i, _)| i)
                .ok_or_else(|| UsageError("empty trajectory".into()))?;
            Ok(Histogram::of(traj.times[i], &snaps[i].cosines()?, bins))
        })
        .collect()
}

pub fn write_csv(path: &Path, hists: &[Histogram]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "bin_lo", "bin_hi", "count", "density"])?;
    for h in hists {
        let width = h.edges[1] - h.edges[0];
        let total = h.total().max(1) as f64;
        for (b, &c) in h.counts.iter().enumerate() {
            w.write_record(&[
                format!("{:.16e}", h.t),
                format!("{:.16e}", h.edges[b]),
                format!("{:.16e}", h.edges[b + 1]),
                c.to_string(),
                format!("{:.16e}", c as f64 / total / width),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
