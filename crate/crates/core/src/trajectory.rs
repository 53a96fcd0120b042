//! Time-indexed records of risk and overlaps, with CSV and JSON round-trips.
//!
//! CSV layout: a header row, then `t`, `risk`, and when snapshots are carried
//! the flattened state. Overlap snapshots use `Q_i_j` (upper triangle),
//! `M_i_r`, `P_r_s` (upper triangle); reduced snapshots use `M_i_r`, `q_i`,
//! `P_r_s`. Floats are written with 17 significant digits so values
//! round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::overlap::{OverlapState, ReducedMFState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Snapshot {
    Overlap(OverlapState),
    Reduced {
        #[serde(flatten)]
        state: ReducedMFState,
        #[serde(with = "crate::linalg::serde_matrix")]
        p: DMatrix<f64>,
    },
}

impl Snapshot {
    pub fn m(&self) -> &DMatrix<f64> {
        match self {
            Snapshot::Overlap(s) => &s.m,
            Snapshot::Reduced { state, .. } => &state.m,
        }
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        match self {
            Snapshot::Overlap(s) => &s.p,
            Snapshot::Reduced { p, .. } => p,
        }
    }

    /// Cosine similarities `M_jr / √(Q_jj P_rr)`; for a reduced snapshot
    /// `Q_jj = [M P⁻¹ Mᵀ]_jj + q_j`.
    pub fn cosines(&self) -> Result<DMatrix<f64>> {
        match self {
            Snapshot::Overlap(s) => Ok(s.cosines()),
            Snapshot::Reduced { state, p } => Ok(crate::overlap::bar_omega(state, p)?.cosines()),
        }
    }

    fn header(&self) -> Vec<String> {
        let m = self.m();
        let (np, nk) = (m.nrows(), m.ncols());
        let mut h = Vec::new();
        if let Snapshot::Overlap(_) = self {
            for i in 0..np {
                for j in i..np {
                    h.push(format!("Q_{i}_{j}"));
                }
            }
        }
        for i in 0..np {
            for r in 0..nk {
                h.push(format!("M_{i}_{r}"));
            }
        }
        if let Snapshot::Reduced { .. } = self {
            for i in 0..np {
                h.push(format!("q_{i}"));
            }
        }
        for r in 0..nk {
            for s in r..nk {
                h.push(format!("P_{r}_{s}"));
            }
        }
        h
    }

    fn values(&self) -> Vec<f64> {
        let m = self.m();
        let (np, nk) = (m.nrows(), m.ncols());
        let mut v = Vec::new();
        if let Snapshot::Overlap(s) = self {
            for i in 0..np {
                for j in i..np {
                    v.push(s.q[(i, j)]);
                }
            }
        }
        for i in 0..np {
            for r in 0..nk {
                v.push(m[(i, r)]);
            }
        }
        if let Snapshot::Reduced { state, .. } = self {
            v.extend(state.q.iter());
        }
        let p = self.gram();
        for r in 0..nk {
            for s in r..nk {
                v.push(p[(r, s)]);
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub t: f64,
    pub max_q_diag: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub tag: String,
    /// `simulate-weight`, `simulate-overlap`, or an ODE regime tag.
    pub regime: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub provenance: String,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_violation: Option<BoundViolation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

/// Version string recorded with every trajectory.
pub fn provenance() -> String {
    format!("odyn-core {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub risks: Vec<f64>,
    /// `max_i Q_ii` at each record (`max_i Q̄_ii` for reduced states).
    pub max_q_diag: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<Vec<Snapshot>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(meta: TrajectoryMeta, with_snapshots: bool) -> Self {
        Self { meta, snapshots: with_snapshots.then(Vec::new), ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, risk: f64, max_q: f64, snapshot: impl FnOnce() -> Snapshot) {
        self.times.push(t);
        self.risks.push(risk);
        self.max_q_diag.push(max_q);
        if let Some(s) = self.snapshots.as_mut() {
            s.push(snapshot());
        }
    }

    pub fn final_risk(&self) -> Option<f64> {
        self.risks.last().copied()
    }

    pub fn final_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.as_ref().and_then(|s| s.last())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.risks.len() != n || self.max_q_diag.len() != n || self.snapshots.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::Format("trajectory columns have inconsistent lengths".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Format("trajectory times are not strictly increasing".into()));
        }
        Ok(())
    }

    /// Mean of the risk over records with `t ≥ t_from`.
    pub fn mean_risk_after(&self, t_from: f64) -> Option<f64> {
        let tail: Vec<f64> = self.times.iter().zip(&self.risks).filter(|(t, _)| **t >= t_from).map(|(_, r)| *r).collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// `<tag>_seed<seed>_<regime>` with filesystem-safe characters.
    pub fn file_stem(&self) -> String {
        let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect::<String>();
        format!("{}_seed{}_{}", clean(&self.meta.tag), self.meta.seed, clean(&self.meta.regime))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = BufWriter::new(w);
        let mut header = vec!["t".to_string(), "risk".to_string()];
        if let Some(first) = self.snapshots.as_ref().and_then(|s| s.first()) {
            header.extend(first.header());
        }
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![fmt(self.times[i]), fmt(self.risks[i])];
            if let Some(s) = &self.snapshots {
                row.extend(s[i].values().into_iter().map(fmt));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`Trajectory::write_csv`]. Metadata is
    /// not part of the CSV; `max_q_diag` is recovered when snapshots are present.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header_line = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))??;
        let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
        if header.len() < 2 || header[0] != "t" || header[1] != "risk" {
            return Err(Error::Format(format!("CSV header must start with t,risk; got {header_line}")));
        }
        let layout = SnapshotLayout::from_header(&header[2..])?;
        let mut traj = Trajectory::new(TrajectoryMeta::default(), layout.is_some());
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", ln + 2))))
                .collect::<Result<_>>()?;
            if vals.len() != header.len() {
                return Err(Error::Format(format!("line {} has {} fields, header has {}", ln + 2, vals.len(), header.len())));
            }
            let snap = layout.as_ref().map(|l| l.build(&vals[2..])).transpose()?;
            let max_q = match &snap {
                Some(Snapshot::Overlap(s)) => s.max_q_diag(),
                Some(Snapshot::Reduced { state, p }) => crate::overlap::bar_omega(state, p)?.max_q_diag(),
                None => f64::NAN,
            };
            traj.times.push(vals[0]);
            traj.risks.push(vals[1]);
            traj.max_q_diag.push(max_q);
            if let (Some(v), Some(s)) = (traj.snapshots.as_mut(), snap) {
                v.push(s);
            }
        }
        traj.validate()?;
        Ok(traj)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    /// Reads either format, chosen by extension (`.json`, anything else CSV).
    pub fn read_path(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&fs::read_to_string(path)?)
        } else {
            Self::read_csv(fs::File::open(path)?)
        }
    }

    /// Writes `<stem>.csv` and optionally `<stem>.json` into `dir`.
    pub fn write_files(&self, dir: &Path, csv: bool, json: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let stem = self.file_stem();
        let mut written = Vec::new();
        if csv {
            let path = dir.join(format!("{stem}.csv"));
            self.write_csv(fs::File::create(&path)?)?;
            written.push(path);
        }
        if json {
            let path = dir.join(format!("{stem}.json"));
            fs::write(&path, self.to_json()?)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

enum SnapshotLayout {
    Overlap { p: usize, k: usize },
    Reduced { p: usize, k: usize },
}

impl SnapshotLayout {
    fn from_header(cols: &[String]) -> Result<Option<Self>> {
        if cols.is_empty() {
            return Ok(None);
        }
        let count = |prefix: &str| cols.iter().filter(|c| c.starts_with(prefix)).count();
        let (nq, nm, nsmall, np) = (count("Q_"), count("M_"), count("q_"), count("P_"));
        // k(k+1)/2 = np
        let k = ((((8 * np + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
        if k == 0 || k * (k + 1) / 2 != np || nm % k != 0 {
            return Err(Error::Format("unrecognized snapshot columns".into()));
        }
        let p = nm / k;
        let layout = if nq > 0 && nsmall == 0 && nq == p * (p + 1) / 2 {
            SnapshotLayout::Overlap { p, k }
        } else if nq == 0 && nsmall == p {
            SnapshotLayout::Reduced { p, k }
        } else {
            return Err(Error::Format("unrecognized snapshot columns".into()));
        };
        if cols.len() != nq + nm + nsmall + np {
            return Err(Error::Format("unexpected extra CSV columns".into()));
        }
        Ok(Some(layout))
    }

    fn build(&self, vals: &[f64]) -> Result<Snapshot> {
        let mut it = vals.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Format("short snapshot row".into()));
        let read_sym = |n: usize, next: &mut dyn FnMut() -> Result<f64>| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = next()?;
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            Ok(m)
        };
        match *self {
            SnapshotLayout::Overlap { p, k } => {
                let q = read_sym(p, &mut next)?;
                let mut m = DMatrix::zeros(p, k);
                for i in 0..p {
                    for r in 0..k {
                        m[(i, r)] = next()?;
                    }
                }
                let g = read_sym(k, &mut next)?;
                Ok(Snapshot::Overlap(OverlapState::new_unchecked(q, m, g)?))
            }
            SnapshotLayout::Reduced { p, k } => {
                let mut m = DMatrix::zeros(p, k);
                for i in 0..p {
                    for r in 0..k {
                        m[(i, r)] = next()?;
                    }
                }
                let mut q = DVector::zeros(p);
                for i in 0..p {
                    q[i] = next()?;
                }
                let g = read_sym(k, &mut next)?;
                Ok(Snapshot::Reduced { state: ReducedMFState::new(m, q)?, p: g })
            }
        }
    }
}
