//! Run artifacts: trajectory CSV, allocation JSON, sensitivity JSON.
//!
//! Floats are written in Rust's shortest round-trip form, so parsing a file
//! back yields the exact doubles. Every file is written to a temporary file in
//! the target directory and renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::alloc::{objective, AllocationProblem, BitAllocation, ResourceConstraint};
use crate::error::{Error, Result};
use crate::qat::{RunReport, TrajectoryRow};
use crate::quant::{QuantizerId, Role};
use crate::sensitivity::SensitivitySnapshot;

pub const TRAJECTORY_HEADER: &str =
    "iteration,quantizer_id,role,bitwidth,sensitivity,alpha_mean,loss,accuracy";

/// Writes `bytes` to `path` via a sibling temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.quantizer_id,
            r.role,
            r.bitwidth,
            opt(r.sensitivity),
            r.alpha_mean,
            r.loss,
            opt(r.accuracy)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub constraint: Option<ResourceConstraint>,
    pub bitwidths: BTreeMap<QuantizerId, f64>,
    pub objective: Option<f64>,
    pub average_bits: f64,
}

impl AllocationFile {
    pub fn new(
        alloc: &BitAllocation,
        problem: Option<&AllocationProblem>,
        constraint: Option<ResourceConstraint>,
    ) -> Result<Self> {
        Ok(Self {
            constraint,
            bitwidths: alloc
                .ids
                .iter()
                .copied()
                .zip(alloc.bits.iter().copied())
                .collect(),
            objective: problem.map(|p| objective(alloc, p)).transpose()?,
            average_bits: alloc.average_bits(),
        })
    }
}

/// Snapshot on disk; also the input of the one-shot `allocate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityFile {
    pub iteration: usize,
    #[serde(rename = "A_q")]
    pub weights: BTreeMap<QuantizerId, f64>,
    #[serde(rename = "e_q")]
    pub elements: BTreeMap<QuantizerId, u64>,
    /// Needed only by the element-weighted constraint; missing entries count as weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<BTreeMap<QuantizerId, Role>>,
}

impl SensitivityFile {
    pub fn from_snapshot(s: &SensitivitySnapshot) -> Self {
        Self {
            iteration: s.iteration,
            weights: s
                .ids
                .iter()
                .copied()
                .zip(s.weights.iter().copied())
                .collect(),
            elements: s
                .ids
                .iter()
                .copied()
                .zip(s.elements.iter().copied())
                .collect(),
            roles: Some(s.ids.iter().copied().zip(s.roles.iter().copied()).collect()),
        }
    }

    pub fn problem(&self) -> Result<AllocationProblem> {
        if !self.weights.keys().eq(self.elements.keys()) {
            return Err(Error::contract("A_q and e_q list different quantizers"));
        }
        let ids: Vec<QuantizerId> = self.weights.keys().copied().collect();
        let roles = ids
            .iter()
            .map(|id| {
                self.roles
                    .as_ref()
                    .and_then(|r| r.get(id).copied())
                    .unwrap_or(Role::Weight)
            })
            .collect();
        AllocationProblem::new(
            ids,
            self.weights.values().copied().collect(),
            roles,
            self.elements.values().copied().collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Paths written by [`write_outputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub trajectory: PathBuf,
    pub allocation: PathBuf,
    pub sensitivity: Option<PathBuf>,
    pub report: PathBuf,
}

/// Writes `trajectory.csv`, `allocation.json`, `sensitivity.json` (when the run
/// measured sensitivities) and the full `report.json` into `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<OutputPaths> {
    let paths = OutputPaths {
        trajectory: dir.join("trajectory.csv"),
        allocation: dir.join("allocation.json"),
        sensitivity: report
            .latest_snapshot()
            .map(|_| dir.join("sensitivity.json")),
        report: dir.join("report.json"),
    };
    write_atomic(
        &paths.trajectory,
        trajectory_csv(&report.trajectory).as_bytes(),
    )?;
    let problem = report
        .latest_snapshot()
        .map(SensitivitySnapshot::problem)
        .transpose()?;
    write_json(
        &paths.allocation,
        &AllocationFile::new(
            &report.final_allocation,
            problem.as_ref(),
            report.constraint,
        )?,
    )?;
    if let (Some(path), Some(snap)) = (&paths.sensitivity, report.latest_snapshot()) {
        write_json(path, &SensitivityFile::from_snapshot(snap))?;
    }
    write_json(&paths.report, report)?;
    Ok(paths)
}
