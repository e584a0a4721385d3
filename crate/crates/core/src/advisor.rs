//! What-if analysis over the partition catalog.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::concurrency::{ServiceTable, WorkloadSpec};
use crate::error::{Error, Result};
use crate::hardware::{HardwareSpec, PartitionConfig, ResourceAllocation, FRACTION_SUM_SLACK};
use crate::ingest::{aggregate, QueryProfile};
use crate::scaling::{slowdown_unified, Prediction};

/// Ranking objectives. None of these come from a published cost function;
/// they are conventions of this tool and reports say so.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinLatency,
    MaxThroughput,
    MaxThroughputPerResource,
}

impl Objective {
    pub const ALL: [Objective; 3] = [
        Objective::MinLatency,
        Objective::MaxThroughput,
        Objective::MaxThroughputPerResource,
    ];

    pub fn definition(self) -> &'static str {
        match self {
            Objective::MinLatency => "tool-defined: ascending weighted mean end-to-end latency",
            Objective::MaxThroughput => "tool-defined: descending predicted QPS",
            Objective::MaxThroughputPerResource => {
                "tool-defined: descending predicted QPS divided by resource_fraction_used"
            }
        }
    }

    fn compare(self, a: &WhatIfRow, b: &WhatIfRow) -> Ordering {
        match self {
            Objective::MinLatency => a.predicted_mean_latency.total_cmp(&b.predicted_mean_latency),
            Objective::MaxThroughput => b.predicted_qps.total_cmp(&a.predicted_qps),
            Objective::MaxThroughputPerResource => b.qps_per_resource().total_cmp(&a.qps_per_resource()),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::MinLatency => "min-latency",
            Objective::MaxThroughput => "max-throughput",
            Objective::MaxThroughputPerResource => "max-throughput-per-resource",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Objective::ALL
            .into_iter()
            .find(|o| o.to_string() == key)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown objective `{s}` (expected min-latency, max-throughput or max-throughput-per-resource)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFlag {
    /// A memory-bound query was given more bandwidth than it was profiled with.
    LowUpsizeMemory,
    /// Instance fractions sum past one on some resource.
    Oversubscribed,
    /// Some instance has unequal memory-side fractions, which MIG cannot
    /// provision.
    Decoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRow {
    pub config: PartitionConfig,
    pub predicted_qps: f64,
    pub predicted_mean_latency: f64,
    pub resource_fraction_used: f64,
    pub flags: Vec<ConfidenceFlag>,
}

impl WhatIfRow {
    pub fn qps_per_resource(&self) -> f64 {
        self.predicted_qps / self.resource_fraction_used
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfReport {
    pub ranked_by: Objective,
    pub objective_definition: String,
    pub rows: Vec<WhatIfRow>,
}

impl WhatIfReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ranked by {} ({})", self.ranked_by, self.objective_definition);
        let _ = writeln!(
            out,
            "{:>4}  {:<24} {:>4} {:>12} {:>14} {:>9}  flags",
            "rank", "config", "doc", "qps", "latency_s", "resource"
        );
        for (i, row) in self.rows.iter().enumerate() {
            let flags: Vec<String> = row
                .flags
                .iter()
                .map(|f| serde_json::to_value(f).map(|v| v.as_str().unwrap_or_default().to_owned()).unwrap_or_default())
                .collect();
            let _ = writeln!(
                out,
                "{:>4}  {:<24} {:>4} {:>12.4} {:>14.6} {:>9.4}  {}",
                i + 1,
                row.config.name,
                row.config.instances.len(),
                row.predicted_qps,
                row.predicted_mean_latency,
                row.resource_fraction_used,
                if flags.is_empty() { "-".to_owned() } else { flags.join(",") }
            );
        }
        out
    }
}

pub fn enumerate_configs(hw: &HardwareSpec) -> Result<Vec<PartitionConfig>> {
    if hw.mig_catalog.is_empty() {
        return Err(Error::config(format!("hardware `{}` has an empty partition catalog", hw.name)));
    }
    Ok(hw.mig_catalog.clone())
}

/// Evaluates one configuration with the mix dispatched evenly over its
/// instances. The workload's own `doc` is ignored.
pub fn evaluate_config(w: &WorkloadSpec, hw: &HardwareSpec, config: &PartitionConfig) -> Result<WhatIfRow> {
    let table = ServiceTable::build(w, hw, config)?;
    let means = table.mean_times();
    let share = w.dispatch_count.max(1) as f64 / means.len() as f64;
    let latency = means.iter().map(|m| m + table.cold / share).sum::<f64>() / means.len() as f64;

    let mut flags = Vec::new();
    if table.low_confidence {
        flags.push(ConfidenceFlag::LowUpsizeMemory);
    }
    if config.fraction_sums().iter().any(|&s| s > 1.0 + FRACTION_SUM_SLACK) {
        flags.push(ConfidenceFlag::Oversubscribed);
    }
    if config.instances.iter().any(|i| i.is_decoupled()) {
        flags.push(ConfidenceFlag::Decoupled);
    }
    Ok(WhatIfRow {
        config: config.clone(),
        predicted_qps: table.qps(w.dispatch_count.max(1)),
        predicted_mean_latency: latency,
        resource_fraction_used: config.resource_fraction_used(),
        flags,
    })
}

pub fn advise(w: &WorkloadSpec, hw: &HardwareSpec, objective: Objective) -> Result<WhatIfReport> {
    let mut rows = enumerate_configs(hw)?
        .iter()
        .map(|c| evaluate_config(w, hw, c))
        .collect::<Result<Vec<_>>>()?;
    rank(&mut rows, objective);
    Ok(WhatIfReport {
        ranked_by: objective,
        objective_definition: objective.definition().to_owned(),
        rows,
    })
}

pub fn rank(rows: &mut [WhatIfRow], objective: Objective) {
    rows.sort_by(|a, b| {
        objective
            .compare(a, b)
            .then(a.resource_fraction_used.total_cmp(&b.resource_fraction_used))
            .then_with(|| a.config.name.cmp(&b.config.name))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub predicted_time: f64,
    pub slowdown: f64,
}

/// Predicted GPU time with all four resources set to each fraction.
pub fn scaling_curve(profile: &QueryProfile, hw: &HardwareSpec, fractions: &[f64]) -> Result<Vec<CurvePoint>> {
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("curve fractions must be sorted ascending"));
    }
    let m = aggregate(profile, hw)?;
    fractions
        .iter()
        .map(|&f| {
            let alloc = ResourceAllocation::uniform(f)?;
            let Prediction {
                predicted_time, slowdown, ..
            } = slowdown_unified(&m, hw, &alloc)?;
            Ok(CurvePoint {
                fraction: f,
                predicted_time,
                slowdown,
            })
        })
        .collect()
}

/// `series,fraction,predicted_time,slowdown`, one series per curve.
pub fn emit_curve_csv<W: Write>(curves: &[(String, Vec<CurvePoint>)], sink: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(["series", "fraction", "predicted_time", "slowdown"])?;
    for (series, points) in curves {
        for p in points {
            wtr.write_record([
                series.as_str(),
                &p.fraction.to_string(),
                &p.predicted_time.to_string(),
                &p.slowdown.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
