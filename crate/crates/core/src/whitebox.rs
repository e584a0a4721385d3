//! Operator-level bandwidth cost models for scan and hash-probe, and
//! scale-factor extrapolation of recurring queries.
//!
//! The plain model assumes DRAM bandwidth is the only bottleneck and needs
//! no profiling. The "opt" variant corrects it with counters from one
//! previous run: DRAM utilization for sequential loads, L1/L2 hit rates for
//! probes. L1 latency is taken as zero. Hash-table build cost is not
//! modelled; add a scan for the build side if it matters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::HardwareSpec;
use crate::ingest::QueryProfile;

pub const DEFAULT_LINE_BYTES: f64 = 128.0;

/// Sequential load of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanOp {
    pub rows: f64,
    /// Bytes per value.
    pub width: f64,
}

impl ScanOp {
    pub fn validate(&self) -> Result<()> {
        if !(self.rows.is_finite() && self.rows >= 0.0) {
            return Err(Error::validation(format!("scan rows must be >= 0, got {}", self.rows)));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::validation(format!("scan width must be > 0, got {}", self.width)));
        }
        Ok(())
    }

    pub fn bytes(&self) -> f64 {
        self.rows * self.width
    }
}

/// Probe of `rows` keys into a hash table. One memory request per key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOp {
    pub rows: f64,
    pub key_width: f64,
    pub hashtable_bytes: f64,
    pub l1_hit_rate: f64,
    pub l2_hit_rate: f64,
    pub l1_line: f64,
    pub l2_line: f64,
}

impl ProbeOp {
    pub fn validate(&self) -> Result<()> {
        self.probe_column().validate()?;
        if !(self.hashtable_bytes.is_finite() && self.hashtable_bytes > 0.0) {
            return Err(Error::validation("hashtable_bytes must be > 0"));
        }
        for (name, r) in [("l1_hit_rate", self.l1_hit_rate), ("l2_hit_rate", self.l2_hit_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::validation(format!("{name} {r} outside [0, 1]")));
            }
        }
        if !(self.l1_line > 0.0 && self.l2_line > 0.0) {
            return Err(Error::validation("cache line sizes must be > 0"));
        }
        Ok(())
    }

    /// The load of the probe-side key column.
    pub fn probe_column(&self) -> ScanOp {
        ScanOp {
            rows: self.rows,
            width: self.key_width,
        }
    }
}

/// A probe as written in a profile plan. Hit rates fall back to the
/// profile-level counters when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbePlan {
    pub rows: f64,
    pub key_width: f64,
    pub hashtable_bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_hit_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_hit_rate: Option<f64>,
    #[serde(default = "default_line")]
    pub l1_line: f64,
    #[serde(default = "default_line")]
    pub l2_line: f64,
}

fn default_line() -> f64 {
    DEFAULT_LINE_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum PlanOp {
    Scan(ScanOp),
    Probe(ProbePlan),
}

impl PlanOp {
    pub fn validate(&self) -> Result<()> {
        match self {
            PlanOp::Scan(s) => s.validate(),
            PlanOp::Probe(p) => {
                ScanOp {
                    rows: p.rows,
                    width: p.key_width,
                }
                .validate()?;
                if !(p.hashtable_bytes > 0.0) {
                    return Err(Error::validation("hashtable_bytes must be > 0"));
                }
                for r in [p.l1_hit_rate, p.l2_hit_rate].into_iter().flatten() {
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::validation(format!("hit rate {r} outside [0, 1]")));
                    }
                }
                Ok(())
            }
        }
    }

    fn scaled(&self, row_factor: f64, table_factor: f64) -> PlanOp {
        match *self {
            PlanOp::Scan(s) => PlanOp::Scan(ScanOp {
                rows: s.rows * row_factor,
                ..s
            }),
            PlanOp::Probe(p) => PlanOp::Probe(ProbePlan {
                rows: p.rows * row_factor,
                hashtable_bytes: p.hashtable_bytes * table_factor,
                ..p
            }),
        }
    }
}

pub fn crystal_scan_time(op: &ScanOp, hw: &HardwareSpec) -> f64 {
    op.bytes() / hw.peak_dram_bw
}

/// Share of probes expected to miss L2, from the table-to-cache size ratio.
/// Clamped at zero when the table fits.
pub fn capacity_miss_fraction(hashtable_bytes: f64, l2_capacity: f64) -> f64 {
    (1.0 - l2_capacity / hashtable_bytes).max(0.0)
}

pub fn crystal_probe_time(op: &ProbeOp, hw: &HardwareSpec) -> f64 {
    crystal_probe_time_parts(op.rows, op.key_width, op.hashtable_bytes, hw)
}

fn crystal_probe_time_parts(rows: f64, key_width: f64, hashtable_bytes: f64, hw: &HardwareSpec) -> f64 {
    let column = key_width * rows / hw.peak_dram_bw;
    let miss = capacity_miss_fraction(hashtable_bytes, hw.l2_capacity);
    column + miss * key_width * rows / hw.peak_dram_bw
}

pub fn crystalopt_scan_time(op: &ScanOp, utilization: f64, hw: &HardwareSpec) -> Result<f64> {
    check_utilization(utilization)?;
    Ok(op.bytes() / (hw.peak_dram_bw * utilization))
}

/// Column load discounted by DRAM utilization, plus L1 misses served from
/// L2 and L2 misses served from DRAM. Utilization applies to the column load
/// only.
pub fn crystalopt_probe_time(op: &ProbeOp, utilization: f64, hw: &HardwareSpec) -> Result<f64> {
    let column = crystalopt_scan_time(&op.probe_column(), utilization, hw)?;
    let l1_misses = (1.0 - op.l1_hit_rate) * op.l1_line * op.rows / hw.peak_l2_bw;
    let l2_misses = (1.0 - op.l2_hit_rate) * op.l2_line * op.rows / hw.peak_dram_bw;
    Ok(column + l1_misses + l2_misses)
}

fn check_utilization(u: f64) -> Result<()> {
    if u > 0.0 && u <= 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("DRAM utilization {u} outside (0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtrapolationOptions {
    /// Grow hash tables with the scale factor. Off by default: only fact
    /// rows scale.
    pub scale_hashtable: bool,
}

fn scale_factors(profile_sf: f64, target_sf: f64, opts: ExtrapolationOptions) -> Result<(f64, f64)> {
    if !(target_sf.is_finite() && target_sf > 0.0) {
        return Err(Error::validation(format!("target scale factor must be > 0, got {target_sf}")));
    }
    if !(profile_sf > 0.0) {
        return Err(Error::validation("profile scale factor must be > 0"));
    }
    let rows = target_sf / profile_sf;
    let table = if opts.scale_hashtable { rows } else { 1.0 };
    Ok((rows, table))
}

/// Crystal-Opt prediction for `op_plan` at `target_sf`, reusing the
/// utilization and hit rates profiled at `profile.scale_factor`.
pub fn extrapolate_sf(
    profile: &QueryProfile,
    op_plan: &[PlanOp],
    target_sf: f64,
    hw: &HardwareSpec,
    opts: ExtrapolationOptions,
) -> Result<f64> {
    let (row_factor, table_factor) = scale_factors(profile.scale_factor, target_sf, opts)?;
    let utilization = profile.dram_utilization.ok_or_else(|| {
        Error::MissingCounters(format!(
            "profile `{}` has no dram_utilization; use the unprofiled Crystal model instead",
            profile.query_id
        ))
    })?;

    let mut total = 0.0;
    for op in op_plan {
        op.validate()?;
        total += match op.scaled(row_factor, table_factor) {
            PlanOp::Scan(s) => crystalopt_scan_time(&s, utilization, hw)?,
            PlanOp::Probe(p) => {
                let missing = |name: &str| {
                    Error::MissingCounters(format!(
                        "profile `{}` has no {name} for a probe; use the unprofiled Crystal model instead",
                        profile.query_id
                    ))
                };
                let probe = ProbeOp {
                    rows: p.rows,
                    key_width: p.key_width,
                    hashtable_bytes: p.hashtable_bytes,
                    l1_hit_rate: p.l1_hit_rate.or(profile.l1_hit_rate).ok_or_else(|| missing("l1_hit_rate"))?,
                    l2_hit_rate: p.l2_hit_rate.or(profile.l2_hit_rate).ok_or_else(|| missing("l2_hit_rate"))?,
                    l1_line: p.l1_line,
                    l2_line: p.l2_line,
                };
                crystalopt_probe_time(&probe, utilization, hw)?
            }
        };
    }
    Ok(total)
}

/// Unprofiled counterpart of [`extrapolate_sf`].
pub fn extrapolate_sf_crystal(
    op_plan: &[PlanOp],
    profile_sf: f64,
    target_sf: f64,
    hw: &HardwareSpec,
    opts: ExtrapolationOptions,
) -> Result<f64> {
    let (row_factor, table_factor) = scale_factors(profile_sf, target_sf, opts)?;
    let mut total = 0.0;
    for op in op_plan {
        op.validate()?;
        total += match op.scaled(row_factor, table_factor) {
            PlanOp::Scan(s) => crystal_scan_time(&s, hw),
            PlanOp::Probe(p) => crystal_probe_time_parts(p.rows, p.key_width, p.hashtable_bytes, hw),
        };
    }
    Ok(total)
}
