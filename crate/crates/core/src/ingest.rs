//! Profiler counter ingestion and per-query aggregation.
//!
//! Counter files are CSV or JSON exports with one row per kernel launch.
//! Columns may use the canonical names (`kernel_name`, `duration_ns`,
//! `dram_bytes`, `l2_requests`, `int_ops`, `cycles`) or the raw Nsight
//! Compute metric names; see [`COLUMN_ALIASES`]. Unrecognised columns are
//! ignored since profiler exports carry many unrelated metrics.
//!
//! Integer operations count predicated-on instructions only, matching the
//! `integer_pred_on` metric family.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{HardwareSpec, MemLevel};
use crate::whitebox::PlanOp;

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

const NANOS_PER_SEC: f64 = 1e9;

/// Counters of one kernel launch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRecord {
    pub kernel_name: String,
    /// Seconds.
    #[serde(rename = "duration_s")]
    pub duration: f64,
    pub dram_bytes: f64,
    pub l2_requests: f64,
    pub int_ops: f64,
}

impl KernelRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::validation(format!(
                "kernel `{}`: duration must be positive, got {}",
                self.kernel_name, self.duration
            )));
        }
        for (name, v) in [
            ("dram_bytes", self.dram_bytes),
            ("l2_requests", self.l2_requests),
            ("int_ops", self.int_ops),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!(
                    "kernel `{}`: {name} must be non-negative, got {v}",
                    self.kernel_name
                )));
            }
        }
        Ok(())
    }
}

/// Everything known about one query run: kernel counters plus the
/// host-side costs layered on top of GPU time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryProfile {
    pub query_id: String,
    #[serde(default)]
    pub system: String,
    pub scale_factor: f64,
    pub kernels: Vec<KernelRecord>,
    /// Planning, compilation and per-invocation CPU cost, seconds.
    #[serde(default, rename = "cpu_overhead_s")]
    pub cpu_overhead: f64,
    /// Context init and allocation, seconds.
    #[serde(default, rename = "setup_overhead_s")]
    pub setup_overhead: f64,
    #[serde(default)]
    pub transfer_in_bytes: f64,
    #[serde(default)]
    pub transfer_out_bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dram_utilization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_hit_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_hit_rate: Option<f64>,
    /// Operator plan for the white-box models.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan: Vec<PlanOp>,
}

#[derive(Serialize)]
struct ProfileDocument {
    schema_version: u32,
    /// Hash of the run manifest that produced the file. Ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest_hash: Option<String>,
    #[serde(flatten)]
    profile: QueryProfile,
}

impl QueryProfile {
    pub fn new(query_id: impl Into<String>, scale_factor: f64, kernels: Vec<KernelRecord>) -> Self {
        QueryProfile {
            query_id: query_id.into(),
            system: String::new(),
            scale_factor,
            kernels,
            cpu_overhead: 0.0,
            setup_overhead: 0.0,
            transfer_in_bytes: 0.0,
            transfer_out_bytes: 0.0,
            dram_utilization: None,
            l1_hit_rate: None,
            l2_hit_rate: None,
            plan: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |msg: String| Error::validation(format!("profile `{}`: {msg}", self.query_id));
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            return Err(ctx(format!("scale_factor must be positive, got {}", self.scale_factor)));
        }
        for (name, v) in [
            ("cpu_overhead", self.cpu_overhead),
            ("setup_overhead", self.setup_overhead),
            ("transfer_in_bytes", self.transfer_in_bytes),
            ("transfer_out_bytes", self.transfer_out_bytes),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ctx(format!("{name} must be non-negative, got {v}")));
            }
        }
        if let Some(u) = self.dram_utilization {
            if !(u > 0.0 && u <= 1.0) {
                return Err(ctx(format!("dram_utilization {u} outside (0, 1]")));
            }
        }
        for (name, rate) in [("l1_hit_rate", self.l1_hit_rate), ("l2_hit_rate", self.l2_hit_rate)] {
            if let Some(r) = rate {
                if !(0.0..=1.0).contains(&r) {
                    return Err(ctx(format!("{name} {r} outside [0, 1]")));
                }
            }
        }
        for k in &self.kernels {
            k.validate()?;
        }
        for op in &self.plan {
            op.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_json_stamped(None)
    }

    pub fn to_json_stamped(&self, manifest_hash: Option<&str>) -> Result<String> {
        let doc = ProfileDocument {
            schema_version: PROFILE_SCHEMA_VERSION,
            manifest_hash: manifest_hash.map(str::to_owned),
            profile: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Envelope keys are split off by hand: `flatten` would silently
        // accept unknown profile fields.
        let mut map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)?;
        let version = map
            .remove("schema_version")
            .ok_or_else(|| Error::Format("profile is missing schema_version".into()))?;
        map.remove("manifest_hash");
        if version.as_u64() != Some(u64::from(PROFILE_SCHEMA_VERSION)) {
            return Err(Error::Format(format!(
                "unsupported profile schema version {version} (expected {PROFILE_SCHEMA_VERSION})"
            )));
        }
        let profile: QueryProfile = serde_json::from_value(serde_json::Value::Object(map))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Per-query totals and the derived roofline coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub total_duration: f64,
    pub total_dram_bytes: f64,
    pub total_l2_bytes: f64,
    pub total_int_ops: f64,
    pub ai_dram: f64,
    pub ai_l2: f64,
    pub attained_compute_bw: f64,
    pub attained_dram_bw: f64,
    pub attained_l2_bw: f64,
}

impl AggregateMetrics {
    /// Builds the derived fields from raw totals.
    pub fn from_totals(
        total_duration: f64,
        total_dram_bytes: f64,
        total_l2_bytes: f64,
        total_int_ops: f64,
    ) -> Result<Self> {
        if !(total_duration.is_finite() && total_duration > 0.0) {
            return Err(Error::validation(format!(
                "total duration must be positive, got {total_duration}"
            )));
        }
        if !(total_dram_bytes > 0.0) {
            return Err(Error::Degenerate(
                "zero DRAM bytes, DRAM arithmetic intensity undefined".into(),
            ));
        }
        if !(total_l2_bytes > 0.0) {
            return Err(Error::Degenerate(
                "zero L2 bytes, L2 arithmetic intensity undefined".into(),
            ));
        }
        if !(total_int_ops.is_finite() && total_int_ops >= 0.0) {
            return Err(Error::validation(format!(
                "integer op total must be non-negative, got {total_int_ops}"
            )));
        }
        Ok(AggregateMetrics {
            total_duration,
            total_dram_bytes,
            total_l2_bytes,
            total_int_ops,
            ai_dram: total_int_ops / total_dram_bytes,
            ai_l2: total_int_ops / total_l2_bytes,
            attained_compute_bw: total_int_ops / total_duration,
            attained_dram_bw: total_dram_bytes / total_duration,
            attained_l2_bw: total_l2_bytes / total_duration,
        })
    }

    pub fn ai(&self, level: MemLevel) -> f64 {
        match level {
            MemLevel::Dram => self.ai_dram,
            MemLevel::L2 => self.ai_l2,
        }
    }

    pub fn bytes(&self, level: MemLevel) -> f64 {
        match level {
            MemLevel::Dram => self.total_dram_bytes,
            MemLevel::L2 => self.total_l2_bytes,
        }
    }

    pub fn attained_mem_bw(&self, level: MemLevel) -> f64 {
        match level {
            MemLevel::Dram => self.attained_dram_bw,
            MemLevel::L2 => self.attained_l2_bw,
        }
    }
}

pub fn aggregate(profile: &QueryProfile, hw: &HardwareSpec) -> Result<AggregateMetrics> {
    aggregate_kernels(&profile.kernels, hw.l2_request_bytes)
}

pub fn aggregate_kernels(kernels: &[KernelRecord], l2_request_bytes: u32) -> Result<AggregateMetrics> {
    if kernels.is_empty() {
        return Err(Error::validation("profile has no kernels"));
    }
    let mut duration = 0.0;
    let mut dram = 0.0;
    let mut requests = 0.0;
    let mut ops = 0.0;
    for k in kernels {
        k.validate()?;
        duration += k.duration;
        dram += k.dram_bytes;
        requests += k.l2_requests;
        ops += k.int_ops;
    }
    AggregateMetrics::from_totals(duration, dram, requests * f64::from(l2_request_bytes), ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ceiling {
    Compute,
    Dram,
    L2,
}

/// An attained rate above the hardware peak, usually a unit or metric mix-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoofWarning {
    pub ceiling: Ceiling,
    pub attained: f64,
    pub peak: f64,
}

impl std::fmt::Display for RoofWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "attained {:?} bandwidth {:.4e} exceeds peak {:.4e}",
            self.ceiling, self.attained, self.peak
        )
    }
}

pub fn validate_against_roofs(m: &AggregateMetrics, hw: &HardwareSpec) -> Vec<RoofWarning> {
    [
        (Ceiling::Compute, m.attained_compute_bw, hw.peak_compute_bw),
        (Ceiling::Dram, m.attained_dram_bw, hw.peak_dram_bw),
        (Ceiling::L2, m.attained_l2_bw, hw.peak_l2_bw),
    ]
    .into_iter()
    .filter(|&(_, attained, peak)| attained > peak)
    .map(|(ceiling, attained, peak)| RoofWarning {
        ceiling,
        attained,
        peak,
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterFormat {
    Csv,
    Json,
}

impl std::str::FromStr for CounterFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(CounterFormat::Csv),
            "json" => Ok(CounterFormat::Json),
            other => Err(Error::validation(format!("unknown counter format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    KernelName,
    DurationNs,
    DramBytes,
    L2Requests,
    IntOps,
    IntOpsPerCycle,
    Cycles,
}

impl Field {
    fn canonical(self) -> &'static str {
        match self {
            Field::KernelName => "kernel_name",
            Field::DurationNs => "duration_ns",
            Field::DramBytes => "dram_bytes",
            Field::L2Requests => "l2_requests",
            Field::IntOps => "int_ops",
            Field::IntOpsPerCycle => "int_ops_per_cycle",
            Field::Cycles => "cycles",
        }
    }
}

/// Accepted header spellings (compared case-insensitively).
pub const COLUMN_ALIASES: &[(&str, &[&str])] = &[
    ("kernel_name", &["kernel_name", "kernel name", "function name", "name"]),
    ("duration_ns", &["duration_ns", "gpu__time_duration.sum"]),
    ("dram_bytes", &["dram_bytes", "dram__bytes.sum"]),
    ("l2_requests", &["l2_requests", "lts__t_requests_srcunit_tex_op_read.sum"]),
    (
        "int_ops",
        &["int_ops", "smsp__sass_thread_inst_executed_op_integer_pred_on.sum"],
    ),
    (
        "int_ops_per_cycle",
        &[
            "int_ops_per_cycle",
            "smsp__sass_thread_inst_executed_op_integer_pred_on.sum.per_cycle_elapsed",
        ],
    ),
    (
        "cycles",
        &["cycles", "smsp__cycles_elapsed.avg", "sm__cycles_elapsed.avg"],
    ),
];

const FIELDS: [Field; 7] = [
    Field::KernelName,
    Field::DurationNs,
    Field::DramBytes,
    Field::L2Requests,
    Field::IntOps,
    Field::IntOpsPerCycle,
    Field::Cycles,
];

fn resolve_column(name: &str) -> Option<Field> {
    let name = name.trim();
    FIELDS.into_iter().find(|f| {
        COLUMN_ALIASES
            .iter()
            .find(|(canon, _)| *canon == f.canonical())
            .is_some_and(|(_, aliases)| aliases.iter().any(|a| a.eq_ignore_ascii_case(name)))
    })
}

/// Column positions for one file, plus optional unit multipliers.
#[derive(Debug, Default)]
struct Layout {
    columns: [Option<usize>; 7],
    scale: [f64; 7],
}

impl Layout {
    fn from_headers<'a>(headers: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut layout = Layout {
            columns: [None; 7],
            scale: [1.0; 7],
        };
        for (idx, h) in headers.into_iter().enumerate() {
            if let Some(field) = resolve_column(h) {
                let slot = &mut layout.columns[field as usize];
                if slot.is_none() {
                    *slot = Some(idx);
                }
            }
        }
        for required in [Field::DurationNs, Field::DramBytes, Field::L2Requests] {
            if layout.col(required).is_none() {
                return Err(Error::MissingColumn(required.canonical().into()));
            }
        }
        if layout.col(Field::IntOps).is_none() {
            if layout.col(Field::IntOpsPerCycle).is_none() {
                return Err(Error::MissingColumn(Field::IntOps.canonical().into()));
            }
            if layout.col(Field::Cycles).is_none() {
                return Err(Error::MissingColumn(Field::Cycles.canonical().into()));
            }
        }
        Ok(layout)
    }

    fn col(&self, field: Field) -> Option<usize> {
        self.columns[field as usize]
    }

    /// Nsight CSV exports may carry a units row under the header. Returns
    /// true and records the multipliers if `row` is one.
    fn try_units_row(&mut self, row: &[&str]) -> bool {
        let Some(cell) = self.col(Field::DurationNs).and_then(|c| row.get(c)) else {
            return false;
        };
        if parse_number(cell).is_ok() {
            return false;
        }
        let mut scale = [1.0; 7];
        for field in FIELDS {
            let Some(unit) = self.col(field).and_then(|c| row.get(c)) else {
                continue;
            };
            match unit_scale(field, unit) {
                Some(s) => scale[field as usize] = s,
                None => return false,
            }
        }
        self.scale = scale;
        true
    }

    fn record(&self, row_no: usize, cell: impl Fn(usize) -> Option<String>) -> Result<KernelRecord> {
        let number = |field: Field| -> Result<Option<f64>> {
            let Some(col) = self.col(field) else {
                return Ok(None);
            };
            let text = cell(col).unwrap_or_default();
            let value = parse_number(&text).map_err(|message| Error::Parse {
                row: row_no,
                column: field.canonical().into(),
                message,
            })?;
            if value < 0.0 {
                return Err(Error::validation(format!(
                    "row {row_no}, column `{}`: negative counter {value}",
                    field.canonical()
                )));
            }
            Ok(Some(value * self.scale[field as usize]))
        };

        let kernel_name = self
            .col(Field::KernelName)
            .and_then(&cell)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("kernel_{row_no}"));
        let duration_ns = number(Field::DurationNs)?.unwrap_or_default();
        if duration_ns <= 0.0 {
            return Err(Error::validation(format!(
                "row {row_no}, column `duration_ns`: duration must be positive"
            )));
        }
        let int_ops = match number(Field::IntOps)? {
            Some(ops) => ops,
            None => {
                let per_cycle = number(Field::IntOpsPerCycle)?.unwrap_or_default();
                let cycles = number(Field::Cycles)?.unwrap_or_default();
                per_cycle * cycles
            }
        };
        Ok(KernelRecord {
            kernel_name,
            duration: duration_ns / NANOS_PER_SEC,
            dram_bytes: number(Field::DramBytes)?.unwrap_or_default(),
            l2_requests: number(Field::L2Requests)?.unwrap_or_default(),
            int_ops,
        })
    }
}

fn unit_scale(field: Field, unit: &str) -> Option<f64> {
    let unit = unit.trim();
    match field {
        Field::KernelName => Some(1.0),
        Field::DurationNs => match unit {
            "" | "ns" | "nsecond" => Some(1.0),
            "us" | "usecond" => Some(1e3),
            "ms" | "msecond" => Some(1e6),
            "s" | "second" => Some(1e9),
            _ => None,
        },
        Field::DramBytes => match unit {
            "" | "byte" | "B" => Some(1.0),
            "Kbyte" | "KB" => Some(1e3),
            "Mbyte" | "MB" => Some(1e6),
            "Gbyte" | "GB" => Some(1e9),
            "KiB" => Some(1024.0),
            "MiB" => Some(1024.0 * 1024.0),
            "GiB" => Some(1024.0 * 1024.0 * 1024.0),
            _ => None,
        },
        Field::L2Requests | Field::IntOps | Field::IntOpsPerCycle | Field::Cycles => match unit {
            "" | "request" | "inst" | "inst/cycle" | "cycle" => Some(1.0),
            _ => None,
        },
    }
}

/// Parses a counter cell, tolerating thousands separators.
fn parse_number(text: &str) -> std::result::Result<f64, String> {
    let cleaned: String = text.trim().chars().filter(|&c| c != ',').collect();
    if cleaned.is_empty() {
        return Err("empty value".into());
    }
    match cleaned.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("non-finite value {v}")),
        Err(_) => Err(format!("`{}` is not a number", text.trim())),
    }
}

pub fn parse_counter_file<R: Read>(reader: R, format: CounterFormat) -> Result<Vec<KernelRecord>> {
    match format {
        CounterFormat::Csv => parse_csv(reader),
        CounterFormat::Json => parse_json(reader),
    }
}

fn parse_csv<R: Read>(reader: R) -> Result<Vec<KernelRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut layout = Layout::from_headers(headers.iter())?;

    let mut out = Vec::new();
    for (idx, result) in rdr.records().enumerate() {
        let row_no = idx + 1;
        let record = result.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::Parse {
                row: row_no,
                column: "*".into(),
                message: "wrong number of fields".into(),
            },
            _ => Error::from(e),
        })?;
        if idx == 0 {
            let cells: Vec<&str> = record.iter().collect();
            if layout.try_units_row(&cells) {
                continue;
            }
        }
        out.push(layout.record(row_no, |c| record.get(c).map(str::to_string))?);
    }
    Ok(out)
}

fn parse_json<R: Read>(reader: R) -> Result<Vec<KernelRecord>> {
    let value: serde_json::Value = serde_json::from_reader(reader)?;
    let rows = value
        .as_array()
        .ok_or_else(|| Error::Format("expected a JSON array of kernel objects".into()))?;

    let mut out = Vec::with_capacity(rows.len());
    for (idx, row) in rows.iter().enumerate() {
        let row_no = idx + 1;
        let obj = row.as_object().ok_or_else(|| Error::Parse {
            row: row_no,
            column: "*".into(),
            message: "expected an object".into(),
        })?;
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        let layout = Layout::from_headers(keys.iter().copied())?;
        let cell = |c: usize| {
            obj.get(keys[c]).map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        };
        out.push(layout.record(row_no, cell)?);
    }
    Ok(out)
}

/// Writes kernels with the canonical header. Parsing the output yields the
/// same records.
pub fn write_canonical_csv<W: Write>(kernels: &[KernelRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["kernel_name", "duration_ns", "dram_bytes", "l2_requests", "int_ops"])?;
    for k in kernels {
        wtr.write_record([
            k.kernel_name.clone(),
            fmt_num(k.duration * NANOS_PER_SEC),
            fmt_num(k.dram_bytes),
            fmt_num(k.l2_requests),
            fmt_num(k.int_ops),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}
