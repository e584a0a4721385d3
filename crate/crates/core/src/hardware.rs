//! Hardware description, MIG partition catalog and resource allocations.
//!
//! All bandwidths are stored in bytes/s (memory) or integer ops/s (compute)
//! and all capacities in bytes. The config file uses GB/s, Gops/s, MB and GB
//! and is converted on load.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GIGA: f64 = 1e9;
pub const MEGA: f64 = 1e6;

/// Slack allowed when checking that per-resource fractions sum to at most one.
/// Catalog fractions such as 1/7 are not exactly representable.
pub const FRACTION_SUM_SLACK: f64 = 1e-9;

pub const BUNDLED_A100_TOML: &str = include_str!("../data/a100_40gb.toml");

/// Peak capabilities of one GPU plus its partition catalog.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareSpec {
    pub name: String,
    pub sm_count: u32,
    /// Integer ops per second.
    pub peak_compute_bw: f64,
    /// Bytes per second.
    pub peak_dram_bw: f64,
    /// Bytes per second.
    pub peak_l2_bw: f64,
    pub l2_capacity: f64,
    /// Bytes moved per L2 request.
    pub l2_request_bytes: u32,
    pub dram_capacity: f64,
    pub host_link_bw: f64,
    pub mig_catalog: Vec<PartitionConfig>,
}

impl HardwareSpec {
    /// The bundled A100-40GB description with its 18-entry MIG catalog.
    pub fn a100() -> Self {
        Self::from_toml_str(BUNDLED_A100_TOML).expect("bundled A100 config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawHardware =
            toml::from_str(text).map_err(|e| Error::config(format!("hardware config: {e}")))?;
        raw.into_spec()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("peak_compute_bw", self.peak_compute_bw),
            ("peak_dram_bw", self.peak_dram_bw),
            ("peak_l2_bw", self.peak_l2_bw),
            ("l2_capacity", self.l2_capacity),
            ("dram_capacity", self.dram_capacity),
            ("host_link_bw", self.host_link_bw),
        ];
        for (field, value) in positives {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!("{field} must be positive, got {value}")));
            }
        }
        if self.sm_count == 0 {
            return Err(Error::config("sm_count must be positive"));
        }
        if self.peak_l2_bw <= self.peak_dram_bw {
            return Err(Error::config(format!(
                "peak_l2_bw ({}) must exceed peak_dram_bw ({})",
                self.peak_l2_bw, self.peak_dram_bw
            )));
        }
        if !self.l2_request_bytes.is_power_of_two() {
            return Err(Error::config(format!(
                "l2_request_bytes must be a power of two, got {}",
                self.l2_request_bytes
            )));
        }
        for config in &self.mig_catalog {
            config.validate()?;
        }
        Ok(())
    }

    /// Peak bandwidth of a memory level in bytes/s.
    pub fn peak_mem_bw(&self, level: MemLevel) -> f64 {
        match level {
            MemLevel::Dram => self.peak_dram_bw,
            MemLevel::L2 => self.peak_l2_bw,
        }
    }

    /// A copy whose peaks are those of `alloc`. Used when a profile was
    /// captured on a partition rather than the whole GPU.
    pub fn scaled(&self, alloc: &ResourceAllocation) -> HardwareSpec {
        HardwareSpec {
            peak_compute_bw: self.peak_compute_bw * alloc.compute_fraction,
            peak_dram_bw: self.peak_dram_bw * alloc.dram_bw_fraction,
            peak_l2_bw: self.peak_l2_bw * alloc.l2_bw_fraction,
            l2_capacity: self.l2_capacity * alloc.l2_bw_fraction,
            dram_capacity: self.dram_capacity * alloc.mem_capacity_fraction,
            ..self.clone()
        }
    }

    pub fn find_config(&self, name: &str) -> Option<&PartitionConfig> {
        self.mig_catalog.iter().find(|c| c.name == name)
    }

    /// Looks up a slice shape by name across every catalog entry.
    pub fn find_instance(&self, name: &str) -> Option<&PartitionInstance> {
        self.mig_catalog
            .iter()
            .flat_map(|c| c.instances.iter())
            .find(|i| i.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemLevel {
    Dram,
    L2,
}

impl fmt::Display for MemLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemLevel::Dram => f.write_str("DRAM"),
            MemLevel::L2 => f.write_str("L2"),
        }
    }
}

impl std::str::FromStr for MemLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dram" => Ok(MemLevel::Dram),
            "l2" => Ok(MemLevel::L2),
            other => Err(Error::validation(format!("unknown memory level `{other}`"))),
        }
    }
}

/// One slice of a partitioned GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionInstance {
    pub name: String,
    pub compute_fraction: f64,
    pub dram_bw_fraction: f64,
    pub l2_bw_fraction: f64,
    pub mem_capacity_fraction: f64,
}

impl PartitionInstance {
    pub fn new(name: impl Into<String>, alloc: ResourceAllocation) -> Self {
        PartitionInstance {
            name: name.into(),
            compute_fraction: alloc.compute_fraction,
            dram_bw_fraction: alloc.dram_bw_fraction,
            l2_bw_fraction: alloc.l2_bw_fraction,
            mem_capacity_fraction: alloc.mem_capacity_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_fractions(&self.name, &self.fractions())
    }

    fn fractions(&self) -> [f64; 4] {
        [
            self.compute_fraction,
            self.dram_bw_fraction,
            self.l2_bw_fraction,
            self.mem_capacity_fraction,
        ]
    }

    /// True when the memory-side fractions are not all equal, i.e. the slice
    /// is not something MIG could actually carve out.
    pub fn is_decoupled(&self) -> bool {
        self.dram_bw_fraction != self.l2_bw_fraction
            || self.dram_bw_fraction != self.mem_capacity_fraction
    }
}

/// A set of slices that can run side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub name: String,
    pub instances: Vec<PartitionInstance>,
}

impl PartitionConfig {
    pub fn new(name: impl Into<String>, instances: Vec<PartitionInstance>) -> Result<Self> {
        let config = PartitionConfig {
            name: name.into(),
            instances,
        };
        config.validate()?;
        Ok(config)
    }

    /// `k` identical slices each holding `1/k` of every resource. Not a MIG
    /// placement; useful for idealized what-if runs.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::validation("uniform partition needs at least one instance"));
        }
        let f = 1.0 / k as f64;
        let alloc = ResourceAllocation::uniform(f)?;
        let instances = (0..k)
            .map(|i| PartitionInstance::new(format!("uniform-1/{k}#{i}"), alloc))
            .collect();
        PartitionConfig::new(format!("uniform:{k}"), instances)
    }

    /// One full-GPU instance.
    pub fn whole_gpu() -> Self {
        PartitionConfig {
            name: "whole-gpu".to_string(),
            instances: vec![PartitionInstance::new("whole-gpu", ResourceAllocation::full())],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::config(format!("partition `{}` has no instances", self.name)));
        }
        for inst in &self.instances {
            inst.validate()?;
        }
        let sums = self.fraction_sums();
        for (label, sum) in ["compute", "dram_bw", "l2_bw", "mem_capacity"].iter().zip(sums) {
            if sum > 1.0 + FRACTION_SUM_SLACK {
                return Err(Error::config(format!(
                    "partition `{}` oversubscribes {label}: fractions sum to {sum}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Per-resource sums in the order compute, dram_bw, l2_bw, mem_capacity.
    pub fn fraction_sums(&self) -> [f64; 4] {
        let mut sums = [0.0; 4];
        for inst in &self.instances {
            for (s, f) in sums.iter_mut().zip(inst.fractions()) {
                *s += f;
            }
        }
        sums
    }

    /// Largest per-resource sum: a single saturated dimension blocks
    /// co-location regardless of the others.
    pub fn resource_fraction_used(&self) -> f64 {
        self.fraction_sums().into_iter().fold(0.0, f64::max)
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }
}

/// Fractional assignment of the four partitionable resources.
///
/// Fractions built with [`ResourceAllocation::new`] lie in `(0, 1]` and are
/// relative to the whole GPU. [`ResourceAllocation::relative`] admits values
/// above one, meaning "this many times the allocation the profile was
/// captured under", which is how upsizing is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceAllocation {
    pub compute_fraction: f64,
    pub dram_bw_fraction: f64,
    pub l2_bw_fraction: f64,
    pub mem_capacity_fraction: f64,
}

impl ResourceAllocation {
    pub fn new(compute: f64, dram_bw: f64, l2_bw: f64, mem_capacity: f64) -> Result<Self> {
        check_unit_fractions("allocation", &[compute, dram_bw, l2_bw, mem_capacity])?;
        Ok(Self::unchecked(compute, dram_bw, l2_bw, mem_capacity))
    }

    pub fn relative(compute: f64, dram_bw: f64, l2_bw: f64, mem_capacity: f64) -> Result<Self> {
        for f in [compute, dram_bw, l2_bw, mem_capacity] {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::validation(format!(
                    "relative allocation fractions must be positive, got {f}"
                )));
            }
        }
        Ok(Self::unchecked(compute, dram_bw, l2_bw, mem_capacity))
    }

    fn unchecked(compute: f64, dram_bw: f64, l2_bw: f64, mem_capacity: f64) -> Self {
        ResourceAllocation {
            compute_fraction: compute,
            dram_bw_fraction: dram_bw,
            l2_bw_fraction: l2_bw,
            mem_capacity_fraction: mem_capacity,
        }
    }

    pub fn full() -> Self {
        Self::unchecked(1.0, 1.0, 1.0, 1.0)
    }

    pub fn uniform(fraction: f64) -> Result<Self> {
        Self::new(fraction, fraction, fraction, fraction)
    }

    /// MPS-style sharing: SMs are split, L2 and DRAM stay shared.
    pub fn mps(compute_fraction: f64) -> Result<Self> {
        Self::new(compute_fraction, 1.0, 1.0, 1.0)
    }

    pub fn of(instance: &PartitionInstance) -> Self {
        Self::unchecked(
            instance.compute_fraction,
            instance.dram_bw_fraction,
            instance.l2_bw_fraction,
            instance.mem_capacity_fraction,
        )
    }

    /// `self` expressed relative to `baseline`, component by component.
    pub fn relative_to(&self, baseline: &ResourceAllocation) -> Self {
        Self::unchecked(
            self.compute_fraction / baseline.compute_fraction,
            self.dram_bw_fraction / baseline.dram_bw_fraction,
            self.l2_bw_fraction / baseline.l2_bw_fraction,
            self.mem_capacity_fraction / baseline.mem_capacity_fraction,
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.compute_fraction,
            self.dram_bw_fraction,
            self.l2_bw_fraction,
            self.mem_capacity_fraction,
        ]
    }

    pub fn is_full(&self) -> bool {
        self.as_array().iter().all(|&f| f == 1.0)
    }
}

impl Default for ResourceAllocation {
    fn default() -> Self {
        Self::full()
    }
}

/// Parses `compute,dram,l2,capacity`.
impl std::str::FromStr for ResourceAllocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::validation(format!(
                "allocation needs four comma-separated fractions (compute,dram,l2,capacity), got `{s}`"
            )));
        }
        let mut values = [0.0; 4];
        for (v, p) in values.iter_mut().zip(&parts) {
            *v = parse_fraction(p).map_err(Error::Validation)?;
        }
        ResourceAllocation::relative(values[0], values[1], values[2], values[3])
    }
}

/// Returns an allocation whose fractions equal the full GPU.
pub fn full_allocation() -> ResourceAllocation {
    ResourceAllocation::full()
}

pub fn allocation_of(instance: &PartitionInstance) -> ResourceAllocation {
    ResourceAllocation::of(instance)
}

fn check_unit_fractions(owner: &str, fractions: &[f64]) -> Result<()> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::validation(format!(
                "{owner}: fraction {f} outside (0, 1]"
            )));
        }
    }
    Ok(())
}

/// Accepts a decimal (`0.5`) or a ratio (`1/7`).
pub fn parse_fraction(text: &str) -> std::result::Result<f64, String> {
    let text = text.trim();
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| format!("bad fraction `{text}`"))?;
            let den: f64 = den.trim().parse().map_err(|_| format!("bad fraction `{text}`"))?;
            if den == 0.0 {
                return Err(format!("zero denominator in `{text}`"));
            }
            num / den
        }
        None => text.parse().map_err(|_| format!("bad fraction `{text}`"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("fraction `{text}` is not finite"))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHardware {
    name: String,
    sm_count: u32,
    peak_compute_gops: f64,
    peak_dram_gbps: f64,
    peak_l2_gbps: f64,
    l2_capacity_mb: f64,
    #[serde(default = "default_l2_request_bytes")]
    l2_request_bytes: u32,
    dram_capacity_gb: f64,
    host_link_gbps: f64,
    #[serde(default)]
    slices: BTreeMap<String, RawSlice>,
    #[serde(default)]
    mig_catalog: Vec<RawConfig>,
}

fn default_l2_request_bytes() -> u32 {
    128
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlice {
    compute: RawFraction,
    dram_bw: RawFraction,
    l2_bw: RawFraction,
    mem_capacity: RawFraction,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawFraction {
    Number(f64),
    Text(String),
}

impl RawFraction {
    fn value(&self) -> Result<f64> {
        match self {
            RawFraction::Number(v) => Ok(*v),
            RawFraction::Text(t) => parse_fraction(t).map_err(Error::Config),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    instances: Vec<String>,
}

impl RawHardware {
    fn into_spec(self) -> Result<HardwareSpec> {
        let mut slices = BTreeMap::new();
        for (name, raw) in &self.slices {
            let instance = PartitionInstance {
                name: name.clone(),
                compute_fraction: raw.compute.value()?,
                dram_bw_fraction: raw.dram_bw.value()?,
                l2_bw_fraction: raw.l2_bw.value()?,
                mem_capacity_fraction: raw.mem_capacity.value()?,
            };
            instance
                .validate()
                .map_err(|e| Error::config(format!("slice `{name}`: {e}")))?;
            slices.insert(name.clone(), instance);
        }

        let mut catalog = Vec::with_capacity(self.mig_catalog.len());
        for raw in self.mig_catalog {
            let instances = raw
                .instances
                .iter()
                .map(|n| {
                    slices.get(n).cloned().ok_or_else(|| {
                        Error::config(format!("partition `{}` references unknown slice `{n}`", raw.name))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            catalog.push(PartitionConfig {
                name: raw.name,
                instances,
            });
        }
        let mut names: Vec<&str> = catalog.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("duplicate partition name `{}`", w[0])));
        }

        let spec = HardwareSpec {
            name: self.name,
            sm_count: self.sm_count,
            peak_compute_bw: self.peak_compute_gops * GIGA,
            peak_dram_bw: self.peak_dram_gbps * GIGA,
            peak_l2_bw: self.peak_l2_gbps * GIGA,
            l2_capacity: self.l2_capacity_mb * MEGA,
            l2_request_bytes: self.l2_request_bytes,
            dram_capacity: self.dram_capacity_gb * GIGA,
            host_link_bw: self.host_link_gbps * GIGA,
            mig_catalog: catalog,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_has_eighteen_configs() {
        let hw = HardwareSpec::a100();
        assert_eq!(hw.mig_catalog.len(), 18);
        let max = hw.mig_catalog.iter().map(|c| c.instance_count()).max();
        assert_eq!(max, Some(7));
        for config in &hw.mig_catalog {
            for sum in config.fraction_sums() {
                assert!(sum <= 1.0 + FRACTION_SUM_SLACK, "{} sums to {sum}", config.name);
            }
        }
    }

    #[test]
    fn default_peaks() {
        let hw = HardwareSpec::a100();
        assert_eq!(hw.peak_l2_bw, 7050e9);
        assert_eq!(hw.peak_compute_bw, 18247e9);
        assert_eq!(hw.peak_dram_bw, 1555e9);
        assert_eq!(hw.l2_capacity, 40e6);
        assert_eq!(hw.host_link_bw, 32e9);
        assert_eq!(hw.l2_request_bytes, 128);
    }

    #[test]
    fn full_allocation_is_identity() {
        let a = full_allocation();
        assert_eq!(a.as_array(), [1.0; 4]);
        assert_eq!(a.compute_fraction, 1.0);
    }

    #[test]
    fn smallest_slice_is_about_an_eighth() {
        let hw = HardwareSpec::a100();
        let alloc = allocation_of(hw.find_instance("1g.5gb").unwrap());
        for f in alloc.as_array() {
            assert!((f - 0.125).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn half_slice_copies_fractions() {
        let half = PartitionInstance::new("half", ResourceAllocation::uniform(0.5).unwrap());
        assert_eq!(allocation_of(&half).as_array(), [0.5; 4]);
        let hw = HardwareSpec::a100();
        let four = allocation_of(hw.find_instance("4g.20gb").unwrap());
        assert_eq!(four.dram_bw_fraction, 0.5);
        assert_eq!(four.compute_fraction, 4.0 / 7.0);
    }

    #[test]
    fn full_slice_maps_to_full_allocation() {
        let hw = HardwareSpec::a100();
        let alloc = allocation_of(hw.find_instance("7g.40gb").unwrap());
        assert_eq!(alloc, full_allocation());
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = BUNDLED_A100_TOML.replace("sm_count = 108", "sm_count = 108\nturbo = true");
        let err = HardwareSpec::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn rejects_l2_slower_than_dram() {
        let text = BUNDLED_A100_TOML.replace("peak_l2_gbps = 7050.0", "peak_l2_gbps = 1000.0");
        assert!(HardwareSpec::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_non_power_of_two_request() {
        let text = BUNDLED_A100_TOML.replace("l2_request_bytes = 128", "l2_request_bytes = 96");
        assert!(HardwareSpec::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_oversubscribed_partition() {
        let mut text = BUNDLED_A100_TOML.to_string();
        text.push_str("\n[[mig_catalog]]\nname = \"too-big\"\ninstances = [\"7g.40gb\", \"1g.5gb\"]\n");
        let err = HardwareSpec::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("oversubscribes"), "{err}");
    }

    #[test]
    fn allocation_parses_from_cli_form() {
        let a: ResourceAllocation = "1,0.5,1/4,1".parse().unwrap();
        assert_eq!(a.as_array(), [1.0, 0.5, 0.25, 1.0]);
        assert!("1,1,1".parse::<ResourceAllocation>().is_err());
        assert!("0,1,1,1".parse::<ResourceAllocation>().is_err());
    }

    #[test]
    fn new_rejects_out_of_range() {
        assert!(ResourceAllocation::new(1.5, 1.0, 1.0, 1.0).is_err());
        assert!(ResourceAllocation::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(ResourceAllocation::relative(1.5, 1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn uniform_partition_sums_to_one() {
        for k in 1..=7 {
            let p = PartitionConfig::uniform(k).unwrap();
            assert_eq!(p.instance_count(), k);
            assert!((p.resource_fraction_used() - 1.0).abs() < 1e-12);
        }
    }
}
