//! DRAM and L2 roofline models.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{HardwareSpec, MemLevel, ResourceAllocation};
use crate::ingest::AggregateMetrics;

/// Plot grid: 64 log-spaced AI samples over [1e-2, 1e4] op/B.
pub const PLOT_GRID_POINTS: usize = 64;
pub const PLOT_AI_MIN: f64 = 1e-2;
pub const PLOT_AI_MAX: f64 = 1e4;

/// Relative slack before a point counts as above the roof.
const ROOF_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflineCeilings {
    pub level: MemLevel,
    /// Memory slope, bytes/s.
    pub mem_bw: f64,
    /// Flat compute roof, ops/s.
    pub compute_bw: f64,
    /// `compute_bw / mem_bw`.
    pub knee_ai: f64,
}

impl RooflineCeilings {
    /// Attainable throughput at the given arithmetic intensity.
    pub fn attainable(&self, ai: f64) -> f64 {
        (ai * self.mem_bw).min(self.compute_bw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub label: String,
    pub ai: f64,
    /// Attained integer ops/s.
    pub throughput: f64,
    pub level: MemLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundKind {
    ComputeBound,
    DramBound,
    L2Bound,
}

impl BoundKind {
    pub fn is_memory(self) -> bool {
        !matches!(self, BoundKind::ComputeBound)
    }
}

pub fn build_ceilings(hw: &HardwareSpec, alloc: &ResourceAllocation, level: MemLevel) -> RooflineCeilings {
    let fraction = match level {
        MemLevel::Dram => alloc.dram_bw_fraction,
        MemLevel::L2 => alloc.l2_bw_fraction,
    };
    let mem_bw = hw.peak_mem_bw(level) * fraction;
    let compute_bw = hw.peak_compute_bw * alloc.compute_fraction;
    RooflineCeilings {
        level,
        mem_bw,
        compute_bw,
        knee_ai: compute_bw / mem_bw,
    }
}

pub fn place_point(m: &AggregateMetrics, level: MemLevel, label: impl Into<String>) -> Result<RooflinePoint> {
    let ai = m.ai(level);
    if !(ai.is_finite() && ai > 0.0) || !(m.attained_compute_bw > 0.0) {
        return Err(Error::Degenerate(format!(
            "cannot place point at {level}: ai {ai}, throughput {}",
            m.attained_compute_bw
        )));
    }
    Ok(RooflinePoint {
        label: label.into(),
        ai,
        throughput: m.attained_compute_bw,
        level,
    })
}

/// Compute-bound when either intensity lies strictly right of its knee.
/// Otherwise the memory level running closer to its peak wins; ties go to L2.
pub fn classify(m: &AggregateMetrics, hw: &HardwareSpec) -> BoundKind {
    let dram_knee = hw.peak_compute_bw / hw.peak_dram_bw;
    let l2_knee = hw.peak_compute_bw / hw.peak_l2_bw;
    if m.ai_dram > dram_knee || m.ai_l2 > l2_knee {
        return BoundKind::ComputeBound;
    }
    let dram_util = m.attained_dram_bw / hw.peak_dram_bw;
    let l2_util = m.attained_l2_bw / hw.peak_l2_bw;
    if dram_util > l2_util {
        BoundKind::DramBound
    } else {
        BoundKind::L2Bound
    }
}

/// Log-spaced AI grid used for ceiling polylines.
pub fn ai_grid() -> Vec<f64> {
    let (lo, hi) = (PLOT_AI_MIN.log10(), PLOT_AI_MAX.log10());
    let step = (hi - lo) / (PLOT_GRID_POINTS - 1) as f64;
    (0..PLOT_GRID_POINTS)
        .map(|i| 10f64.powf(lo + step * i as f64))
        .collect()
}

/// Writes `series,ai,throughput,above_roof`: the ceiling polyline first
/// (series `ceiling:<level>`), then one row per point.
pub fn emit_plot_data<W: Write>(points: &[RooflinePoint], ceilings: &RooflineCeilings, sink: W) -> Result<()> {
    if let Some(p) = points.iter().find(|p| p.level != ceilings.level) {
        return Err(Error::validation(format!(
            "point `{}` is at {} but the ceilings are {}",
            p.label, p.level, ceilings.level
        )));
    }
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(["series", "ai", "throughput", "above_roof"])?;
    let series = format!("ceiling:{}", ceilings.level);
    for ai in ai_grid() {
        wtr.write_record([
            series.as_str(),
            &ai.to_string(),
            &ceilings.attainable(ai).to_string(),
            "false",
        ])?;
    }
    for p in points {
        let above = p.throughput > ceilings.attainable(p.ai) * (1.0 + ROOF_SLACK);
        wtr.write_record([
            p.label.as_str(),
            &p.ai.to_string(),
            &p.throughput.to_string(),
            if above { "true" } else { "false" },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(ai_dram: f64, ai_l2: f64, dram_util: f64, l2_util: f64, hw: &HardwareSpec) -> AggregateMetrics {
        let dram = dram_util * hw.peak_dram_bw;
        let l2 = l2_util * hw.peak_l2_bw;
        AggregateMetrics {
            total_duration: 1.0,
            total_dram_bytes: dram,
            total_l2_bytes: l2,
            total_int_ops: ai_dram * dram,
            ai_dram,
            ai_l2,
            attained_compute_bw: ai_dram * dram,
            attained_dram_bw: dram,
            attained_l2_bw: l2,
        }
    }

    #[test]
    fn a100_ceilings() {
        let hw = HardwareSpec::a100();
        let full = ResourceAllocation::full();
        let l2 = build_ceilings(&hw, &full, MemLevel::L2);
        assert_eq!(l2.mem_bw, 7050e9);
        assert_eq!(l2.compute_bw, 18247e9);
        let half = ResourceAllocation::new(0.5, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(build_ceilings(&hw, &half, MemLevel::Dram).compute_bw, 9123.5e9);
    }

    #[test]
    fn knee_halves_with_compute() {
        let hw = HardwareSpec::a100();
        let full = build_ceilings(&hw, &ResourceAllocation::full(), MemLevel::Dram);
        let half = build_ceilings(&hw, &ResourceAllocation::new(0.5, 1.0, 1.0, 1.0).unwrap(), MemLevel::Dram);
        assert_eq!(half.knee_ai, full.knee_ai / 2.0);
        assert_eq!(full.knee_ai, full.compute_bw / full.mem_bw);
    }

    #[test]
    fn place_point_copies_fields() {
        let m = AggregateMetrics::from_totals(1.0, 1000e9, 2000e9, 500e9).unwrap();
        let p = place_point(&m, MemLevel::Dram, "q").unwrap();
        assert_eq!((p.ai, p.throughput), (0.5, 5e11));
    }

    #[test]
    fn q34_like_point_is_compute_bound() {
        let hw = HardwareSpec::a100();
        // 2886.74 Gops/s at 27.15 op/B
        let ops = 2886.74e9;
        let m = AggregateMetrics::from_totals(1.0, ops / 27.15, ops / 27.15 * 2.0, ops).unwrap();
        let p = place_point(&m, MemLevel::Dram, "Q34").unwrap();
        assert!((p.ai - 27.15).abs() < 1e-9);
        assert!((p.throughput - 2886.74e9).abs() < 1e-3);
        assert!(hw.peak_compute_bw / hw.peak_dram_bw < 27.15);
        assert_eq!(classify(&m, &hw), BoundKind::ComputeBound);
    }

    #[test]
    fn utilization_picks_memory_level() {
        let hw = HardwareSpec::a100();
        let dram_knee = hw.peak_compute_bw / hw.peak_dram_bw;
        let l2_knee = hw.peak_compute_bw / hw.peak_l2_bw;
        let m = metrics(dram_knee / 2.0, l2_knee / 2.0, 0.3, 0.9, &hw);
        assert_eq!(classify(&m, &hw), BoundKind::L2Bound);
        let m = metrics(dram_knee / 2.0, l2_knee / 2.0, 0.9, 0.3, &hw);
        assert_eq!(classify(&m, &hw), BoundKind::DramBound);
        let m = metrics(dram_knee / 2.0, l2_knee / 2.0, 0.5, 0.5, &hw);
        assert_eq!(classify(&m, &hw), BoundKind::L2Bound);
    }

    #[test]
    fn knee_exact_is_memory_bound() {
        let hw = HardwareSpec::a100();
        let dram_knee = hw.peak_compute_bw / hw.peak_dram_bw;
        let l2_knee = hw.peak_compute_bw / hw.peak_l2_bw;
        let m = metrics(dram_knee, l2_knee, 0.5, 0.4, &hw);
        assert_eq!(classify(&m, &hw), BoundKind::DramBound);
    }

    #[test]
    fn plot_rows() {
        let hw = HardwareSpec::a100();
        let c = build_ceilings(&hw, &ResourceAllocation::full(), MemLevel::Dram);
        let mut buf = Vec::new();
        emit_plot_data(&[], &c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + PLOT_GRID_POINTS);

        let points: Vec<_> = (0..13)
            .map(|i| RooflinePoint {
                label: format!("Q{i}"),
                ai: 1.0 + i as f64,
                throughput: 1e9,
                level: MemLevel::Dram,
            })
            .collect();
        let mut buf = Vec::new();
        emit_plot_data(&points, &c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + PLOT_GRID_POINTS + 13);
    }

    #[test]
    fn plot_flags_points_above_roof() {
        let hw = HardwareSpec::a100();
        let c = build_ceilings(&hw, &ResourceAllocation::full(), MemLevel::Dram);
        let over = RooflinePoint {
            label: "hot".into(),
            ai: 1.0,
            throughput: 2.0 * hw.peak_dram_bw,
            level: MemLevel::Dram,
        };
        let mut buf = Vec::new();
        emit_plot_data(&[over], &c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().last().unwrap().ends_with(",true"));
    }

    #[test]
    fn plot_rejects_level_mismatch() {
        let hw = HardwareSpec::a100();
        let c = build_ceilings(&hw, &ResourceAllocation::full(), MemLevel::Dram);
        let p = RooflinePoint {
            label: "x".into(),
            ai: 1.0,
            throughput: 1.0,
            level: MemLevel::L2,
        };
        assert!(emit_plot_data(&[p], &c, Vec::new()).is_err());
    }

    #[test]
    fn grid_bounds() {
        let g = ai_grid();
        assert_eq!(g.len(), 64);
        assert!((g[0] - 1e-2).abs() < 1e-15);
        assert!((g[63] - 1e4).abs() < 1e-8);
    }
}
