//! Accuracy evaluation: relative errors, nearest-rank CDFs, and a synthetic
//! device that stands in for real GPU runs.
//!
//! The synthetic oracle has its own saturating-bandwidth model with hidden
//! efficiencies. It does not call into `scaling`, so comparing predictions
//! against it is not circular.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{HardwareSpec, ResourceAllocation};
use crate::ingest::{aggregate, KernelRecord, QueryProfile};
use crate::roofline::BoundKind;
use crate::scaling::{linear_baseline, slowdown_unified};

/// `|estimated - actual| / actual * 100`
pub fn relative_error(estimated: f64, actual: f64) -> Result<f64> {
    if !(actual.is_finite() && actual > 0.0) {
        return Err(Error::validation(format!("actual time must be > 0, got {actual}")));
    }
    Ok((estimated - actual).abs() / actual * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub label: String,
    pub estimated: f64,
    pub actual: f64,
    pub relative_error_pct: f64,
}

impl ErrorSample {
    pub fn new(label: impl Into<String>, estimated: f64, actual: f64) -> Result<Self> {
        Ok(ErrorSample {
            label: label.into(),
            estimated,
            actual,
            relative_error_pct: relative_error(estimated, actual)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCdf {
    /// `(percentile, error_pct)` for percentiles 1..=100.
    pub points: Vec<(u32, f64)>,
    pub median: f64,
    pub p95: f64,
}

/// Nearest-rank: the p-th percentile of n sorted values is the one at rank
/// `ceil(p / 100 * n)`, ranks starting at 1.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn error_cdf(samples: &[ErrorSample]) -> Result<ErrorCdf> {
    if samples.is_empty() {
        return Err(Error::validation("error CDF needs at least one sample"));
    }
    let mut errors: Vec<f64> = samples.iter().map(|s| s.relative_error_pct).collect();
    errors.sort_by(f64::total_cmp);
    Ok(ErrorCdf {
        points: (1..=100).map(|p| (p, nearest_rank(&errors, f64::from(p)))).collect(),
        median: nearest_rank(&errors, 50.0),
        p95: nearest_rank(&errors, 95.0),
    })
}

#[derive(Deserialize)]
struct SampleRow {
    label: String,
    estimated: f64,
    actual: f64,
}

/// Reads `label,estimated,actual` rows; the error column is recomputed.
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<ErrorSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<SampleRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            row: i + 1,
            column: e
                .position()
                .map(|_| "label,estimated,actual".to_owned())
                .unwrap_or_default(),
            message: e.to_string(),
        })?;
        out.push(ErrorSample::new(row.label, row.estimated, row.actual)?);
    }
    Ok(out)
}

pub fn write_samples_csv<W: Write>(samples: &[ErrorSample], sink: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(["label", "estimated", "actual"])?;
    for s in samples {
        wtr.write_record([s.label.clone(), s.estimated.to_string(), s.actual.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Ground truth for one synthetic query. Utilizations are demand as a
/// fraction of peak at full allocation; efficiencies cap what a slice can
/// actually deliver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenParams {
    pub kind: BoundKind,
    pub compute_util: f64,
    pub dram_util: f64,
    pub l2_util: f64,
    pub compute_eff: f64,
    pub dram_eff: f64,
    pub l2_eff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticDevice {
    pub hw: HardwareSpec,
    pub hidden: BTreeMap<String, HiddenParams>,
}

const EFF_RANGE: (f64, f64) = (0.7, 0.95);

fn sample_hidden(rng: &mut ChaCha8Rng, kind: BoundKind) -> HiddenParams {
    let compute_eff = rng.random_range(EFF_RANGE.0..EFF_RANGE.1);
    let dram_eff = rng.random_range(EFF_RANGE.0..EFF_RANGE.1);
    let l2_eff = rng.random_range(EFF_RANGE.0..EFF_RANGE.1);
    let (compute_util, dram_util, l2_util) = match kind {
        // compute saturated at its efficiency; memory intensity right of
        // both knees
        BoundKind::ComputeBound => {
            let c = compute_eff;
            let d = rng.random_range(0.2..0.8) * compute_eff.min(dram_eff);
            let l = rng.random_range(0.2..0.8) * compute_eff.min(l2_eff);
            (c, d, l)
        }
        BoundKind::DramBound => {
            let d = rng.random_range(0.3..1.0) * dram_eff;
            let v = rng.random_range(0.05..0.6);
            let l = ((v + (0.9 - v) * rng.random::<f64>()) * d).min(l2_eff);
            (v * d, d, l)
        }
        BoundKind::L2Bound => {
            let l = rng.random_range(0.3..1.0) * l2_eff;
            let d = rng.random_range(0.05..0.9) * l;
            let v = rng.random_range(0.05..0.9);
            (v * d, d, l)
        }
    };
    HiddenParams {
        kind,
        compute_util,
        dram_util,
        l2_util,
        compute_eff,
        dram_eff,
        l2_eff,
    }
}

/// Builds `n_queries` profiles cycling through compute-, DRAM- and
/// L2-bound kinds. Each profile is 1-3 kernels whose counters reproduce the
/// hidden utilizations over the whole query.
pub fn generate_synthetic(device_seed: u64, n_queries: usize) -> Result<(SyntheticDevice, Vec<QueryProfile>)> {
    if n_queries == 0 {
        return Err(Error::validation("n_queries must be at least 1"));
    }
    let hw = HardwareSpec::a100();
    let mut rng = ChaCha8Rng::seed_from_u64(device_seed);
    let kinds = [BoundKind::ComputeBound, BoundKind::DramBound, BoundKind::L2Bound];
    let mut hidden = BTreeMap::new();
    let mut profiles = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let id = format!("syn{i:04}");
        let h = sample_hidden(&mut rng, kinds[i % 3]);
        let duration = rng.random_range(0.01..2.0);
        let n_kernels = rng.random_range(1..=3);
        let weights: Vec<f64> = (0..n_kernels).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let kernels = weights
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let t = duration * w / total;
                KernelRecord {
                    kernel_name: format!("k{k}"),
                    duration: t,
                    dram_bytes: h.dram_util * hw.peak_dram_bw * t,
                    l2_requests: h.l2_util * hw.peak_l2_bw * t / f64::from(hw.l2_request_bytes),
                    int_ops: h.compute_util * hw.peak_compute_bw * t,
                }
            })
            .collect();
        let mut p = QueryProfile::new(&id, 1.0, kernels);
        p.system = "synthetic".into();
        hidden.insert(id, h);
        profiles.push(p);
    }
    Ok((SyntheticDevice { hw, hidden }, profiles))
}

/// "Actual" GPU time under `alloc`. Each resource delivers
/// `min(demand, fraction * peak * efficiency)`; the slowest resource sets
/// the time.
pub fn oracle_actual_time(dev: &SyntheticDevice, profile: &QueryProfile, alloc: &ResourceAllocation) -> Result<f64> {
    let h = dev.hidden.get(&profile.query_id).ok_or_else(|| {
        Error::validation(format!("query `{}` is not on this synthetic device", profile.query_id))
    })?;
    let duration: f64 = profile.kernels.iter().map(|k| k.duration).sum();
    let stretch = |demand: f64, fraction: f64, eff: f64| demand / demand.min(fraction * eff);
    let factor = stretch(h.compute_util, alloc.compute_fraction, h.compute_eff)
        .max(stretch(h.dram_util, alloc.dram_bw_fraction, h.dram_eff))
        .max(stretch(h.l2_util, alloc.l2_bw_fraction, h.l2_eff));
    Ok(duration * factor)
}

/// Distinct slice allocations in the catalog, smallest compute first.
pub fn catalog_grid(hw: &HardwareSpec) -> Vec<(String, ResourceAllocation)> {
    let mut grid: Vec<(String, ResourceAllocation)> = Vec::new();
    for inst in hw.mig_catalog.iter().flat_map(|c| &c.instances) {
        let alloc = ResourceAllocation::of(inst);
        if !grid.iter().any(|(_, a)| *a == alloc) {
            grid.push((inst.name.clone(), alloc));
        }
    }
    grid.sort_by(|a, b| a.1.compute_fraction.total_cmp(&b.1.compute_fraction));
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub roofline: Vec<ErrorSample>,
    pub linear: Vec<ErrorSample>,
}

/// Scores the roofline predictor and the linear baseline against the oracle
/// on every (profile, allocation) pair.
pub fn evaluate(
    dev: &SyntheticDevice,
    profiles: &[QueryProfile],
    grid: &[(String, ResourceAllocation)],
) -> Result<Evaluation> {
    let mut roofline = Vec::with_capacity(profiles.len() * grid.len());
    let mut linear = Vec::with_capacity(profiles.len() * grid.len());
    for p in profiles {
        let m = aggregate(p, &dev.hw)?;
        for (name, alloc) in grid {
            let label = format!("{}@{}", p.query_id, name);
            let actual = oracle_actual_time(dev, p, alloc)?;
            let predicted = slowdown_unified(&m, &dev.hw, alloc)?.predicted_time;
            let baseline = linear_baseline(m.total_duration, alloc.compute_fraction)?;
            roofline.push(ErrorSample::new(&label, predicted, actual)?);
            linear.push(ErrorSample::new(label, baseline, actual)?);
        }
    }
    Ok(Evaluation { roofline, linear })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::validate_against_roofs;
    use crate::roofline::classify;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(relative_error(3.0, 2.0).unwrap(), 50.0);
        assert_eq!(relative_error(1.0, 2.0).unwrap(), 50.0);
        assert!(relative_error(1.0, 0.0).is_err());
        assert!(relative_error(1.0, -1.0).is_err());
    }

    fn sample(err: f64) -> ErrorSample {
        ErrorSample::new("s", 1.0 + err / 100.0, 1.0).unwrap()
    }

    #[test]
    fn cdf_single_and_pair() {
        let c = error_cdf(&[sample(10.0)]).unwrap();
        assert!((c.median - 10.0).abs() < 1e-9);
        assert_eq!(c.median, c.p95);
        assert_eq!(c.points.len(), 100);

        let c = error_cdf(&[sample(100.0), sample(0.0)]).unwrap();
        assert_eq!(c.median, 0.0);
        assert_eq!(c.p95, 100.0);
        assert!(error_cdf(&[]).is_err());
    }

    #[test]
    fn cdf_nearest_rank_on_twenty() {
        let samples: Vec<_> = (1..=20).map(|i| sample(f64::from(i))).collect();
        let c = error_cdf(&samples).unwrap();
        assert!((c.median - 10.0).abs() < 1e-9);
        assert!((c.p95 - 19.0).abs() < 1e-9);
        assert!(c.points.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn samples_csv_round_trip() {
        let samples = vec![
            ErrorSample::new("a", 1.5, 2.0).unwrap(),
            ErrorSample::new("b,c", 0.1, 0.3).unwrap(),
        ];
        let mut buf = Vec::new();
        write_samples_csv(&samples, &mut buf).unwrap();
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), samples);
        assert!(read_samples_csv("label,estimated,actual\nx,1,0\n".as_bytes()).is_err());
        assert!(read_samples_csv("label,estimated,actual\nx,one,2\n".as_bytes()).is_err());
    }

    #[test]
    fn generator_contract() {
        let (dev, profiles) = generate_synthetic(11, 30).unwrap();
        let (dev2, profiles2) = generate_synthetic(11, 30).unwrap();
        assert_eq!(serde_json::to_string(&profiles).unwrap(), serde_json::to_string(&profiles2).unwrap());
        assert_eq!(dev, dev2);
        assert!(generate_synthetic(1, 0).is_err());

        let mut seen = Vec::new();
        for p in &profiles {
            let m = aggregate(p, &dev.hw).unwrap();
            assert!(validate_against_roofs(&m, &dev.hw).is_empty(), "{}", p.query_id);
            let kind = classify(&m, &dev.hw);
            assert_eq!(kind, dev.hidden[&p.query_id].kind, "{}", p.query_id);
            seen.push(kind);
        }
        for k in [BoundKind::ComputeBound, BoundKind::DramBound, BoundKind::L2Bound] {
            assert!(seen.contains(&k));
        }
    }

    #[test]
    fn oracle_calibration_and_closed_forms() {
        let (dev, profiles) = generate_synthetic(5, 9).unwrap();
        for p in &profiles {
            let t: f64 = p.kernels.iter().map(|k| k.duration).sum();
            assert_eq!(oracle_actual_time(&dev, p, &ResourceAllocation::full()).unwrap(), t);

            let h = dev.hidden[&p.query_id];
            if h.kind == BoundKind::ComputeBound {
                for f in [0.1, 0.3, 0.6, 0.9] {
                    let a = ResourceAllocation::uniform(f).unwrap();
                    let got = oracle_actual_time(&dev, p, &a).unwrap();
                    assert!((got - t / f).abs() <= 1e-12 * t / f, "{got} vs {}", t / f);
                }
            }
            if h.kind == BoundKind::DramBound {
                // below the DRAM knee with compute and L2 untouched
                let f = 0.5 * h.dram_util / h.dram_eff;
                let a = ResourceAllocation::new(1.0, f, 1.0, 1.0).unwrap();
                let got = oracle_actual_time(&dev, p, &a).unwrap();
                let want = t * h.dram_util / (f * h.dram_eff);
                assert!((got - want).abs() <= 1e-12 * want);
            }
        }
    }

    #[test]
    fn roofline_beats_linear_on_small_suite() {
        let (dev, profiles) = generate_synthetic(3, 60).unwrap();
        let grid = catalog_grid(&dev.hw);
        assert_eq!(grid.len(), 5);
        let eval = evaluate(&dev, &profiles, &grid).unwrap();
        let r = error_cdf(&eval.roofline).unwrap();
        let l = error_cdf(&eval.linear).unwrap();
        assert!(r.median <= l.median, "{} vs {}", r.median, l.median);
        assert!(eval.roofline.iter().any(|s| s.relative_error_pct > 0.0));
    }
}
