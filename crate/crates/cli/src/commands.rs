use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use slicewise::advisor::{advise, emit_curve_csv, scaling_curve, Objective};
use slicewise::concurrency::{estimate_qps, simulate_dispatch, write_trace_csv, Assignment, SharingMode, WorkloadSpec};
use slicewise::evalkit::{
    catalog_grid, error_cdf, evaluate, generate_synthetic, read_samples_csv, write_samples_csv, ErrorCdf, ErrorSample,
};
use slicewise::hardware::BUNDLED_A100_TOML;
use slicewise::ingest::{parse_counter_file, validate_against_roofs, write_canonical_csv, CounterFormat, RoofWarning};
use slicewise::roofline::{build_ceilings, emit_plot_data, place_point, RooflineCeilings};
use slicewise::scaling::linear_baseline;
use slicewise::whitebox::{extrapolate_sf, extrapolate_sf_crystal, ExtrapolationOptions};
use slicewise::{
    aggregate, classify, slowdown_unified, BoundKind, Error, HardwareSpec, MemLevel, PartitionConfig, Prediction,
    QueryProfile, ResourceAllocation,
};

use crate::args::*;
use crate::manifest::{digest, envelope, sidecar_path, RunManifest};

pub const HARDWARE_ENV: &str = "SLICEWISE_HARDWARE";

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Validation(msg.into()).into()
}

/// `--hw`, then `$SLICEWISE_HARDWARE`, then the bundled A100.
fn load_hardware(flag: Option<&Path>, command: &str) -> Result<(HardwareSpec, RunManifest)> {
    let path = flag.map(Path::to_path_buf).or_else(|| std::env::var_os(HARDWARE_ENV).map(PathBuf::from));
    match path {
        Some(path) => {
            let text =
                std::fs::read_to_string(&path).with_context(|| format!("reading hardware spec {}", path.display()))?;
            let hw = HardwareSpec::from_toml_str(&text)?;
            let manifest = RunManifest::new(command, path.display().to_string(), digest(text.as_bytes()));
            Ok((hw, manifest))
        }
        None => {
            let hw = HardwareSpec::a100();
            let manifest = RunManifest::new(
                command,
                format!("builtin:{}", hw.name),
                digest(BUNDLED_A100_TOML.as_bytes()),
            );
            Ok((hw, manifest))
        }
    }
}

fn load_profile(manifest: &mut RunManifest, path: &Path) -> Result<QueryProfile> {
    let text = manifest.read_input(path)?;
    QueryProfile::from_json(&text).with_context(|| format!("loading profile {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn emit_json<T: Serialize>(manifest: &RunManifest, result: T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&envelope(manifest, Some(result)))?;
    text.push('\n');
    write_text(out, &text)
}

/// Writes a CSV through `body`, plus the manifest sidecar.
fn emit_csv(manifest: &RunManifest, path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w)?;
    w.flush()?;
    let mut text = serde_json::to_string_pretty(&envelope::<()>(manifest, None))?;
    text.push('\n');
    write_text(Some(&sidecar_path(path)), &text)
}

fn register_outputs(manifest: &mut RunManifest, paths: &[Option<&PathBuf>]) {
    for p in paths.iter().flatten() {
        manifest.output(p);
    }
}

pub fn ingest(hw_flag: Option<&Path>, a: &IngestArgs) -> Result<()> {
    let (hw, mut manifest) = load_hardware(hw_flag, "ingest")?;
    let text = manifest.read_input(&a.input)?;
    let format = match &a.format {
        Some(f) => f.parse::<CounterFormat>()?,
        None if a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) => CounterFormat::Json,
        None => CounterFormat::Csv,
    };
    let kernels = parse_counter_file(text.as_bytes(), format)?;
    let query_id = match &a.query_id {
        Some(id) => id.clone(),
        None => a
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "query".into()),
    };
    let mut profile = QueryProfile::new(query_id, a.sf, kernels);
    profile.system = a.system.clone().unwrap_or_default();
    profile.cpu_overhead = a.cpu_overhead;
    profile.setup_overhead = a.setup_overhead;
    profile.transfer_in_bytes = a.transfer_in;
    profile.transfer_out_bytes = a.transfer_out;
    profile.dram_utilization = a.dram_utilization;
    profile.l1_hit_rate = a.l1_hit_rate;
    profile.l2_hit_rate = a.l2_hit_rate;
    profile.validate()?;

    for w in validate_against_roofs(&aggregate(&profile, &hw)?, &hw) {
        eprintln!("warning: {w}");
    }

    manifest.param("query_id", &profile.query_id);
    manifest.param("scale_factor", profile.scale_factor);
    register_outputs(&mut manifest, &[a.out.as_ref()]);
    let mut text = profile.to_json_stamped(Some(&manifest.hash()))?;
    text.push('\n');
    write_text(a.out.as_deref(), &text)
}

pub fn export(hw_flag: Option<&Path>, a: &ExportArgs) -> Result<()> {
    let (_, mut manifest) = load_hardware(hw_flag, "export")?;
    let profile = load_profile(&mut manifest, &a.profile)?;
    match &a.out {
        Some(path) => {
            manifest.output(path);
            emit_csv(&manifest, path, |w| Ok(write_canonical_csv(&profile.kernels, w)?))
        }
        None => Ok(write_canonical_csv(&profile.kernels, std::io::stdout().lock())?),
    }
}

fn alloc_text(a: &ResourceAllocation) -> String {
    a.as_array().map(|f| f.to_string()).join(",")
}

/// Target allocation from `--alloc` or `--mig`.
fn allocation_from(hw: &HardwareSpec, alloc: Option<&str>, mig: Option<&str>) -> Result<Option<ResourceAllocation>> {
    match (alloc, mig) {
        (Some(_), Some(_)) => Err(invalid("give either an allocation or a MIG slice, not both")),
        (Some(a), None) => Ok(Some(a.parse()?)),
        (None, Some(name)) => {
            let inst = hw
                .find_instance(name)
                .ok_or_else(|| invalid(format!("no slice named `{name}` in the {} catalog", hw.name)))?;
            Ok(Some(ResourceAllocation::of(inst)))
        }
        (None, None) => Ok(None),
    }
}

#[derive(Serialize)]
struct RooflineEntry {
    label: String,
    ai_dram: f64,
    ai_l2: f64,
    throughput: f64,
    bound: BoundKind,
    warnings: Vec<RoofWarning>,
}

#[derive(Serialize)]
struct RooflineReport {
    allocation: ResourceAllocation,
    ceilings: Vec<RooflineCeilings>,
    points: Vec<RooflineEntry>,
}

pub fn roofline(hw_flag: Option<&Path>, a: &RooflineArgs) -> Result<()> {
    let (hw, mut manifest) = load_hardware(hw_flag, "roofline")?;
    let alloc = allocation_from(&hw, a.alloc.as_deref(), a.mig.as_deref())?.unwrap_or_default();
    let level: MemLevel = a.level.parse()?;
    let mut points = Vec::new();
    let mut entries = Vec::new();
    for path in &a.profiles {
        let p = load_profile(&mut manifest, path)?;
        let m = aggregate(&p, &hw)?;
        points.push(place_point(&m, level, &p.query_id)?);
        entries.push(RooflineEntry {
            label: p.query_id.clone(),
            ai_dram: m.ai_dram,
            ai_l2: m.ai_l2,
            throughput: m.attained_compute_bw,
            bound: classify(&m, &hw),
            warnings: validate_against_roofs(&m, &hw),
        });
    }
    manifest.param("allocation", alloc_text(&alloc));
    manifest.param("level", level);
    register_outputs(&mut manifest, &[a.out.as_ref(), a.plot.as_ref()]);

    let ceilings = build_ceilings(&hw, &alloc, level);
    if let Some(plot) = &a.plot {
        emit_csv(&manifest, plot, |w| Ok(emit_plot_data(&points, &ceilings, w)?))?;
    }
    let report = RooflineReport {
        allocation: alloc,
        ceilings: [MemLevel::Dram, MemLevel::L2]
            .into_iter()
            .map(|l| build_ceilings(&hw, &alloc, l))
            .collect(),
        points: entries,
    };
    emit_json(&manifest, report, a.out.as_deref())
}

#[derive(Serialize)]
struct PredictReport {
    query_id: String,
    baseline_allocation: ResourceAllocation,
    target_allocation: ResourceAllocation,
    relative_allocation: ResourceAllocation,
    prediction: Prediction,
    linear_baseline_time: f64,
    predicted_end_to_end: f64,
}

pub fn predict(hw_flag: Option<&Path>, a: &PredictArgs) -> Result<()> {
    let (hw, mut manifest) = load_hardware(hw_flag, "predict")?;
    let profile = load_profile(&mut manifest, &a.profile)?;
    let target = allocation_from(&hw, a.alloc.as_deref(), a.mig.as_deref())?
        .ok_or_else(|| invalid("predict needs --alloc or --mig"))?;
    let baseline = allocation_from(&hw, a.from.as_deref(), a.from_mig.as_deref())?.unwrap_or_default();
    let relative = target.relative_to(&baseline);
    let base_hw = hw.scaled(&baseline);
    let m = aggregate(&profile, &base_hw)?;
    let prediction = slowdown_unified(&m, &base_hw, &relative)?;

    manifest.param("target", alloc_text(&target));
    manifest.param("baseline", alloc_text(&baseline));
    register_outputs(&mut manifest, &[a.out.as_ref()]);
    let report = PredictReport {
        query_id: profile.query_id.clone(),
        baseline_allocation: baseline,
        target_allocation: target,
        relative_allocation: relative,
        linear_baseline_time: linear_baseline(m.total_duration, relative.compute_fraction)?,
        predicted_end_to_end: prediction.predicted_time + profile.cpu_overhead,
        prediction,
    };
    emit_json(&manifest, report, a.out.as_deref())
}

/// Workload from `--workload` or from `--profile` files with optional
/// weights. Command-line settings override those in the file.
fn load_workload(manifest: &mut RunManifest, a: &WorkloadArgs) -> Result<WorkloadSpec> {
    let mut w = match (&a.workload, a.profiles.is_empty()) {
        (Some(_), false) => return Err(invalid("give either --workload or --profile, not both")),
        (None, true) => return Err(invalid("no workload: pass --workload or at least one --profile")),
        (Some(path), true) => {
            let text = manifest.read_input(path)?;
            WorkloadSpec::from_json(&text).with_context(|| format!("loading workload {}", path.display()))?
        }
        (None, false) => {
            if !a.weights.is_empty() && a.weights.len() != a.profiles.len() {
                return Err(invalid(format!(
                    "{} weights given for {} profiles",
                    a.weights.len(),
                    a.profiles.len()
                )));
            }
            let mut mix = Vec::new();
            for (i, path) in a.profiles.iter().enumerate() {
                let weight = a.weights.get(i).copied().unwrap_or(1.0);
                mix.push((load_profile(manifest, path)?, weight));
            }
            WorkloadSpec::new(mix, 1, 1000, 0)?
        }
    };
    if let Some(n) = a.dispatch {
        w.dispatch_count = n;
    }
    if a.mps {
        w.sharing = SharingMode::Mps;
    }
    if a.cold {
        w.include_cold_costs = true;
    }
    manifest.param("dispatch_count", w.dispatch_count);
    manifest.param("sharing", format!("{:?}", w.sharing));
    manifest.param("include_cold_costs", w.include_cold_costs);
    Ok(w)
}

#[derive(Serialize)]
struct ConcurrencyReport {
    config: PartitionConfig,
    doc: usize,
    dispatch_count: usize,
    estimated_qps: f64,
    simulated_qps: f64,
    relative_gap: f64,
    makespan: f64,
    per_instance_queries: Vec<usize>,
    per_instance_busy: Vec<f64>,
}

pub fn concurrency(hw_flag: Option<&Path>, a: &ConcurrencyArgs) -> Result<()> {
    let (hw, mut manifest) = load_hardware(hw_flag, "concurrency")?;
    let mut w = load_workload(&mut manifest, &a.workload)?;
    if let Some(doc) = a.doc {
        w.doc = doc;
    }
    if let Some(seed) = a.seed {
        w.seed = seed;
    }
    if let Some(assign) = &a.assignment {
        w.assignment = match assign.as_str() {
            "round-robin" => Assignment::RoundRobin,
            "least-loaded" => Assignment::LeastLoaded,
            other => return Err(invalid(format!("unknown assignment `{other}`"))),
        };
    }
    let config = match &a.config {
        Some(name) => hw
            .find_config(name)
            .cloned()
            .ok_or_else(|| invalid(format!("no partition config named `{name}`")))?,
        None => PartitionConfig::uniform(w.doc)?,
    };

    manifest.seed = Some(w.seed);
    manifest.param("doc", w.doc);
    manifest.param("config", &config.name);
    manifest.param("assignment", format!("{:?}", w.assignment));
    register_outputs(&mut manifest, &[a.out.as_ref(), a.trace.as_ref()]);

    let estimated = estimate_qps(&w, &hw, &config)?;
    let sim = simulate_dispatch(&w, &hw, &config)?;
    if let Some(trace) = &a.trace {
        emit_csv(&manifest, trace, |out| Ok(write_trace_csv(&sim.trace, out)?))?;
    }
    let report = ConcurrencyReport {
        doc: w.doc,
        dispatch_count: w.dispatch_count,
        estimated_qps: estimated,
        simulated_qps: sim.qps,
        relative_gap: (sim.qps - estimated).abs() / estimated,
        makespan: sim.makespan,
        per_instance_queries: sim.per_instance_queries,
        per_instance_busy: sim.per_instance_busy,
        config,
    };
    emit_json(&manifest, report, a.out.as_deref())
}

pub fn advise_cmd(hw_flag: Option<&Path>, a: &AdviseArgs) -> Result<()> {
    let (hw, mut manifest) = load_hardware(hw_flag, "advise")?;
    let w = load_workload(&mut manifest, &a.workload)?;
    let objective: Objective = a.objective.parse()?;
    let fractions = a
        .curve
        .as_deref()
        .map(parse_fraction_list)
        .transpose()?;
    if fractions.is_some() && a.plot.is_none() {
        return Err(invalid("--curve needs --plot"));
    }
    manifest.param("objective", objective);
    manifest.param("format", &a.format);
    if let Some(f) = &fractions {
        manifest.param("curve", format!("{f:?}"));
    }
    register_outputs(&mut manifest, &[a.out.as_ref(), a.plot.as_ref()]);

    let report = advise(&w, &hw, objective)?;
    if let (Some(plot), Some(fractions)) = (&a.plot, &fractions) {
        let mut curves = Vec::new();
        for q in &w.queries {
            curves.push((q.profile.query_id.clone(), scaling_curve(&q.profile, &hw, fractions)?));
        }
        emit_csv(&manifest, plot, |out| Ok(emit_curve_csv(&curves, out)?))?;
    }
    match a.format.as_str() {
        "json" => emit_json(&manifest, report, a.out.as_deref()),
        "table" => {
            let text = format!(
                "# schema_version {} manifest_hash {}\n{}",
                crate::manifest::REPORT_SCHEMA_VERSION,
                manifest.hash(),
                report.to_table()
            );
            write_text(a.out.as_deref(), &text)
        }
        other => Err(invalid(format!("unknown format `{other}` (expected json or table)"))),
    }
}

fn parse_fraction_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| slicewise::hardware::parse_fraction(s).map_err(invalid))
        .collect()
}

#[derive(Serialize)]
struct CdfSummary {
    samples: usize,
    median: f64,
    p95: f64,
    cdf: Vec<(u32, f64)>,
}

impl From<ErrorCdf> for CdfSummary {
    fn from(c: ErrorCdf) -> Self {
        CdfSummary {
            samples: 0,
            median: c.median,
            p95: c.p95,
            cdf: c.points,
        }
    }
}

fn summarize(samples: &[ErrorSample]) -> Result<CdfSummary> {
    Ok(CdfSummary {
        samples: samples.len(),
        ..error_cdf(samples)?.into()
    })
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<Vec<(String, ResourceAllocation)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    roofline: Option<CdfSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    linear: Option<CdfSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<CdfSummary>,
}

pub fn eval(hw_flag: Option<&Path>, a: &EvalArgs) -> Result<()> {
    let (_, mut manifest) = load_hardware(hw_flag, "eval")?;
    match (&a.samples, a.synthetic) {
        (Some(path), false) => {
            let text = manifest.read_input(path)?;
            let samples = read_samples_csv(text.as_bytes())?;
            register_outputs(&mut manifest, &[a.out.as_ref()]);
            let report = EvalReport {
                grid: None,
                roofline: None,
                linear: None,
                samples: Some(summarize(&samples)?),
            };
            emit_json(&manifest, report, a.out.as_deref())
        }
        (None, true) => {
            // the synthetic device is always the bundled A100
            let (dev, profiles) = generate_synthetic(a.seed, a.queries)?;
            let grid = catalog_grid(&dev.hw);
            let eval = evaluate(&dev, &profiles, &grid)?;
            manifest.seed = Some(a.seed);
            manifest.param("queries", a.queries);
            register_outputs(
                &mut manifest,
                &[a.out.as_ref(), a.roofline_samples.as_ref(), a.linear_samples.as_ref()],
            );
            if let Some(p) = &a.roofline_samples {
                emit_csv(&manifest, p, |w| Ok(write_samples_csv(&eval.roofline, w)?))?;
            }
            if let Some(p) = &a.linear_samples {
                emit_csv(&manifest, p, |w| Ok(write_samples_csv(&eval.linear, w)?))?;
            }
            let report = EvalReport {
                grid: Some(grid),
                roofline: Some(summarize(&eval.roofline)?),
                linear: Some(summarize(&eval.linear)?),
                samples: None,
            };
            emit_json(&manifest, report, a.out.as_deref())
        }
        _ => Err(invalid("eval needs exactly one of --synthetic or --samples")),
    }
}

#[derive(Serialize)]
struct ExtrapolateReport {
    query_id: String,
    model: &'static str,
    profile_sf: f64,
    target_sf: f64,
    scale_hashtable: bool,
    predicted_time: f64,
}

pub fn extrapolate(hw_flag: Option<&Path>, a: &ExtrapolateArgs) -> Result<()> {
    let (hw, mut manifest) = load_hardware(hw_flag, "extrapolate")?;
    let profile = load_profile(&mut manifest, &a.profile)?;
    if profile.plan.is_empty() {
        return Err(invalid(format!("profile `{}` has no operator plan", profile.query_id)));
    }
    let opts = ExtrapolationOptions {
        scale_hashtable: a.scale_hashtable,
    };
    let (model, predicted) = if a.crystal {
        (
            "crystal",
            extrapolate_sf_crystal(&profile.plan, profile.scale_factor, a.target_sf, &hw, opts)?,
        )
    } else {
        ("crystal-opt", extrapolate_sf(&profile, &profile.plan, a.target_sf, &hw, opts)?)
    };
    manifest.param("target_sf", a.target_sf);
    manifest.param("model", model);
    manifest.param("scale_hashtable", a.scale_hashtable);
    register_outputs(&mut manifest, &[a.out.as_ref()]);
    let report = ExtrapolateReport {
        query_id: profile.query_id.clone(),
        model,
        profile_sf: profile.scale_factor,
        target_sf: a.target_sf,
        scale_hashtable: a.scale_hashtable,
        predicted_time: predicted,
    };
    emit_json(&manifest, report, a.out.as_deref())
}
