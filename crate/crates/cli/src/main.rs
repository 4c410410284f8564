use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coverage_core::calibration::{match_incidents, scale_report, CalibrationError};
use coverage_core::export::{
    write_areas_geojson, write_bands_csv, write_bands_geojson, write_calibration_text, write_compliance_csv,
    write_compliance_text, write_diff_geojson, write_histogram_csv, write_incidents_csv, write_stations_geojson,
};
use coverage_core::geo::haversine_distance;
use coverage_core::osm::{load_incidents_csv, IngestError, DEFAULT_MIN_ISLAND_AREA_M2};
use coverage_core::pipeline::{
    self, compute_work_fields, load_engine, write_ingest_report, write_scenario_artifacts, IngestInputs, PipelineError,
    LANDMASK_FILE,
};
use coverage_core::scenario::{
    sweep_values, PlacementObjective, ScenarioConfig, ScenarioEngine, ScenarioError, SweepFamily, MATCH_CUTOFF_M,
};
use coverage_core::synthetic::{SyntheticDataset, SyntheticParams};
use coverage_core::NodeIndex;

/// Fire-service response-time planning: ingest, precompute, scenarios,
/// calibration and exports.
#[derive(Debug, Parser)]
#[command(name = "coverage", version)]
struct Cli {
    /// Work directory holding the graph and field caches.
    #[arg(long, global = true, default_value = "work", env = "COVERAGE_WORK_DIR")]
    work: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "COVERAGE_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse OSM extracts and tables, crop to the region, build the graph.
    Ingest(IngestArgs),
    /// One Dijkstra run per station, cached to disk.
    ComputeFields,
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Match historical incidents to the model and estimate a scale factor.
    CompareIncidents {
        incidents: PathBuf,
        #[arg(long, default_value = "out/calibration")]
        out: PathBuf,
        /// Incidents farther than this from every road node are dropped.
        #[arg(long, default_value_t = MATCH_CUTOFF_M)]
        cutoff_m: f64,
    },
    /// Write map layers, tables or reports for one scenario.
    Export {
        #[command(flatten)]
        scenario: ScenarioSource,
        #[arg(long, value_enum, default_value_t = ExportFormat::Geojson)]
        format: ExportFormat,
        #[arg(long, default_value = "out/export")]
        out: PathBuf,
    },
    /// Brute-force search for the best position of one station.
    Place {
        station: usize,
        #[command(flatten)]
        scenario: ScenarioSource,
        /// Candidate nodes within this distance of the station.
        #[arg(long, default_value_t = 2000.0)]
        radius_m: f64,
        /// Use every n-th candidate node.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, value_enum, default_value_t = Objective::MaxResponse)]
        objective: Objective,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value = "out/placement.csv")]
        out: PathBuf,
    },
    /// Write a synthetic dataset in the ingest input format.
    Synth {
        #[arg(long, value_enum, default_value_t = Preset::Small)]
        preset: Preset,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    highways: PathBuf,
    #[arg(long)]
    coastline: Option<PathBuf>,
    /// Region outline, lon,lat or UTM 32N easting,northing.
    #[arg(long)]
    region: PathBuf,
    #[arg(long)]
    stations: PathBuf,
    #[arg(long)]
    critical: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_ISLAND_AREA_M2)]
    min_island_area_m2: f64,
    /// Treat every road as two-way.
    #[arg(long)]
    ignore_oneway: bool,
}

#[derive(Debug, Subcommand)]
enum ScenarioCommand {
    /// Evaluate one scenario and write all its artifacts.
    Run {
        #[command(flatten)]
        scenario: ScenarioSource,
        #[arg(long, default_value = "out/scenario")]
        out: PathBuf,
    },
    /// Vary one parameter; writes one artifact set per value.
    Sweep {
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        /// Scenario the sweep starts from; baseline when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ScenarioSource {
    /// Scenario file (.toml or .json).
    #[arg(long, conflicts_with = "baseline")]
    config: Option<PathBuf>,
    /// Use the baseline scenario (the default without --config).
    #[arg(long)]
    baseline: bool,
}

impl ScenarioSource {
    fn load(&self) -> Result<ScenarioConfig> {
        match &self.config {
            Some(p) => load_config(p),
            None => Ok(ScenarioConfig::baseline()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Geojson,
    Csv,
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Objective {
    MaxResponse,
    ViolationCount,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    PartTimeDelay,
    FullTimeDelay,
    SpeedFactor,
    CloseStation,
    ToggleMode,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Small,
    Full,
}

/// Marks an error as caused by bad input (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InputError(String);

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<InputError>() || cause.is::<IngestError>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return if p.is_input_error() { 2 } else { 1 };
        }
        if let Some(s) = cause.downcast_ref::<ScenarioError>() {
            return match s {
                ScenarioError::Invalid(_)
                | ScenarioError::AllClosed
                | ScenarioError::UnknownStation { .. }
                | ScenarioError::Snap { .. }
                | ScenarioError::EmptyRange => 2,
                _ => 1,
            };
        }
        if cause.is::<CalibrationError>() {
            return 1;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    let work = cli.work.as_path();
    match cli.command {
        Command::Ingest(a) => ingest(a, work),
        Command::ComputeFields => {
            let f = compute_work_fields(work, jobs)?;
            for (s, t) in f.stations.iter().zip(&f.max_travel_s) {
                log::info!(
                    "{}: node {} ({:.0} m from record), farthest {:.1} min",
                    s.name,
                    s.node.0,
                    s.snap_distance_m,
                    t.unwrap_or(f64::NAN) / 60.0
                );
            }
            Ok(())
        }
        Command::Scenario(ScenarioCommand::Run { scenario, out }) => {
            let engine = load_engine(work)?;
            let r = engine.run(&scenario.load()?)?;
            write_scenario_artifacts(&engine, &r, &out)?;
            log::info!(
                "scenario {}: max response {:.2} min, {} violations, artifacts in {}",
                r.id,
                r.summary.max_response_minutes.unwrap_or(f64::NAN),
                r.compliance.violation_count,
                out.display()
            );
            Ok(())
        }
        Command::Scenario(ScenarioCommand::Sweep {
            family,
            from,
            to,
            step,
            config,
            out,
        }) => {
            let base = config.as_deref().map(load_config).transpose()?.unwrap_or_default();
            sweep(&load_engine(work)?, family, sweep_values(from, to, step)?, &base, &out)
        }
        Command::CompareIncidents {
            incidents,
            out,
            cutoff_m,
        } => compare_incidents(work, &incidents, &out, cutoff_m),
        Command::Export { scenario, format, out } => export(work, &scenario.load()?, format, &out),
        Command::Place {
            station,
            scenario,
            radius_m,
            stride,
            objective,
            top,
            out,
        } => place(work, station, &scenario.load()?, radius_m, stride, objective, top, &out),
        Command::Synth { preset, seed, out } => {
            let p = match preset {
                Preset::Small => SyntheticParams::small(seed),
                Preset::Full => SyntheticParams::full(seed),
            };
            SyntheticDataset::generate(&p)
                .write_to(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            log::info!("synthetic dataset written to {}", out.display());
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => ScenarioConfig::from_json_str(&text),
        _ => ScenarioConfig::from_toml_str(&text),
    };
    cfg.with_context(|| format!("in {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

fn ingest(a: IngestArgs, work: &Path) -> Result<()> {
    let inputs = IngestInputs {
        highways: a.highways,
        coastline: a.coastline,
        region: a.region,
        stations: a.stations,
        critical: a.critical,
        min_island_area_m2: a.min_island_area_m2,
        honor_oneway: !a.ignore_oneway,
    };
    for p in [
        Some(&inputs.highways),
        inputs.coastline.as_ref(),
        Some(&inputs.region),
        Some(&inputs.stations),
        inputs.critical.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        if !p.is_file() {
            return Err(InputError(format!("{}: no such file", p.display())).into());
        }
    }
    let summary = pipeline::ingest(&inputs, work)?;
    write_ingest_report(std::io::stderr().lock(), &summary)?;
    Ok(())
}

fn sweep(engine: &ScenarioEngine, family: Family, values: Vec<f64>, base: &ScenarioConfig, out: &Path) -> Result<()> {
    let family = match family {
        Family::PartTimeDelay => SweepFamily::PartTimeDelay,
        Family::FullTimeDelay => SweepFamily::FullTimeDelay,
        Family::SpeedFactor => SweepFamily::SpeedFactor,
        Family::CloseStation => SweepFamily::CloseStation,
        Family::ToggleMode => SweepFamily::ToggleMode,
    };
    let configs = engine.sweep_configs(family, &values, base)?;
    let mut index = csv::Writer::from_writer(create(&out.join("sweep.csv"))?);
    index.write_record([
        "step",
        "label",
        "scenario_id",
        "max_response_minutes",
        "unreachable",
        "violations",
        "improved",
        "worsened",
        "dir",
    ])?;
    for (i, (label, cfg)) in configs.iter().enumerate() {
        let r = engine.run(cfg)?;
        let dir_name = format!("{:02}-{}", i + 1, sanitize(label));
        write_scenario_artifacts(engine, &r, &out.join(&dir_name))?;
        index.write_record([
            (i + 1).to_string(),
            label.clone(),
            r.id.clone(),
            r.summary
                .max_response_minutes
                .map(|m| m.to_string())
                .unwrap_or_default(),
            r.summary.unreachable_count.to_string(),
            r.compliance.violation_count.to_string(),
            r.diff.counts.improved.to_string(),
            r.diff.counts.worsened.to_string(),
            dir_name,
        ])?;
        log::info!(
            "{label}: max response {:.2} min",
            r.summary.max_response_minutes.unwrap_or(f64::NAN)
        );
    }
    index.flush()?;
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn compare_incidents(work: &Path, incidents: &Path, out: &Path, cutoff_m: f64) -> Result<()> {
    let engine = load_engine(work)?;
    let records = load_incidents_csv(incidents)?;
    let matches = match_incidents(&records, engine.graph(), engine.baseline(), cutoff_m)?;
    log::info!(
        "{} incidents: {} matched, {} beyond {cutoff_m} m, {} at unreachable nodes",
        matches.input_count(),
        matches.matched.len(),
        matches.dropped_far,
        matches.dropped_unreachable
    );
    let report = scale_report(&matches.real_minutes(), &matches.model_minutes())?;
    write_file(&out.join("calibration.txt"), |w| {
        write_calibration_text(w, &matches, &report)
    })?;
    write_file(&out.join("incidents.csv"), |w| {
        write_incidents_csv(w, &matches, report.factor)
    })?;
    write_file(&out.join("histogram.csv"), |w| {
        write_histogram_csv(w, &matches, report.factor)
    })?;
    write_file(&out.join("calibration.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n")
    })?;
    log::info!("scale factor {:.4}; report in {}", report.factor, out.display());
    Ok(())
}

fn export(work: &Path, cfg: &ScenarioConfig, format: ExportFormat, out: &Path) -> Result<()> {
    let engine = load_engine(work)?;
    let r = engine.run(cfg)?;
    let g = engine.graph();
    match format {
        ExportFormat::Geojson => {
            write_file(&out.join("bands.geojson"), |w| {
                write_bands_geojson(w, g, &r.bands, &r.field)
            })?;
            write_file(&out.join("diff.geojson"), |w| {
                write_diff_geojson(w, g, &r.diff, &r.field, engine.baseline())
            })?;
            write_file(&out.join("areas.geojson"), |w| {
                write_areas_geojson(w, g, &r.field, engine.stations())
            })?;
            write_file(&out.join("stations.geojson"), |w| {
                write_stations_geojson(w, engine.stations())
            })?;
            let mask = work.join(LANDMASK_FILE);
            if mask.exists() {
                std::fs::copy(&mask, out.join(LANDMASK_FILE)).with_context(|| format!("copying {}", mask.display()))?;
            }
        }
        ExportFormat::Csv => {
            write_file(&out.join("bands.csv"), |w| write_bands_csv(w, g, &r.bands, &r.field))?;
            write_file(&out.join("compliance.csv"), |w| write_compliance_csv(w, &r.compliance))?;
        }
        ExportFormat::Report => {
            write_file(&out.join("compliance.txt"), |w| write_compliance_text(w, &r.compliance))?;
            write_file(&out.join("summary.json"), |w| {
                serde_json::to_writer_pretty(&mut *w, &r.summary)?;
                w.write_all(b"\n")
            })?;
        }
    }
    log::info!("scenario {} exported to {}", r.id, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn place(
    work: &Path,
    station: usize,
    base: &ScenarioConfig,
    radius_m: f64,
    stride: usize,
    objective: Objective,
    top: usize,
    out: &Path,
) -> Result<()> {
    let engine = load_engine(work)?;
    let Some(s) = engine.stations().get(station) else {
        return Err(ScenarioError::UnknownStation {
            index: station,
            count: engine.stations().len(),
        }
        .into());
    };
    if stride == 0 {
        bail!(InputError("--stride must be at least 1".into()));
    }
    let candidates: Vec<NodeIndex> = engine
        .graph()
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| haversine_distance(n.pos, s.pos) <= radius_m)
        .map(|(i, _)| NodeIndex::from(i))
        .step_by(stride)
        .collect();
    log::info!("trying {} candidate nodes for {}", candidates.len(), s.name);
    let objective = match objective {
        Objective::MaxResponse => PlacementObjective::MaxResponse,
        Objective::ViolationCount => PlacementObjective::ViolationCount,
    };
    let ranked = engine.optimize_placement(station, &candidates, objective, base)?;
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["rank", "node", "lon", "lat", "unreachable", "objective"])?;
    for c in ranked.iter().take(top) {
        w.write_record([
            c.rank.to_string(),
            c.node.0.to_string(),
            c.pos.lon.to_string(),
            c.pos.lat.to_string(),
            c.unreachable_count.to_string(),
            c.objective.to_string(),
        ])?;
    }
    w.flush()?;
    if let Some(best) = ranked.first() {
        log::info!(
            "best: node {} at ({}, {}), objective {}",
            best.node.0,
            best.pos.lon,
            best.pos.lat,
            best.objective
        );
    }
    Ok(())
}
