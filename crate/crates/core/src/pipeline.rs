//! File-level pipeline shared by the CLI and the service: ingest raw inputs
//! into a work directory, compute station fields, and load a ready engine.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{self, CacheError};
use crate::export::{
    write_areas_geojson, write_bands_csv, write_bands_geojson, write_compliance_csv, write_compliance_text,
    write_diff_geojson, write_landmask_geojson,
};
use crate::graph::{build_graph, BuildOptions, RoadGraph};
use crate::osm::{
    build_land_mask, crop_highways, load_critical_csv, load_region_csv, load_stations_csv, parse_overpass_coastline,
    parse_overpass_highways, CriticalLocation, IngestError, StationRecord, DEFAULT_MIN_ISLAND_AREA_M2,
};
use crate::routing::{compute_fields, Weight};
use crate::scenario::{snap_stations, ScenarioEngine, ScenarioError, ScenarioResult, Station, DEFAULT_SNAP_LIMIT_M};

pub const GRAPH_FILE: &str = "graph.bin";
pub const FIELDS_FILE: &str = "fields.bin";
pub const STATIONS_FILE: &str = "stations.json";
pub const SNAPPED_STATIONS_FILE: &str = "stations_snapped.json";
pub const CRITICAL_FILE: &str = "critical.json";
pub const LANDMASK_FILE: &str = "landmask.geojson";
pub const INGEST_REPORT_FILE: &str = "ingest_report.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Ingest {
        path: String,
        #[source]
        source: IngestError,
    },
    #[error(transparent)]
    Input(#[from] IngestError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error("{0}")]
    Missing(String),
}

impl PipelineError {
    /// True for problems with the inputs (missing or malformed files) as
    /// opposed to failures during computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            Self::Ingest { .. } | Self::Input(_) | Self::Json { .. } | Self::Missing(_) => true,
            Self::Cache(_) => true,
            Self::Io { .. } => true,
            Self::Scenario(e) => matches!(
                e,
                ScenarioError::Invalid(_)
                    | ScenarioError::Snap { .. }
                    | ScenarioError::UnknownStation { .. }
                    | ScenarioError::EmptyRange
            ),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    serde_json::from_reader(open(path)?).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::Missing(format!("{} not found; {hint}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct IngestInputs {
    pub highways: PathBuf,
    pub coastline: Option<PathBuf>,
    pub region: PathBuf,
    pub stations: PathBuf,
    pub critical: Option<PathBuf>,
    pub min_island_area_m2: f64,
    pub honor_oneway: bool,
}

impl IngestInputs {
    /// The conventional file names inside one directory.
    pub fn from_dir(dir: &Path) -> Self {
        let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        Self {
            highways: dir.join("highways.json"),
            coastline: opt("coastline.json"),
            region: dir.join("region.csv"),
            stations: dir.join("stations.csv"),
            critical: opt("critical.csv"),
            min_island_area_m2: DEFAULT_MIN_ISLAND_AREA_M2,
            honor_oneway: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub parsed_nodes: usize,
    pub parsed_ways: usize,
    pub cropped_nodes: usize,
    pub cropped_ways: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub antiparallel_edges: usize,
    pub tunnel_edges: usize,
    pub bridge_edges: usize,
    pub land_rings: usize,
    pub stations: usize,
    pub critical_locations: usize,
    pub graph_checksum: String,
    pub warnings: Vec<String>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_error(path: &Path) -> impl FnOnce(IngestError) -> PipelineError + '_ {
    move |source| PipelineError::Ingest {
        path: path.display().to_string(),
        source,
    }
}

/// Parses, crops and builds everything, writing the work directory.
pub fn ingest(inputs: &IngestInputs, out: &Path) -> Result<IngestSummary, PipelineError> {
    let region = load_region_csv(&inputs.region)?;
    let stations = load_stations_csv(&inputs.stations)?;
    let critical = match &inputs.critical {
        Some(p) => load_critical_csv(p)?,
        None => Vec::new(),
    };

    let t = Instant::now();
    let extract = parse_overpass_highways(open(&inputs.highways)?).map_err(parse_error(&inputs.highways))?;
    log::info!(
        "parsed {} nodes, {} ways in {:.2?}",
        extract.nodes.len(),
        extract.ways.len(),
        t.elapsed()
    );
    let mut warnings: Vec<String> = extract.warnings.iter().map(ToString::to_string).collect();
    let (nodes, ways) = crop_highways(&extract.nodes, &extract.ways, &region);
    let build = build_graph(
        &nodes,
        &ways,
        BuildOptions {
            honor_oneway: inputs.honor_oneway,
        },
    );
    warnings.extend(build.warnings.iter().map(ToString::to_string));
    let g = build.graph;

    let mask = match &inputs.coastline {
        Some(p) => {
            let coast = parse_overpass_coastline(open(p)?).map_err(parse_error(p))?;
            warnings.extend(coast.warnings.iter().map(ToString::to_string));
            let m = build_land_mask(&coast.nodes, &coast.edges, &region, inputs.min_island_area_m2);
            warnings.extend(m.warnings.iter().map(ToString::to_string));
            m
        }
        None => Default::default(),
    };

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    cache::save_graph(&out.join(GRAPH_FILE), &g)?;
    write_json(&out.join(STATIONS_FILE), &stations)?;
    write_json(&out.join(CRITICAL_FILE), &critical)?;
    let lm = out.join(LANDMASK_FILE);
    write_landmask_geojson(create(&lm)?, &mask).map_err(io_err(&lm))?;

    let summary = IngestSummary {
        parsed_nodes: extract.nodes.len(),
        parsed_ways: extract.ways.len(),
        cropped_nodes: nodes.len(),
        cropped_ways: ways.len(),
        node_count: g.node_count(),
        edge_count: g.edge_count(),
        antiparallel_edges: g.antiparallel_edge_count(),
        tunnel_edges: g.edges().iter().filter(|e| e.is_tunnel).count(),
        bridge_edges: g.edges().iter().filter(|e| e.is_bridge).count(),
        land_rings: mask.rings.len(),
        stations: stations.len(),
        critical_locations: critical.len(),
        graph_checksum: hex(&g.checksum()),
        warnings,
    };
    let rp = out.join(INGEST_REPORT_FILE);
    let mut w = create(&rp)?;
    write_ingest_report(&mut w, &summary).map_err(io_err(&rp))?;
    Ok(summary)
}

pub fn write_ingest_report<W: Write>(mut w: W, s: &IngestSummary) -> std::io::Result<()> {
    writeln!(w, "parsed: {} nodes, {} ways", s.parsed_nodes, s.parsed_ways)?;
    writeln!(w, "inside region: {} nodes, {} ways", s.cropped_nodes, s.cropped_ways)?;
    writeln!(w, "graph: {} nodes, {} edges", s.node_count, s.edge_count)?;
    writeln!(w, "antiparallel edges: {}", s.antiparallel_edges)?;
    writeln!(w, "tunnel edges: {}, bridge edges: {}", s.tunnel_edges, s.bridge_edges)?;
    writeln!(w, "land mask rings: {}", s.land_rings)?;
    writeln!(w, "stations: {}", s.stations)?;
    writeln!(w, "critical locations: {}", s.critical_locations)?;
    writeln!(w, "graph checksum: {}", s.graph_checksum)?;
    writeln!(w, "warnings: {}", s.warnings.len())?;
    for msg in &s.warnings {
        writeln!(w, "  {msg}")?;
    }
    w.flush()
}

pub fn load_work_graph(work: &Path) -> Result<RoadGraph, PipelineError> {
    let p = require(work.join(GRAPH_FILE), "run `ingest` first")?;
    Ok(cache::load_graph(&p)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldsSummary {
    pub stations: Vec<Station>,
    /// Largest finite travel time per station, seconds.
    pub max_travel_s: Vec<Option<f64>>,
}

/// Snaps stations and runs one Dijkstra per station on `jobs` threads.
pub fn compute_work_fields(work: &Path, jobs: usize) -> Result<FieldsSummary, PipelineError> {
    let g = load_work_graph(work)?;
    let records: Vec<StationRecord> = read_json(&require(work.join(STATIONS_FILE), "run `ingest` first")?)?;
    let stations = snap_stations(&g, &records, DEFAULT_SNAP_LIMIT_M)?;
    let sources: Vec<_> = stations.iter().map(|s| s.node).collect();
    let t = Instant::now();
    let fields = compute_fields(&g, &sources, Weight::Time, jobs);
    log::info!("computed {} fields in {:.2?}", fields.len(), t.elapsed());
    cache::save_fields(&work.join(FIELDS_FILE), &g.checksum(), &fields)?;
    write_json(&work.join(SNAPPED_STATIONS_FILE), &stations)?;
    Ok(FieldsSummary {
        max_travel_s: fields.iter().map(|f| f.max_finite().map(|m| m.1)).collect(),
        stations,
    })
}

/// Loads graph, stations, cached fields and critical locations.
pub fn load_engine(work: &Path) -> Result<ScenarioEngine, PipelineError> {
    let g = Arc::new(load_work_graph(work)?);
    let fields = cache::load_fields(
        &require(work.join(FIELDS_FILE), "run `compute-fields` first")?,
        &g.checksum(),
    )?;
    let stations: Vec<Station> = read_json(&require(
        work.join(SNAPPED_STATIONS_FILE),
        "run `compute-fields` first",
    )?)?;
    let critical: Vec<CriticalLocation> = match work.join(CRITICAL_FILE) {
        p if p.exists() => read_json(&p)?,
        _ => Vec::new(),
    };
    Ok(ScenarioEngine::with_fields(g, stations, fields)?.with_critical_locations(&critical)?)
}

/// Per-scenario artifact file names.
pub mod artifact {
    pub const SUMMARY: &str = "summary.json";
    pub const SCENARIO: &str = "scenario.json";
    pub const BANDS: &str = "bands.geojson";
    pub const DIFF: &str = "diff.geojson";
    pub const AREAS: &str = "areas.geojson";
    pub const COMPLIANCE: &str = "compliance.json";
    pub const BANDS_CSV: &str = "bands.csv";
    pub const COMPLIANCE_CSV: &str = "compliance.csv";
    pub const COMPLIANCE_TXT: &str = "compliance.txt";
}

/// Writes every artifact of one evaluated scenario into `dir`.
pub fn write_scenario_artifacts(engine: &ScenarioEngine, r: &ScenarioResult, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let g = engine.graph();
    write_json(&dir.join(artifact::SUMMARY), &r.summary)?;
    write_json(&dir.join(artifact::SCENARIO), &r.resolved)?;
    write_json(&dir.join(artifact::COMPLIANCE), &r.compliance)?;
    type WriteFn<'a> = &'a dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>;
    let each: [(&str, WriteFn); 6] = [
        (artifact::BANDS, &|w| write_bands_geojson(w, g, &r.bands, &r.field)),
        (artifact::DIFF, &|w| {
            write_diff_geojson(w, g, &r.diff, &r.field, engine.baseline())
        }),
        (artifact::AREAS, &|w| {
            write_areas_geojson(w, g, &r.field, engine.stations())
        }),
        (artifact::BANDS_CSV, &|w| write_bands_csv(w, g, &r.bands, &r.field)),
        (artifact::COMPLIANCE_CSV, &|w| write_compliance_csv(w, &r.compliance)),
        (artifact::COMPLIANCE_TXT, &|w| write_compliance_text(w, &r.compliance)),
    ];
    for (name, write) in each {
        let p = dir.join(name);
        let mut w = create(&p)?;
        write(&mut w).and_then(|_| w.flush()).map_err(io_err(&p))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;
    use crate::synthetic::{SyntheticDataset, SyntheticParams};

    #[test]
    fn end_to_end_on_small_synthetic() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let work = dir.path().join("work");
        let synth = SyntheticDataset::generate(&SyntheticParams::small(11));
        synth.write_to(&data).unwrap();

        let s = ingest(&IngestInputs::from_dir(&data), &work).unwrap();
        assert!(s.node_count > 1000);
        assert!(s.cropped_nodes < s.parsed_nodes);
        assert!(s.bridge_edges > 0 && s.tunnel_edges > 0);
        assert_eq!(s.stations, 17);
        assert_eq!(s.land_rings, 4, "{s:?}");

        let f = compute_work_fields(&work, 2).unwrap();
        assert_eq!(f.stations.len(), 17);
        let engine = load_engine(&work).unwrap();
        assert_eq!(engine.critical_locations().len(), 58);
        let r = engine.run(&ScenarioConfig::baseline()).unwrap();
        assert!(r.summary.max_response_minutes.is_some());
        assert_eq!(engine.brown_count(), synth.unserved_island_nodes);

        // closing the only station on the unlinked island blackens exactly that island
        let mut cfg = ScenarioConfig::baseline();
        cfg.open = Some((0..17).map(|i| i != synth.isolated_station).collect());
        let closed = engine.run(&cfg).unwrap();
        assert_eq!(
            closed.bands.counts.get(crate::scenario::TimeBand::Black),
            synth.isolated_island_nodes
        );
        assert_eq!(closed.diff.counts.newly_unreachable, synth.isolated_island_nodes);

        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_scenario_artifacts(&engine, &r, &a).unwrap();
        write_scenario_artifacts(&engine, &engine.run(&ScenarioConfig::baseline()).unwrap(), &b).unwrap();
        for name in [
            artifact::SUMMARY,
            artifact::BANDS,
            artifact::DIFF,
            artifact::AREAS,
            artifact::COMPLIANCE_CSV,
        ] {
            assert_eq!(
                std::fs::read(a.join(name)).unwrap(),
                std::fs::read(b.join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn missing_inputs_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let e = ingest(&IngestInputs::from_dir(dir.path()), &dir.path().join("w")).unwrap_err();
        assert!(e.is_input_error());
        assert!(e.to_string().contains("region.csv"), "{e}");
        let e = load_engine(dir.path()).unwrap_err();
        assert!(e.is_input_error());
        assert!(e.to_string().contains("ingest"));
    }
}
