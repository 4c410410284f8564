//! Baseline and what-if worlds: time bands, difference maps, compliance
//! reports, parameter sweeps and brute-force station placement.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::LonLat;
use crate::graph::{GraphError, NodeIndex, RoadGraph};
use crate::osm::{CriticalLocation, StaffingMode, StationRecord};
use crate::routing::{
    compute_fields, dijkstra_one_to_all, CombinedField, RoutingError, StationTerm, TravelTimeField, Weight,
};

pub const FULL_TIME_DELAY_MIN: f64 = 0.0;
pub const PART_TIME_DELAY_MIN: f64 = 5.0;
/// Maximum distance between a requested station position and its graph node.
pub const DEFAULT_SNAP_LIMIT_M: f64 = 500.0;
/// Critical locations and incidents farther than this from any node are
/// left unmatched.
pub const MATCH_CUTOFF_M: f64 = 100.0;
pub const COMPLIANCE_LIMIT_MIN: f64 = 10.0;

const GREEN_LIMIT_S: f64 = 600.0;
const AMBER_LIMIT_S: f64 = 1200.0;
const RED_LIMIT_S: f64 = 1800.0;
const RELOCATION_CACHE_CAP: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("all stations are closed")]
    AllClosed,
    #[error("station {index} does not exist ({count} stations)")]
    UnknownStation { index: usize, count: usize },
    #[error("no road node within {limit_m} m of ({lon}, {lat})")]
    Snap { lon: f64, lat: f64, limit_m: f64 },
    #[error("maps cover different graphs")]
    GraphMismatch,
    #[error("empty parameter range")]
    EmptyRange,
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub name: String,
    pub pos: LonLat,
    pub node: NodeIndex,
    pub snap_distance_m: f64,
    pub mode: StaffingMode,
}

/// Callout delay overrides in minutes, per staffing mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_time: Option<f64>,
}

/// One what-if world. Omitted fields keep their baseline values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Open flag per station; `None` means all open.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub open: Option<Vec<bool>>,
    /// Staffing mode per station; `None` keeps the station records' modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Vec<StaffingMode>>,
    pub callout_delay_override: DelayOverride,
    /// Multiplies travel times; values above 1 mean slower driving.
    pub speed_factor: f64,
    /// Calibration multiplier on travel times.
    pub time_scale: f64,
    /// Also apply `time_scale` to callout delays.
    pub scale_delays: bool,
    pub relocations: BTreeMap<usize, LonLat>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: None,
            open: None,
            mode: None,
            callout_delay_override: DelayOverride::default(),
            speed_factor: 1.0,
            time_scale: 1.0,
            scale_delays: false,
            relocations: BTreeMap::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ScenarioError> {
        toml::from_str(s).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(s).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario configs always serialize")
    }

    /// Checks everything that does not need the graph.
    pub fn validate(&self, station_count: usize) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if let Some(open) = &self.open {
            if open.len() != station_count {
                return invalid(format!("open has {} entries, expected {station_count}", open.len()));
            }
        }
        if let Some(mode) = &self.mode {
            if mode.len() != station_count {
                return invalid(format!("mode has {} entries, expected {station_count}", mode.len()));
            }
        }
        for (what, v) in [("speed_factor", self.speed_factor), ("time_scale", self.time_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{what} must be positive, got {v}"));
            }
        }
        let o = self.callout_delay_override;
        for (what, v) in [("full_time", o.full_time), ("part_time", o.part_time)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return invalid(format!("{what} delay must be non-negative, got {v}"));
                }
            }
        }
        for (&i, p) in &self.relocations {
            if i >= station_count {
                return Err(ScenarioError::UnknownStation {
                    index: i,
                    count: station_count,
                });
            }
            if LonLat::new(p.lon, p.lat).is_err() {
                return invalid(format!("relocation of station {i} has invalid coordinates"));
            }
        }
        Ok(())
    }

    pub fn delay_minutes(&self, mode: StaffingMode) -> f64 {
        match mode {
            StaffingMode::FullTime => self.callout_delay_override.full_time.unwrap_or(FULL_TIME_DELAY_MIN),
            StaffingMode::PartTime => self.callout_delay_override.part_time.unwrap_or(PART_TIME_DELAY_MIN),
        }
    }
}

/// A config with every per-station value spelled out and relocations
/// snapped to graph nodes. Its JSON form is the canonical identity of a
/// scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScenario {
    pub open: Vec<bool>,
    pub mode: Vec<StaffingMode>,
    pub delays_s: Vec<f64>,
    pub speed_factor: f64,
    pub time_scale: f64,
    pub scale_delays: bool,
    pub relocations: BTreeMap<usize, NodeIndex>,
}

impl ResolvedScenario {
    pub fn travel_scale(&self) -> f64 {
        self.speed_factor * self.time_scale
    }

    pub fn delay_scale(&self) -> f64 {
        if self.scale_delays {
            self.time_scale
        } else {
            1.0
        }
    }

    /// Hex content hash of this scenario on the graph with `graph_checksum`.
    pub fn id(&self, graph_checksum: &[u8; 32]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("resolved scenarios always serialize"));
        h.update(graph_checksum);
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBand {
    Green,
    Amber,
    Red,
    Blue,
    /// Unreachable in the baseline.
    Brown,
    /// Reachable in the baseline but not in this scenario.
    Black,
}

impl TimeBand {
    pub const ALL: [TimeBand; 6] = [
        Self::Green,
        Self::Amber,
        Self::Red,
        Self::Blue,
        Self::Brown,
        Self::Black,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Green => "green",
            Self::Amber => "amber",
            Self::Red => "red",
            Self::Blue => "blue",
            Self::Brown => "brown",
            Self::Black => "black",
        }
    }
}

/// Band of a finite response time. Intervals are half-open, so exactly
/// ten minutes is amber.
pub fn band_for_seconds(t: f64) -> TimeBand {
    if t < GREEN_LIMIT_S {
        TimeBand::Green
    } else if t < AMBER_LIMIT_S {
        TimeBand::Amber
    } else if t < RED_LIMIT_S {
        TimeBand::Red
    } else {
        TimeBand::Blue
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandCounts {
    pub green: usize,
    pub amber: usize,
    pub red: usize,
    pub blue: usize,
    pub brown: usize,
    pub black: usize,
}

impl BandCounts {
    fn add(&mut self, b: TimeBand) {
        match b {
            TimeBand::Green => self.green += 1,
            TimeBand::Amber => self.amber += 1,
            TimeBand::Red => self.red += 1,
            TimeBand::Blue => self.blue += 1,
            TimeBand::Brown => self.brown += 1,
            TimeBand::Black => self.black += 1,
        }
    }

    pub fn get(&self, b: TimeBand) -> usize {
        match b {
            TimeBand::Green => self.green,
            TimeBand::Amber => self.amber,
            TimeBand::Red => self.red,
            TimeBand::Blue => self.blue,
            TimeBand::Brown => self.brown,
            TimeBand::Black => self.black,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBandMap {
    pub scenario_id: Option<String>,
    pub bands: Vec<TimeBand>,
    pub counts: BandCounts,
}

pub fn band_map(field: &CombinedField, baseline_unreachable: &[bool]) -> Result<TimeBandMap, ScenarioError> {
    if baseline_unreachable.len() != field.node_count() {
        return Err(ScenarioError::GraphMismatch);
    }
    let mut counts = BandCounts::default();
    let bands = field
        .best_time()
        .iter()
        .zip(baseline_unreachable)
        .map(|(&t, &brown)| {
            let b = if brown {
                TimeBand::Brown
            } else if !t.is_finite() {
                TimeBand::Black
            } else {
                band_for_seconds(t)
            };
            counts.add(b);
            b
        })
        .collect();
    Ok(TimeBandMap {
        scenario_id: None,
        bands,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffClass {
    Improved,
    Worsened,
    Unchanged,
    NewlyUnreachable,
    NewlyReachable,
}

impl DiffClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Improved => "improved",
            Self::Worsened => "worsened",
            Self::Unchanged => "unchanged",
            Self::NewlyUnreachable => "newly_unreachable",
            Self::NewlyReachable => "newly_reachable",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffCounts {
    pub improved: usize,
    pub worsened: usize,
    pub unchanged: usize,
    pub newly_unreachable: usize,
    pub newly_reachable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMap {
    pub classes: Vec<DiffClass>,
    pub counts: DiffCounts,
}

/// Node-wise comparison against the baseline. Nodes unreachable in both
/// worlds count as unchanged.
pub fn diff_map(scenario: &CombinedField, baseline: &CombinedField) -> Result<DiffMap, ScenarioError> {
    if scenario.node_count() != baseline.node_count() {
        return Err(ScenarioError::GraphMismatch);
    }
    let mut counts = DiffCounts::default();
    let classes = scenario
        .best_time()
        .iter()
        .zip(baseline.best_time())
        .map(|(&s, &b)| {
            let c = match (s.is_finite(), b.is_finite()) {
                (false, false) => DiffClass::Unchanged,
                (false, true) => DiffClass::NewlyUnreachable,
                (true, false) => DiffClass::NewlyReachable,
                (true, true) if s < b => DiffClass::Improved,
                (true, true) if s > b => DiffClass::Worsened,
                _ => DiffClass::Unchanged,
            };
            match c {
                DiffClass::Improved => counts.improved += 1,
                DiffClass::Worsened => counts.worsened += 1,
                DiffClass::Unchanged => counts.unchanged += 1,
                DiffClass::NewlyUnreachable => counts.newly_unreachable += 1,
                DiffClass::NewlyReachable => counts.newly_reachable += 1,
            }
            c
        })
        .collect();
    Ok(DiffMap { classes, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationMatch {
    pub location: CriticalLocation,
    pub node: Option<NodeIndex>,
    pub distance_m: Option<f64>,
}

pub fn match_locations(
    locations: &[CriticalLocation],
    g: &RoadGraph,
    cutoff_m: f64,
) -> Result<Vec<LocationMatch>, GraphError> {
    locations
        .iter()
        .map(|loc| {
            let hit = g.nearest_node(loc.pos, cutoff_m)?;
            Ok(LocationMatch {
                location: loc.clone(),
                node: hit.map(|h| h.0),
                distance_m: hit.map(|h| h.1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceEntry {
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    pub node: Option<NodeIndex>,
    pub match_distance_m: Option<f64>,
    /// `None` when unmatched or unreachable.
    pub response_minutes: Option<f64>,
    pub reachable: bool,
    pub violation: bool,
    pub excess_minutes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub limit_minutes: f64,
    pub entries: Vec<ComplianceEntry>,
    pub location_count: usize,
    pub unmatched_count: usize,
    pub violation_count: usize,
    /// Largest finite excess over the limit, 0 when nothing is late.
    pub max_excess_minutes: f64,
}

impl ComplianceReport {
    pub fn violations(&self) -> impl Iterator<Item = &ComplianceEntry> {
        self.entries.iter().filter(|e| e.violation)
    }

    pub fn entry(&self, name: &str) -> Option<&ComplianceEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn compliance_from_matches(field: &CombinedField, matches: &[LocationMatch]) -> ComplianceReport {
    let entries: Vec<ComplianceEntry> = matches
        .iter()
        .map(|m| {
            let t = m.node.map(|n| field.time(n));
            let reachable = t.is_some_and(f64::is_finite);
            let minutes = t.filter(|t| t.is_finite()).map(|t| t / 60.0);
            let violation = m.node.is_some() && minutes.is_none_or(|v| v > COMPLIANCE_LIMIT_MIN);
            ComplianceEntry {
                name: m.location.name.clone(),
                lon: m.location.pos.lon,
                lat: m.location.pos.lat,
                node: m.node,
                match_distance_m: m.distance_m,
                response_minutes: minutes,
                reachable,
                violation,
                excess_minutes: minutes.filter(|_| violation).map(|v| v - COMPLIANCE_LIMIT_MIN),
            }
        })
        .collect();
    ComplianceReport {
        limit_minutes: COMPLIANCE_LIMIT_MIN,
        location_count: entries.len(),
        unmatched_count: entries.iter().filter(|e| e.node.is_none()).count(),
        violation_count: entries.iter().filter(|e| e.violation).count(),
        max_excess_minutes: entries.iter().filter_map(|e| e.excess_minutes).fold(0.0, f64::max),
        entries,
    }
}

pub fn compliance_report(
    field: &CombinedField,
    locations: &[CriticalLocation],
    g: &RoadGraph,
) -> Result<ComplianceReport, GraphError> {
    Ok(compliance_from_matches(
        field,
        &match_locations(locations, g, MATCH_CUTOFF_M)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    pub node_count: usize,
    pub open_stations: usize,
    pub max_response_minutes: Option<f64>,
    pub max_response_node: Option<NodeIndex>,
    pub unreachable_count: usize,
    pub bands: BandCounts,
    pub diff: DiffCounts,
    pub violation_count: usize,
    pub max_excess_minutes: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub id: String,
    pub resolved: ResolvedScenario,
    pub field: CombinedField,
    pub bands: TimeBandMap,
    pub diff: DiffMap,
    pub compliance: ComplianceReport,
    pub summary: ScenarioSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepFamily {
    /// Part-time callout delay in minutes.
    PartTimeDelay,
    /// Full-time callout delay in minutes.
    FullTimeDelay,
    SpeedFactor,
    /// Parameter is the index of the station to close.
    CloseStation,
    /// Parameter is the index of the station whose mode is switched.
    ToggleMode,
}

/// Inclusive arithmetic range; values are rounded to 1e-9 so that e.g.
/// 1.0..1.5 step 0.1 yields exactly six clean values.
pub fn sweep_values(from: f64, to: f64, step: f64) -> Result<Vec<f64>, ScenarioError> {
    if !(from.is_finite() && to.is_finite() && step.is_finite()) || step <= 0.0 || to < from {
        return Err(ScenarioError::EmptyRange);
    }
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepItem {
    pub label: String,
    pub parameter: f64,
    pub config: ScenarioConfig,
    pub scenario_id: String,
    pub bands: TimeBandMap,
    pub diff: DiffMap,
    pub compliance: ComplianceReport,
    pub max_response_minutes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub family: SweepFamily,
    pub baseline: TimeBandMap,
    pub items: Vec<SweepItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementObjective {
    /// Largest finite response time, in minutes.
    MaxResponse,
    /// Number of critical locations over the limit.
    ViolationCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementCandidate {
    pub rank: usize,
    pub node: NodeIndex,
    pub pos: LonLat,
    pub unreachable_count: usize,
    pub objective: f64,
}

/// Holds the graph, stations and their cached time fields; evaluates
/// scenarios by recombining cached fields and only runs Dijkstra for
/// relocated stations.
#[derive(Debug)]
pub struct ScenarioEngine {
    graph: Arc<RoadGraph>,
    graph_checksum: [u8; 32],
    stations: Vec<Station>,
    fields: Vec<Arc<TravelTimeField>>,
    baseline: CombinedField,
    brown: Vec<bool>,
    critical: Vec<LocationMatch>,
    snap_limit_m: f64,
    relocated: Mutex<HashMap<NodeIndex, Arc<TravelTimeField>>>,
}

/// Snaps station records to their nearest graph nodes.
pub fn snap_stations(g: &RoadGraph, records: &[StationRecord], limit_m: f64) -> Result<Vec<Station>, ScenarioError> {
    records
        .iter()
        .map(|r| {
            let (node, d) = g.nearest_node(r.pos, limit_m)?.ok_or(ScenarioError::Snap {
                lon: r.pos.lon,
                lat: r.pos.lat,
                limit_m,
            })?;
            Ok(Station {
                name: r.name.clone(),
                pos: r.pos,
                node,
                snap_distance_m: d,
                mode: r.mode,
            })
        })
        .collect()
}

impl ScenarioEngine {
    /// Snaps the stations and computes their time fields on `jobs` threads.
    pub fn build(graph: Arc<RoadGraph>, records: &[StationRecord], jobs: usize) -> Result<Self, ScenarioError> {
        let stations = snap_stations(&graph, records, DEFAULT_SNAP_LIMIT_M)?;
        let sources: Vec<NodeIndex> = stations.iter().map(|s| s.node).collect();
        let fields = compute_fields(&graph, &sources, Weight::Time, jobs);
        Self::with_fields(graph, stations, fields)
    }

    /// Uses precomputed time fields, one per station in station order.
    pub fn with_fields(
        graph: Arc<RoadGraph>,
        stations: Vec<Station>,
        fields: Vec<Arc<TravelTimeField>>,
    ) -> Result<Self, ScenarioError> {
        if stations.is_empty() {
            return Err(ScenarioError::Invalid("no stations".into()));
        }
        if fields.len() != stations.len() {
            return Err(ScenarioError::Invalid(format!(
                "{} fields for {} stations",
                fields.len(),
                stations.len()
            )));
        }
        for (s, f) in stations.iter().zip(&fields) {
            if f.source() != s.node || f.weight() != Weight::Time || f.values().len() != graph.node_count() {
                return Err(ScenarioError::Invalid(format!(
                    "field does not belong to station {}",
                    s.name
                )));
            }
        }
        let cfg = ScenarioConfig::baseline();
        let delays: Vec<f64> = stations.iter().map(|s| cfg.delay_minutes(s.mode) * 60.0).collect();
        let terms = fields
            .iter()
            .zip(&delays)
            .map(|(f, &delay_s)| StationTerm {
                field: Arc::clone(f),
                delay_s,
                open: true,
            })
            .collect();
        let baseline = CombinedField::new(terms, 1.0, 1.0)?;
        let brown = baseline.unreachable_mask();
        Ok(Self {
            graph_checksum: graph.checksum(),
            graph,
            stations,
            fields,
            baseline,
            brown,
            critical: Vec::new(),
            snap_limit_m: DEFAULT_SNAP_LIMIT_M,
            relocated: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_critical_locations(mut self, locations: &[CriticalLocation]) -> Result<Self, ScenarioError> {
        self.critical = match_locations(locations, &self.graph, MATCH_CUTOFF_M)?;
        Ok(self)
    }

    pub fn with_snap_limit(mut self, limit_m: f64) -> Self {
        self.snap_limit_m = limit_m;
        self
    }

    pub fn graph(&self) -> &Arc<RoadGraph> {
        &self.graph
    }

    pub fn graph_checksum(&self) -> &[u8; 32] {
        &self.graph_checksum
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn fields(&self) -> &[Arc<TravelTimeField>] {
        &self.fields
    }

    pub fn baseline(&self) -> &CombinedField {
        &self.baseline
    }

    /// Nodes unreachable in the baseline (the brown set).
    pub fn brown_mask(&self) -> &[bool] {
        &self.brown
    }

    pub fn brown_count(&self) -> usize {
        self.brown.iter().filter(|b| **b).count()
    }

    pub fn critical_locations(&self) -> &[LocationMatch] {
        &self.critical
    }

    pub fn snap(&self, p: LonLat) -> Result<NodeIndex, ScenarioError> {
        self.graph
            .nearest_node(p, self.snap_limit_m)?
            .map(|(n, _)| n)
            .ok_or(ScenarioError::Snap {
                lon: p.lon,
                lat: p.lat,
                limit_m: self.snap_limit_m,
            })
    }

    pub fn resolve(&self, cfg: &ScenarioConfig) -> Result<ResolvedScenario, ScenarioError> {
        let n = self.stations.len();
        cfg.validate(n)?;
        let open = cfg.open.clone().unwrap_or_else(|| vec![true; n]);
        if !open.iter().any(|o| *o) {
            return Err(ScenarioError::AllClosed);
        }
        let mode = cfg
            .mode
            .clone()
            .unwrap_or_else(|| self.stations.iter().map(|s| s.mode).collect());
        let delays_s = mode.iter().map(|&m| cfg.delay_minutes(m) * 60.0).collect();
        let mut relocations = BTreeMap::new();
        for (&i, &p) in &cfg.relocations {
            let node = self.snap(p)?;
            if node != self.stations[i].node {
                relocations.insert(i, node);
            }
        }
        Ok(ResolvedScenario {
            open,
            mode,
            delays_s,
            speed_factor: cfg.speed_factor,
            time_scale: cfg.time_scale,
            scale_delays: cfg.scale_delays,
            relocations,
        })
    }

    fn field_from(&self, node: NodeIndex, cache: bool) -> Arc<TravelTimeField> {
        if let Some(f) = self.relocated.lock().unwrap().get(&node) {
            return Arc::clone(f);
        }
        let f = Arc::new(dijkstra_one_to_all(&self.graph, node, Weight::Time));
        if cache {
            let mut map = self.relocated.lock().unwrap();
            if map.len() >= RELOCATION_CACHE_CAP {
                map.clear();
            }
            map.insert(node, Arc::clone(&f));
        }
        f
    }

    fn combine(&self, r: &ResolvedScenario, fresh: bool, cache: bool) -> Result<CombinedField, ScenarioError> {
        let terms = (0..self.stations.len())
            .map(|i| {
                let field = match r.relocations.get(&i) {
                    Some(&node) => self.field_from(node, cache),
                    None if fresh => Arc::new(dijkstra_one_to_all(&self.graph, self.stations[i].node, Weight::Time)),
                    None => Arc::clone(&self.fields[i]),
                };
                StationTerm {
                    field,
                    delay_s: r.delays_s[i],
                    open: r.open[i],
                }
            })
            .collect();
        Ok(CombinedField::new(terms, r.travel_scale(), r.delay_scale())?)
    }

    /// Combined response-time field of a scenario, in seconds.
    pub fn evaluate(&self, cfg: &ScenarioConfig) -> Result<CombinedField, ScenarioError> {
        self.combine(&self.resolve(cfg)?, false, true)
    }

    /// Same as [`evaluate`](Self::evaluate) but reruns Dijkstra for every
    /// station instead of using cached fields.
    pub fn evaluate_uncached(&self, cfg: &ScenarioConfig) -> Result<CombinedField, ScenarioError> {
        self.combine(&self.resolve(cfg)?, true, false)
    }

    pub fn band_map(&self, field: &CombinedField) -> TimeBandMap {
        band_map(field, &self.brown).expect("field comes from this engine")
    }

    pub fn compliance(&self, field: &CombinedField) -> ComplianceReport {
        compliance_from_matches(field, &self.critical)
    }

    /// Evaluates a scenario and derives every artifact the UI and CLI use.
    pub fn run(&self, cfg: &ScenarioConfig) -> Result<ScenarioResult, ScenarioError> {
        let resolved = self.resolve(cfg)?;
        let id = resolved.id(&self.graph_checksum);
        let field = self.combine(&resolved, false, true)?;
        let mut bands = self.band_map(&field);
        bands.scenario_id = Some(id.clone());
        let diff = diff_map(&field, &self.baseline)?;
        let compliance = self.compliance(&field);
        let max = field.max_finite();
        let summary = ScenarioSummary {
            scenario_id: id.clone(),
            node_count: field.node_count(),
            open_stations: resolved.open.iter().filter(|o| **o).count(),
            max_response_minutes: max.map(|m| m.1 / 60.0),
            max_response_node: max.map(|m| m.0),
            unreachable_count: field.unreachable_count(),
            bands: bands.counts,
            diff: diff.counts,
            violation_count: compliance.violation_count,
            max_excess_minutes: compliance.max_excess_minutes,
        };
        Ok(ScenarioResult {
            id,
            resolved,
            field,
            bands,
            diff,
            compliance,
            summary,
        })
    }

    /// One config per parameter value; diffs are against the baseline.
    pub fn sweep_configs(
        &self,
        family: SweepFamily,
        values: &[f64],
        base: &ScenarioConfig,
    ) -> Result<Vec<(String, ScenarioConfig)>, ScenarioError> {
        if values.is_empty() {
            return Err(ScenarioError::EmptyRange);
        }
        let n = self.stations.len();
        values
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                let station = || -> Result<usize, ScenarioError> {
                    if v.fract() != 0.0 || v < 0.0 || v as usize >= n {
                        return Err(ScenarioError::UnknownStation {
                            index: v.max(0.0) as usize,
                            count: n,
                        });
                    }
                    Ok(v as usize)
                };
                let label = match family {
                    SweepFamily::PartTimeDelay => {
                        cfg.callout_delay_override.part_time = Some(v);
                        format!("part-time delay {v} min")
                    }
                    SweepFamily::FullTimeDelay => {
                        cfg.callout_delay_override.full_time = Some(v);
                        format!("full-time delay {v} min")
                    }
                    SweepFamily::SpeedFactor => {
                        cfg.speed_factor = v;
                        format!("speed factor {v}")
                    }
                    SweepFamily::CloseStation => {
                        let i = station()?;
                        cfg.open.get_or_insert_with(|| vec![true; n])[i] = false;
                        format!("close {}", self.stations[i].name)
                    }
                    SweepFamily::ToggleMode => {
                        let i = station()?;
                        let modes = cfg
                            .mode
                            .get_or_insert_with(|| self.stations.iter().map(|s| s.mode).collect());
                        modes[i] = modes[i].toggled();
                        format!("{} to {}", self.stations[i].name, modes[i].as_str())
                    }
                };
                cfg.name = Some(label.clone());
                Ok((label, cfg))
            })
            .collect()
    }

    pub fn sweep(
        &self,
        family: SweepFamily,
        values: &[f64],
        base: &ScenarioConfig,
    ) -> Result<SweepOutput, ScenarioError> {
        let configs = self.sweep_configs(family, values, base)?;
        let items = configs
            .into_par_iter()
            .zip(values.par_iter())
            .map(|((label, config), &parameter)| {
                let r = self.run(&config)?;
                Ok(SweepItem {
                    label,
                    parameter,
                    config,
                    scenario_id: r.id,
                    bands: r.bands,
                    diff: r.diff,
                    compliance: r.compliance,
                    max_response_minutes: r.summary.max_response_minutes,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let mut baseline = self.band_map(&self.baseline);
        baseline.scenario_id = Some(self.resolve(&ScenarioConfig::baseline())?.id(&self.graph_checksum));
        Ok(SweepOutput {
            family,
            baseline,
            items,
        })
    }

    /// Tries `station` at every candidate node and ranks candidates by
    /// (unreachable node count, objective, node index), best first. The
    /// station is treated as open even if `base` closes it.
    pub fn optimize_placement(
        &self,
        station: usize,
        candidates: &[NodeIndex],
        objective: PlacementObjective,
        base: &ScenarioConfig,
    ) -> Result<Vec<PlacementCandidate>, ScenarioError> {
        let n = self.stations.len();
        if station >= n {
            return Err(ScenarioError::UnknownStation {
                index: station,
                count: n,
            });
        }
        if candidates.is_empty() {
            return Err(ScenarioError::Invalid("no placement candidates".into()));
        }
        if let Some(c) = candidates.iter().find(|c| c.index() >= self.graph.node_count()) {
            return Err(ScenarioError::Invalid(format!("candidate node {} out of range", c.0)));
        }
        let mut base = base.clone();
        base.relocations.remove(&station);
        if let Some(open) = base.open.as_mut() {
            if station < open.len() {
                open[station] = true;
            }
        }
        let resolved = self.resolve(&base)?;

        let mut nodes = candidates.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        let mut ranked = nodes
            .par_iter()
            .map(|&node| {
                let mut r = resolved.clone();
                if node != self.stations[station].node {
                    r.relocations.insert(station, node);
                }
                let field = self.combine(&r, false, false)?;
                let value = match objective {
                    PlacementObjective::MaxResponse => field.max_finite().map_or(f64::INFINITY, |m| m.1 / 60.0),
                    PlacementObjective::ViolationCount => self.compliance(&field).violation_count as f64,
                };
                Ok(PlacementCandidate {
                    rank: 0,
                    node,
                    pos: self.graph.node(node).pos,
                    unreachable_count: field.unreachable_count(),
                    objective: value,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        ranked.sort_by(|a, b| {
            a.unreachable_count
                .cmp(&b.unreachable_count)
                .then(a.objective.total_cmp(&b.objective))
                .then(a.node.cmp(&b.node))
        });
        for (i, c) in ranked.iter_mut().enumerate() {
            c.rank = i + 1;
        }
        Ok(ranked)
    }
}
