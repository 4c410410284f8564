//! GeoJSON, CSV and plain-text artifacts. All writers are deterministic:
//! features follow node order and floats use shortest round-trip form.

use std::io::{self, Write};

use serde::Serialize;

use crate::calibration::{histogram, MatchReport, ScaleReport};
use crate::graph::{NodeIndex, RoadGraph};
use crate::osm::LandMask;
use crate::routing::CombinedField;
use crate::scenario::{ComplianceReport, DiffMap, Station, TimeBand, TimeBandMap};

#[derive(Serialize)]
struct Feature<G, P> {
    #[serde(rename = "type")]
    kind: &'static str,
    geometry: G,
    properties: P,
}

#[derive(Serialize)]
struct Point {
    #[serde(rename = "type")]
    kind: &'static str,
    coordinates: [f64; 2],
}

#[derive(Serialize)]
struct Polygon {
    #[serde(rename = "type")]
    kind: &'static str,
    coordinates: Vec<Vec<[f64; 2]>>,
}

fn point(lon: f64, lat: f64) -> Point {
    Point {
        kind: "Point",
        coordinates: [lon, lat],
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn write_collection<W, G, P, I>(w: W, features: I) -> io::Result<()>
where
    W: Write,
    G: Serialize,
    P: Serialize,
    I: IntoIterator<Item = (G, P)>,
{
    write_collection_with(w, None::<(&str, &())>, features)
}

/// Like `write_collection`, with one extra top-level member before the features.
fn write_collection_with<W, M, G, P, I>(mut w: W, member: Option<(&str, &M)>, features: I) -> io::Result<()>
where
    W: Write,
    M: Serialize + ?Sized,
    G: Serialize,
    P: Serialize,
    I: IntoIterator<Item = (G, P)>,
{
    w.write_all(br#"{"type":"FeatureCollection","#)?;
    if let Some((key, value)) = member {
        serde_json::to_writer(&mut w, key)?;
        w.write_all(b":")?;
        serde_json::to_writer(&mut w, value)?;
        w.write_all(b",")?;
    }
    w.write_all(br#""features":["#)?;
    for (i, (geometry, properties)) in features.into_iter().enumerate() {
        if i > 0 {
            w.write_all(b",\n")?;
        } else {
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut w,
            &Feature {
                kind: "Feature",
                geometry,
                properties,
            },
        )?;
    }
    w.write_all(b"\n]}\n")?;
    w.flush()
}

#[derive(Serialize)]
struct BandProps {
    node: u32,
    osm_id: i64,
    band: &'static str,
    seconds: Option<f64>,
    station: Option<usize>,
}

#[derive(Serialize)]
struct LegendEntry {
    band: &'static str,
    min_minutes: Option<f64>,
    max_minutes: Option<f64>,
    count: usize,
}

/// All six classes in display order, with their node counts.
fn legend(bands: &TimeBandMap) -> Vec<LegendEntry> {
    TimeBand::ALL
        .iter()
        .map(|&b| {
            let (min_minutes, max_minutes) = match b {
                TimeBand::Green => (Some(0.0), Some(10.0)),
                TimeBand::Amber => (Some(10.0), Some(20.0)),
                TimeBand::Red => (Some(20.0), Some(30.0)),
                TimeBand::Blue => (Some(30.0), None),
                TimeBand::Brown | TimeBand::Black => (None, None),
            };
            LegendEntry {
                band: b.as_str(),
                min_minutes,
                max_minutes,
                count: bands.counts.get(b),
            }
        })
        .collect()
}

/// One point per node with its band, response seconds and serving station.
/// The collection carries a `legend` member listing every band class.
pub fn write_bands_geojson<W: Write>(
    w: W,
    g: &RoadGraph,
    bands: &TimeBandMap,
    field: &CombinedField,
) -> io::Result<()> {
    write_collection_with(
        w,
        Some(("legend", &legend(bands))),
        g.nodes().iter().enumerate().map(|(i, n)| {
            let idx = NodeIndex::from(i);
            (
                point(n.pos.lon, n.pos.lat),
                BandProps {
                    node: idx.0,
                    osm_id: n.osm_id,
                    band: bands.bands[i].as_str(),
                    seconds: finite(field.time(idx)),
                    station: field.station(idx),
                },
            )
        }),
    )
}

#[derive(Serialize)]
struct DiffProps {
    node: u32,
    osm_id: i64,
    diff: &'static str,
    baseline_seconds: Option<f64>,
    scenario_seconds: Option<f64>,
    delta_seconds: Option<f64>,
}

pub fn write_diff_geojson<W: Write>(
    w: W,
    g: &RoadGraph,
    diff: &DiffMap,
    scenario: &CombinedField,
    baseline: &CombinedField,
) -> io::Result<()> {
    write_collection(
        w,
        g.nodes().iter().enumerate().map(|(i, n)| {
            let idx = NodeIndex::from(i);
            let (s, b) = (scenario.time(idx), baseline.time(idx));
            (
                point(n.pos.lon, n.pos.lat),
                DiffProps {
                    node: idx.0,
                    osm_id: n.osm_id,
                    diff: diff.classes[i].as_str(),
                    baseline_seconds: finite(b),
                    scenario_seconds: finite(s),
                    delta_seconds: finite(s - b),
                },
            )
        }),
    )
}

#[derive(Serialize)]
struct AreaProps<'a> {
    node: u32,
    station: Option<usize>,
    station_name: Option<&'a str>,
}

/// Closest-station area per node.
pub fn write_areas_geojson<W: Write>(
    w: W,
    g: &RoadGraph,
    field: &CombinedField,
    stations: &[Station],
) -> io::Result<()> {
    write_collection(
        w,
        g.nodes().iter().enumerate().map(|(i, n)| {
            let idx = NodeIndex::from(i);
            let s = field.station(idx);
            (
                point(n.pos.lon, n.pos.lat),
                AreaProps {
                    node: idx.0,
                    station: s,
                    station_name: s.and_then(|s| stations.get(s)).map(|s| s.name.as_str()),
                },
            )
        }),
    )
}

#[derive(Serialize)]
struct StationProps<'a> {
    index: usize,
    name: &'a str,
    mode: &'static str,
    node: u32,
    snap_distance_m: f64,
}

pub fn write_stations_geojson<W: Write>(w: W, stations: &[Station]) -> io::Result<()> {
    write_collection(
        w,
        stations.iter().enumerate().map(|(i, s)| {
            (
                point(s.pos.lon, s.pos.lat),
                StationProps {
                    index: i,
                    name: &s.name,
                    mode: s.mode.as_str(),
                    node: s.node.0,
                    snap_distance_m: s.snap_distance_m,
                },
            )
        }),
    )
}

#[derive(Serialize)]
struct RingProps {
    ring: usize,
}

pub fn write_landmask_geojson<W: Write>(w: W, mask: &LandMask) -> io::Result<()> {
    write_collection(
        w,
        mask.rings.iter().enumerate().map(|(i, ring)| {
            let mut coords: Vec<[f64; 2]> = ring.iter().map(|p| [p.lon, p.lat]).collect();
            if coords.first() != coords.last() {
                coords.push(coords[0]);
            }
            (
                Polygon {
                    kind: "Polygon",
                    coordinates: vec![coords],
                },
                RingProps { ring: i },
            )
        }),
    )
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `node_id,lon,lat,seconds,band`; `seconds` is empty for unreachable nodes.
pub fn write_bands_csv<W: Write>(w: W, g: &RoadGraph, bands: &TimeBandMap, field: &CombinedField) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["node_id", "lon", "lat", "seconds", "band"])
        .map_err(csv_err)?;
    for (i, n) in g.nodes().iter().enumerate() {
        out.write_record([
            i.to_string(),
            n.pos.lon.to_string(),
            n.pos.lat.to_string(),
            opt(finite(field.time(NodeIndex::from(i)))),
            bands.bands[i].as_str().to_owned(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()
}

pub fn write_compliance_csv<W: Write>(w: W, report: &ComplianceReport) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "name",
        "lon",
        "lat",
        "node",
        "match_distance_m",
        "response_minutes",
        "violation",
        "excess_minutes",
    ])
    .map_err(csv_err)?;
    for e in &report.entries {
        out.write_record([
            e.name.clone(),
            e.lon.to_string(),
            e.lat.to_string(),
            e.node.map(|n| n.0.to_string()).unwrap_or_default(),
            opt(e.match_distance_m),
            opt(e.response_minutes),
            e.violation.to_string(),
            opt(e.excess_minutes),
        ])
        .map_err(csv_err)?;
    }
    out.flush()
}

pub fn write_compliance_text<W: Write>(mut w: W, report: &ComplianceReport) -> io::Result<()> {
    writeln!(w, "critical locations: {}", report.location_count)?;
    writeln!(w, "unmatched (no road node within 100 m): {}", report.unmatched_count)?;
    writeln!(w, "limit: {} min", report.limit_minutes)?;
    writeln!(w, "violations: {}", report.violation_count)?;
    writeln!(w, "max excess: {:.2} min", report.max_excess_minutes)?;
    for e in report.violations() {
        match e.response_minutes {
            Some(m) => writeln!(w, "  {:<40} {:>6.1} min", e.name, m)?,
            None => writeln!(w, "  {:<40} unreachable", e.name)?,
        }
    }
    for e in report.entries.iter().filter(|e| e.node.is_none()) {
        writeln!(w, "  unmatched: {}", e.name)?;
    }
    w.flush()
}

pub fn write_calibration_text<W: Write>(mut w: W, matches: &MatchReport, r: &ScaleReport) -> io::Result<()> {
    writeln!(w, "incidents: {}", matches.input_count())?;
    writeln!(w, "matched: {}", matches.matched.len())?;
    writeln!(w, "dropped (no road node within cutoff): {}", matches.dropped_far)?;
    writeln!(w, "dropped (unreachable node): {}", matches.dropped_unreachable)?;
    writeln!(w, "mean real: {:.3} min", r.mean_real_minutes)?;
    writeln!(w, "mean model: {:.3} min", r.mean_model_minutes)?;
    writeln!(w, "scale factor (mean ratio): {:.4}", r.factor)?;
    writeln!(w, "scale factor (Gamma means): {:.4}", r.factor_gamma_means)?;
    writeln!(w, "scale factor (KS minimum): {:.4}", r.factor_ks)?;
    writeln!(w, "KS distance unscaled: {:.4}", r.ks_unscaled)?;
    writeln!(w, "KS distance at mean ratio: {:.4}", r.ks_at_factor)?;
    writeln!(w, "KS distance at KS minimum: {:.4}", r.ks_at_ks_factor)?;
    if r.gamma_excluded_real + r.gamma_excluded_model > 0 {
        writeln!(
            w,
            "zero times left out of gamma fits: {} real, {} model",
            r.gamma_excluded_real, r.gamma_excluded_model
        )?;
    }
    for (label, fit) in [
        ("real", r.real_fit),
        ("model", r.model_fit),
        ("scaled model", r.scaled_model_fit),
    ] {
        writeln!(
            w,
            "gamma fit {label}: shape {:.4}, scale {:.4}, mean {:.3} min (n = {})",
            fit.shape,
            fit.scale,
            fit.mean(),
            fit.n
        )?;
    }
    w.flush()
}

/// `lon,lat,node,distance_m,real_minutes,model_minutes,scaled_model_minutes`.
pub fn write_incidents_csv<W: Write>(w: W, matches: &MatchReport, factor: f64) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "lon",
        "lat",
        "node",
        "distance_m",
        "real_minutes",
        "model_minutes",
        "scaled_model_minutes",
    ])
    .map_err(csv_err)?;
    for m in &matches.matched {
        out.write_record([
            m.incident.pos.lon.to_string(),
            m.incident.pos.lat.to_string(),
            m.node.0.to_string(),
            m.distance_m.to_string(),
            m.incident.response_minutes.to_string(),
            m.model_minutes.to_string(),
            (m.model_minutes * factor).to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()
}

/// Side-by-side 2-minute histograms of real, model and scaled model times;
/// the last row holds counts at or above 60 minutes.
pub fn write_histogram_csv<W: Write>(w: W, matches: &MatchReport, factor: f64) -> io::Result<()> {
    let real = histogram(&matches.real_minutes());
    let model_minutes = matches.model_minutes();
    let model = histogram(&model_minutes);
    let scaled = histogram(&model_minutes.iter().map(|m| m * factor).collect::<Vec<_>>());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_start_min", "bin_end_min", "real", "model", "scaled_model"])
        .map_err(csv_err)?;
    for (i, (lo, hi)) in real.bin_edges().enumerate() {
        out.write_record([
            lo.to_string(),
            hi.to_string(),
            real.counts[i].to_string(),
            model.counts[i].to_string(),
            scaled.counts[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.write_record([
        "60".to_owned(),
        String::new(),
        real.overflow.to_string(),
        model.overflow.to_string(),
        scaled.overflow.to_string(),
    ])
    .map_err(csv_err)?;
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LonLat;
    use crate::graph::Edge;
    use crate::routing::{combine_fields, dijkstra_one_to_all, Weight};
    use crate::scenario::{band_map, diff_map};
    use std::sync::Arc;

    fn setup() -> (RoadGraph, CombinedField) {
        let nodes = (0..3)
            .map(|i| (i, LonLat::new(6.0 + i as f64 * 0.01, 62.0).unwrap()))
            .collect();
        let g = RoadGraph::new(nodes, vec![Edge::new(NodeIndex(0), NodeIndex(1), 700.0, 3.6)]).unwrap();
        let f = Arc::new(dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time));
        let c = combine_fields(&[f], &[0.0], &[true]).unwrap();
        (g, c)
    }

    #[test]
    fn bands_geojson_is_valid() {
        let (g, c) = setup();
        let bands = band_map(&c, &[false, false, true]).unwrap();
        let mut buf = Vec::new();
        write_bands_geojson(&mut buf, &g, &bands, &c).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let features = v["features"].as_array().unwrap();
        assert_eq!(features.len(), 3);
        assert_eq!(features[1]["properties"]["band"], "amber");
        assert_eq!(features[1]["properties"]["seconds"], 700.0);
        assert!(features[2]["properties"]["seconds"].is_null());
        assert_eq!(features[2]["properties"]["band"], "brown");
        assert_eq!(features[0]["geometry"]["coordinates"][0], 6.0);
        let legend: Vec<_> = v["legend"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["band"].as_str().unwrap())
            .collect();
        assert_eq!(legend, ["green", "amber", "red", "blue", "brown", "black"]);
        assert_eq!(v["legend"][1]["count"], 1);
        assert_eq!(v["legend"][4]["count"], 1);
    }

    #[test]
    fn empty_collection_is_valid() {
        let mut buf = Vec::new();
        write_landmask_geojson(&mut buf, &LandMask::default()).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert!(v["features"].as_array().unwrap().is_empty());
    }

    #[test]
    fn bands_csv_columns() {
        let (g, c) = setup();
        let bands = band_map(&c, &[false, false, true]).unwrap();
        let mut buf = Vec::new();
        write_bands_csv(&mut buf, &g, &bands, &c).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node_id,lon,lat,seconds,band");
        assert_eq!(lines[2], "1,6.01,62,700,amber");
        assert_eq!(lines[3], "2,6.02,62,,brown");
    }

    #[test]
    fn diff_geojson_reports_deltas() {
        let (g, c) = setup();
        let slow = c.rescaled(2.0, 1.0).unwrap();
        let d = diff_map(&slow, &c).unwrap();
        let mut buf = Vec::new();
        write_diff_geojson(&mut buf, &g, &d, &slow, &c).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["features"][1]["properties"]["diff"], "worsened");
        assert_eq!(v["features"][1]["properties"]["delta_seconds"], 700.0);
        assert_eq!(v["features"][0]["properties"]["diff"], "unchanged");
    }
}
