//! Deterministic synthetic coastal region: a jittered mainland road grid,
//! a bridged island with its own station, an unlinked island with its own
//! station, an unlinked island without one, coastline, stations, critical
//! locations and incidents. Used for tests, benchmarks and demos when the
//! real exports are not at hand.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geo::{LonLat, EARTH_RADIUS_M};
use crate::osm::{
    write_overpass_json, CriticalLocation, IncidentRecord, OsmId, OsmNode, OsmWay, StaffingMode, StationRecord,
};

const ORIGIN: LonLat = LonLat { lon: 6.0, lat: 62.35 };
const SEA_GAP_M: f64 = 2000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub seed: u64,
    pub cols: usize,
    pub rows: usize,
    pub spacing_m: f64,
    /// Side length in nodes of the bridged island; the other two islands
    /// are scaled from it.
    pub island_size: usize,
    /// Fraction of residential grid links left out.
    pub missing_link_fraction: f64,
    pub incident_count: usize,
    /// Incidents placed in open water, far from any road.
    pub far_incident_count: usize,
    pub critical_count: usize,
    /// Critical locations placed in open water.
    pub unmatched_critical_count: usize,
}

impl SyntheticParams {
    /// A few thousand nodes; fast enough for unit and integration tests.
    pub fn small(seed: u64) -> Self {
        Self {
            seed,
            cols: 40,
            rows: 30,
            spacing_m: 150.0,
            island_size: 8,
            missing_link_fraction: 0.15,
            incident_count: 732,
            far_incident_count: 10,
            critical_count: 58,
            unmatched_critical_count: 2,
        }
    }

    /// Roughly the size of a municipal road network (~125k nodes).
    pub fn full(seed: u64) -> Self {
        Self {
            cols: 400,
            rows: 300,
            spacing_m: 100.0,
            island_size: 50,
            ..Self::small(seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub highway_nodes: Vec<OsmNode>,
    pub highway_ways: Vec<OsmWay>,
    pub coastline_nodes: Vec<OsmNode>,
    pub coastline_ways: Vec<OsmWay>,
    pub region: Vec<LonLat>,
    pub stations: Vec<StationRecord>,
    pub critical: Vec<CriticalLocation>,
    pub incidents: Vec<IncidentRecord>,
    /// Station on the island without any road link.
    pub isolated_station: usize,
    /// Station on the island reached by the bridge.
    pub bridged_station: usize,
    /// Node count of the island without a road link.
    pub isolated_island_nodes: usize,
    /// Node count of the island with neither link nor station.
    pub unserved_island_nodes: usize,
}

fn to_lonlat(x: f64, y: f64) -> LonLat {
    let m_per_deg = EARTH_RADIUS_M * 1f64.to_radians();
    let lat = ORIGIN.lat + y / m_per_deg;
    let lon = ORIGIN.lon + x / (m_per_deg * lat.to_radians().cos());
    // round to OSM's 7-decimal precision so files round-trip exactly
    let r = |v: f64| (v * 1e7).round() / 1e7;
    LonLat {
        lon: r(lon),
        lat: r(lat),
    }
}

struct Builder {
    rng: ChaCha8Rng,
    next_node: OsmId,
    next_way: OsmId,
    nodes: Vec<OsmNode>,
    ways: Vec<OsmWay>,
}

impl Builder {
    fn node(&mut self, x: f64, y: f64) -> OsmId {
        let id = self.next_node;
        self.next_node += 1;
        self.nodes.push(OsmNode {
            id,
            pos: to_lonlat(x, y),
        });
        id
    }

    fn way(&mut self, node_ids: Vec<OsmId>, tags: &[(&str, &str)]) {
        if node_ids.len() < 2 {
            return;
        }
        self.ways.push(OsmWay {
            id: self.next_way,
            node_ids,
            tags: tags
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect::<BTreeMap<_, _>>(),
        });
        self.next_way += 1;
    }

    /// Jittered grid of nodes; returns ids indexed `[row][col]`.
    fn grid(&mut self, x0: f64, y0: f64, cols: usize, rows: usize, s: f64) -> Vec<Vec<OsmId>> {
        (0..rows)
            .map(|j| {
                (0..cols)
                    .map(|i| {
                        let jx = self.rng.random_range(-0.2..0.2) * s;
                        let jy = self.rng.random_range(-0.2..0.2) * s;
                        self.node(x0 + i as f64 * s + jx, y0 + j as f64 * s + jy)
                    })
                    .collect()
            })
            .collect()
    }

    /// Emits a line of nodes as ways, cutting it wherever a link is dropped.
    fn line(&mut self, ids: &[OsmId], tags: &[(&str, &str)], drop: f64) {
        let mut run = vec![ids[0]];
        for w in ids.windows(2) {
            if drop > 0.0 && self.rng.random_bool(drop) {
                let done = std::mem::replace(&mut run, vec![w[1]]);
                self.way(done, tags);
            } else {
                run.push(w[1]);
            }
        }
        self.way(run, tags);
    }

    fn grid_roads(&mut self, g: &[Vec<OsmId>], drop: f64, mainland: bool) {
        let (rows, cols) = (g.len(), g[0].len());
        for (j, row) in g.iter().enumerate() {
            let tags: Vec<(&str, &str)> = if mainland && j % 50 == 25 {
                vec![("highway", "trunk"), ("oneway", "yes"), ("maxspeed", "80")]
            } else if mainland && j % 10 == 0 {
                vec![("highway", "secondary")]
            } else if mainland && j % 7 == 3 {
                vec![("highway", "track")]
            } else {
                vec![("highway", "residential")]
            };
            let d = if tags[0].1 == "residential" || tags[0].1 == "track" {
                drop
            } else {
                0.0
            };
            self.line(row, &tags, d);
        }
        for i in 0..cols {
            let col: Vec<OsmId> = g.iter().take(rows).map(|r| r[i]).collect();
            let tags: Vec<(&str, &str)> = if mainland && i % 10 == 0 {
                if i % 20 == 0 {
                    vec![("highway", "primary"), ("maxspeed", "60")]
                } else {
                    vec![("highway", "primary")]
                }
            } else if mainland && i % 13 == 6 {
                vec![("highway", "unclassified"), ("maxspeed", "50 km/h")]
            } else {
                vec![("highway", "residential")]
            };
            let d = if tags[0].1 == "residential" { drop } else { 0.0 };
            self.line(&col, &tags, d);
        }
    }
}

fn ring(b: &mut Builder, corners: &[(f64, f64)]) -> Vec<OsmId> {
    let mut ids: Vec<OsmId> = corners.iter().map(|&(x, y)| b.node(x, y)).collect();
    ids.push(ids[0]);
    ids
}

impl SyntheticDataset {
    pub fn generate(p: &SyntheticParams) -> Self {
        let s = p.spacing_m;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(p.seed),
            next_node: 1_000_000,
            next_way: 5_000_000,
            nodes: Vec::new(),
            ways: Vec::new(),
        };
        let width = (p.cols - 1) as f64 * s;
        let height = (p.rows - 1) as f64 * s;
        let island_y = height + SEA_GAP_M;

        let main = b.grid(0.0, 0.0, p.cols, p.rows, s);
        b.grid_roads(&main, p.missing_link_fraction, true);

        // a tunnel segment and a couple of ways the parser must discard
        let mid = p.rows / 2;
        b.way(
            vec![main[mid][3], main[mid + 1][4]],
            &[("highway", "secondary"), ("tunnel", "yes")],
        );
        b.way(vec![main[1][5], main[2][6]], &[("highway", "footway")]);
        b.way(
            vec![main[3][5], main[4][6]],
            &[("highway", "service"), ("service", "parking_aisle")],
        );
        b.way(vec![main[5][5], main[6][6]], &[("highway", "service")]);

        let nb = p.island_size;
        let nc = (p.island_size * 3 / 5).max(3);
        let na = (p.island_size * 2 / 5).max(3);
        let bx = (width * 0.3 / s).round() * s;
        let cx = width * 0.6;
        let ax = width * 0.85;
        let isl_b = b.grid(bx, island_y, nb, nb, s);
        let isl_c = b.grid(cx, island_y, nc, nc, s);
        let isl_a = b.grid(ax, island_y, na, na, s);
        for g in [&isl_b, &isl_c, &isl_a] {
            b.grid_roads(g, 0.0, false);
        }

        // bridge from the mainland's top row to the bridged island's bottom row
        let col = (bx / s) as usize;
        let mut bridge = vec![main[p.rows - 1][col]];
        let hops = (SEA_GAP_M / 200.0) as usize;
        for k in 1..hops {
            bridge.push(b.node(bx, height + k as f64 * SEA_GAP_M / hops as f64));
        }
        bridge.push(isl_b[0][0]);
        b.way(bridge, &[("highway", "primary"), ("bridge", "yes"), ("maxspeed", "70")]);

        // stations: 15 on the mainland, one per linked/unlinked island
        let mut stations = Vec::new();
        for l in 0..3 {
            for k in 0..5 {
                let i = ((k as f64 + 0.5) * p.cols as f64 / 5.0) as usize;
                let j = ((l as f64 + 0.5) * p.rows as f64 / 3.0) as usize;
                stations.push((main[j][i], StaffingMode::PartTime));
            }
        }
        // the first full-time station sits in the middle
        stations.swap(0, 7);
        for st in stations.iter_mut().take(3) {
            st.1 = StaffingMode::FullTime;
        }
        let bridged_station = stations.len();
        stations.push((isl_b[nb / 2][nb / 2], StaffingMode::PartTime));
        let isolated_station = stations.len();
        stations.push((isl_c[nc / 2][nc / 2], StaffingMode::PartTime));

        let highway_nodes = std::mem::take(&mut b.nodes);
        let highway_ways = std::mem::take(&mut b.ways);
        let pos_of = |id: OsmId| highway_nodes[(id - 1_000_000) as usize].pos;
        let offset = |p: LonLat, dx: f64, dy: f64| {
            let m = EARTH_RADIUS_M * 1f64.to_radians();
            LonLat {
                lon: p.lon + dx / (m * p.lat.to_radians().cos()),
                lat: p.lat + dy / m,
            }
        };
        let stations: Vec<StationRecord> = stations
            .iter()
            .enumerate()
            .map(|(i, &(id, mode))| StationRecord {
                name: format!("Station {:02}", i + 1),
                pos: offset(pos_of(id), 8.0, -5.0),
                mode,
            })
            .collect();

        // anchors must end up in the graph: skip nodes whose links were all
        // dropped and ways the parser discards
        let linked: HashSet<OsmId> = highway_ways
            .iter()
            .filter(|w| w.tag("highway") != Some("footway") && w.tag("service") != Some("parking_aisle"))
            .flat_map(|w| w.node_ids.iter().copied())
            .collect();
        let all_grid: Vec<OsmId> = main
            .iter()
            .chain(&isl_b)
            .chain(&isl_c)
            .flatten()
            .copied()
            .filter(|id| linked.contains(id))
            .collect();
        let mut critical = Vec::new();
        for i in 0..p.critical_count {
            let pos = if i < p.unmatched_critical_count {
                to_lonlat(width * (0.1 + 0.05 * i as f64), height + SEA_GAP_M / 2.0)
            } else {
                let id = all_grid[b.rng.random_range(0..all_grid.len())];
                offset(
                    pos_of(id),
                    b.rng.random_range(-15.0..15.0),
                    b.rng.random_range(-15.0..15.0),
                )
            };
            critical.push(CriticalLocation {
                name: format!("Critical {:02}", i + 1),
                pos,
            });
        }

        let mainland: Vec<OsmId> = main
            .iter()
            .flat_map(|r| r[3..].iter().copied())
            .filter(|id| linked.contains(id))
            .collect();
        let far_every = (p.incident_count / p.far_incident_count.max(1)).max(1);
        let mut incidents = Vec::new();
        for i in 0..p.incident_count {
            let far = p.far_incident_count > 0 && i % far_every == 0 && i / far_every < p.far_incident_count;
            let pos = if far {
                // open water, well clear of the bridge and the islands
                to_lonlat(
                    b.rng.random_range(0.4..0.8) * width,
                    height + SEA_GAP_M / 2.0 + b.rng.random_range(-300.0..300.0),
                )
            } else {
                let id = mainland[b.rng.random_range(0..mainland.len())];
                offset(
                    pos_of(id),
                    b.rng.random_range(-30.0..30.0),
                    b.rng.random_range(-30.0..30.0),
                )
            };
            // Gamma(3, 4) via a sum of exponentials, shifted by a minute
            let minutes = 1.0 - 4.0 * (0..3).map(|_| (1.0 - b.rng.random::<f64>()).ln()).sum::<f64>();
            incidents.push(IncidentRecord {
                pos,
                response_minutes: (minutes * 100.0).round() / 100.0,
            });
        }

        // coastline: mainland shore crossing the region edges (land to the
        // left, i.e. south, when walking west), CCW island rings and an islet
        // below the area threshold
        let shore_y = height + s / 2.0;
        let mut shore = Vec::new();
        let steps = 20;
        for k in 0..=steps {
            let x = width + 5000.0 - (width + 6000.0) * k as f64 / steps as f64;
            let wiggle = if k % 2 == 0 { 0.0 } else { s / 4.0 };
            shore.push(b.node(x, shore_y + wiggle));
        }
        b.way(shore, &[("natural", "coastline")]);
        let m = s / 2.0;
        for (x0, n) in [(bx, nb), (cx, nc), (ax, na)] {
            let x1 = x0 + (n - 1) as f64 * s;
            let y1 = island_y + (n - 1) as f64 * s;
            let ids = ring(
                &mut b,
                &[
                    (x0 - m, island_y - m),
                    (x1 + m, island_y - m),
                    (x1 + m, y1 + m),
                    (x0 - m, y1 + m),
                ],
            );
            b.way(ids, &[("natural", "coastline")]);
        }
        let (ix, iy) = (width * 0.5, height + SEA_GAP_M * 0.3);
        let islet = ring(
            &mut b,
            &[(ix, iy), (ix + 40.0, iy), (ix + 40.0, iy + 40.0), (ix, iy + 40.0)],
        );
        b.way(islet, &[("natural", "coastline")]);

        let top = island_y + nb.max(nc).max(na) as f64 * s + 1000.0;
        let region = vec![
            to_lonlat(2.5 * s, -s / 2.0),
            to_lonlat(width + 3000.0, -s / 2.0),
            to_lonlat(width + 3000.0, top),
            to_lonlat(2.5 * s, top),
        ];

        Self {
            highway_nodes,
            highway_ways,
            coastline_nodes: b.nodes,
            coastline_ways: b.ways,
            region,
            stations,
            critical,
            incidents,
            isolated_station,
            bridged_station,
            isolated_island_nodes: nc * nc,
            unserved_island_nodes: na * na,
        }
    }

    /// Writes the six input files the ingest pipeline expects.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
        write_overpass_json(create("highways.json")?, &self.highway_nodes, &self.highway_ways)?;
        write_overpass_json(create("coastline.json")?, &self.coastline_nodes, &self.coastline_ways)?;

        let mut w = create("region.csv")?;
        writeln!(w, "lon,lat")?;
        for v in &self.region {
            writeln!(w, "{},{}", v.lon, v.lat)?;
        }
        w.flush()?;

        let mut w = create("stations.csv")?;
        writeln!(w, "name,lon,lat,mode")?;
        for s in &self.stations {
            writeln!(w, "{},{},{},{}", s.name, s.pos.lon, s.pos.lat, s.mode.as_str())?;
        }
        w.flush()?;

        let mut w = create("critical.csv")?;
        writeln!(w, "name,lon,lat")?;
        for c in &self.critical {
            writeln!(w, "{},{},{}", c.name, c.pos.lon, c.pos.lat)?;
        }
        w.flush()?;

        let mut w = create("incidents.csv")?;
        writeln!(w, "lon,lat,response_minutes")?;
        for i in &self.incidents {
            writeln!(w, "{},{},{}", i.pos.lon, i.pos.lat, i.response_minutes)?;
        }
        w.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{haversine_distance, point_in_polygon, RegionPolygon};

    #[test]
    fn deterministic_and_sized() {
        let a = SyntheticDataset::generate(&SyntheticParams::small(3));
        let b = SyntheticDataset::generate(&SyntheticParams::small(3));
        assert_eq!(a.highway_nodes, b.highway_nodes);
        assert_eq!(a.highway_ways, b.highway_ways);
        assert_eq!(a.incidents, b.incidents);
        assert_eq!(a.stations.len(), 17);
        assert_eq!(a.critical.len(), 58);
        assert_eq!(a.incidents.len(), 732);
        assert_eq!(
            a.stations.iter().filter(|s| s.mode == StaffingMode::FullTime).count(),
            3
        );
        let c = SyntheticDataset::generate(&SyntheticParams::small(4));
        assert_ne!(a.highway_nodes, c.highway_nodes);
    }

    #[test]
    fn far_incidents_are_far() {
        let d = SyntheticDataset::generate(&SyntheticParams::small(1));
        let far = d
            .incidents
            .iter()
            .filter(|i| d.highway_nodes.iter().all(|n| haversine_distance(n.pos, i.pos) > 100.0))
            .count();
        assert_eq!(far, 10);
    }

    #[test]
    fn stations_inside_region() {
        let d = SyntheticDataset::generate(&SyntheticParams::small(1));
        let poly = RegionPolygon::new(d.region.clone()).unwrap();
        assert!(d.stations.iter().all(|s| point_in_polygon(s.pos, &poly)));
    }
}
