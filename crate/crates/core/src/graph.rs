//! Directed, travel-time weighted road graph and exact nearest-node lookup.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::{bbox_of, haversine_distance, haversine_project, LocalXY, LonLat, EARTH_RADIUS_M};
use crate::osm::{HighwayClass, IngestWarning, OsmId, OsmNode, OsmWay};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeIndex(pub u32);

impl NodeIndex {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for NodeIndex {
    fn from(i: usize) -> Self {
        NodeIndex(u32::try_from(i).expect("node index exceeds u32"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("edge {edge} references node {node}, but the graph has {count} nodes")]
    BadEdge { edge: usize, node: u32, count: usize },
    #[error("scale factor must be positive and finite, got {0}")]
    InvalidFactor(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub osm_id: OsmId,
    pub pos: LonLat,
    pub local: LocalXY,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeIndex,
    pub to: NodeIndex,
    pub length_m: f64,
    pub speed_kmh: f64,
    pub travel_time_s: f64,
    pub is_tunnel: bool,
    pub is_bridge: bool,
}

impl Edge {
    pub fn new(from: NodeIndex, to: NodeIndex, length_m: f64, speed_kmh: f64) -> Self {
        Self {
            from,
            to,
            length_m,
            speed_kmh,
            travel_time_s: length_m / (speed_kmh / 3.6),
            is_tunnel: false,
            is_bridge: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// When false, one-way tags are ignored and every segment is two-way.
    pub honor_oneway: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { honor_oneway: true }
    }
}

#[derive(Debug, Clone)]
pub struct RoadGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    /// CSR adjacency: outgoing edge ids of node `n` are
    /// `adjacency[offsets[n]..offsets[n + 1]]`.
    offsets: Vec<u32>,
    adjacency: Vec<u32>,
    local_origin: LonLat,
    grid: SpatialGrid,
}

impl PartialEq for RoadGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges && self.local_origin == other.local_origin
    }
}

impl RoadGraph {
    /// Assembles a graph from explicit nodes and edges. The local origin is
    /// the mean longitude and latitude of the nodes.
    pub fn new(nodes: Vec<(OsmId, LonLat)>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let n = nodes.len();
        let local_origin = if n == 0 {
            LonLat { lon: 0.0, lat: 0.0 }
        } else {
            LonLat {
                lon: nodes.iter().map(|(_, p)| p.lon).sum::<f64>() / n as f64,
                lat: nodes.iter().map(|(_, p)| p.lat).sum::<f64>() / n as f64,
            }
        };
        let nodes = nodes
            .into_iter()
            .map(|(osm_id, pos)| GraphNode {
                osm_id,
                pos,
                local: haversine_project(local_origin, pos),
            })
            .collect();
        Self::from_parts(nodes, edges, local_origin)
    }

    pub(crate) fn from_parts(
        nodes: Vec<GraphNode>,
        edges: Vec<Edge>,
        local_origin: LonLat,
    ) -> Result<Self, GraphError> {
        let count = nodes.len();
        for (i, e) in edges.iter().enumerate() {
            for end in [e.from, e.to] {
                if end.index() >= count {
                    return Err(GraphError::BadEdge {
                        edge: i,
                        node: end.0,
                        count,
                    });
                }
            }
        }
        let mut offsets = vec![0u32; count + 1];
        for e in &edges {
            offsets[e.from.index() + 1] += 1;
        }
        for i in 0..count {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut adjacency = vec![0u32; edges.len()];
        for (i, e) in edges.iter().enumerate() {
            let slot = &mut fill[e.from.index()];
            adjacency[*slot as usize] = i as u32;
            *slot += 1;
        }
        let grid = SpatialGrid::build(&nodes);
        Ok(Self {
            nodes,
            edges,
            offsets,
            adjacency,
            local_origin,
            grid,
        })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, n: NodeIndex) -> &GraphNode {
        &self.nodes[n.index()]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn local_origin(&self) -> LonLat {
        self.local_origin
    }

    pub fn out_edges(&self, n: NodeIndex) -> impl Iterator<Item = &Edge> + '_ {
        let i = n.index();
        self.adjacency[self.offsets[i] as usize..self.offsets[i + 1] as usize]
            .iter()
            .map(move |&e| &self.edges[e as usize])
    }

    /// `(min_lon, min_lat, max_lon, max_lat)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        bbox_of(self.nodes.iter().map(|n| n.pos))
    }

    /// Copy with every travel time multiplied by `factor` (>1 is slower).
    pub fn scale_speeds(&self, factor: f64) -> Result<RoadGraph, GraphError> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(GraphError::InvalidFactor(factor));
        }
        let mut g = self.clone();
        for e in &mut g.edges {
            e.travel_time_s *= factor;
            e.speed_kmh /= factor;
        }
        Ok(g)
    }

    /// Number of edges that have an antiparallel twin with identical length
    /// and travel time.
    pub fn antiparallel_edge_count(&self) -> usize {
        let mut seen: HashMap<(u32, u32, u64, u64), usize> = HashMap::new();
        for e in &self.edges {
            *seen
                .entry((e.from.0, e.to.0, e.length_m.to_bits(), e.travel_time_s.to_bits()))
                .or_default() += 1;
        }
        self.edges
            .iter()
            .filter(|e| seen.contains_key(&(e.to.0, e.from.0, e.length_m.to_bits(), e.travel_time_s.to_bits())))
            .count()
    }

    /// Exact nearest node by haversine distance, ties to the lowest index.
    /// Returns `None` when the nearest node is farther than `max_dist_m`.
    pub fn nearest_node(&self, p: LonLat, max_dist_m: f64) -> Result<Option<(NodeIndex, f64)>, GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        Ok(self.grid.nearest(&self.nodes, p, max_dist_m))
    }

    /// SHA-256 over the canonical binary encoding of nodes and edges.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(crate::cache::encode_graph_body(self));
        h.finalize().into()
    }
}

/// Parses an OSM `maxspeed` value in km/h.
pub fn parse_maxspeed(raw: &str) -> Option<f64> {
    let s = raw.trim();
    let digits = s
        .strip_suffix("km/h")
        .or_else(|| s.strip_suffix("kmh"))
        .or_else(|| s.strip_suffix("kph"))
        .map(str::trim_end)
        .unwrap_or(s);
    let v: u32 = digits.parse().ok()?;
    (v > 0).then_some(f64::from(v))
}

#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: RoadGraph,
    pub warnings: Vec<IngestWarning>,
}

/// Builds the routing graph: one edge per consecutive node pair of each way,
/// plus the reverse edge unless the way is one-way.
pub fn build_graph(nodes: &[OsmNode], ways: &[OsmWay], opts: BuildOptions) -> GraphBuild {
    let pos: HashMap<OsmId, LonLat> = nodes.iter().map(|n| (n.id, n.pos)).collect();
    let mut warnings = Vec::new();

    let mut usable = Vec::with_capacity(ways.len());
    for way in ways {
        if let Some(&missing) = way.node_ids.iter().find(|id| !pos.contains_key(id)) {
            warnings.push(IngestWarning::MissingNode {
                way: way.id,
                node: missing,
            });
            continue;
        }
        let class = way.tag("highway").and_then(HighwayClass::from_tag);
        let default = class.and_then(HighwayClass::default_speed_kmh);
        let speed = match way.tag("maxspeed") {
            Some(raw) => match parse_maxspeed(raw) {
                Some(v) => Some(v),
                None => {
                    warnings.push(IngestWarning::BadMaxspeed {
                        way: way.id,
                        value: raw.to_owned(),
                    });
                    default
                }
            },
            None => default,
        };
        let Some(speed) = speed else {
            warnings.push(IngestWarning::UnknownHighway {
                way: way.id,
                value: way.tag("highway").unwrap_or("").to_owned(),
            });
            continue;
        };
        usable.push((way, speed));
    }

    let used: HashSet<OsmId> = usable.iter().flat_map(|(w, _)| w.node_ids.iter().copied()).collect();
    let mut index: HashMap<OsmId, NodeIndex> = HashMap::new();
    let mut graph_nodes = Vec::new();
    for n in nodes {
        if used.contains(&n.id) && !index.contains_key(&n.id) {
            index.insert(n.id, NodeIndex::from(graph_nodes.len()));
            graph_nodes.push((n.id, n.pos));
        }
    }

    let mut edges = Vec::new();
    for (way, speed) in usable {
        let (forward, backward) = if !opts.honor_oneway {
            (true, true)
        } else {
            match way.tag("oneway") {
                Some("yes" | "true" | "1") => (true, false),
                Some("-1" | "reverse") => (false, true),
                _ => (true, true),
            }
        };
        let is_tunnel = way.tag("tunnel").is_some_and(|v| v != "no");
        let is_bridge = way.tag("bridge").is_some_and(|v| v != "no");
        for pair in way.node_ids.windows(2) {
            if pair[0] == pair[1] {
                continue;
            }
            let (a, b) = (index[&pair[0]], index[&pair[1]]);
            let length = haversine_distance(pos[&pair[0]], pos[&pair[1]]);
            let mut make = |from, to| {
                let mut e = Edge::new(from, to, length, speed);
                e.is_tunnel = is_tunnel;
                e.is_bridge = is_bridge;
                edges.push(e);
            };
            if forward {
                make(a, b);
            }
            if backward {
                make(b, a);
            }
        }
    }

    let graph = RoadGraph::new(graph_nodes, edges).expect("edge endpoints come from the node index");
    GraphBuild { graph, warnings }
}

/// Uniform lon/lat bucket grid. Lookups expand ring by ring and stop once a
/// rigorous lower bound on the haversine distance to any unvisited cell
/// exceeds the best candidate, so results equal a linear scan.
#[derive(Debug, Clone, Default)]
struct SpatialGrid {
    min_lon: f64,
    min_lat: f64,
    cell_lon: f64,
    cell_lat: f64,
    cols: i64,
    rows: i64,
    max_abs_lat: f64,
    cell_start: Vec<u32>,
    items: Vec<u32>,
}

impl SpatialGrid {
    fn build(nodes: &[GraphNode]) -> Self {
        if nodes.is_empty() {
            return Self::default();
        }
        let (min_lon, min_lat, max_lon, max_lat) = bbox_of(nodes.iter().map(|n| n.pos));
        let mid_cos = ((min_lat + max_lat) / 2.0).to_radians().cos().max(0.01);
        let metres_per_deg = EARTH_RADIUS_M * 1.0_f64.to_radians();
        let w = ((max_lon - min_lon) * mid_cos * metres_per_deg).max(1.0);
        let h = ((max_lat - min_lat) * metres_per_deg).max(1.0);
        let target_cells = (nodes.len() / 4).clamp(1, 1 << 22) as f64;
        let cell_m = (w * h / target_cells).sqrt().max(1.0);
        let cell_lat = cell_m / metres_per_deg;
        let cell_lon = cell_lat / mid_cos;
        let cols = ((max_lon - min_lon) / cell_lon).floor() as i64 + 1;
        let rows = ((max_lat - min_lat) / cell_lat).floor() as i64 + 1;

        let mut grid = Self {
            min_lon,
            min_lat,
            cell_lon,
            cell_lat,
            cols,
            rows,
            max_abs_lat: min_lat.abs().max(max_lat.abs()),
            cell_start: vec![0; (cols * rows + 1) as usize],
            items: vec![0; nodes.len()],
        };
        let cell_of: Vec<usize> = nodes
            .iter()
            .map(|n| {
                let (c, r) = grid.cell_coords(n.pos);
                (r.clamp(0, rows - 1) * cols + c.clamp(0, cols - 1)) as usize
            })
            .collect();
        for &c in &cell_of {
            grid.cell_start[c + 1] += 1;
        }
        for i in 0..(cols * rows) as usize {
            grid.cell_start[i + 1] += grid.cell_start[i];
        }
        let mut fill = grid.cell_start.clone();
        for (i, &c) in cell_of.iter().enumerate() {
            grid.items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        grid
    }

    fn cell_coords(&self, p: LonLat) -> (i64, i64) {
        (
            ((p.lon - self.min_lon) / self.cell_lon).floor() as i64,
            ((p.lat - self.min_lat) / self.cell_lat).floor() as i64,
        )
    }

    /// Lower bound on the distance from a query to any node in a cell at
    /// Chebyshev ring `k` around the query's cell.
    fn ring_lower_bound(&self, k: i64, query_lat: f64) -> f64 {
        if k <= 1 {
            return 0.0;
        }
        let steps = (k - 1) as f64;
        let by_lat = EARTH_RADIUS_M * steps * self.cell_lat.to_radians();
        let cos_min = self.max_abs_lat.max(query_lat.abs()).to_radians().cos().max(0.0);
        let half = (steps * self.cell_lon.to_radians() / 2.0).min(std::f64::consts::FRAC_PI_2);
        let by_lon = 2.0 * EARTH_RADIUS_M * (cos_min * half.sin()).min(1.0).asin();
        by_lat.min(by_lon) * (1.0 - 1e-9)
    }

    fn nearest(&self, nodes: &[GraphNode], p: LonLat, max_dist: f64) -> Option<(NodeIndex, f64)> {
        let (qc, qr) = self.cell_coords(p);
        let outside = |q: i64, n: i64| {
            if q < 0 {
                -q
            } else if q >= n {
                q - n + 1
            } else {
                0
            }
        };
        let k_start = outside(qc, self.cols).max(outside(qr, self.rows));
        let k_end = qc.max(self.cols - 1 - qc).max(qr).max(self.rows - 1 - qr);

        let mut best: Option<(f64, u32)> = None;
        let visit = |c: i64, r: i64, best: &mut Option<(f64, u32)>| {
            let cell = (r * self.cols + c) as usize;
            for &i in &self.items[self.cell_start[cell] as usize..self.cell_start[cell + 1] as usize] {
                let d = haversine_distance(p, nodes[i as usize].pos);
                let better = match *best {
                    None => true,
                    Some((bd, bi)) => d < bd || (d == bd && i < bi),
                };
                if better {
                    *best = Some((d, i));
                }
            }
        };

        for k in k_start..=k_end {
            let bound = self.ring_lower_bound(k, p.lat);
            if bound > max_dist || best.is_some_and(|(d, _)| bound > d) {
                break;
            }
            let r_lo = (qr - k).max(0);
            let r_hi = (qr + k).min(self.rows - 1);
            for r in r_lo..=r_hi {
                if (r - qr).abs() == k {
                    for c in (qc - k).max(0)..=(qc + k).min(self.cols - 1) {
                        visit(c, r, &mut best);
                    }
                } else {
                    for c in [qc - k, qc + k] {
                        if (0..self.cols).contains(&c) {
                            visit(c, r, &mut best);
                        }
                    }
                }
            }
        }
        best.filter(|(d, _)| *d <= max_dist).map(|(d, i)| (NodeIndex(i), d))
    }
}
