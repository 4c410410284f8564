//! One-to-all shortest paths and per-node combination across stations.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeIndex, RoadGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weight {
    Time = 0,
    Distance = 1,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("no open stations")]
    NoOpenStations,
    #[error("{what}: expected {expected} entries, got {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("scale factor must be positive and finite, got {0}")]
    InvalidFactor(f64),
    #[error("fields cover different graphs ({0} vs {1} nodes)")]
    GraphMismatch(usize, usize),
}

/// Shortest-path values from one source to every node, in seconds or metres.
/// Unreachable nodes hold `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelTimeField {
    source: NodeIndex,
    weight: Weight,
    values: Vec<f64>,
}

impl TravelTimeField {
    pub fn from_values(source: NodeIndex, weight: Weight, values: Vec<f64>) -> Result<Self, RoutingError> {
        if source.index() >= values.len() {
            return Err(RoutingError::InvalidField(format!("source {} out of range", source.0)));
        }
        if values[source.index()] != 0.0 {
            return Err(RoutingError::InvalidField("source value is not zero".into()));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(RoutingError::InvalidField(format!("bad value {v}")));
        }
        Ok(Self { source, weight, values })
    }

    pub fn source(&self) -> NodeIndex {
        self.source
    }

    pub fn weight(&self) -> Weight {
        self.weight
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, n: NodeIndex) -> f64 {
        self.values[n.index()]
    }

    pub fn is_reachable(&self, n: NodeIndex) -> bool {
        self.values[n.index()].is_finite()
    }

    /// Largest finite value and the lowest node index attaining it.
    pub fn max_finite(&self) -> Option<(NodeIndex, f64)> {
        max_finite(&self.values)
    }
}

pub(crate) fn max_finite(values: &[f64]) -> Option<(NodeIndex, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, v)| (NodeIndex::from(i), v))
}

/// Binary-heap Dijkstra. Heap entries are ordered by (distance, node index),
/// so the settle order, and therefore the output, is fully deterministic.
pub fn dijkstra_one_to_all(g: &RoadGraph, source: NodeIndex, weight: Weight) -> TravelTimeField {
    let n = g.node_count();
    assert!(source.index() < n, "source {} out of range", source.0);
    let mut dist = vec![f64::INFINITY; n];
    let mut settled = vec![false; n];
    // non-negative finite f64 bit patterns sort like the values themselves
    let mut heap = BinaryHeap::new();
    dist[source.index()] = 0.0;
    heap.push(Reverse((0f64.to_bits(), source.0)));
    while let Some(Reverse((bits, u))) = heap.pop() {
        let u = NodeIndex(u);
        if settled[u.index()] {
            continue;
        }
        settled[u.index()] = true;
        let d = f64::from_bits(bits);
        for e in g.out_edges(u) {
            let w = match weight {
                Weight::Time => e.travel_time_s,
                Weight::Distance => e.length_m,
            };
            let nd = d + w;
            let v = e.to.index();
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((nd.to_bits(), e.to.0)));
            }
        }
    }
    TravelTimeField {
        source,
        weight,
        values: dist,
    }
}

/// Runs one Dijkstra per source on a pool of `jobs` threads (0 = all cores).
/// Output order follows `sources` regardless of scheduling.
pub fn compute_fields(g: &RoadGraph, sources: &[NodeIndex], weight: Weight, jobs: usize) -> Vec<Arc<TravelTimeField>> {
    let run = || {
        sources
            .par_iter()
            .map(|&s| Arc::new(dijkstra_one_to_all(g, s, weight)))
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

/// One station's contribution to a combined field.
#[derive(Debug, Clone)]
pub struct StationTerm {
    pub field: Arc<TravelTimeField>,
    pub delay_s: f64,
    pub open: bool,
}

const NO_STATION: u32 = u32::MAX;

/// Per-node minimum over open stations of `delay·delay_scale + field·travel_scale`.
/// The terms are retained so the field can be rescaled exactly.
#[derive(Debug, Clone)]
pub struct CombinedField {
    terms: Vec<StationTerm>,
    travel_scale: f64,
    delay_scale: f64,
    best_time: Vec<f64>,
    best_station: Vec<u32>,
}

impl PartialEq for CombinedField {
    fn eq(&self, other: &Self) -> bool {
        self.best_time == other.best_time && self.best_station == other.best_station
    }
}

impl CombinedField {
    pub fn new(terms: Vec<StationTerm>, travel_scale: f64, delay_scale: f64) -> Result<Self, RoutingError> {
        for s in [travel_scale, delay_scale] {
            if !(s.is_finite() && s > 0.0) {
                return Err(RoutingError::InvalidFactor(s));
            }
        }
        if !terms.iter().any(|t| t.open) {
            return Err(RoutingError::NoOpenStations);
        }
        let n = terms[0].field.values().len();
        if let Some(t) = terms.iter().find(|t| t.field.values().len() != n) {
            return Err(RoutingError::GraphMismatch(n, t.field.values().len()));
        }
        if let Some(t) = terms.iter().find(|t| !(t.delay_s.is_finite() && t.delay_s >= 0.0)) {
            return Err(RoutingError::InvalidField(format!("bad delay {}", t.delay_s)));
        }

        let mut best_time = vec![f64::INFINITY; n];
        let mut best_station = vec![NO_STATION; n];
        for (si, term) in terms.iter().enumerate().filter(|(_, t)| t.open) {
            let delay = term.delay_s * delay_scale;
            for ((bt, bs), &v) in best_time
                .iter_mut()
                .zip(best_station.iter_mut())
                .zip(term.field.values())
            {
                if v.is_finite() {
                    let t = delay + v * travel_scale;
                    // strict: ties keep the lower station index
                    if t < *bt {
                        *bt = t;
                        *bs = si as u32;
                    }
                }
            }
        }
        Ok(Self {
            terms,
            travel_scale,
            delay_scale,
            best_time,
            best_station,
        })
    }

    pub fn terms(&self) -> &[StationTerm] {
        &self.terms
    }

    pub fn travel_scale(&self) -> f64 {
        self.travel_scale
    }

    pub fn delay_scale(&self) -> f64 {
        self.delay_scale
    }

    pub fn node_count(&self) -> usize {
        self.best_time.len()
    }

    /// Best response value per node; `INFINITY` when unreachable.
    pub fn best_time(&self) -> &[f64] {
        &self.best_time
    }

    pub fn time(&self, n: NodeIndex) -> f64 {
        self.best_time[n.index()]
    }

    pub fn station(&self, n: NodeIndex) -> Option<usize> {
        let s = self.best_station[n.index()];
        (s != NO_STATION).then_some(s as usize)
    }

    pub fn is_reachable(&self, n: NodeIndex) -> bool {
        self.best_time[n.index()].is_finite()
    }

    pub fn unreachable_mask(&self) -> Vec<bool> {
        self.best_time.iter().map(|t| !t.is_finite()).collect()
    }

    pub fn unreachable_count(&self) -> usize {
        self.best_time.iter().filter(|t| !t.is_finite()).count()
    }

    pub fn max_finite(&self) -> Option<(NodeIndex, f64)> {
        max_finite(&self.best_time)
    }

    /// Recombines with travel (and optionally delay) contributions multiplied
    /// by further factors.
    pub fn rescaled(&self, travel_factor: f64, delay_factor: f64) -> Result<Self, RoutingError> {
        for f in [travel_factor, delay_factor] {
            if !(f.is_finite() && f > 0.0) {
                return Err(RoutingError::InvalidFactor(f));
            }
        }
        Self::new(
            self.terms.clone(),
            self.travel_scale * travel_factor,
            self.delay_scale * delay_factor,
        )
    }
}

/// Combines per-station fields with per-station delays; closed stations are
/// ignored.
pub fn combine_fields(
    fields: &[Arc<TravelTimeField>],
    delays_s: &[f64],
    open: &[bool],
) -> Result<CombinedField, RoutingError> {
    for (what, len) in [("delays", delays_s.len()), ("open flags", open.len())] {
        if len != fields.len() {
            return Err(RoutingError::LengthMismatch {
                what,
                expected: fields.len(),
                found: len,
            });
        }
    }
    let terms = fields
        .iter()
        .zip(delays_s)
        .zip(open)
        .map(|((f, &delay_s), &open)| StationTerm {
            field: Arc::clone(f),
            delay_s,
            open,
        })
        .collect();
    CombinedField::new(terms, 1.0, 1.0)
}

/// Closest station per node by response time; `None` for unreachable nodes.
pub fn station_areas(combined: &CombinedField) -> Vec<Option<usize>> {
    (0..combined.node_count())
        .map(|i| combined.station(NodeIndex::from(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LonLat;
    use crate::graph::Edge;
    use proptest::prelude::*;

    /// Line graph with integer travel times: edges have speed 3.6 km/h so the
    /// travel time in seconds equals the length in metres.
    fn graph_from(n: usize, arcs: &[(usize, usize, u32)]) -> RoadGraph {
        let nodes = (0..n)
            .map(|i| (i as i64, LonLat::new(6.0 + i as f64 * 1e-3, 62.0).unwrap()))
            .collect();
        let edges = arcs
            .iter()
            .map(|&(a, b, w)| Edge::new(NodeIndex::from(a), NodeIndex::from(b), f64::from(w), 3.6))
            .collect();
        RoadGraph::new(nodes, edges).unwrap()
    }

    fn floyd_warshall(n: usize, arcs: &[(usize, usize, u32)]) -> Vec<Vec<f64>> {
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for &(a, b, w) in arcs {
            d[a][b] = d[a][b].min(f64::from(w));
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        d
    }

    fn arcs_strategy(max_nodes: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize, u32)>)> {
        (2..=max_nodes).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n, 1u32..100), 0..n * 3)))
    }

    #[test]
    fn hand_graph_matches_floyd_warshall() {
        let arcs = [
            (0, 1, 4),
            (0, 2, 1),
            (2, 1, 2),
            (1, 3, 1),
            (2, 3, 5),
            (3, 4, 3),
            (4, 0, 7),
        ];
        let g = graph_from(5, &arcs);
        let fw = floyd_warshall(5, &arcs);
        for (s, row) in fw.iter().enumerate() {
            let f = dijkstra_one_to_all(&g, NodeIndex::from(s), Weight::Time);
            assert_eq!(f.values(), row.as_slice());
        }
        let f = dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time);
        assert_eq!(f.values(), &[0.0, 3.0, 1.0, 4.0, 7.0]);
    }

    #[test]
    fn unreachable_is_infinite() {
        let g = graph_from(3, &[(0, 1, 5)]);
        let f = dijkstra_one_to_all(&g, NodeIndex(1), Weight::Time);
        assert_eq!(f.values(), &[f64::INFINITY, 0.0, f64::INFINITY]);
        assert_eq!(f.max_finite(), Some((NodeIndex(1), 0.0)));
    }

    #[test]
    fn distance_and_time_weights_differ() {
        let nodes = vec![
            (0, LonLat::new(6.0, 62.0).unwrap()),
            (1, LonLat::new(6.0, 62.01).unwrap()),
        ];
        let g = RoadGraph::new(nodes, vec![Edge::new(NodeIndex(0), NodeIndex(1), 1000.0, 36.0)]).unwrap();
        assert_eq!(
            dijkstra_one_to_all(&g, NodeIndex(0), Weight::Distance).values()[1],
            1000.0
        );
        assert_eq!(dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time).values()[1], 100.0);
    }

    #[test]
    fn parallel_matches_sequential() {
        let arcs: Vec<_> = (0..199)
            .flat_map(|i| [(i, i + 1, 3 + (i % 7) as u32), (i + 1, i, 5)])
            .collect();
        let g = graph_from(200, &arcs);
        let sources: Vec<_> = (0..200).step_by(13).map(NodeIndex::from).collect();
        let par = compute_fields(&g, &sources, Weight::Time, 4);
        let seq = compute_fields(&g, &sources, Weight::Time, 1);
        for ((a, b), s) in par.iter().zip(&seq).zip(&sources) {
            assert_eq!(a, b);
            assert_eq!(a.source(), *s);
        }
    }

    #[test]
    fn combine_single_station_is_identity() {
        let g = graph_from(4, &[(0, 1, 2), (1, 2, 2)]);
        let f = Arc::new(dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time));
        let c = combine_fields(std::slice::from_ref(&f), &[0.0], &[true]).unwrap();
        assert_eq!(c.best_time(), f.values());
        assert_eq!(c.station(NodeIndex(3)), None);
        assert_eq!(c.station(NodeIndex(2)), Some(0));
    }

    #[test]
    fn combine_errors() {
        let g = graph_from(2, &[(0, 1, 2)]);
        let f = Arc::new(dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time));
        assert_eq!(
            combine_fields(std::slice::from_ref(&f), &[0.0], &[false]).unwrap_err(),
            RoutingError::NoOpenStations
        );
        assert!(matches!(
            combine_fields(std::slice::from_ref(&f), &[0.0, 1.0], &[true]),
            Err(RoutingError::LengthMismatch { .. })
        ));
        assert!(combine_fields(&[f], &[-1.0], &[true]).is_err());
    }

    #[test]
    fn dominating_station_wins_everywhere() {
        let arcs: Vec<_> = (0..9).flat_map(|i| [(i, i + 1, 10), (i + 1, i, 10)]).collect();
        let g = graph_from(10, &arcs);
        let fields: Vec<_> = [0, 9]
            .iter()
            .map(|&s| Arc::new(dijkstra_one_to_all(&g, NodeIndex(s), Weight::Time)))
            .collect();
        let c = combine_fields(&fields, &[0.0, 1000.0], &[true, true]).unwrap();
        assert!(station_areas(&c).iter().all(|s| *s == Some(0)));
    }

    #[test]
    fn symmetric_line_splits_at_midpoint() {
        let arcs: Vec<_> = (0..4).flat_map(|i| [(i, i + 1, 10), (i + 1, i, 10)]).collect();
        let g = graph_from(5, &arcs);
        let fields: Vec<_> = [0, 4]
            .iter()
            .map(|&s| Arc::new(dijkstra_one_to_all(&g, NodeIndex(s), Weight::Time)))
            .collect();
        let c = combine_fields(&fields, &[0.0, 0.0], &[true, true]).unwrap();
        assert_eq!(station_areas(&c), vec![Some(0), Some(0), Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn rescale_identity() {
        let g = graph_from(3, &[(0, 1, 2), (1, 2, 2)]);
        let f = Arc::new(dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time));
        let c = combine_fields(&[f], &[30.0], &[true]).unwrap();
        assert_eq!(c.rescaled(1.0, 1.0).unwrap(), c);
        assert_eq!(c.rescaled(2.0, 1.0).unwrap().best_time(), &[30.0, 34.0, 38.0]);
        assert!(c.rescaled(0.0, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_floyd_warshall((n, arcs) in arcs_strategy(40)) {
            let g = graph_from(n, &arcs);
            let fw = floyd_warshall(n, &arcs);
            for (s, row) in fw.iter().enumerate() {
                let f = dijkstra_one_to_all(&g, NodeIndex::from(s), Weight::Time);
                prop_assert_eq!(f.values(), row.as_slice());
            }
        }

        #[test]
        fn adding_an_edge_never_increases((n, arcs) in arcs_strategy(25), extra in (0usize..25, 0usize..25, 1u32..100)) {
            let extra = (extra.0 % n, extra.1 % n, extra.2);
            let before = dijkstra_one_to_all(&graph_from(n, &arcs), NodeIndex(0), Weight::Time);
            let mut more = arcs.clone();
            more.push(extra);
            let after = dijkstra_one_to_all(&graph_from(n, &more), NodeIndex(0), Weight::Time);
            for (a, b) in after.values().iter().zip(before.values()) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn removing_an_edge_never_decreases((n, arcs) in arcs_strategy(25), pick in any::<prop::sample::Index>()) {
            prop_assume!(!arcs.is_empty());
            let before = dijkstra_one_to_all(&graph_from(n, &arcs), NodeIndex(0), Weight::Time);
            let mut fewer = arcs.clone();
            fewer.remove(pick.index(arcs.len()));
            let after = dijkstra_one_to_all(&graph_from(n, &fewer), NodeIndex(0), Weight::Time);
            for (a, b) in after.values().iter().zip(before.values()) {
                prop_assert!(a >= b);
            }
        }

        #[test]
        fn combined_is_pointwise_minimum(
            (n, arcs) in arcs_strategy(30),
            stations in prop::collection::vec((0usize..30, 0u32..600, any::<bool>()), 1..5),
        ) {
            prop_assume!(stations.iter().any(|s| s.2));
            let g = graph_from(n, &arcs);
            let fields: Vec<_> = stations
                .iter()
                .map(|s| Arc::new(dijkstra_one_to_all(&g, NodeIndex::from(s.0 % n), Weight::Time)))
                .collect();
            let delays: Vec<f64> = stations.iter().map(|s| f64::from(s.1)).collect();
            let open: Vec<bool> = stations.iter().map(|s| s.2).collect();
            let c = combine_fields(&fields, &delays, &open).unwrap();
            for node in 0..n {
                // independent per-node scan
                let mut best = (f64::INFINITY, None);
                for (i, f) in fields.iter().enumerate() {
                    if open[i] && f.values()[node].is_finite() {
                        let t = delays[i] + f.values()[node];
                        if t < best.0 {
                            best = (t, Some(i));
                        }
                    }
                }
                let idx = NodeIndex::from(node);
                prop_assert_eq!(c.time(idx), best.0);
                prop_assert_eq!(c.station(idx), best.1);
                for (i, f) in fields.iter().enumerate() {
                    if open[i] {
                        prop_assert!(c.time(idx) <= delays[i] + f.values()[node]);
                    }
                }
            }
        }

        #[test]
        fn uniform_scaling_commutes((n, arcs) in arcs_strategy(30), factor in 1u32..5) {
            let g = graph_from(n, &arcs);
            let scaled = g.scale_speeds(f64::from(factor)).unwrap();
            let base = dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time);
            let after = dijkstra_one_to_all(&scaled, NodeIndex(0), Weight::Time);
            for (a, b) in after.values().iter().zip(base.values()) {
                prop_assert_eq!(*a, b * f64::from(factor));
            }
        }
    }
}
