//! Land mask from coastline edges.
//!
//! Coastline edges are chained, cut to the region polygon, and open pieces
//! are joined by walking the region boundary counter-clockwise from each
//! exit point to the next entry point. OSM coastlines keep land on the
//! left, so the resulting rings enclose land.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{IngestWarning, OsmId, OsmNode};
use crate::geo::{haversine_project, point_in_polygon, signed_area, LonLat, RegionPolygon};

pub const DEFAULT_MIN_ISLAND_AREA_M2: f64 = 10_000.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandMask {
    /// Closed rings (first vertex repeated at the end).
    pub rings: Vec<Vec<LonLat>>,
    #[serde(skip)]
    pub warnings: Vec<IngestWarning>,
}

/// Area of a ring in square metres, measured in a local projection
/// centred on the ring's mean coordinate.
pub fn ring_area_m2(ring: &[LonLat]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    let n = ring.len() as f64;
    let origin = LonLat {
        lon: ring.iter().map(|p| p.lon).sum::<f64>() / n,
        lat: ring.iter().map(|p| p.lat).sum::<f64>() / n,
    };
    let xy: Vec<_> = ring.iter().map(|p| haversine_project(origin, *p)).collect();
    signed_area(&xy, |p| (p.x, p.y)).abs()
}

#[derive(Debug, Clone, Copy)]
struct BoundaryPoint {
    /// Perimeter parameter: edge index plus fraction along the edge.
    s: f64,
    pos: LonLat,
}

#[derive(Debug)]
struct Piece {
    entry: BoundaryPoint,
    interior: Vec<LonLat>,
    exit: BoundaryPoint,
}

fn chains(edges: &[(OsmId, OsmId)]) -> Vec<Vec<OsmId>> {
    let mut out_edges: HashMap<OsmId, Vec<usize>> = HashMap::new();
    let mut in_degree: HashMap<OsmId, usize> = HashMap::new();
    for (i, (a, b)) in edges.iter().enumerate() {
        out_edges.entry(*a).or_default().push(i);
        *in_degree.entry(*b).or_default() += 1;
    }
    let mut used = vec![false; edges.len()];
    let mut result = Vec::new();

    let follow = |start_edge: usize, used: &mut Vec<bool>| {
        let mut chain = vec![edges[start_edge].0];
        let mut e = start_edge;
        loop {
            used[e] = true;
            let next_node = edges[e].1;
            chain.push(next_node);
            if next_node == chain[0] {
                break;
            }
            match out_edges
                .get(&next_node)
                .and_then(|list| list.iter().copied().find(|&i| !used[i]))
            {
                Some(n) => e = n,
                None => break,
            }
        }
        chain
    };

    // open chains first, starting where nothing flows in
    for i in 0..edges.len() {
        if !used[i] && in_degree.get(&edges[i].0).copied().unwrap_or(0) == 0 {
            result.push(follow(i, &mut used));
        }
    }
    for i in 0..edges.len() {
        if !used[i] {
            result.push(follow(i, &mut used));
        }
    }
    result
}

/// Crossing of segment `p -> q` with the polygon boundary. Returns the
/// crossing with the smallest (`first`) or largest segment parameter.
fn boundary_crossing(p: LonLat, q: LonLat, poly: &[LonLat], first: bool) -> Option<BoundaryPoint> {
    let n = poly.len();
    let mut best: Option<(f64, BoundaryPoint)> = None;
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        let r = (q.lon - p.lon, q.lat - p.lat);
        let s = (b.lon - a.lon, b.lat - a.lat);
        let denom = r.0 * s.1 - r.1 * s.0;
        if denom == 0.0 {
            continue;
        }
        let w = (a.lon - p.lon, a.lat - p.lat);
        let t = (w.0 * s.1 - w.1 * s.0) / denom;
        let u = (w.0 * r.1 - w.1 * r.0) / denom;
        if !(-1e-12..=1.0 + 1e-12).contains(&t) || !(-1e-12..=1.0 + 1e-12).contains(&u) {
            continue;
        }
        let t = t.clamp(0.0, 1.0);
        let u = u.clamp(0.0, 1.0);
        let bp = BoundaryPoint {
            s: k as f64 + u,
            pos: LonLat {
                lon: a.lon + u * s.0,
                lat: a.lat + u * s.1,
            },
        };
        let better = match best {
            None => true,
            Some((bt, _)) => (first && t < bt) || (!first && t > bt),
        };
        if better {
            best = Some((t, bp));
        }
    }
    best.map(|(_, bp)| bp)
}

/// Builds the land mask inside `poly` from directed coastline edges,
/// dropping rings smaller than `min_island_area_m2`.
pub fn build_land_mask(
    nodes: &[OsmNode],
    edges: &[(OsmId, OsmId)],
    poly: &RegionPolygon,
    min_island_area_m2: f64,
) -> LandMask {
    let region = poly.to_ccw();
    let boundary = region.vertices();
    let pos: HashMap<OsmId, LonLat> = nodes.iter().map(|n| (n.id, n.pos)).collect();
    let edges: Vec<_> = edges
        .iter()
        .copied()
        .filter(|(a, b)| pos.contains_key(a) && pos.contains_key(b))
        .collect();

    let mut warnings = Vec::new();
    let mut rings: Vec<Vec<LonLat>> = Vec::new();
    let mut pieces: Vec<Piece> = Vec::new();

    for chain in chains(&edges) {
        let start_id = chain[0];
        let mut pts: Vec<LonLat> = chain.iter().map(|id| pos[id]).collect();
        let mut inside: Vec<bool> = pts.iter().map(|p| point_in_polygon(*p, &region)).collect();
        let closed = chain.len() > 2 && chain.first() == chain.last();

        if closed {
            if inside.iter().all(|&b| b) {
                rings.push(pts);
                continue;
            }
            // rotate so the ring starts (and ends) outside the region
            let k = inside.iter().position(|&b| !b).unwrap();
            pts.pop();
            inside.pop();
            pts.rotate_left(k);
            inside.rotate_left(k);
            pts.push(pts[0]);
            inside.push(inside[0]);
        }

        let mut i = 0;
        while i < pts.len() {
            if !inside[i] {
                i += 1;
                continue;
            }
            let mut j = i;
            while j + 1 < pts.len() && inside[j + 1] {
                j += 1;
            }
            let entry = (i > 0)
                .then(|| boundary_crossing(pts[i - 1], pts[i], boundary, false))
                .flatten();
            let exit = (j + 1 < pts.len())
                .then(|| boundary_crossing(pts[j], pts[j + 1], boundary, true))
                .flatten();
            match (entry, exit) {
                (Some(entry), Some(exit)) => pieces.push(Piece {
                    entry,
                    interior: pts[i..=j].to_vec(),
                    exit,
                }),
                _ => warnings.push(IngestWarning::UnclosableChain { start: start_id }),
            }
            i = j + 1;
        }
    }

    let perimeter = boundary.len() as f64;
    let cyclic = |from: f64, to: f64| (to - from).rem_euclid(perimeter);
    let mut visited = vec![false; pieces.len()];
    for first in 0..pieces.len() {
        if visited[first] {
            continue;
        }
        let mut ring = Vec::new();
        let mut current = first;
        let ok = loop {
            visited[current] = true;
            let piece = &pieces[current];
            ring.push(piece.entry.pos);
            ring.extend_from_slice(&piece.interior);
            ring.push(piece.exit.pos);

            let from = piece.exit.s;
            let next = (0..pieces.len())
                .filter(|&k| k == first || !visited[k])
                .min_by(|&a, &b| {
                    cyclic(from, pieces[a].entry.s)
                        .total_cmp(&cyclic(from, pieces[b].entry.s))
                        .then(a.cmp(&b))
                })
                .expect("first piece is always a candidate");
            let gap = cyclic(from, pieces[next].entry.s);
            let mut v = from.floor() as usize;
            loop {
                v += 1;
                let offset = v as f64 - from;
                if offset >= gap {
                    break;
                }
                ring.push(boundary[v % boundary.len()]);
            }
            if next == first {
                break true;
            }
            if visited[next] {
                break false;
            }
            current = next;
        };
        if ok {
            ring.push(ring[0]);
            rings.push(ring);
        } else {
            warnings.push(IngestWarning::UnclosableChain { start: -1 });
        }
    }

    rings.retain(|r| ring_area_m2(r) >= min_island_area_m2);
    LandMask { rings, warnings }
}
