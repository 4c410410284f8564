use std::collections::{HashMap, HashSet};

use super::{OsmId, OsmNode, OsmWay};
use crate::geo::{point_in_polygon, RegionPolygon};

/// Keeps only nodes inside `poly`. Ways are cut into their maximal runs of
/// inside nodes; runs shorter than two nodes vanish, so any edge with an
/// endpoint outside the region is dropped.
pub fn crop_highways(nodes: &[OsmNode], ways: &[OsmWay], poly: &RegionPolygon) -> (Vec<OsmNode>, Vec<OsmWay>) {
    let inside: HashMap<OsmId, bool> = nodes.iter().map(|n| (n.id, point_in_polygon(n.pos, poly))).collect();
    let is_inside = |id: &OsmId| inside.get(id).copied().unwrap_or(false);

    let mut out_ways = Vec::new();
    for way in ways {
        let mut run: Vec<OsmId> = Vec::new();
        // trailing None flushes the last run
        for id in way.node_ids.iter().map(Some).chain(std::iter::once(None)) {
            match id {
                Some(id) if is_inside(id) => run.push(*id),
                _ => {
                    if run.len() >= 2 {
                        out_ways.push(OsmWay {
                            id: way.id,
                            node_ids: std::mem::take(&mut run),
                            tags: way.tags.clone(),
                        });
                    }
                    run.clear();
                }
            }
        }
    }

    let used: HashSet<OsmId> = out_ways.iter().flat_map(|w| w.node_ids.iter().copied()).collect();
    let out_nodes = nodes.iter().filter(|n| used.contains(&n.id)).cloned().collect();
    (out_nodes, out_ways)
}
