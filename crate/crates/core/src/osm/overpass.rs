//! Streaming reader for Overpass API JSON exports.
//!
//! Elements are decoded one at a time from the `elements` array, so the
//! document is never held in memory as a tree. Overpass emits ways before
//! the nodes they reference (`out body; >; out skel qt;`), so node
//! resolution happens after the whole stream has been read.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, BufReader, Read, Write};
use std::rc::Rc;

use serde::de::{self, DeserializeSeed, IgnoredAny, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::{HighwayClass, IngestError, IngestWarning, OsmId, OsmNode, OsmWay};
use crate::geo::LonLat;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HighwayExtract {
    pub nodes: Vec<OsmNode>,
    pub ways: Vec<OsmWay>,
    pub warnings: Vec<IngestWarning>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoastlineExtract {
    pub nodes: Vec<OsmNode>,
    /// Directed node pairs; OSM coastlines keep land on the left.
    pub edges: Vec<(OsmId, OsmId)>,
    pub warnings: Vec<IngestWarning>,
}

#[derive(Deserialize)]
struct RawElement {
    #[serde(rename = "type")]
    kind: String,
    id: OsmId,
    lat: Option<f64>,
    lon: Option<f64>,
    #[serde(default)]
    nodes: Vec<OsmId>,
    #[serde(default)]
    tags: BTreeMap<String, String>,
}

struct Collector<F> {
    keep_way: F,
    node_order: Vec<OsmId>,
    node_pos: HashMap<OsmId, LonLat>,
    ways: Vec<OsmWay>,
    warnings: Vec<IngestWarning>,
}

impl<F: FnMut(&OsmWay, &mut Vec<IngestWarning>) -> bool> Collector<F> {
    fn push<E: de::Error>(&mut self, el: RawElement) -> Result<(), E> {
        match el.kind.as_str() {
            "node" => {
                let (Some(lon), Some(lat)) = (el.lon, el.lat) else {
                    return Err(E::custom(format!("node {} lacks lon/lat", el.id)));
                };
                let pos = LonLat::new(lon, lat).map_err(E::custom)?;
                if self.node_pos.insert(el.id, pos).is_none() {
                    self.node_order.push(el.id);
                }
            }
            "way" => {
                let way = OsmWay {
                    id: el.id,
                    node_ids: el.nodes,
                    tags: el.tags,
                };
                if (self.keep_way)(&way, &mut self.warnings) {
                    if way.node_ids.len() < 2 {
                        self.warnings.push(IngestWarning::TooFewNodes { way: way.id });
                    } else {
                        self.ways.push(way);
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

struct DocumentSeed<'a, F>(&'a mut Collector<F>);

impl<'de, F: FnMut(&OsmWay, &mut Vec<IngestWarning>) -> bool> DeserializeSeed<'de> for DocumentSeed<'_, F> {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, deserializer: D) -> Result<(), D::Error> {
        deserializer.deserialize_map(self)
    }
}

impl<'de, F: FnMut(&OsmWay, &mut Vec<IngestWarning>) -> bool> Visitor<'de> for DocumentSeed<'_, F> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an Overpass JSON object")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<(), A::Error> {
        let mut seen_elements = false;
        while let Some(key) = map.next_key::<String>()? {
            if key == "elements" {
                map.next_value_seed(ElementsSeed(&mut *self.0))?;
                seen_elements = true;
            } else {
                map.next_value::<IgnoredAny>()?;
            }
        }
        if !seen_elements {
            return Err(de::Error::missing_field("elements"));
        }
        Ok(())
    }
}

struct ElementsSeed<'a, F>(&'a mut Collector<F>);

impl<'de, F: FnMut(&OsmWay, &mut Vec<IngestWarning>) -> bool> DeserializeSeed<'de> for ElementsSeed<'_, F> {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, deserializer: D) -> Result<(), D::Error> {
        deserializer.deserialize_seq(self)
    }
}

impl<'de, F: FnMut(&OsmWay, &mut Vec<IngestWarning>) -> bool> Visitor<'de> for ElementsSeed<'_, F> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an array of OSM elements")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<(), A::Error> {
        while let Some(el) = seq.next_element::<RawElement>()? {
            self.0.push::<A::Error>(el)?;
        }
        Ok(())
    }
}

/// Counts bytes handed to the JSON parser so errors can report an offset.
struct CountingReader<R> {
    inner: R,
    count: Rc<Cell<u64>>,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count.set(self.count.get() + n as u64);
        Ok(n)
    }
}

fn collect<R, F>(reader: R, keep_way: F) -> Result<Collector<F>, IngestError>
where
    R: Read,
    F: FnMut(&OsmWay, &mut Vec<IngestWarning>) -> bool,
{
    let count = Rc::new(Cell::new(0));
    let counting = CountingReader {
        inner: BufReader::with_capacity(1 << 16, reader),
        count: Rc::clone(&count),
    };
    let mut collector = Collector {
        keep_way,
        node_order: Vec::new(),
        node_pos: HashMap::new(),
        ways: Vec::new(),
        warnings: Vec::new(),
    };
    let mut de = serde_json::Deserializer::from_reader(counting);
    let result = DocumentSeed(&mut collector)
        .deserialize(&mut de)
        .and_then(|()| de.end());
    match result {
        Ok(()) => Ok(collector),
        Err(e) if e.is_io() => Err(IngestError::Io {
            path: "<stream>".into(),
            source: io::Error::other(e),
        }),
        Err(e) => Err(IngestError::Json {
            offset: count.get(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }),
    }
}

/// Drops ways with unresolved refs and returns the referenced nodes in
/// document order.
fn resolve<F>(c: &mut Collector<F>) -> (Vec<OsmNode>, Vec<OsmWay>) {
    let mut ways = Vec::with_capacity(c.ways.len());
    for way in c.ways.drain(..) {
        match way.node_ids.iter().find(|id| !c.node_pos.contains_key(id)) {
            Some(&missing) => c.warnings.push(IngestWarning::MissingNode {
                way: way.id,
                node: missing,
            }),
            None => ways.push(way),
        }
    }
    let used: HashSet<OsmId> = ways.iter().flat_map(|w| w.node_ids.iter().copied()).collect();
    let nodes = c
        .node_order
        .iter()
        .filter(|id| used.contains(id))
        .map(|&id| OsmNode {
            id,
            pos: c.node_pos[&id],
        })
        .collect();
    (nodes, ways)
}

/// Reads drivable highways: ways tagged `highway` with an included class,
/// excluding parking aisles.
pub fn parse_overpass_highways<R: Read>(reader: R) -> Result<HighwayExtract, IngestError> {
    let mut c = collect(reader, |way: &OsmWay, warnings: &mut Vec<IngestWarning>| {
        let Some(value) = way.tag("highway") else {
            return false;
        };
        match HighwayClass::from_tag(value) {
            None => {
                warnings.push(IngestWarning::UnknownHighway {
                    way: way.id,
                    value: value.to_owned(),
                });
                false
            }
            Some(HighwayClass::Service) => way.tag("service") != Some("parking_aisle"),
            Some(class) => class.included(),
        }
    })?;
    let (nodes, ways) = resolve(&mut c);
    Ok(HighwayExtract {
        nodes,
        ways,
        warnings: c.warnings,
    })
}

/// Reads `natural=coastline` ways as directed edges.
pub fn parse_overpass_coastline<R: Read>(reader: R) -> Result<CoastlineExtract, IngestError> {
    let mut c = collect(reader, |way: &OsmWay, _: &mut Vec<IngestWarning>| {
        way.tag("natural") == Some("coastline")
    })?;
    let (nodes, ways) = resolve(&mut c);
    let edges = ways
        .iter()
        .flat_map(|w| w.node_ids.windows(2).map(|p| (p[0], p[1])))
        .filter(|(a, b)| a != b)
        .collect();
    Ok(CoastlineExtract {
        nodes,
        edges,
        warnings: c.warnings,
    })
}

#[derive(Serialize)]
struct OutDocument<'a> {
    version: f64,
    generator: &'static str,
    elements: Vec<OutElement<'a>>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum OutElement<'a> {
    Way {
        id: OsmId,
        nodes: &'a [OsmId],
        tags: &'a BTreeMap<String, String>,
    },
    Node {
        id: OsmId,
        lat: f64,
        lon: f64,
    },
}

/// Writes nodes and ways in Overpass JSON layout (ways first, then nodes).
pub fn write_overpass_json<W: Write>(writer: W, nodes: &[OsmNode], ways: &[OsmWay]) -> serde_json::Result<()> {
    let elements = ways
        .iter()
        .map(|w| OutElement::Way {
            id: w.id,
            nodes: &w.node_ids,
            tags: &w.tags,
        })
        .chain(nodes.iter().map(|n| OutElement::Node {
            id: n.id,
            lat: n.pos.lat,
            lon: n.pos.lon,
        }))
        .collect();
    serde_json::to_writer(
        writer,
        &OutDocument {
            version: 0.6,
            generator: "coverage-core",
            elements,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(elements: &str) -> String {
        format!(r#"{{"version":0.6,"generator":"Overpass API","osm3s":{{"copyright":"x"}},"elements":[{elements}]}}"#)
    }

    fn node(id: i64, lon: f64, lat: f64) -> String {
        format!(r#"{{"type":"node","id":{id},"lat":{lat},"lon":{lon}}}"#)
    }

    fn way(id: i64, nodes: &[i64], tags: &[(&str, &str)]) -> String {
        let tags: Vec<String> = tags.iter().map(|(k, v)| format!(r#""{k}":"{v}""#)).collect();
        format!(
            r#"{{"type":"way","id":{id},"nodes":{nodes:?},"tags":{{{}}}}}"#,
            tags.join(",")
        )
    }

    fn three_nodes() -> String {
        [node(1, 6.0, 62.0), node(2, 6.001, 62.0), node(3, 6.002, 62.0)].join(",")
    }

    #[test]
    fn residential_way() {
        let json = doc(&format!(
            "{},{}",
            way(10, &[1, 2, 3], &[("highway", "residential")]),
            three_nodes()
        ));
        let out = parse_overpass_highways(json.as_bytes()).unwrap();
        assert_eq!(out.nodes.len(), 3);
        assert_eq!(out.ways.len(), 1);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn footway_is_excluded() {
        let json = doc(&format!(
            "{},{}",
            way(10, &[1, 2, 3], &[("highway", "footway")]),
            three_nodes()
        ));
        let out = parse_overpass_highways(json.as_bytes()).unwrap();
        assert!(out.ways.is_empty());
        assert!(out.nodes.is_empty());
    }

    #[test]
    fn parking_aisle_is_excluded() {
        let json = doc(&format!(
            "{},{},{}",
            way(10, &[1, 2], &[("highway", "service"), ("service", "parking_aisle")]),
            way(11, &[2, 3], &[("highway", "service"), ("service", "driveway")]),
            three_nodes()
        ));
        let out = parse_overpass_highways(json.as_bytes()).unwrap();
        assert_eq!(out.ways.len(), 1);
        assert_eq!(out.ways[0].id, 11);
    }

    #[test]
    fn missing_node_drops_way_with_warning() {
        let json = doc(&format!(
            "{},{},{}",
            way(10, &[1, 2, 99], &[("highway", "primary")]),
            way(11, &[1, 2], &[("highway", "primary")]),
            three_nodes()
        ));
        let out = parse_overpass_highways(json.as_bytes()).unwrap();
        assert_eq!(out.ways.len(), 1);
        assert_eq!(out.nodes.len(), 2);
        assert_eq!(out.warnings, vec![IngestWarning::MissingNode { way: 10, node: 99 }]);
    }

    #[test]
    fn unknown_highway_warns() {
        let json = doc(&format!(
            "{},{}",
            way(10, &[1, 2], &[("highway", "motorway")]),
            three_nodes()
        ));
        let out = parse_overpass_highways(json.as_bytes()).unwrap();
        assert!(out.ways.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let json = r#"{"elements":[{"type":"node","id":1,"lat":62.0,"lon":6.0},{"type":"way" "id":2}]}"#;
        match parse_overpass_highways(json.as_bytes()) {
            Err(IngestError::Json {
                offset, line, column, ..
            }) => {
                assert_eq!(line, 1);
                assert!(column > 50);
                assert!(offset >= 60 && offset <= json.len() as u64, "{offset}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_elements_is_an_error() {
        assert!(matches!(
            parse_overpass_highways(r#"{"version":0.6}"#.as_bytes()),
            Err(IngestError::Json { .. })
        ));
    }

    #[test]
    fn coastline_edges() {
        let json = doc(&format!(
            "{},{},{}",
            way(5, &[1, 2, 3, 4], &[("natural", "coastline")]),
            three_nodes(),
            node(4, 6.0, 62.001)
        ));
        let out = parse_overpass_coastline(json.as_bytes()).unwrap();
        assert_eq!(out.edges, vec![(1, 2), (2, 3), (3, 4)]);
        assert_eq!(out.nodes.len(), 4);
    }

    #[test]
    fn coastline_ignores_highways() {
        let json = doc(&format!(
            "{},{}",
            way(10, &[1, 2, 3], &[("highway", "primary")]),
            three_nodes()
        ));
        let out = parse_overpass_coastline(json.as_bytes()).unwrap();
        assert!(out.edges.is_empty() && out.nodes.is_empty());
    }

    #[test]
    fn mixed_fixture_keeps_only_coastline() {
        // 2 coastline ways (3 + 2 nodes, one shared) and a highway and a
        // tagged POI node: 3 edges and 4 nodes survive.
        let json = doc(&format!(
            "{},{},{},{},{},{}",
            way(5, &[1, 2, 3], &[("natural", "coastline")]),
            way(6, &[3, 4], &[("natural", "coastline")]),
            way(7, &[4, 5], &[("highway", "primary")]),
            three_nodes(),
            node(4, 6.0, 62.001),
            r#"{"type":"node","id":5,"lat":62.002,"lon":6.0,"tags":{"amenity":"fire_station"}}"#
        ));
        let out = parse_overpass_coastline(json.as_bytes()).unwrap();
        assert_eq!(out.edges.len(), 3);
        assert_eq!(out.nodes.iter().map(|n| n.id).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    fn arb_way_set() -> impl Strategy<Value = (Vec<OsmNode>, Vec<OsmWay>)> {
        let classes = prop::sample::select(vec![
            "residential",
            "footway",
            "track",
            "service",
            "primary",
            "steps",
            "unclassified",
        ]);
        prop::collection::vec((classes, prop::collection::vec(0i64..20, 2..6), any::<bool>()), 0..12).prop_map(
            |specs| {
                let nodes: Vec<OsmNode> = (0..20)
                    .map(|i| OsmNode {
                        id: i,
                        pos: LonLat::new(6.0 + i as f64 * 1e-3, 62.0).unwrap(),
                    })
                    .collect();
                let ways = specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (class, refs, parking))| {
                        let mut tags = BTreeMap::new();
                        tags.insert("highway".to_string(), class.to_string());
                        if parking {
                            tags.insert("service".to_string(), "parking_aisle".to_string());
                        }
                        OsmWay {
                            id: 1000 + i as i64,
                            node_ids: refs,
                            tags,
                        }
                    })
                    .collect();
                (nodes, ways)
            },
        )
    }

    proptest! {
        #[test]
        fn reserialization_is_lossless((nodes, ways) in arb_way_set()) {
            let mut buf = Vec::new();
            write_overpass_json(&mut buf, &nodes, &ways).unwrap();
            let first = parse_overpass_highways(buf.as_slice()).unwrap();

            let expected: Vec<i64> = ways
                .iter()
                .filter(|w| {
                    let class = HighwayClass::from_tag(w.tag("highway").unwrap()).unwrap();
                    class.included() && !(class == HighwayClass::Service && w.tag("service") == Some("parking_aisle"))
                })
                .map(|w| w.id)
                .collect();
            prop_assert_eq!(first.ways.iter().map(|w| w.id).collect::<Vec<_>>(), expected);

            let mut again = Vec::new();
            write_overpass_json(&mut again, &first.nodes, &first.ways).unwrap();
            let second = parse_overpass_highways(again.as_slice()).unwrap();
            prop_assert_eq!(&first.ways, &second.ways);
            prop_assert_eq!(&first.nodes, &second.nodes);
        }
    }
}
