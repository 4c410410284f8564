//! Binary caches for the built graph and per-station travel-time fields.
//!
//! Both formats are little-endian: an 8-byte magic, a `u32` version, the
//! payload, and a trailing SHA-256 of everything before it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::{LocalXY, LonLat};
use crate::graph::{Edge, GraphNode, NodeIndex, RoadGraph};
use crate::routing::{TravelTimeField, Weight};

const GRAPH_MAGIC: &[u8; 8] = b"CVGRAPH\0";
const FIELD_MAGIC: &[u8; 8] = b"CVFIELD\0";
pub const GRAPH_CACHE_VERSION: u32 = 1;
pub const FIELD_CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a {expected} cache file")]
    BadMagic { expected: &'static str },
    #[error("unsupported cache version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("cache checksum mismatch; the file is corrupt")]
    Checksum,
    #[error("field cache was built for a different graph")]
    GraphMismatch,
    #[error("corrupt cache: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for CacheError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CacheError::Corrupt("truncated".into())
        } else {
            CacheError::Io {
                path: String::new(),
                source: e,
            }
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(CacheError) -> CacheError + '_ {
    move |e| match e {
        CacheError::Io { source, .. } => CacheError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    }
}

pub(crate) fn encode_graph_body(g: &RoadGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + g.node_count() * 40 + g.edge_count() * 33);
    let w = &mut out;
    w.write_u64::<LE>(g.node_count() as u64).unwrap();
    w.write_u64::<LE>(g.edge_count() as u64).unwrap();
    w.write_f64::<LE>(g.local_origin().lon).unwrap();
    w.write_f64::<LE>(g.local_origin().lat).unwrap();
    for n in g.nodes() {
        w.write_i64::<LE>(n.osm_id).unwrap();
        w.write_f64::<LE>(n.pos.lon).unwrap();
        w.write_f64::<LE>(n.pos.lat).unwrap();
        w.write_f64::<LE>(n.local.x).unwrap();
        w.write_f64::<LE>(n.local.y).unwrap();
    }
    for e in g.edges() {
        w.write_u32::<LE>(e.from.0).unwrap();
        w.write_u32::<LE>(e.to.0).unwrap();
        w.write_f64::<LE>(e.length_m).unwrap();
        w.write_f64::<LE>(e.speed_kmh).unwrap();
        w.write_f64::<LE>(e.travel_time_s).unwrap();
        w.write_u8(u8::from(e.is_tunnel) | (u8::from(e.is_bridge) << 1))
            .unwrap();
    }
    out
}

fn decode_graph_body(body: &[u8]) -> Result<RoadGraph, CacheError> {
    let mut r = Cursor::new(body);
    let n = r.read_u64::<LE>()? as usize;
    let m = r.read_u64::<LE>()? as usize;
    if n.saturating_mul(40).saturating_add(m.saturating_mul(33)) > body.len() {
        return Err(CacheError::Corrupt("declared sizes exceed payload".into()));
    }
    let origin = LonLat {
        lon: r.read_f64::<LE>()?,
        lat: r.read_f64::<LE>()?,
    };
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        nodes.push(GraphNode {
            osm_id: r.read_i64::<LE>()?,
            pos: LonLat {
                lon: r.read_f64::<LE>()?,
                lat: r.read_f64::<LE>()?,
            },
            local: LocalXY {
                x: r.read_f64::<LE>()?,
                y: r.read_f64::<LE>()?,
            },
        });
    }
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let from = NodeIndex(r.read_u32::<LE>()?);
        let to = NodeIndex(r.read_u32::<LE>()?);
        let length_m = r.read_f64::<LE>()?;
        let speed_kmh = r.read_f64::<LE>()?;
        let travel_time_s = r.read_f64::<LE>()?;
        let flags = r.read_u8()?;
        edges.push(Edge {
            from,
            to,
            length_m,
            speed_kmh,
            travel_time_s,
            is_tunnel: flags & 1 != 0,
            is_bridge: flags & 2 != 0,
        });
    }
    if r.position() as usize != body.len() {
        return Err(CacheError::Corrupt("trailing bytes after edges".into()));
    }
    RoadGraph::from_parts(nodes, edges, origin).map_err(|e| CacheError::Corrupt(e.to_string()))
}

/// Splits `magic | version | payload | sha256` after verifying all three.
fn unwrap_envelope<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    expected_version: u32,
    kind: &'static str,
) -> Result<&'a [u8], CacheError> {
    if bytes.len() < 12 + 32 || &bytes[..8] != magic {
        return Err(CacheError::BadMagic { expected: kind });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != expected_version {
        return Err(CacheError::Version {
            found: version,
            expected: expected_version,
        });
    }
    let (content, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(content).as_slice() != digest {
        return Err(CacheError::Checksum);
    }
    Ok(&content[12..])
}

fn write_envelope<W: Write>(mut w: W, magic: &[u8; 8], version: u32, payload: &[u8]) -> std::io::Result<()> {
    let mut h = Sha256::new();
    let mut header = Vec::with_capacity(12);
    header.extend_from_slice(magic);
    header.extend_from_slice(&version.to_le_bytes());
    h.update(&header);
    h.update(payload);
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.write_all(&h.finalize())?;
    w.flush()
}

pub fn write_graph<W: Write>(w: W, g: &RoadGraph) -> Result<(), CacheError> {
    Ok(write_envelope(
        w,
        GRAPH_MAGIC,
        GRAPH_CACHE_VERSION,
        &encode_graph_body(g),
    )?)
}

pub fn read_graph<R: Read>(mut r: R) -> Result<RoadGraph, CacheError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_graph_body(unwrap_envelope(&bytes, GRAPH_MAGIC, GRAPH_CACHE_VERSION, "graph")?)
}

pub fn save_graph(path: &Path, g: &RoadGraph) -> Result<(), CacheError> {
    let f = File::create(path).map_err(CacheError::from).map_err(with_path(path))?;
    write_graph(BufWriter::new(f), g).map_err(with_path(path))
}

pub fn load_graph(path: &Path) -> Result<RoadGraph, CacheError> {
    let f = File::open(path).map_err(CacheError::from).map_err(with_path(path))?;
    read_graph(BufReader::new(f)).map_err(with_path(path))
}

/// Field cache payload: graph checksum, weight tag, field count, node count,
/// then per field its source index and node values. Unreachable nodes are
/// stored as `f64::INFINITY`.
pub fn write_fields<W: Write>(
    w: W,
    graph_checksum: &[u8; 32],
    fields: &[Arc<TravelTimeField>],
) -> Result<(), CacheError> {
    let nodes = fields.first().map_or(0, |f| f.values().len());
    let mut p = Vec::with_capacity(48 + fields.len() * (4 + nodes * 8));
    p.extend_from_slice(graph_checksum);
    let weight = fields.first().map_or(Weight::Time, |f| f.weight());
    p.write_u8(weight as u8)?;
    p.write_u32::<LE>(fields.len() as u32)?;
    p.write_u64::<LE>(nodes as u64)?;
    for f in fields {
        if f.values().len() != nodes || f.weight() != weight {
            return Err(CacheError::Corrupt("fields differ in size or weight".into()));
        }
        p.write_u32::<LE>(f.source().0)?;
        for &v in f.values() {
            p.write_f64::<LE>(v)?;
        }
    }
    Ok(write_envelope(w, FIELD_MAGIC, FIELD_CACHE_VERSION, &p)?)
}

pub fn read_fields<R: Read>(mut r: R, graph_checksum: &[u8; 32]) -> Result<Vec<Arc<TravelTimeField>>, CacheError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let payload = unwrap_envelope(&bytes, FIELD_MAGIC, FIELD_CACHE_VERSION, "field")?;
    if payload.len() < 32 || &payload[..32] != graph_checksum {
        return Err(CacheError::GraphMismatch);
    }
    let mut r = Cursor::new(&payload[32..]);
    let weight = match r.read_u8()? {
        0 => Weight::Time,
        1 => Weight::Distance,
        t => return Err(CacheError::Corrupt(format!("unknown weight tag {t}"))),
    };
    let count = r.read_u32::<LE>()? as usize;
    let nodes = r.read_u64::<LE>()? as usize;
    if count.saturating_mul(nodes.saturating_mul(8).saturating_add(4)) > payload.len() {
        return Err(CacheError::Corrupt("declared sizes exceed payload".into()));
    }
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        let source = NodeIndex(r.read_u32::<LE>()?);
        let mut values = vec![0.0; nodes];
        r.read_f64_into::<LE>(&mut values)?;
        let field =
            TravelTimeField::from_values(source, weight, values).map_err(|e| CacheError::Corrupt(e.to_string()))?;
        fields.push(Arc::new(field));
    }
    if r.position() as usize != payload.len() - 32 {
        return Err(CacheError::Corrupt("trailing bytes after fields".into()));
    }
    Ok(fields)
}

pub fn save_fields(path: &Path, graph_checksum: &[u8; 32], fields: &[Arc<TravelTimeField>]) -> Result<(), CacheError> {
    let f = File::create(path).map_err(CacheError::from).map_err(with_path(path))?;
    write_fields(BufWriter::new(f), graph_checksum, fields).map_err(with_path(path))
}

pub fn load_fields(path: &Path, graph_checksum: &[u8; 32]) -> Result<Vec<Arc<TravelTimeField>>, CacheError> {
    let f = File::open(path).map_err(CacheError::from).map_err(with_path(path))?;
    read_fields(BufReader::new(f), graph_checksum).map_err(with_path(path))
}
