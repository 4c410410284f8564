//! Response-time planning engine for fire-service coverage: OSM ingestion,
//! road-graph construction, one-to-all routing, what-if scenarios and
//! calibration against historical incidents.

pub mod cache;
pub mod calibration;
pub mod export;
pub mod geo;
pub mod graph;
pub mod osm;
pub mod pipeline;
pub mod routing;
pub mod scenario;
pub mod synthetic;

pub use geo::{
    haversine_distance, haversine_project, point_in_polygon, utm_to_lonlat, LocalXY, LonLat, RegionPolygon, UtmCoord,
};
pub use graph::{build_graph, BuildOptions, Edge, NodeIndex, RoadGraph};
pub use routing::{
    combine_fields, compute_fields, dijkstra_one_to_all, station_areas, CombinedField, TravelTimeField, Weight,
};
