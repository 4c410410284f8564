//! OpenStreetMap ingest: Overpass JSON parsing, highway classification,
//! cropping to the service region, land-mask construction and the CSV
//! inputs (stations, critical locations, incidents, region outline).

mod crop;
mod landmask;
mod overpass;
mod tables;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LonLat;

pub use crop::crop_highways;
pub use landmask::{build_land_mask, LandMask, DEFAULT_MIN_ISLAND_AREA_M2};
pub use overpass::{
    parse_overpass_coastline, parse_overpass_highways, write_overpass_json, CoastlineExtract, HighwayExtract,
};
pub use tables::{
    load_critical_csv, load_incidents_csv, load_region_csv, load_stations_csv, CriticalLocation, IncidentRecord,
    StaffingMode, StationRecord,
};

pub type OsmId = i64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmNode {
    pub id: OsmId,
    pub pos: LonLat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmWay {
    pub id: OsmId,
    pub node_ids: Vec<OsmId>,
    pub tags: BTreeMap<String, String>,
}

impl OsmWay {
    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    /// True for the usual affirmative tag values (`yes`, `true`, `1`).
    pub fn tag_is_yes(&self, key: &str) -> bool {
        matches!(self.tag(key), Some("yes" | "true" | "1"))
    }
}

/// The highway types found in the region, with inclusion flags and default
/// speeds in km/h.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighwayClass {
    Construction,
    Cycleway,
    Footway,
    LivingStreet,
    Path,
    Pedestrian,
    Platform,
    Primary,
    PrimaryLink,
    Proposed,
    Raceway,
    Residential,
    Secondary,
    SecondaryLink,
    Service,
    Steps,
    Trunk,
    TrunkLink,
    Track,
    Tertiary,
    Unclassified,
}

impl HighwayClass {
    pub const ALL: [HighwayClass; 21] = [
        Self::Construction,
        Self::Cycleway,
        Self::Footway,
        Self::LivingStreet,
        Self::Path,
        Self::Pedestrian,
        Self::Platform,
        Self::Primary,
        Self::PrimaryLink,
        Self::Proposed,
        Self::Raceway,
        Self::Residential,
        Self::Secondary,
        Self::SecondaryLink,
        Self::Service,
        Self::Steps,
        Self::Trunk,
        Self::TrunkLink,
        Self::Track,
        Self::Tertiary,
        Self::Unclassified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Construction => "construction",
            Self::Cycleway => "cycleway",
            Self::Footway => "footway",
            Self::LivingStreet => "living_street",
            Self::Path => "path",
            Self::Pedestrian => "pedestrian",
            Self::Platform => "platform",
            Self::Primary => "primary",
            Self::PrimaryLink => "primary_link",
            Self::Proposed => "proposed",
            Self::Raceway => "raceway",
            Self::Residential => "residential",
            Self::Secondary => "secondary",
            Self::SecondaryLink => "secondary_link",
            Self::Service => "service",
            Self::Steps => "steps",
            Self::Trunk => "trunk",
            Self::TrunkLink => "trunk_link",
            Self::Track => "track",
            Self::Tertiary => "tertiary",
            Self::Unclassified => "unclassified",
        }
    }

    pub fn from_tag(value: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == value)
    }

    /// Default speed when a way carries no usable `maxspeed`; `None` for
    /// excluded classes.
    pub fn default_speed_kmh(self) -> Option<f64> {
        let v = match self {
            Self::LivingStreet
            | Self::Primary
            | Self::PrimaryLink
            | Self::Raceway
            | Self::Secondary
            | Self::SecondaryLink
            | Self::Trunk
            | Self::TrunkLink
            | Self::Tertiary
            | Self::Unclassified => 50.0,
            Self::Residential => 20.0,
            Self::Service => 10.0,
            Self::Track => 5.0,
            Self::Construction
            | Self::Cycleway
            | Self::Footway
            | Self::Path
            | Self::Pedestrian
            | Self::Platform
            | Self::Proposed
            | Self::Steps => return None,
        };
        Some(v)
    }

    pub fn included(self) -> bool {
        self.default_speed_kmh().is_some()
    }
}

impl fmt::Display for HighwayClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-fatal problems found while ingesting data.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestWarning {
    #[error("way {way} references missing node {node}; way dropped")]
    MissingNode { way: OsmId, node: OsmId },
    #[error("way {way} has fewer than 2 node refs; way dropped")]
    TooFewNodes { way: OsmId },
    #[error("way {way} has unknown highway type {value:?}; way dropped")]
    UnknownHighway { way: OsmId, value: String },
    #[error("way {way} has unusable maxspeed {value:?}; using class default")]
    BadMaxspeed { way: OsmId, value: String },
    #[error("coastline chain starting at node {start} cannot be closed; chain dropped")]
    UnclosableChain { start: OsmId },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON parse error at byte {offset} (line {line}, column {column}): {message}")]
    Json {
        offset: u64,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}: row {row}, column {column:?}: {message}")]
    Field {
        path: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}
