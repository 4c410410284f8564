//! CSV inputs. Columns are located by header name (case-insensitive), so
//! extra columns such as `city`, `street` or `osm_id` are ignored.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::geo::{utm_to_lonlat, LonLat, RegionPolygon, UtmCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaffingMode {
    FullTime,
    PartTime,
}

impl StaffingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "full_time" | "fulltime" | "full" => Some(Self::FullTime),
            "part_time" | "parttime" | "part" => Some(Self::PartTime),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FullTime => "full_time",
            Self::PartTime => "part_time",
        }
    }

    pub fn toggled(self) -> Self {
        match self {
            Self::FullTime => Self::PartTime,
            Self::PartTime => Self::FullTime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub name: String,
    pub pos: LonLat,
    pub mode: StaffingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalLocation {
    pub name: String,
    pub pos: LonLat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub pos: LonLat,
    pub response_minutes: f64,
}

struct Table {
    source: String,
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read<R: Read>(reader: R, source: &str) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let csv_err = |e: csv::Error| IngestError::Invalid {
            path: source.to_owned(),
            message: e.to_string(),
        };
        let columns = rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim_start_matches('\u{feff}').to_ascii_lowercase(), i))
            .collect();
        let rows = rdr.records().collect::<Result<Vec<_>, _>>().map_err(csv_err)?;
        Ok(Self {
            source: source.to_owned(),
            columns,
            rows,
        })
    }

    fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    fn column(&self, name: &str) -> Result<usize, IngestError> {
        self.columns
            .get(name)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn {
                path: self.source.clone(),
                column: name.to_owned(),
            })
    }

    fn field_error(&self, row: usize, column: &str, message: impl Into<String>) -> IngestError {
        IngestError::Field {
            path: self.source.clone(),
            row: row + 1,
            column: column.to_owned(),
            message: message.into(),
        }
    }

    fn text(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("")
    }

    fn number(&self, row: usize, name: &str) -> Result<f64, IngestError> {
        let raw = self.text(row, self.column(name)?);
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.field_error(row, name, format!("not a number: {raw:?}")))
    }

    fn lonlat(&self, row: usize) -> Result<LonLat, IngestError> {
        let lon = self.number(row, "lon")?;
        let lat = self.number(row, "lat")?;
        LonLat::new(lon, lat).map_err(|e| self.field_error(row, "lat", e.to_string()))
    }
}

pub fn read_stations<R: Read>(reader: R, source: &str) -> Result<Vec<StationRecord>, IngestError> {
    let t = Table::read(reader, source)?;
    let name_col = t.column("name")?;
    t.column("lon")?;
    t.column("lat")?;
    let mode_col = t.has("mode").then(|| t.column("mode")).transpose()?;
    (0..t.rows.len())
        .map(|row| {
            let mode = match mode_col.map(|c| t.text(row, c)) {
                None | Some("") => StaffingMode::PartTime,
                Some(raw) => StaffingMode::parse(raw)
                    .ok_or_else(|| t.field_error(row, "mode", format!("unknown staffing mode {raw:?}")))?,
            };
            Ok(StationRecord {
                name: t.text(row, name_col).to_owned(),
                pos: t.lonlat(row)?,
                mode,
            })
        })
        .collect()
}

pub fn read_critical<R: Read>(reader: R, source: &str) -> Result<Vec<CriticalLocation>, IngestError> {
    let t = Table::read(reader, source)?;
    let name_col = t.column("name")?;
    t.column("lon")?;
    t.column("lat")?;
    (0..t.rows.len())
        .map(|row| {
            Ok(CriticalLocation {
                name: t.text(row, name_col).to_owned(),
                pos: t.lonlat(row)?,
            })
        })
        .collect()
}

pub fn read_incidents<R: Read>(reader: R, source: &str) -> Result<Vec<IncidentRecord>, IngestError> {
    let t = Table::read(reader, source)?;
    t.column("lon")?;
    t.column("lat")?;
    t.column("response_minutes")?;
    (0..t.rows.len())
        .map(|row| {
            let minutes = t.number(row, "response_minutes")?;
            if minutes <= 0.0 {
                return Err(t.field_error(row, "response_minutes", "response time must be positive"));
            }
            Ok(IncidentRecord {
                pos: t.lonlat(row)?,
                response_minutes: minutes,
            })
        })
        .collect()
}

/// Region outline as `lon,lat` vertices, or UTM zone 32N `easting,northing`.
pub fn read_region<R: Read>(reader: R, source: &str) -> Result<RegionPolygon, IngestError> {
    let t = Table::read(reader, source)?;
    let utm = !t.has("lon") && t.has("easting");
    let vertices = (0..t.rows.len())
        .map(|row| {
            if utm {
                let u = UtmCoord::zone32n(t.number(row, "easting")?, t.number(row, "northing")?);
                utm_to_lonlat(u).map_err(|e| t.field_error(row, "easting", e.to_string()))
            } else {
                t.lonlat(row)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    RegionPolygon::new(vertices).map_err(|e| IngestError::Invalid {
        path: source.to_owned(),
        message: e.to_string(),
    })
}

pub fn load_stations_csv(path: &Path) -> Result<Vec<StationRecord>, IngestError> {
    read_stations(open(path)?, &path.display().to_string())
}

pub fn load_critical_csv(path: &Path) -> Result<Vec<CriticalLocation>, IngestError> {
    read_critical(open(path)?, &path.display().to_string())
}

pub fn load_incidents_csv(path: &Path) -> Result<Vec<IncidentRecord>, IngestError> {
    read_incidents(open(path)?, &path.display().to_string())
}

pub fn load_region_csv(path: &Path) -> Result<RegionPolygon, IngestError> {
    read_region(open(path)?, &path.display().to_string())
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}
