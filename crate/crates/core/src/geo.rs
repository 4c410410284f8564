//! Coordinate handling: great-circle distances, the local metric projection
//! used for plotting and spatial indexing, inverse UTM for zone 32N, and
//! point-in-polygon tests for cropping to a service region.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean of the WGS84 equatorial and polar radii, in metres.
pub const EARTH_RADIUS_M: f64 = (6378137.0 + 6356752.0) / 2.0;

/// The only UTM zone accepted by [`utm_to_lonlat`].
pub const SUPPORTED_UTM_ZONE: u8 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lon={lon}, lat={lat}")]
    OutOfRange { lon: f64, lat: f64 },
    #[error("unsupported UTM zone {zone}{hemisphere} (only 32N is supported)")]
    UnsupportedZone { zone: u8, hemisphere: char },
    #[error("invalid UTM coordinate: easting={easting}, northing={northing}")]
    InvalidUtm { easting: f64, northing: f64 },
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
}

/// Longitude/latitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    /// Checked constructor; rejects non-finite or out-of-range values.
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        let ok = lon.is_finite() && lat.is_finite() && (-180.0..=180.0).contains(&lon) && (-90.0..=90.0).contains(&lat);
        if ok {
            Ok(Self { lon, lat })
        } else {
            Err(GeoError::OutOfRange { lon, lat })
        }
    }
}

/// Metres east (`x`) and north (`y`) of a local origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalXY {
    pub x: f64,
    pub y: f64,
}

impl LocalXY {
    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmCoord {
    pub easting: f64,
    pub northing: f64,
    pub zone: u8,
    pub north: bool,
}

impl UtmCoord {
    pub fn zone32n(easting: f64, northing: f64) -> Self {
        Self {
            easting,
            northing,
            zone: SUPPORTED_UTM_ZONE,
            north: true,
        }
    }
}

/// A single closed ring; the last vertex is implicitly joined to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPolygon {
    vertices: Vec<LonLat>,
}

impl RegionPolygon {
    /// Builds a polygon, dropping a repeated closing vertex if present.
    pub fn new(mut vertices: Vec<LonLat>) -> Result<Self, GeoError> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(GeoError::DegeneratePolygon(vertices.len()));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[LonLat] {
        &self.vertices
    }

    /// Signed shoelace area in squared degrees; positive for counter-clockwise rings.
    pub fn signed_area_deg2(&self) -> f64 {
        signed_area(&self.vertices, |p| (p.lon, p.lat))
    }

    /// The same ring, oriented counter-clockwise in the lon/lat plane.
    pub fn to_ccw(&self) -> Self {
        let mut vertices = self.vertices.clone();
        if self.signed_area_deg2() < 0.0 {
            vertices.reverse();
        }
        Self { vertices }
    }

    /// Bounding box as `(min_lon, min_lat, max_lon, max_lat)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        bbox_of(self.vertices.iter().copied())
    }

    pub fn contains(&self, p: LonLat) -> bool {
        point_in_polygon(p, self)
    }
}

pub(crate) fn bbox_of(points: impl Iterator<Item = LonLat>) -> (f64, f64, f64, f64) {
    points.fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.lon), b.min(p.lat), c.max(p.lon), d.max(p.lat)),
    )
}

pub(crate) fn signed_area<T>(ring: &[T], xy: impl Fn(&T) -> (f64, f64)) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = xy(&ring[i]);
        let (x1, y1) = xy(&ring[(i + 1) % n]);
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Haversine central angle and initial bearing from `a` to `b`, both in radians.
fn central_angle_and_bearing(a: LonLat, b: LonLat) -> (f64, f64) {
    let lat0 = a.lat.to_radians();
    let lat1 = b.lat.to_radians();
    let d_lat = lat1 - lat0;
    let d_lon = (b.lon - a.lon).to_radians();

    let h = (d_lat / 2.0).sin().powi(2) + lat0.cos() * lat1.cos() * (d_lon / 2.0).sin().powi(2);
    let c = 2.0 * h.sqrt().atan2((1.0 - h).sqrt());
    let bearing = (d_lon.sin() * lat1.cos()).atan2(lat0.cos() * lat1.sin() - lat0.sin() * lat1.cos() * d_lon.cos());
    (c, bearing)
}

/// Great-circle distance in metres on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_distance(a: LonLat, b: LonLat) -> f64 {
    EARTH_RADIUS_M * central_angle_and_bearing(a, b).0
}

/// Projects `p` to metres relative to `origin`.
///
/// The point is placed at its great-circle distance from the origin along its
/// initial bearing, so `|xy|` is exactly the haversine distance. The compass
/// bearing (clockwise from north) is turned into a mathematical angle
/// (counter-clockwise from east) before the polar-to-cartesian step.
pub fn haversine_project(origin: LonLat, p: LonLat) -> LocalXY {
    let (c, bearing) = central_angle_and_bearing(origin, p);
    let distance = EARTH_RADIUS_M * c;
    let theta = 2.0 * PI - bearing + PI / 2.0;
    LocalXY {
        x: distance * theta.cos(),
        y: distance * theta.sin(),
    }
}

// WGS84
const WGS84_A: f64 = 6378137.0;
const WGS84_F: f64 = 1.0 / 298.257223563;
const UTM_K0: f64 = 0.9996;
const UTM_FALSE_EASTING: f64 = 500000.0;

/// Inverse transverse Mercator (Krüger n-series to sixth order) for UTM zone 32N.
pub fn utm_to_lonlat(u: UtmCoord) -> Result<LonLat, GeoError> {
    if u.zone != SUPPORTED_UTM_ZONE || !u.north {
        return Err(GeoError::UnsupportedZone {
            zone: u.zone,
            hemisphere: if u.north { 'N' } else { 'S' },
        });
    }
    if !(u.easting.is_finite() && u.northing.is_finite()) || u.easting <= 0.0 || u.northing <= 0.0 {
        return Err(GeoError::InvalidUtm {
            easting: u.easting,
            northing: u.northing,
        });
    }

    let n = WGS84_F / (2.0 - WGS84_F);
    let n2 = n * n;
    let n3 = n2 * n;
    let n4 = n3 * n;
    let n5 = n4 * n;
    let n6 = n5 * n;
    let rectifying_radius = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
    let beta = [
        n / 2.0 - 2.0 / 3.0 * n2 + 37.0 / 96.0 * n3 - n4 / 360.0 - 81.0 / 512.0 * n5 + 96199.0 / 604800.0 * n6,
        n2 / 48.0 + n3 / 15.0 - 437.0 / 1440.0 * n4 + 46.0 / 105.0 * n5 - 1118711.0 / 3870720.0 * n6,
        17.0 / 480.0 * n3 - 37.0 / 840.0 * n4 - 209.0 / 4480.0 * n5 + 5569.0 / 90720.0 * n6,
        4397.0 / 161280.0 * n4 - 11.0 / 504.0 * n5 - 830251.0 / 7257600.0 * n6,
        4583.0 / 161280.0 * n5 - 108847.0 / 3991680.0 * n6,
        20648693.0 / 638668800.0 * n6,
    ];

    let xi = u.northing / (UTM_K0 * rectifying_radius);
    let eta = (u.easting - UTM_FALSE_EASTING) / (UTM_K0 * rectifying_radius);

    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in beta.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }

    let sinh_eta = eta_p.sinh();
    let tau_conformal = xi_p.sin() / (sinh_eta * sinh_eta + xi_p.cos().powi(2)).sqrt();
    let d_lon = sinh_eta.atan2(xi_p.cos());

    let e2 = WGS84_F * (2.0 - WGS84_F);
    let e = e2.sqrt();
    let mut tau = tau_conformal;
    for _ in 0..8 {
        let sigma = (e * (e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
        let tau_i = tau * (1.0 + sigma * sigma).sqrt() - sigma * (1.0 + tau * tau).sqrt();
        let step = (tau_conformal - tau_i) / (1.0 + tau_i * tau_i).sqrt() * (1.0 + (1.0 - e2) * tau * tau)
            / ((1.0 - e2) * (1.0 + tau * tau).sqrt());
        tau += step;
        if step.abs() < 1e-14 {
            break;
        }
    }

    let central_meridian = (f64::from(u.zone) - 1.0) * 6.0 - 180.0 + 3.0;
    LonLat::new(central_meridian + d_lon.to_degrees(), tau.atan().to_degrees())
}

/// Even-odd point-in-polygon test in the lon/lat plane.
///
/// Points on an edge or vertex are reported as inside.
pub fn point_in_polygon(p: LonLat, poly: &RegionPolygon) -> bool {
    let v = poly.vertices();
    let n = v.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[j], v[i]);
        if on_segment(p, a, b) {
            return true;
        }
        if (b.lat > p.lat) != (a.lat > p.lat) {
            let x = b.lon + (p.lat - b.lat) * (a.lon - b.lon) / (a.lat - b.lat);
            if p.lon < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn on_segment(p: LonLat, a: LonLat, b: LonLat) -> bool {
    let cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
    let scale = (b.lon - a.lon).abs().max((b.lat - a.lat).abs()).max(1e-300);
    if cross.abs() > 1e-12 * scale {
        return false;
    }
    p.lon >= a.lon.min(b.lon) && p.lon <= a.lon.max(b.lon) && p.lat >= a.lat.min(b.lat) && p.lat <= a.lat.max(b.lat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ll(lon: f64, lat: f64) -> LonLat {
        LonLat::new(lon, lat).unwrap()
    }

    /// Forward transverse Mercator (Snyder's series), used only as an
    /// independent oracle for the inverse.
    fn snyder_forward_zone32(p: LonLat) -> (f64, f64) {
        let a = WGS84_A;
        let e2 = WGS84_F * (2.0 - WGS84_F);
        let ep2 = e2 / (1.0 - e2);
        let phi = p.lat.to_radians();
        let lam0 = 9.0_f64.to_radians();
        let nn = a / (1.0 - e2 * phi.sin().powi(2)).sqrt();
        let t = phi.tan().powi(2);
        let c = ep2 * phi.cos().powi(2);
        let aa = (p.lon.to_radians() - lam0) * phi.cos();
        let e4 = e2 * e2;
        let e6 = e4 * e2;
        let m = a
            * ((1.0 - e2 / 4.0 - 3.0 * e4 / 64.0 - 5.0 * e6 / 256.0) * phi
                - (3.0 * e2 / 8.0 + 3.0 * e4 / 32.0 + 45.0 * e6 / 1024.0) * (2.0 * phi).sin()
                + (15.0 * e4 / 256.0 + 45.0 * e6 / 1024.0) * (4.0 * phi).sin()
                - (35.0 * e6 / 3072.0) * (6.0 * phi).sin());
        let x = UTM_K0
            * nn
            * (aa
                + (1.0 - t + c) * aa.powi(3) / 6.0
                + (5.0 - 18.0 * t + t * t + 72.0 * c - 58.0 * ep2) * aa.powi(5) / 120.0);
        let y = UTM_K0
            * (m + nn
                * phi.tan()
                * (aa * aa / 2.0
                    + (5.0 - t + 9.0 * c + 4.0 * c * c) * aa.powi(4) / 24.0
                    + (61.0 - 58.0 * t + t * t + 600.0 * c - 330.0 * ep2) * aa.powi(6) / 720.0));
        (x + UTM_FALSE_EASTING, y)
    }

    fn winding_number(p: LonLat, poly: &RegionPolygon) -> i32 {
        let v = poly.vertices();
        let mut wn = 0;
        for i in 0..v.len() {
            let a = v[i];
            let b = v[(i + 1) % v.len()];
            let is_left = (b.lon - a.lon) * (p.lat - a.lat) - (p.lon - a.lon) * (b.lat - a.lat);
            if a.lat <= p.lat {
                if b.lat > p.lat && is_left > 0.0 {
                    wn += 1;
                }
            } else if b.lat <= p.lat && is_left < 0.0 {
                wn -= 1;
            }
        }
        wn
    }

    #[test]
    fn projecting_origin_gives_zero() {
        let o = ll(6.0, 62.5);
        let xy = haversine_project(o, o);
        assert_eq!(xy.x, 0.0);
        assert_eq!(xy.y, 0.0);
    }

    #[test]
    fn one_degree_of_latitude() {
        let xy = haversine_project(ll(6.0, 62.0), ll(6.0, 63.0));
        assert!((xy.norm() - 111132.9).abs() < 0.1, "{}", xy.norm());
        assert!(xy.x.abs() < 1e-6);
        assert!(xy.y > 0.0);
        let d = haversine_distance(ll(6.0, 62.0), ll(6.0, 63.0));
        assert!((d - EARTH_RADIUS_M * 1.0_f64.to_radians()).abs() < 1e-6);
    }

    #[test]
    fn east_offset_matches_hand_evaluation() {
        // Values from an independent evaluation of the bearing/distance formulas.
        let xy = haversine_project(ll(6.0, 62.5), ll(6.1, 62.5));
        assert!((xy.x - 5131.542878496489).abs() < 1e-6);
        assert!((xy.y - 3.972138365276221).abs() < 1e-6);
        assert!((xy.norm() - 5131.544415839273).abs() < 1e-6);
    }

    #[test]
    fn projected_norm_is_haversine_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let o = ll(6.3, 62.5);
        for _ in 0..200 {
            let p = ll(rng.random_range(5.7..7.4), rng.random_range(62.35..62.89));
            let xy = haversine_project(o, p);
            assert!((xy.norm() - haversine_distance(o, p)).abs() < 1e-6);
        }
    }

    #[test]
    fn distance_symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = ll(rng.random_range(5.7..7.4), rng.random_range(62.35..62.89));
            let b = ll(rng.random_range(5.7..7.4), rng.random_range(62.35..62.89));
            assert_eq!(haversine_distance(a, b), haversine_distance(b, a));
            assert!(haversine_distance(a, b) >= 0.0);
        }
        let a = ll(6.2, 62.47);
        assert_eq!(haversine_distance(a, a), 0.0);
    }

    proptest! {
        #[test]
        fn triangle_inequality(
            a in (5.7f64..7.4, 62.35f64..62.89),
            b in (5.7f64..7.4, 62.35f64..62.89),
            c in (5.7f64..7.4, 62.35f64..62.89),
        ) {
            let (a, b, c) = (ll(a.0, a.1), ll(b.0, b.1), ll(c.0, c.1));
            prop_assert!(haversine_distance(a, c) <= haversine_distance(a, b) + haversine_distance(b, c) + 1e-6);
        }

        #[test]
        fn utm_inverse_is_left_inverse_of_forward(lon in 6.0f64..12.0, lat in 62.0f64..63.0) {
            let p = ll(lon, lat);
            let (e, n) = snyder_forward_zone32(p);
            let q = utm_to_lonlat(UtmCoord::zone32n(e, n)).unwrap();
            prop_assert!(haversine_distance(p, q) < 0.5);
        }
    }

    #[test]
    fn utm_round_trip_within_micro_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = ll(rng.random_range(5.7..7.4), rng.random_range(62.35..62.89));
            let (e, n) = snyder_forward_zone32(p);
            let q = utm_to_lonlat(UtmCoord::zone32n(e, n)).unwrap();
            assert!(
                (p.lon - q.lon).abs() < 1e-6 && (p.lat - q.lat).abs() < 1e-6,
                "{p:?} {q:?}"
            );
        }
    }

    #[test]
    fn utm_central_meridian() {
        let p = utm_to_lonlat(UtmCoord::zone32n(500000.0, 6950000.0)).unwrap();
        assert_eq!(p.lon, 9.0);
    }

    #[test]
    fn utm_region_corner_lands_in_bbox() {
        let p = utm_to_lonlat(UtmCoord::zone32n(380927.19, 6948548.58)).unwrap();
        assert!((62.3536..=62.8871).contains(&p.lat), "{p:?}");
        assert!((5.6838..=7.3927).contains(&p.lon), "{p:?}");
        let (e, n) = snyder_forward_zone32(p);
        assert!((e - 380927.19).abs() < 0.5 && (n - 6948548.58).abs() < 0.5);
    }

    #[test]
    fn utm_rejects_other_zones() {
        let mut u = UtmCoord::zone32n(380927.19, 6948548.58);
        u.zone = 33;
        assert!(matches!(utm_to_lonlat(u), Err(GeoError::UnsupportedZone { .. })));
        u.zone = 32;
        u.north = false;
        assert!(utm_to_lonlat(u).is_err());
    }

    #[test]
    fn square_centroid_and_outside() {
        let sq = RegionPolygon::new(vec![ll(0.0, 0.0), ll(1.0, 0.0), ll(1.0, 1.0), ll(0.0, 1.0)]).unwrap();
        assert!(point_in_polygon(ll(0.5, 0.5), &sq));
        assert!(!point_in_polygon(ll(1.5, 0.5), &sq));
        assert!(!point_in_polygon(ll(-0.1, -0.1), &sq));
    }

    #[test]
    fn boundary_points_are_inside() {
        let sq = RegionPolygon::new(vec![ll(0.0, 0.0), ll(1.0, 0.0), ll(1.0, 1.0), ll(0.0, 1.0)]).unwrap();
        for p in [ll(0.0, 0.0), ll(1.0, 0.5), ll(0.5, 1.0), ll(0.0, 0.3), ll(1.0, 1.0)] {
            assert!(point_in_polygon(p, &sq), "{p:?}");
        }
    }

    #[test]
    fn polygon_requires_three_vertices() {
        assert!(RegionPolygon::new(vec![ll(0.0, 0.0), ll(1.0, 0.0)]).is_err());
        // closing vertex does not count
        assert!(RegionPolygon::new(vec![ll(0.0, 0.0), ll(1.0, 0.0), ll(0.0, 0.0)]).is_err());
    }

    fn star(rng: &mut ChaCha8Rng, convex: bool) -> RegionPolygon {
        let k = rng.random_range(3..12);
        let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let verts = angles
            .iter()
            .map(|t| {
                let r = if convex { 1.0 } else { rng.random_range(0.2..1.0) };
                ll(6.0 + r * t.cos(), 62.0 + r * t.sin())
            })
            .collect();
        RegionPolygon::new(verts).unwrap()
    }

    #[test]
    fn agrees_with_winding_number_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..200 {
            let poly = star(&mut rng, case % 2 == 0);
            for _ in 0..20 {
                let p = ll(rng.random_range(4.8..7.2), rng.random_range(60.8..63.2));
                assert_eq!(
                    point_in_polygon(p, &poly),
                    winding_number(p, &poly) != 0,
                    "{p:?} {poly:?}"
                );
            }
        }
    }

    #[test]
    fn ccw_orientation() {
        let cw = RegionPolygon::new(vec![ll(0.0, 0.0), ll(0.0, 1.0), ll(1.0, 1.0), ll(1.0, 0.0)]).unwrap();
        assert!(cw.signed_area_deg2() < 0.0);
        assert!(cw.to_ccw().signed_area_deg2() > 0.0);
    }
}
