//! Grid discretization and per-location features.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of POI categories.
pub const POI_CATEGORIES: usize = 14;
/// Length of the POI feature vector: raw counts followed by fractions.
pub const POI_DIM: usize = 2 * POI_CATEGORIES;
/// Number of popularity rank buckets.
pub const RANK_BUCKETS: usize = 8;

/// POI category names, in column order.
pub const POI_CATEGORY_NAMES: [&str; POI_CATEGORIES] = [
    "Auto Service",
    "Auto Dealers",
    "Auto Repair",
    "Motorcycle Service",
    "Food & Beverages",
    "Shopping",
    "Daily Life Service",
    "Sports & Recreation",
    "Medical Service",
    "Accommodation Service",
    "Tourist Attraction",
    "Commercial House",
    "Governmental Organization",
    "Science/Culture & Education Service",
];

/// Mean Earth radius in meters.
const EARTH_RADIUS_M: f64 = 6_371_008.8;

fn meters_per_degree_lat() -> f64 {
    EARTH_RADIUS_M * std::f64::consts::PI / 180.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

/// A city's extent and square grid.
///
/// Cells are laid out row-major from the south-west corner, with metric
/// extents from an equirectangular projection at the box's center latitude.
#[derive(Clone, Debug, PartialEq)]
pub struct CityGeometry {
    pub city_id: String,
    pub bbox: BoundingBox,
    pub cell_size_m: f64,
}

impl CityGeometry {
    pub const DEFAULT_CELL_M: f64 = 500.0;

    pub fn new(city_id: impl Into<String>, bbox: BoundingBox, cell_size_m: f64) -> Result<Self> {
        if !(bbox.lat_min < bbox.lat_max) || !(bbox.lon_min < bbox.lon_max) {
            return Err(Error::Config(format!("degenerate bounding box {bbox:?}")));
        }
        if !(cell_size_m > 0.0) {
            return Err(Error::Config(format!(
                "cell size must be positive, got {cell_size_m}"
            )));
        }
        Ok(CityGeometry {
            city_id: city_id.into(),
            bbox,
            cell_size_m,
        })
    }

    /// Box of exactly `rows x cols` cells centered on `(lat, lon)`.
    pub fn from_grid(
        city_id: impl Into<String>,
        center: (f64, f64),
        rows: usize,
        cols: usize,
        cell_size_m: f64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(
                "grid needs at least one row and column".into(),
            ));
        }
        let half_h = rows as f64 * cell_size_m / 2.0 / meters_per_degree_lat();
        let m_lon = meters_per_degree_lat() * center.0.to_radians().cos();
        let half_w = cols as f64 * cell_size_m / 2.0 / m_lon;
        Self::new(
            city_id,
            BoundingBox {
                lat_min: center.0 - half_h,
                lat_max: center.0 + half_h,
                lon_min: center.1 - half_w,
                lon_max: center.1 + half_w,
            },
            cell_size_m,
        )
    }

    fn center_lat(&self) -> f64 {
        0.5 * (self.bbox.lat_min + self.bbox.lat_max)
    }

    fn meters_per_degree_lon(&self) -> f64 {
        meters_per_degree_lat() * self.center_lat().to_radians().cos()
    }

    fn height_m(&self) -> f64 {
        (self.bbox.lat_max - self.bbox.lat_min) * meters_per_degree_lat()
    }

    fn width_m(&self) -> f64 {
        (self.bbox.lon_max - self.bbox.lon_min) * self.meters_per_degree_lon()
    }

    fn cells_along(extent_m: f64, cell: f64) -> usize {
        // tolerate round-off when the extent is an exact multiple of the cell
        ((extent_m / cell - 1e-9).ceil() as usize).max(1)
    }

    pub fn rows(&self) -> usize {
        Self::cells_along(self.height_m(), self.cell_size_m)
    }

    pub fn cols(&self) -> usize {
        Self::cells_along(self.width_m(), self.cell_size_m)
    }

    pub fn cell_count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Metric offset `(north, east)` of a point from the south-west corner.
    pub fn offset_m(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lat - self.bbox.lat_min) * meters_per_degree_lat(),
            (lon - self.bbox.lon_min) * self.meters_per_degree_lon(),
        )
    }

    /// Row-major cell id of a point inside the box.
    pub fn grid_index(&self, lat: f64, lon: f64) -> Result<usize> {
        let b = &self.bbox;
        if !(lat >= b.lat_min && lat <= b.lat_max && lon >= b.lon_min && lon <= b.lon_max) {
            return Err(Error::Data(format!(
                "point ({lat}, {lon}) outside bounding box of city {}",
                self.city_id
            )));
        }
        let (north, east) = self.offset_m(lat, lon);
        let row = ((north / self.cell_size_m).floor() as usize).min(self.rows() - 1);
        let col = ((east / self.cell_size_m).floor() as usize).min(self.cols() - 1);
        Ok(row * self.cols() + col)
    }

    /// Geographic center of cell `id`.
    pub fn cell_centroid(&self, id: usize) -> (f64, f64) {
        let (row, col) = (id / self.cols(), id % self.cols());
        (
            self.bbox.lat_min + (row as f64 + 0.5) * self.cell_size_m / meters_per_degree_lat(),
            self.bbox.lon_min
                + (col as f64 + 0.5) * self.cell_size_m / self.meters_per_degree_lon(),
        )
    }
}

/// `[n_1..n_c, p_1..p_c]` with `p_i = n_i / sum(n)`; fractions are zero when
/// every count is zero.
pub fn poi_vector(counts: &[i64]) -> Result<[f64; POI_DIM]> {
    if counts.len() != POI_CATEGORIES {
        return Err(Error::Data(format!(
            "expected {POI_CATEGORIES} POI counts, got {}",
            counts.len()
        )));
    }
    if let Some(c) = counts.iter().find(|&&c| c < 0) {
        return Err(Error::Data(format!("negative POI count {c}")));
    }
    let total: i64 = counts.iter().sum();
    let mut out = [0.0; POI_DIM];
    for (i, &c) in counts.iter().enumerate() {
        out[i] = c as f64;
        if total > 0 {
            out[POI_CATEGORIES + i] = c as f64 / total as f64;
        }
    }
    Ok(out)
}

/// Upper percentile bound (in percent, inclusive) of each rank bucket but the last.
const RANK_UPPER_PCT: [u64; RANK_BUCKETS - 1] = [1, 5, 10, 20, 40, 60, 80];

/// Rank bucket of a 1-based position among `total` locations: 0 for the top
/// 1%, up to 7 beyond 80%. Bounds are inclusive on the upper side.
pub fn rank_bucket(position: usize, total: usize) -> u8 {
    let scaled = position as u64 * 100;
    RANK_UPPER_PCT
        .iter()
        .position(|&upper| scaled <= upper * total as u64)
        .unwrap_or(RANK_BUCKETS - 1) as u8
}

/// Popularity bucket for each location, given visit counts indexed by location id.
pub fn popularity_rank(visits: &[u64]) -> Result<Vec<u8>> {
    let pairs: Vec<(usize, u64)> = visits.iter().copied().enumerate().collect();
    Ok(popularity_rank_pairs(&pairs)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

/// Popularity bucket per `(location_id, visits)` pair, returned sorted by id.
///
/// Locations are ordered by visits descending (ties by ascending id); a
/// location's percentile is its 1-based position over the location count.
/// The result does not depend on the order of `pairs`.
pub fn popularity_rank_pairs(pairs: &[(usize, u64)]) -> Result<Vec<(usize, u8)>> {
    if pairs.is_empty() {
        return Err(Error::Data(
            "popularity rank of an empty location set".into(),
        ));
    }
    let mut order = pairs.to_vec();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ranked: Vec<(usize, u8)> = order
        .iter()
        .enumerate()
        .map(|(pos, &(id, _))| (id, rank_bucket(pos + 1, pairs.len())))
        .collect();
    ranked.sort_by_key(|&(id, _)| id);
    Ok(ranked)
}

/// Standardizes each axis to mean 0 and (population) standard deviation 1.
/// An axis with zero spread maps to 0.
pub fn normalize_coords(coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = coords.len() as f64;
    let mut out = vec![[0.0; 2]; coords.len()];
    if coords.is_empty() {
        return out;
    }
    for axis in 0..2 {
        let mean = coords.iter().map(|c| c[axis]).sum::<f64>() / n;
        let var = coords.iter().map(|c| (c[axis] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for (o, c) in out.iter_mut().zip(coords) {
            o[axis] = if std > 1e-12 * mean.abs().max(1.0) {
                (c[axis] - mean) / std
            } else {
                0.0
            };
        }
    }
    out
}

/// One grid cell of a city.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationRecord {
    pub location_id: usize,
    pub lat: f64,
    pub lon: f64,
    pub poi_counts: [i64; POI_CATEGORIES],
    pub visits: u64,
}

/// All locations of one city, indexed densely by id.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationTable {
    pub records: Vec<LocationRecord>,
}

fn csv_header() -> String {
    let mut h = String::from("location_id,lat,lon");
    for i in 0..POI_CATEGORIES {
        let _ = write!(h, ",poi_{i}");
    }
    h.push_str(",visits");
    h
}

impl LocationTable {
    /// Sorts by id and checks ids are exactly `0..N`.
    pub fn new(mut records: Vec<LocationRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("location table is empty".into()));
        }
        records.sort_by_key(|r| r.location_id);
        for (i, r) in records.iter().enumerate() {
            if r.location_id != i {
                return Err(Error::Data(format!(
                    "location ids must be dense 0..{}; found {} at position {i}",
                    records.len(),
                    r.location_id
                )));
            }
            poi_vector(&r.poi_counts)?;
        }
        Ok(LocationTable { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = csv_header();
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{},{}", r.location_id, r.lat, r.lon);
            for c in r.poi_counts {
                let _ = write!(s, ",{c}");
            }
            let _ = writeln!(s, ",{}", r.visits);
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty locations file".into()))?;
        if header.trim() != csv_header() {
            return Err(Error::Data(format!(
                "unexpected locations header `{}`; expected `{}`",
                header.trim(),
                csv_header()
            )));
        }
        let mut records = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Data(format!("locations line {}: {what}", ln + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 + POI_CATEGORIES {
                return Err(bad(&format!(
                    "expected {} fields, got {}",
                    4 + POI_CATEGORIES,
                    f.len()
                )));
            }
            let mut poi_counts = [0i64; POI_CATEGORIES];
            for (i, c) in poi_counts.iter_mut().enumerate() {
                *c = f[3 + i].parse().map_err(|_| bad("bad POI count"))?;
            }
            records.push(LocationRecord {
                location_id: f[0].parse().map_err(|_| bad("bad location_id"))?,
                lat: f[1].parse().map_err(|_| bad("bad lat"))?,
                lon: f[2].parse().map_err(|_| bad("bad lon"))?,
                poi_counts,
                visits: f[3 + POI_CATEGORIES]
                    .parse()
                    .map_err(|_| bad("bad visits"))?,
            });
        }
        Self::new(records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Model-ready features of every location in a city.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationFeatures {
    /// Raw POI vectors (counts, then fractions).
    pub poi: Vec<[f64; POI_DIM]>,
    /// Per-city standardized `(lat, lon)`.
    pub geo: Vec<[f64; 2]>,
    pub rank: Vec<u8>,
}

impl LocationFeatures {
    pub fn from_table(table: &LocationTable) -> Result<Self> {
        let poi = table
            .records
            .iter()
            .map(|r| poi_vector(&r.poi_counts))
            .collect::<Result<Vec<_>>>()?;
        let coords: Vec<[f64; 2]> = table.records.iter().map(|r| [r.lat, r.lon]).collect();
        let visits: Vec<u64> = table.records.iter().map(|r| r.visits).collect();
        Ok(LocationFeatures {
            poi,
            geo: normalize_coords(&coords),
            rank: popularity_rank(&visits)?,
        })
    }

    pub fn len(&self) -> usize {
        self.rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank.is_empty()
    }

    /// Features of a subset of locations, in the given order.
    pub fn select(&self, ids: &[usize]) -> LocationFeatures {
        LocationFeatures {
            poi: ids.iter().map(|&i| self.poi[i]).collect(),
            geo: ids.iter().map(|&i| self.geo[i]).collect(),
            rank: ids.iter().map(|&i| self.rank[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn city() -> CityGeometry {
        CityGeometry::from_grid("c", (31.2, 121.4), 6, 10, 500.0).unwrap()
    }

    #[test]
    fn grid_dimensions_from_box() {
        let c = city();
        assert_eq!((c.rows(), c.cols()), (6, 10));
    }

    #[test]
    fn south_west_corner_is_cell_zero() {
        let c = city();
        assert_eq!(c.grid_index(c.bbox.lat_min, c.bbox.lon_min).unwrap(), 0);
    }

    #[test]
    fn row_major_cell_center() {
        let c = city();
        let (lat, lon) = c.cell_centroid(23);
        assert_eq!(c.grid_index(lat, lon).unwrap(), 23);
        // row 2, col 3 in a 10-column grid
        let lat = c.bbox.lat_min + 2.5 * 500.0 / meters_per_degree_lat();
        let lon = c.bbox.lon_min + 3.5 * 500.0 / c.meters_per_degree_lon();
        assert_eq!(c.grid_index(lat, lon).unwrap(), 23);
    }

    #[test]
    fn five_hundred_meters_east_is_next_cell() {
        let c = city();
        // equirectangular: dlon = 500 / (R * cos(lat0) * pi / 180)
        let lat0 = 0.5 * (c.bbox.lat_min + c.bbox.lat_max);
        let dlon = 500.0 / (6_371_008.8 * lat0.to_radians().cos() * std::f64::consts::PI / 180.0);
        let (lat, lon) = c.cell_centroid(31);
        let a = c.grid_index(lat, lon).unwrap();
        let b = c.grid_index(lat, lon + dlon).unwrap();
        assert_eq!(b, a + 1);
    }

    #[test]
    fn outside_box_is_rejected() {
        let c = city();
        assert!(c.grid_index(c.bbox.lat_max + 0.01, c.bbox.lon_min).is_err());
        assert!(c.grid_index(c.bbox.lat_min, c.bbox.lon_min - 1e-6).is_err());
    }

    #[test]
    fn invalid_geometry() {
        let bb = BoundingBox {
            lat_min: 1.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
        };
        assert!(CityGeometry::new("x", bb, 500.0).is_err());
        let bb = BoundingBox { lat_max: 2.0, ..bb };
        assert!(CityGeometry::new("x", bb, 0.0).is_err());
    }

    #[test]
    fn centroids_map_injectively() {
        let c = city();
        let ids: Vec<usize> = (0..c.cell_count())
            .map(|i| {
                let (lat, lon) = c.cell_centroid(i);
                c.grid_index(lat, lon).unwrap()
            })
            .collect();
        assert_eq!(ids, (0..c.cell_count()).collect::<Vec<_>>());
    }

    #[test]
    fn poi_vector_examples() {
        let mut counts = [0i64; 14];
        counts[0] = 3;
        counts[1] = 1;
        let p = poi_vector(&counts).unwrap();
        assert_eq!(&p[..2], &[3.0, 1.0]);
        assert_eq!(&p[14..16], &[0.75, 0.25]);
        assert!(p[16..].iter().all(|&v| v == 0.0));

        assert_eq!(poi_vector(&[0; 14]).unwrap(), [0.0; 28]);

        let p = poi_vector(&[1; 14]).unwrap();
        assert!(p[14..].iter().all(|&v| (v - 1.0 / 14.0).abs() < 1e-15));

        let mut neg = [0i64; 14];
        neg[5] = -1;
        assert!(poi_vector(&neg).is_err());
        assert!(poi_vector(&[1; 13]).is_err());
    }

    #[test]
    fn rank_buckets_follow_table() {
        // 1000 locations
        assert_eq!(rank_bucket(1, 1000), 0);
        assert_eq!(rank_bucket(10, 1000), 0);
        assert_eq!(rank_bucket(11, 1000), 1);
        assert_eq!(rank_bucket(50, 1000), 1);
        assert_eq!(rank_bucket(51, 1000), 2);
        assert_eq!(rank_bucket(100, 1000), 2);
        assert_eq!(rank_bucket(200, 1000), 3);
        assert_eq!(rank_bucket(400, 1000), 4);
        assert_eq!(rank_bucket(500, 1000), 5);
        assert_eq!(rank_bucket(600, 1000), 5);
        assert_eq!(rank_bucket(601, 1000), 6);
        assert_eq!(rank_bucket(800, 1000), 6);
        assert_eq!(rank_bucket(801, 1000), 7);
        assert_eq!(rank_bucket(1000, 1000), 7);
    }

    #[test]
    fn popularity_rank_examples() {
        let mut visits = vec![5u64; 1000];
        visits[417] = 1_000;
        let r = popularity_rank(&visits).unwrap();
        assert_eq!(r[417], 0);

        // ten tied locations: positions 1..=10 are percentiles 10%..100%
        let r = popularity_rank(&[3; 10]).unwrap();
        assert_eq!(r, vec![2, 3, 4, 4, 5, 5, 6, 6, 7, 7]);

        assert!(popularity_rank(&[]).is_err());
    }

    #[test]
    fn normalize_degenerate_and_moments() {
        assert_eq!(normalize_coords(&[[31.0, 121.0]]), vec![[0.0, 0.0]]);
        let pts = [[31.0, 121.0], [31.1, 121.3], [31.05, 121.2], [30.9, 121.25]];
        let g = normalize_coords(&pts);
        for axis in 0..2 {
            let mean = g.iter().map(|p| p[axis]).sum::<f64>() / 4.0;
            let var = g.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn location_csv_round_trip_and_errors() {
        let c = city();
        let recs: Vec<LocationRecord> = (0..3)
            .map(|i| {
                let (lat, lon) = c.cell_centroid(i);
                let mut poi = [0i64; 14];
                poi[i] = i as i64 + 1;
                LocationRecord {
                    location_id: i,
                    lat,
                    lon,
                    poi_counts: poi,
                    visits: 10 * i as u64,
                }
            })
            .collect();
        let t = LocationTable::new(recs).unwrap();
        let back = LocationTable::parse_csv(&t.to_csv()).unwrap();
        assert_eq!(t, back);

        let gap = t.to_csv().replace("\n2,", "\n7,");
        assert!(LocationTable::parse_csv(&gap).is_err());
        assert!(LocationTable::parse_csv("id,lat\n").is_err());
    }

    proptest! {
        #[test]
        fn fractions_sum_to_one(counts in proptest::collection::vec(0i64..1000, 14)) {
            let p = poi_vector(&counts).unwrap();
            let s: f64 = p[14..].iter().sum();
            if counts.iter().any(|&c| c > 0) {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }

        #[test]
        fn rank_is_permutation_insensitive(
            visits in proptest::collection::vec(0u64..20, 1..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let base = popularity_rank(&visits).unwrap();
            let mut pairs: Vec<(usize, u64)> = visits.iter().copied().enumerate().collect();
            pairs.shuffle(&mut crate::rng::stream(seed, "perm"));
            let shuffled = popularity_rank_pairs(&pairs).unwrap();
            for (id, r) in shuffled {
                prop_assert_eq!(r, base[id]);
            }
        }

        #[test]
        fn normalize_is_idempotent(pts in proptest::collection::vec((-90.0f64..90.0, -180.0f64..180.0), 2..30)) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a, b]).collect();
            let once = normalize_coords(&pts);
            let twice = normalize_coords(&once);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9);
            }
        }
    }
}
