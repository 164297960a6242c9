//! Pixel damage to building flags, regional series and rate statistics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::catalog::DateWindow;
use crate::detect::FirstDetection;
use crate::error::{Error, Result};
use crate::raster::{GridMeta, MaskGrid};

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.99;

pub type Point = (f64, f64);

/// Signed shoelace area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[Point]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..ring.len() {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % ring.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Clips a ring against the axis-aligned box (min_x, min_y, max_x, max_y).
/// The box is convex, so the shoelace area of the result is the area of the
/// intersection even when the ring is concave.
pub fn clip_to_box(ring: &[Point], bbox: (f64, f64, f64, f64)) -> Vec<Point> {
    let (min_x, min_y, max_x, max_y) = bbox;
    let mut out: Vec<Point> = ring.to_vec();
    // (axis, bound, keep-if-greater)
    for (axis, bound, keep_greater) in [(0, min_x, true), (0, max_x, false), (1, min_y, true), (1, max_y, false)] {
        if out.is_empty() {
            break;
        }
        let coord = |p: &Point| if axis == 0 { p.0 } else { p.1 };
        let inside = |p: &Point| if keep_greater { coord(p) >= bound } else { coord(p) <= bound };
        let cross = |a: &Point, b: &Point| {
            let t = (bound - coord(a)) / (coord(b) - coord(a));
            let p = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            // Pin the clipped coordinate exactly onto the boundary.
            if axis == 0 {
                (bound, p.1)
            } else {
                (p.0, bound)
            }
        };
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = &input[i];
            let prev = &input[(i + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(*cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(*cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let orient = |p: Point, q: Point, r: Point| {
        let v = (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0);
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    let on_segment = |p: Point, q: Point, r: Point| {
        r.0 >= p.0.min(q.0) && r.0 <= p.0.max(q.0) && r.1 >= p.1.min(q.1) && r.1 <= p.1.max(q.1)
    };
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0 {
        return true;
    }
    (o1 == 0 && on_segment(a, b, c))
        || (o2 == 0 && on_segment(a, b, d))
        || (o3 == 0 && on_segment(c, d, a))
        || (o4 == 0 && on_segment(c, d, b))
}

fn ring_is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            // Adjacent edges share a vertex by construction.
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_cross(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Building outline in the working CRS: one outer ring plus optional holes.
/// Rings are stored open (no repeated closing vertex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingFootprint {
    pub id: String,
    pub rings: Vec<Vec<Point>>,
    pub region_id: String,
    pub area_m2: f64,
}

impl BuildingFootprint {
    pub fn new(id: impl Into<String>, region_id: impl Into<String>, rings: Vec<Vec<Point>>) -> Result<Self> {
        let id = id.into();
        let mut open = Vec::with_capacity(rings.len());
        for mut ring in rings {
            if ring.len() >= 2 && ring.first() == ring.last() {
                ring.pop();
            }
            if ring.len() < 3 {
                return Err(Error::Format(format!("footprint {id}: ring with fewer than 3 vertices")));
            }
            if ring.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
                return Err(Error::Format(format!("footprint {id}: non-finite coordinate")));
            }
            if !ring_is_simple(&ring) {
                return Err(Error::Format(format!("footprint {id}: ring is self-intersecting")));
            }
            open.push(ring);
        }
        if open.is_empty() {
            return Err(Error::Format(format!("footprint {id}: no rings")));
        }
        let area = signed_area(&open[0]).abs() - open[1..].iter().map(|h| signed_area(h).abs()).sum::<f64>();
        if !(area > 0.0) {
            return Err(Error::Format(format!("footprint {id}: non-positive area")));
        }
        Ok(Self {
            id,
            rings: open,
            region_id: region_id.into(),
            area_m2: area,
        })
    }

    /// Axis-aligned square footprint, handy for fixtures.
    pub fn rectangle(id: impl Into<String>, region_id: impl Into<String>, bbox: (f64, f64, f64, f64)) -> Result<Self> {
        let (x0, y0, x1, y1) = bbox;
        Self::new(id, region_id, vec![vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]])
    }

    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &self.rings[0] {
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        b
    }

    /// Area of the footprint inside `cell`.
    pub fn area_in(&self, cell: (f64, f64, f64, f64)) -> f64 {
        let outer = signed_area(&clip_to_box(&self.rings[0], cell)).abs();
        let holes: f64 = self.rings[1..]
            .iter()
            .map(|h| signed_area(&clip_to_box(h, cell)).abs())
            .sum();
        (outer - holes).max(0.0)
    }

    pub fn centroid(&self) -> Point {
        let ring = &self.rings[0];
        let a = signed_area(ring);
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..ring.len() {
            let (x0, y0) = ring[i];
            let (x1, y1) = ring[(i + 1) % ring.len()];
            let f = x0 * y1 - x1 * y0;
            cx += (x0 + x1) * f;
            cy += (y0 + y1) * f;
        }
        (cx / (6.0 * a), cy / (6.0 * a))
    }

    /// Even-odd point containment over all rings.
    pub fn contains(&self, p: Point) -> bool {
        self.rings.iter().filter(|r| ring_contains(r, p)).count() % 2 == 1
    }

    /// Pixels overlapping the footprint with the overlapping area, or `None`
    /// when the footprint is not entirely inside the grid.
    pub fn pixel_overlaps(&self, meta: &GridMeta) -> Option<Vec<((usize, usize), f64)>> {
        let (min_x, min_y, max_x, max_y) = self.bbox();
        let (ex0, ey0, ex1, ey1) = meta.extent();
        if min_x < ex0 || min_y < ey0 || max_x > ex1 || max_y > ey1 {
            return None;
        }
        let ps = meta.pixel_size;
        let c0 = ((min_x - meta.origin_x) / ps).floor().max(0.0) as usize;
        let c1 = (((max_x - meta.origin_x) / ps).ceil() as usize).min(meta.width);
        let r0 = ((meta.origin_y - max_y) / ps).floor().max(0.0) as usize;
        let r1 = (((meta.origin_y - min_y) / ps).ceil() as usize).min(meta.height);
        let mut out = Vec::new();
        for row in r0..r1 {
            for col in c0..c1 {
                let a = self.area_in(meta.cell_bounds(row, col));
                if a > 0.0 {
                    out.push(((row, col), a));
                }
            }
        }
        Some(out)
    }
}

fn ring_contains(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingDamageFlag {
    pub building_id: String,
    pub damaged: bool,
    pub first_detected: Option<NaiveDate>,
    pub coverage_fraction: f64,
    /// False when the footprint is not fully inside the grid; such buildings
    /// are excluded from denominators.
    pub in_coverage: bool,
}

/// Fraction of each footprint lying in damage-flagged pixels; damaged iff
/// that fraction reaches `threshold`.
pub fn mark_buildings(
    footprints: &[BuildingFootprint],
    cumulative: &MaskGrid,
    first: &FirstDetection,
    threshold: f64,
) -> Result<Vec<BuildingDamageFlag>> {
    cumulative.meta.ensure_aligned(&first.meta, "first-detection dates")?;
    Ok(footprints
        .par_iter()
        .map(|fp| match fp.pixel_overlaps(&cumulative.meta) {
            None => BuildingDamageFlag {
                building_id: fp.id.clone(),
                damaged: false,
                first_detected: None,
                coverage_fraction: 0.0,
                in_coverage: false,
            },
            Some(overlaps) => {
                let mut covered = 0.0;
                let mut earliest: Option<NaiveDate> = None;
                for ((row, col), a) in overlaps {
                    if cumulative.is_set(row, col) {
                        covered += a;
                        if let Some(d) = first.get(row, col) {
                            earliest = Some(earliest.map_or(d, |e| e.min(d)));
                        }
                    }
                }
                let fraction = (covered / fp.area_m2).clamp(0.0, 1.0);
                BuildingDamageFlag {
                    building_id: fp.id.clone(),
                    damaged: fraction >= threshold,
                    first_detected: earliest,
                    coverage_fraction: fraction,
                    in_coverage: true,
                }
            }
        })
        .collect())
}

/// Whether each footprint overlaps a valid pixel in at least `min_timesteps`
/// of the given per-timestep validity masks.
pub fn monitoring_validity(footprints: &[BuildingFootprint], valid: &[MaskGrid], min_timesteps: usize) -> Result<Vec<bool>> {
    let Some(first) = valid.first() else {
        return Ok(vec![false; footprints.len()]);
    };
    for v in &valid[1..] {
        first.meta.ensure_aligned(&v.meta, "validity masks")?;
    }
    Ok(footprints
        .par_iter()
        .map(|fp| {
            let Some(overlaps) = fp.pixel_overlaps(&first.meta) else {
                return false;
            };
            valid
                .iter()
                .filter(|m| overlaps.iter().any(|&((r, c), _)| m.is_set(r, c)))
                .count()
                >= min_timesteps
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSeries {
    pub region_id: String,
    pub dates: Vec<NaiveDate>,
    pub cumulative_damaged_count: Vec<u64>,
    pub percent_damaged: Vec<f64>,
}

impl RegionSeries {
    /// Cumulative count in effect on `d` (last step at or before it).
    pub fn count_at(&self, d: NaiveDate) -> Option<u64> {
        let idx = self.dates.partition_point(|&x| x <= d);
        (idx > 0).then(|| self.cumulative_damaged_count[idx - 1])
    }
}

pub fn percent(count: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

/// Cumulative damaged-building counts per region at each date.
///
/// `region_of` maps building id to region; `totals` gives each region's
/// mapped-building denominator.
pub fn region_timeseries(
    flags: &[BuildingDamageFlag],
    region_of: &HashMap<String, String>,
    totals: &BTreeMap<String, u64>,
    dates: &[NaiveDate],
) -> Result<Vec<RegionSeries>> {
    let mut dates = dates.to_vec();
    dates.sort_unstable();
    dates.dedup();
    let mut first_dates: BTreeMap<&str, Vec<NaiveDate>> = totals.keys().map(|k| (k.as_str(), Vec::new())).collect();
    for f in flags.iter().filter(|f| f.damaged && f.in_coverage) {
        let region = region_of
            .get(&f.building_id)
            .ok_or_else(|| Error::Accounting(format!("building {} has no region", f.building_id)))?;
        let bucket = first_dates
            .get_mut(region.as_str())
            .ok_or_else(|| Error::Accounting(format!("building {} in unknown region {region}", f.building_id)))?;
        let d = f
            .first_detected
            .ok_or_else(|| Error::Accounting(format!("damaged building {} has no detection date", f.building_id)))?;
        bucket.push(d);
    }
    Ok(first_dates
        .into_iter()
        .map(|(region, mut firsts)| {
            firsts.sort_unstable();
            let total = totals[region];
            let counts: Vec<u64> = dates
                .iter()
                .map(|d| firsts.partition_point(|x| x <= d) as u64)
                .collect();
            RegionSeries {
                region_id: region.to_string(),
                percent_damaged: counts.iter().map(|&c| percent(c, total)).collect(),
                cumulative_damaged_count: counts,
                dates: dates.clone(),
            }
        })
        .collect())
}

/// Sums regional series into one AOI-wide series labelled `region_id`.
pub fn combined_series(series: &[RegionSeries], totals: &BTreeMap<String, u64>, region_id: &str) -> Result<RegionSeries> {
    let Some(first) = series.first() else {
        return Err(Error::Accounting("no regional series to combine".into()));
    };
    let mut counts = vec![0u64; first.dates.len()];
    for s in series {
        if s.dates != first.dates {
            return Err(Error::Accounting(format!("series {} has different dates", s.region_id)));
        }
        for (acc, c) in counts.iter_mut().zip(&s.cumulative_damaged_count) {
            *acc += c;
        }
    }
    let total: u64 = series.iter().filter_map(|s| totals.get(&s.region_id)).sum();
    Ok(RegionSeries {
        region_id: region_id.to_string(),
        dates: first.dates.clone(),
        percent_damaged: counts.iter().map(|&c| percent(c, total)).collect(),
        cumulative_damaged_count: counts,
    })
}

fn window_rate(series: &RegionSeries, w: &DateWindow) -> Result<f64> {
    let days = (w.end - w.start).num_days();
    if days < 1 {
        return Err(Error::Config(format!("rate window {}..{} is shorter than a day", w.start, w.end)));
    }
    let (Some(&first), Some(&last)) = (series.dates.first(), series.dates.last()) else {
        return Err(Error::Accounting(format!("series {} is empty", series.region_id)));
    };
    if w.start < first || w.end > last {
        return Err(Error::Accounting(format!(
            "window {}..{} not covered by series {}..{}",
            w.start, w.end, first, last
        )));
    }
    let start = series.count_at(w.start).unwrap_or(0) as f64;
    let end = series.count_at(w.end).unwrap_or(0) as f64;
    Ok((end - start) / days as f64)
}

/// Percent decrease of the new-damage rate in `window_b` relative to `window_a`.
pub fn rate_change(series: &RegionSeries, window_a: &DateWindow, window_b: &DateWindow) -> Result<f64> {
    if window_a.end > window_b.start && window_b.end > window_a.start {
        return Err(Error::Config("rate windows overlap".into()));
    }
    let rate_a = window_rate(series, window_a)?;
    let rate_b = window_rate(series, window_b)?;
    rate_change_from_rates(rate_a, rate_b)
}

pub fn rate_change_from_rates(rate_a: f64, rate_b: f64) -> Result<f64> {
    if rate_a == 0.0 {
        return Err(Error::UndefinedRate("reference rate is zero".into()));
    }
    Ok(100.0 * (1.0 - rate_b / rate_a))
}

fn coords_to_ring(v: &Value) -> Result<Vec<Point>> {
    v.as_array()
        .ok_or_else(|| Error::Format("ring is not an array".into()))?
        .iter()
        .map(|p| {
            let xy = p.as_array().filter(|a| a.len() >= 2);
            match xy.and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?))) {
                Some(pt) => Ok(pt),
                None => Err(Error::Format(format!("bad coordinate {p}"))),
            }
        })
        .collect()
}

fn property_string(props: &Value, key: &str) -> Option<String> {
    match props.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads a FeatureCollection of Polygon features with `id` and `region_id`
/// properties.
pub fn read_footprints_geojson(text: &str) -> Result<Vec<BuildingFootprint>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("footprints: {e}")))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("footprints: not a FeatureCollection".into()))?;
    features
        .iter()
        .map(|f| {
            let props = f.get("properties").cloned().unwrap_or(Value::Null);
            let id = property_string(&props, "id")
                .or_else(|| f.get("id").and_then(|v| property_string(&json!({ "id": v }), "id")))
                .ok_or_else(|| Error::Format("footprint without id".into()))?;
            let region = property_string(&props, "region_id")
                .ok_or_else(|| Error::Format(format!("footprint {id} without region_id")))?;
            let geom = f
                .get("geometry")
                .ok_or_else(|| Error::Format(format!("footprint {id} without geometry")))?;
            if geom.get("type").and_then(Value::as_str) != Some("Polygon") {
                return Err(Error::Format(format!("footprint {id}: only Polygon geometries are supported")));
            }
            let rings = geom
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Format(format!("footprint {id}: missing coordinates")))?
                .iter()
                .map(coords_to_ring)
                .collect::<Result<Vec<_>>>()?;
            BuildingFootprint::new(id, region, rings)
        })
        .collect()
}

pub fn read_footprints(path: &Path) -> Result<Vec<BuildingFootprint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_footprints_geojson(&text)
}

fn ring_json(ring: &[Point]) -> Value {
    let mut pts: Vec<Value> = ring.iter().map(|&(x, y)| json!([x, y])).collect();
    if let Some(&(x, y)) = ring.first() {
        pts.push(json!([x, y]));
    }
    Value::Array(pts)
}

pub fn footprints_to_geojson(footprints: &[BuildingFootprint]) -> Value {
    json!({
        "type": "FeatureCollection",
        "features": footprints.iter().map(|fp| json!({
            "type": "Feature",
            "properties": { "id": fp.id, "region_id": fp.region_id },
            "geometry": {
                "type": "Polygon",
                "coordinates": fp.rings.iter().map(|r| ring_json(r)).collect::<Vec<_>>(),
            },
        })).collect::<Vec<_>>(),
    })
}

/// Footprints annotated with their damage flags.
pub fn flags_to_geojson(footprints: &[BuildingFootprint], flags: &[BuildingDamageFlag]) -> Result<Value> {
    if footprints.len() != flags.len() {
        return Err(Error::Accounting("footprint and flag counts differ".into()));
    }
    let features = footprints
        .iter()
        .zip(flags)
        .map(|(fp, f)| {
            json!({
                "type": "Feature",
                "properties": {
                    "id": fp.id,
                    "region_id": fp.region_id,
                    "damaged": f.damaged,
                    "first_detected": f.first_detected.map(|d| d.to_string()),
                    "coverage_fraction": f.coverage_fraction,
                    "in_coverage": f.in_coverage,
                },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": fp.rings.iter().map(|r| ring_json(r)).collect::<Vec<_>>(),
                },
            })
        })
        .collect::<Vec<_>>();
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

pub fn write_series_csv<W: Write>(series: &[RegionSeries], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["region_id", "date", "count", "percent"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for s in series {
        for ((d, c), p) in s.dates.iter().zip(&s.cumulative_damaged_count).zip(&s.percent_damaged) {
            wtr.write_record([s.region_id.clone(), d.to_string(), c.to_string(), format!("{p:.4}")])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DamageRecord;
    use crate::raster::{Grid, DEFAULT_EPSG};

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn meta() -> GridMeta {
        GridMeta::new(DEFAULT_EPSG, 0.0, 80.0, 40.0, 2, 2).unwrap()
    }

    fn first_dates(records: &[(usize, usize, NaiveDate)]) -> FirstDetection {
        let recs: Vec<DamageRecord> = records
            .iter()
            .map(|&(row, col, d)| DamageRecord {
                row,
                col,
                first_detected: d,
                confirmed: None,
                days_to_confirm: None,
            })
            .collect();
        FirstDetection::from_records(meta(), &recs)
    }

    #[test]
    fn clip_square_and_concave() {
        let sq = vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        assert_eq!(signed_area(&clip_to_box(&sq, (5.0, 5.0, 20.0, 20.0))), 25.0);
        assert_eq!(signed_area(&clip_to_box(&sq, (20.0, 20.0, 30.0, 30.0))), 0.0);
        // U shape: 3x3 square minus the middle-top 1x2 notch.
        let u = vec![
            (0.0, 0.0),
            (3.0, 0.0),
            (3.0, 3.0),
            (2.0, 3.0),
            (2.0, 1.0),
            (1.0, 1.0),
            (1.0, 3.0),
            (0.0, 3.0),
        ];
        assert_eq!(signed_area(&u), 7.0);
        assert!((signed_area(&clip_to_box(&u, (0.0, 2.0, 3.0, 3.0))).abs() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn footprint_validation() {
        assert!(BuildingFootprint::new("a", "r", vec![vec![(0.0, 0.0), (1.0, 0.0)]]).is_err());
        let bowtie = vec![(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)];
        assert!(BuildingFootprint::new("b", "r", vec![bowtie]).is_err());
        let closed = vec![(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0), (0.0, 0.0)];
        let hole = vec![(1.0, 1.0), (2.0, 1.0), (2.0, 2.0), (1.0, 2.0)];
        let fp = BuildingFootprint::new("c", "r", vec![closed, hole]).unwrap();
        assert_eq!(fp.rings[0].len(), 4);
        assert_eq!(fp.area_m2, 15.0);
        assert!(fp.contains((3.0, 3.0)));
        assert!(!fp.contains((1.5, 1.5)));
    }

    #[test]
    fn building_marking() {
        let m = meta();
        let d1 = date(2023, 10, 12);
        let d2 = date(2023, 10, 24);
        // Flag the left column (col 0) of both rows.
        let mask = Grid::new(m, vec![1u8, 0, 1, 0]).unwrap();
        let first = first_dates(&[(0, 0, d2), (1, 0, d1)]);
        let inside = BuildingFootprint::rectangle("in", "r", (10.0, 50.0, 20.0, 66.0)).unwrap();
        assert_eq!(inside.area_m2, 160.0);
        let straddle = BuildingFootprint::rectangle("half", "r", (30.0, 50.0, 50.0, 60.0)).unwrap();
        let spans_rows = BuildingFootprint::rectangle("rows", "r", (5.0, 30.0, 15.0, 50.0)).unwrap();
        let outside = BuildingFootprint::rectangle("out", "r", (70.0, 50.0, 90.0, 60.0)).unwrap();
        let flags = mark_buildings(&[inside, straddle, spans_rows, outside], &mask, &first, 0.99).unwrap();
        assert!(flags[0].damaged && flags[0].coverage_fraction == 1.0);
        assert_eq!(flags[0].first_detected, Some(d2));
        assert!(!flags[1].damaged);
        assert!((flags[1].coverage_fraction - 0.5).abs() < 1e-12);
        assert!(flags[2].damaged);
        assert_eq!(flags[2].first_detected, Some(d1));
        assert!(!flags[3].in_coverage && !flags[3].damaged);
    }

    #[test]
    fn threshold_is_inclusive() {
        let m = meta();
        let mask = Grid::new(m, vec![1u8, 0, 0, 0]).unwrap();
        let first = first_dates(&[(0, 0, date(2023, 10, 12))]);
        // Mostly in the flagged pixel, slightly into its neighbour.
        let fp = BuildingFootprint::rectangle("b", "r", (30.1, 70.0, 40.1, 80.0)).unwrap();
        let flags = mark_buildings(std::slice::from_ref(&fp), &mask, &first, 0.99).unwrap();
        let f = flags[0].coverage_fraction;
        assert!(f < 1.0 && f > 0.98);
        let exact = mark_buildings(std::slice::from_ref(&fp), &mask, &first, f).unwrap();
        assert!(exact[0].damaged);
        // Exact 0.99 via a 100 m² footprint split 99/1 on an integer boundary.
        let m2 = GridMeta::new(DEFAULT_EPSG, 0.0, 1.0, 1.0, 100, 1).unwrap();
        let mut v = vec![1u8; 100];
        v[99] = 0;
        let mask = Grid::new(m2, v).unwrap();
        let recs: Vec<DamageRecord> = (0..99)
            .map(|c| DamageRecord {
                row: 0,
                col: c,
                first_detected: date(2023, 10, 12),
                confirmed: None,
                days_to_confirm: None,
            })
            .collect();
        let first = FirstDetection::from_records(m2, &recs);
        let strip = BuildingFootprint::rectangle("s", "r", (0.0, 0.0, 100.0, 1.0)).unwrap();
        let flags = mark_buildings(&[strip], &mask, &first, 0.99).unwrap();
        assert_eq!(flags[0].coverage_fraction, 0.99);
        assert!(flags[0].damaged);
    }

    #[test]
    fn validity_needs_two_timesteps() {
        let m = meta();
        let fp = BuildingFootprint::rectangle("in", "r", (10.0, 50.0, 20.0, 66.0)).unwrap();
        let valid = Grid::new(m, vec![1u8, 0, 0, 0]).unwrap();
        let invalid = Grid::new(m, vec![0u8, 1, 1, 1]).unwrap();
        let fps = [fp];
        assert_eq!(monitoring_validity(&fps, &[valid.clone(), invalid.clone()], 2).unwrap(), vec![false]);
        assert_eq!(monitoring_validity(&fps, &[valid.clone(), valid, invalid], 2).unwrap(), vec![true]);
    }

    fn flag(id: &str, damaged: bool, d: Option<NaiveDate>) -> BuildingDamageFlag {
        BuildingDamageFlag {
            building_id: id.into(),
            damaged,
            first_detected: d,
            coverage_fraction: if damaged { 1.0 } else { 0.0 },
            in_coverage: true,
        }
    }

    #[test]
    fn regional_percentages() {
        let d = date(2023, 11, 1);
        let flags: Vec<_> = (0..10)
            .map(|i| flag(&format!("b{i}"), i < 5, (i < 5).then_some(d)))
            .collect();
        let region_of: HashMap<String, String> = (0..10).map(|i| (format!("b{i}"), "north".to_string())).collect();
        let totals = BTreeMap::from([("north".to_string(), 10u64)]);
        let s = region_timeseries(&flags, &region_of, &totals, &[date(2023, 10, 20), d]).unwrap();
        assert_eq!(s[0].cumulative_damaged_count, vec![0, 5]);
        assert_eq!(s[0].percent_damaged, vec![0.0, 50.0]);

        let mut bad = region_of.clone();
        bad.insert("b0".into(), "atlantis".into());
        assert!(matches!(
            region_timeseries(&flags, &bad, &totals, &[d]),
            Err(Error::Accounting(_))
        ));
        bad.remove("b0");
        assert!(matches!(
            region_timeseries(&flags, &bad, &totals, &[d]),
            Err(Error::Accounting(_))
        ));
    }

    fn series(points: &[(NaiveDate, u64)]) -> RegionSeries {
        RegionSeries {
            region_id: "all".into(),
            dates: points.iter().map(|p| p.0).collect(),
            cumulative_damaged_count: points.iter().map(|p| p.1).collect(),
            percent_damaged: vec![0.0; points.len()],
        }
    }

    #[test]
    fn rate_changes() {
        let s = series(&[
            (date(2023, 10, 1), 0),
            (date(2023, 10, 11), 1000),
            (date(2023, 10, 21), 1500),
            (date(2023, 10, 31), 1500),
        ]);
        let a = DateWindow::new(date(2023, 10, 1), date(2023, 10, 11));
        let b = DateWindow::new(date(2023, 10, 11), date(2023, 10, 21));
        let c = DateWindow::new(date(2023, 10, 21), date(2023, 10, 31));
        assert!((rate_change(&s, &a, &b).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(rate_change(&s, &a, &c).unwrap(), 100.0);
        assert_eq!(rate_change(&s, &a, &a.clone()).is_err(), true);
        assert!(matches!(rate_change(&s, &c, &a), Err(Error::UndefinedRate(_))));
        assert_eq!(rate_change_from_rates(2300.0, 2300.0).unwrap(), 0.0);
        let uncovered = DateWindow::new(date(2023, 11, 1), date(2023, 11, 5));
        assert!(rate_change(&s, &a, &uncovered).is_err());
    }

    #[test]
    fn geojson_roundtrip() {
        let fp = BuildingFootprint::rectangle("b1", "aoi", (10.0, 50.0, 20.0, 66.0)).unwrap();
        let text = footprints_to_geojson(std::slice::from_ref(&fp)).to_string();
        let back = read_footprints_geojson(&text).unwrap();
        assert_eq!(back, vec![fp]);
        let bad = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"id":1,"region_id":"x"},"geometry":{"type":"Point","coordinates":[0,0]}}]}"#;
        assert!(read_footprints_geojson(bad).is_err());
    }

    #[test]
    fn series_csv_layout() {
        let s = series(&[(date(2023, 10, 1), 3)]);
        let mut buf = Vec::new();
        write_series_csv(&[s], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "region_id,date,count,percent\nall,2023-10-01,3,0.0000\n");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Star-shaped (hence simple) polygon around `centre`.
        fn star(centre: Point, radii: &[f64]) -> Vec<Point> {
            let n = radii.len();
            radii
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    (centre.0 + r * a.cos(), centre.1 + r * a.sin())
                })
                .collect()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn coverage_matches_point_sampling(
                cx in 30.0f64..130.0,
                cy in 30.0f64..130.0,
                radii in prop::collection::vec(8.0f64..28.0, 5..12),
                flagged in prop::collection::vec(any::<bool>(), 16),
            ) {
                let m = GridMeta::new(DEFAULT_EPSG, 0.0, 160.0, 40.0, 4, 4).unwrap();
                let fp = BuildingFootprint::new("p", "r", vec![star((cx, cy), &radii)]).unwrap();
                let mask = Grid::new(m, flagged.iter().map(|&f| f as u8).collect()).unwrap();
                let first = FirstDetection::from_records(m, &[]);
                let flag = &mark_buildings(std::slice::from_ref(&fp), &mask, &first, 0.99).unwrap()[0];

                // Oracle: 0.5 m sub-pixel point sampling.
                let (mut inside, mut covered) = (0u64, 0u64);
                let step = 0.5;
                let (x0, y0, x1, y1) = fp.bbox();
                let mut y = (y0 / step).floor() * step + step / 2.0;
                while y < y1 {
                    let mut x = (x0 / step).floor() * step + step / 2.0;
                    while x < x1 {
                        if fp.contains((x, y)) {
                            inside += 1;
                            let (r, c) = m.locate(x, y).unwrap();
                            covered += mask.is_set(r, c) as u64;
                        }
                        x += step;
                    }
                    y += step;
                }
                let oracle = covered as f64 / inside as f64;
                prop_assert!((flag.coverage_fraction - oracle).abs() <= 0.02, "{} vs {}", flag.coverage_fraction, oracle);
                prop_assert!((0.0..=1.0).contains(&flag.coverage_fraction));

                let total: f64 = fp.pixel_overlaps(&m).unwrap().iter().map(|(_, a)| a).sum();
                prop_assert!((total - fp.area_m2).abs() <= 1e-9 * fp.area_m2.max(1.0));
            }
        }
    }
}
