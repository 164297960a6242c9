//! Damage classification, monitoring validity, persistence and accumulation.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, FloatGrid, Grid, GridMeta, MaskGrid, MASK_NODATA};
use crate::reduce::StackSummary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Fixed coherence-change threshold, negative.
    pub k: f64,
    pub z_threshold: f64,
    pub sigma_floor: f64,
    pub persistence_window_days: i64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k: -0.20,
            z_threshold: -2.0,
            sigma_floor: 1e-6,
            persistence_window_days: 31,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k < 0.0) {
            return Err(Error::Config(format!("detector k must be negative, got {}", self.k)));
        }
        if !(self.z_threshold < 0.0) {
            return Err(Error::Config(format!(
                "z threshold must be negative, got {}",
                self.z_threshold
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config(format!(
                "sigma floor must be positive, got {}",
                self.sigma_floor
            )));
        }
        if self.persistence_window_days < 0 {
            return Err(Error::Config("persistence window must be non-negative".into()));
        }
        Ok(())
    }

    /// Largest pre-event σ for which the fixed threshold still sits at or
    /// beyond the z cutoff.
    pub fn max_valid_sigma(&self) -> f64 {
        self.k / self.z_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelOutcome {
    pub delta: f64,
    pub z: f64,
    /// Both the fixed-threshold and z-score conditions hold.
    pub damage: bool,
}

/// Δγ = γ̄_t − γ̄_pre; z = Δγ / max(σ_pre, floor); damage iff Δγ < k and z < z_threshold.
pub fn classify_pixel(mean_t: f64, mean_pre: f64, std_pre: f64, cfg: &DetectorConfig) -> PixelOutcome {
    let delta = mean_t - mean_pre;
    let z = delta / std_pre.max(cfg.sigma_floor);
    PixelOutcome {
        delta,
        z,
        damage: delta < cfg.k && z < cfg.z_threshold,
    }
}

/// A pixel is monitorable when k / max(σ_pre, floor) ≤ z_threshold.
pub fn pixel_valid(std_pre: f64, cfg: &DetectorConfig) -> bool {
    cfg.k / std_pre.max(cfg.sigma_floor) <= cfg.z_threshold
}

pub fn compute_valid_mask(pre: &StackSummary, cfg: &DetectorConfig) -> MaskGrid {
    let data = pre
        .std
        .values()
        .iter()
        .zip(pre.mean.values())
        .map(|(&s, &m)| {
            if s.is_nan() || m.is_nan() {
                MASK_NODATA
            } else {
                pixel_valid(s as f64, cfg) as u8
            }
        })
        .collect();
    Grid::new(*pre.meta(), data).expect("mask shares the summary shape")
}

/// Per-timestep classification output.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub timestep_date: NaiveDate,
    pub delta: FloatGrid,
    pub z: FloatGrid,
    /// Damage flag: both thresholds met on a pixel valid for monitoring.
    pub flag: MaskGrid,
    pub valid: MaskGrid,
}

impl DetectionGrid {
    pub fn meta(&self) -> &GridMeta {
        &self.flag.meta
    }
}

/// Compares an event (or counterfactual) summary against its pre-event summary.
pub fn classify_damage(event: &StackSummary, pre: &StackSummary, cfg: &DetectorConfig) -> Result<DetectionGrid> {
    event.meta().ensure_aligned(pre.meta(), "event vs pre summary")?;
    let valid = compute_valid_mask(pre, cfg);
    let n = event.meta().len();
    let cells: Vec<(f32, f32, u8)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mt = event.mean.values()[i];
            let mp = pre.mean.values()[i];
            let sp = pre.std.values()[i];
            if mt.is_nan() || mp.is_nan() || sp.is_nan() {
                return (f32::NAN, f32::NAN, MASK_NODATA);
            }
            let out = classify_pixel(mt as f64, mp as f64, sp as f64, cfg);
            let flag = out.damage && valid.values()[i] == 1;
            (out.delta as f32, out.z as f32, flag as u8)
        })
        .collect();
    let meta = *event.meta();
    let (mut delta, mut z, mut flag) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (d, zz, f) in cells {
        delta.push(d);
        z.push(zz);
        flag.push(f);
    }
    Ok(DetectionGrid {
        timestep_date: event.label.timestep_date,
        delta: Grid::new(meta, delta)?,
        z: Grid::new(meta, z)?,
        flag: Grid::new(meta, flag)?,
        valid,
    })
}

fn check_series(detections: &[DetectionGrid]) -> Result<()> {
    for w in detections.windows(2) {
        if w[1].timestep_date <= w[0].timestep_date {
            return Err(Error::Ordering(format!(
                "{} follows {}",
                w[1].timestep_date, w[0].timestep_date
            )));
        }
        w[0].meta().ensure_aligned(w[1].meta(), "detection series")?;
    }
    Ok(())
}

/// Pixelwise OR of flags over every timestep on or before `up_to`.
/// Pixels never observed stay nodata; an empty series yields `None`.
pub fn accumulate_damage(detections: &[DetectionGrid], up_to: NaiveDate) -> Result<Option<MaskGrid>> {
    check_series(detections)?;
    let Some(first) = detections.first() else {
        return Ok(None);
    };
    let mut acc = MaskGrid::nodata_like(*first.meta());
    for d in detections.iter().take_while(|d| d.timestep_date <= up_to) {
        or_into(&mut acc, &d.flag);
    }
    for v in acc.values_mut() {
        if *v == MASK_NODATA {
            *v = 0;
        }
    }
    Ok(Some(acc))
}

/// ORs `flags` into `acc`: 1 wins, then 0, nodata only where both are nodata.
pub fn or_into(acc: &mut MaskGrid, flags: &MaskGrid) {
    for (a, &f) in acc.values_mut().iter_mut().zip(flags.values()) {
        *a = match (*a, f) {
            (1, _) | (_, 1) => 1,
            (0, _) | (_, 0) => 0,
            _ => MASK_NODATA,
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DamageRecord {
    pub row: usize,
    pub col: usize,
    pub first_detected: NaiveDate,
    pub confirmed: Option<NaiveDate>,
    pub days_to_confirm: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Persistence {
    /// Pixels re-detected within the persistence window.
    pub confirmed: MaskGrid,
    /// One record per ever-flagged pixel, row-major order.
    pub records: Vec<DamageRecord>,
}

pub fn confirm_persistence(detections: &[DetectionGrid], cfg: &DetectorConfig) -> Result<Persistence> {
    check_series(detections)?;
    let Some(first) = detections.first() else {
        return Err(Error::Ordering("empty detection series".into()));
    };
    let meta = *first.meta();
    let mut confirmed = MaskGrid::filled(meta, 0);
    let mut records = Vec::new();
    for row in 0..meta.height {
        for col in 0..meta.width {
            let mut hits = detections.iter().filter(|d| d.flag.is_set(row, col)).map(|d| d.timestep_date);
            let Some(d0) = hits.next() else { continue };
            let d1 = hits.next();
            let days = d1.map(|d| (d - d0).num_days());
            if days.is_some_and(|n| n <= cfg.persistence_window_days) {
                confirmed.set(row, col, 1);
            }
            records.push(DamageRecord {
                row,
                col,
                first_detected: d0,
                confirmed: d1,
                days_to_confirm: days,
            });
        }
    }
    Ok(Persistence { confirmed, records })
}

/// Per-pixel date of first detection, `None` where never flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstDetection {
    pub meta: GridMeta,
    dates: Vec<Option<NaiveDate>>,
}

impl FirstDetection {
    pub fn from_series(detections: &[DetectionGrid]) -> Result<Self> {
        check_series(detections)?;
        let meta = *detections
            .first()
            .ok_or_else(|| Error::Ordering("empty detection series".into()))?
            .meta();
        let mut dates = vec![None; meta.len()];
        for d in detections {
            for (slot, &f) in dates.iter_mut().zip(d.flag.values()) {
                if f == 1 && slot.is_none() {
                    *slot = Some(d.timestep_date);
                }
            }
        }
        Ok(Self { meta, dates })
    }

    pub fn from_records(meta: GridMeta, records: &[DamageRecord]) -> Self {
        let mut dates = vec![None; meta.len()];
        for r in records {
            dates[r.row * meta.width + r.col] = Some(r.first_detected);
        }
        Self { meta, dates }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<NaiveDate> {
        self.dates[row * self.meta.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub days: i64,
    pub probability: f64,
}

/// Empirical CDF of days-to-confirmation over confirmed records; one point
/// per distinct day count.
pub fn persistence_cdf(records: &[DamageRecord]) -> Vec<CdfPoint> {
    let mut days: Vec<i64> = records.iter().filter_map(|r| r.days_to_confirm).collect();
    days.sort_unstable();
    let n = days.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &d) in days.iter().enumerate() {
        let p = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.days == d => last.probability = p,
            _ => out.push(CdfPoint { days: d, probability: p }),
        }
    }
    out
}

/// CDF value at `days` (step function, 0 before the first point).
pub fn cdf_at(cdf: &[CdfPoint], days: i64) -> f64 {
    cdf.iter().take_while(|p| p.days <= days).last().map_or(0.0, |p| p.probability)
}

pub fn write_records_csv<W: Write>(records: &[DamageRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["row", "col", "first_detected", "confirmed", "days_to_confirm"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in records {
        wtr.write_record([
            r.row.to_string(),
            r.col.to_string(),
            r.first_detected.to_string(),
            r.confirmed.map(|d| d.to_string()).unwrap_or_default(),
            r.days_to_confirm.map(|d| d.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<DamageRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("damage records: {e}"))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct DetectionPaths {
    pub flag: PathBuf,
    pub delta: PathBuf,
    pub z: PathBuf,
    pub valid: PathBuf,
}

impl DetectionPaths {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            flag: dir.join(format!("{stem}_flag.tif")),
            delta: dir.join(format!("{stem}_delta.tif")),
            z: dir.join(format!("{stem}_z.tif")),
            valid: dir.join(format!("{stem}_valid.tif")),
        }
    }
}

pub fn write_detection(d: &DetectionGrid, dir: &Path, stem: &str) -> Result<DetectionPaths> {
    let paths = DetectionPaths::in_dir(dir, stem);
    raster::write_geotiff(&d.flag, &paths.flag)?;
    raster::write_geotiff(&d.delta, &paths.delta)?;
    raster::write_geotiff(&d.z, &paths.z)?;
    raster::write_geotiff(&d.valid, &paths.valid)?;
    Ok(paths)
}

pub fn read_detection(dir: &Path, stem: &str, timestep_date: NaiveDate) -> Result<DetectionGrid> {
    let paths = DetectionPaths::in_dir(dir, stem);
    let flag: MaskGrid = raster::read_geotiff(&paths.flag)?;
    let delta: FloatGrid = raster::read_geotiff(&paths.delta)?;
    let z: FloatGrid = raster::read_geotiff(&paths.z)?;
    let valid: MaskGrid = raster::read_geotiff(&paths.valid)?;
    flag.meta.ensure_aligned(&delta.meta, "detection delta")?;
    flag.meta.ensure_aligned(&z.meta, "detection z")?;
    flag.meta.ensure_aligned(&valid.meta, "detection valid mask")?;
    Ok(DetectionGrid {
        timestep_date,
        delta,
        z,
        flag,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Epoch;
    use crate::raster::DEFAULT_EPSG;
    use crate::reduce::SummaryLabel;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn meta(w: usize, h: usize) -> GridMeta {
        GridMeta::new(DEFAULT_EPSG, 0.0, 0.0, 40.0, w, h).unwrap()
    }

    fn summary(epoch: Epoch, mean: Vec<f32>, std: Vec<f32>) -> StackSummary {
        let m = meta(mean.len(), 1);
        StackSummary {
            label: SummaryLabel::new(epoch, date(2023, 10, 12)),
            count: Grid::filled(m, 25),
            mean: Grid::new(m, mean).unwrap(),
            std: Grid::new(m, std).unwrap(),
            min_count: 15,
        }
    }

    fn flags(on: &[u8], day: NaiveDate) -> DetectionGrid {
        let m = meta(on.len(), 1);
        DetectionGrid {
            timestep_date: day,
            delta: FloatGrid::filled(m, 0.0),
            z: FloatGrid::filled(m, 0.0),
            flag: Grid::new(m, on.to_vec()).unwrap(),
            valid: MaskGrid::filled(m, 1),
        }
    }

    #[test]
    fn classify_pixel_examples() {
        let cfg = DetectorConfig::default();
        let out = classify_pixel(0.20, 0.50, 0.12, &cfg);
        assert!((out.delta + 0.30).abs() < 1e-12);
        assert!((out.z + 2.5).abs() < 1e-12);
        assert!(out.damage);

        let out = classify_pixel(0.5, 0.5, 0.12, &cfg);
        assert_eq!(out.delta, 0.0);
        assert!(!out.damage);

        let out = classify_pixel(0.20, 0.50, 0.20, &cfg);
        assert!(out.delta < cfg.k);
        assert!((out.z + 1.5).abs() < 1e-12);
        assert!(!out.damage);
    }

    #[test]
    fn validity_examples() {
        let cfg = DetectorConfig::default();
        assert!(pixel_valid(0.08, &cfg));
        assert!(!pixel_valid(0.12, &cfg));
        assert!(pixel_valid(0.0, &cfg));
        assert!((cfg.max_valid_sigma() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn grid_flags_require_validity() {
        let cfg = DetectorConfig::default();
        // Pixel 0: damage on a valid pixel; pixel 1: both thresholds met but
        // σ too large for monitoring; pixel 2: nodata.
        let pre = summary(Epoch::Pre, vec![0.7, 0.8, f32::NAN], vec![0.05, 0.2, 0.05]);
        let event = summary(Epoch::Conflict, vec![0.2, 0.1, 0.2], vec![0.0; 3]);
        let det = classify_damage(&event, &pre, &cfg).unwrap();
        assert_eq!(det.flag.values(), &[1, 0, MASK_NODATA]);
        assert_eq!(det.valid.values(), &[1, 0, MASK_NODATA]);
        assert!(det.delta.get(0, 2).is_nan());
        assert!((det.z.get(0, 1) + 3.5).abs() < 1e-6);
    }

    #[test]
    fn misaligned_summaries() {
        let cfg = DetectorConfig::default();
        let pre = summary(Epoch::Pre, vec![0.7, 0.8], vec![0.05, 0.2]);
        let event = summary(Epoch::Conflict, vec![0.2, 0.1, 0.3], vec![0.0; 3]);
        assert!(matches!(classify_damage(&event, &pre, &cfg), Err(Error::Alignment(_))));
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        assert!(DetectorConfig { k: 0.1, ..Default::default() }.validate().is_err());
        assert!(DetectorConfig { z_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(DetectorConfig { sigma_floor: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn persistence_examples() {
        let cfg = DetectorConfig::default();
        let d0 = date(2023, 10, 12);
        let series = vec![
            flags(&[1, 1, 1], d0),
            flags(&[1, 0, 0], date(2023, 10, 24)),
            flags(&[0, 0, 1], date(2023, 11, 21)),
        ];
        let p = confirm_persistence(&series, &cfg).unwrap();
        assert_eq!(p.records.len(), 3);
        assert_eq!(p.records[0].days_to_confirm, Some(12));
        assert_eq!(p.records[0].confirmed, Some(date(2023, 10, 24)));
        assert_eq!(p.records[1].confirmed, None);
        assert_eq!(p.records[2].days_to_confirm, Some(40));
        assert_eq!(p.confirmed.values(), &[1, 0, 0]);
    }

    #[test]
    fn unsorted_series_is_rejected() {
        let cfg = DetectorConfig::default();
        let series = vec![flags(&[1], date(2023, 10, 24)), flags(&[1], date(2023, 10, 12))];
        assert!(matches!(confirm_persistence(&series, &cfg), Err(Error::Ordering(_))));
        assert!(matches!(accumulate_damage(&series, date(2024, 1, 1)), Err(Error::Ordering(_))));
    }

    #[test]
    fn accumulation() {
        let t1 = date(2023, 10, 12);
        let t2 = date(2023, 10, 24);
        let series = vec![flags(&[1, 0], t1), flags(&[0, 0], t2)];
        let acc = accumulate_damage(&series, t2).unwrap().unwrap();
        assert_eq!(acc.values(), &[1, 0]);
        assert!(accumulate_damage(&[], t2).unwrap().is_none());
        // Before the first timestep nothing has accumulated.
        let early = accumulate_damage(&series, date(2023, 10, 1)).unwrap().unwrap();
        assert_eq!(early.values(), &[0, 0]);
    }

    #[test]
    fn cdf_small_cases() {
        let rec = |d: i64| DamageRecord {
            row: 0,
            col: 0,
            first_detected: date(2023, 10, 12),
            confirmed: Some(date(2023, 10, 12) + chrono::Duration::days(d)),
            days_to_confirm: Some(d),
        };
        let cdf = persistence_cdf(&[rec(12), rec(24)]);
        assert_eq!(cdf, vec![CdfPoint { days: 12, probability: 0.5 }, CdfPoint { days: 24, probability: 1.0 }]);
        let cdf = persistence_cdf(&[rec(12), rec(12), rec(12)]);
        assert_eq!(cdf, vec![CdfPoint { days: 12, probability: 1.0 }]);
        assert!(persistence_cdf(&[]).is_empty());
        assert_eq!(cdf_at(&cdf, 11), 0.0);
        assert_eq!(cdf_at(&cdf, 400), 1.0);
    }

    #[test]
    fn records_csv_roundtrip() {
        let records = vec![
            DamageRecord {
                row: 3,
                col: 4,
                first_detected: date(2023, 10, 12),
                confirmed: Some(date(2023, 10, 24)),
                days_to_confirm: Some(12),
            },
            DamageRecord {
                row: 5,
                col: 0,
                first_detected: date(2023, 11, 5),
                confirmed: None,
                days_to_confirm: None,
            },
        ];
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row,col,first_detected,confirmed,days_to_confirm\n"));
        assert!(text.contains("5,0,2023-11-05,,\n"));
        assert_eq!(read_records_csv(&buf[..]).unwrap(), records);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn flag_series() -> impl Strategy<Value = Vec<Vec<u8>>> {
            prop::collection::vec(prop::collection::vec(prop::sample::select(vec![0u8, 1, MASK_NODATA]), 6), 1..8)
        }

        proptest! {
            #[test]
            fn accumulation_is_monotone(series in flag_series(), a in 0usize..8, b in 0usize..8) {
                let start = date(2023, 10, 12);
                let dets: Vec<_> = series
                    .iter()
                    .enumerate()
                    .map(|(i, f)| flags(f, start + chrono::Duration::days(12 * i as i64)))
                    .collect();
                let (lo, hi) = (a.min(b), a.max(b));
                let day = |i: usize| start + chrono::Duration::days(12 * i as i64);
                let early = accumulate_damage(&dets, day(lo)).unwrap().unwrap();
                let late = accumulate_damage(&dets, day(hi)).unwrap().unwrap();
                for (e, l) in early.values().iter().zip(late.values()) {
                    prop_assert!(*e <= *l);
                }
            }

            #[test]
            fn flags_imply_validity(
                cells in prop::collection::vec((0.0f32..1.0, 0.0f32..1.0, 0.0f32..0.3), 1..40),
            ) {
                let cfg = DetectorConfig::default();
                let pre = summary(Epoch::Pre, cells.iter().map(|c| c.1).collect(), cells.iter().map(|c| c.2).collect());
                let event = summary(Epoch::Conflict, cells.iter().map(|c| c.0).collect(), vec![0.0; cells.len()]);
                let d = classify_damage(&event, &pre, &cfg).unwrap();
                for (i, (&f, &v)) in d.flag.values().iter().zip(d.valid.values()).enumerate() {
                    if f == 1 {
                        prop_assert_eq!(v, 1);
                        let out = classify_pixel(cells[i].0 as f64, cells[i].1 as f64, cells[i].2 as f64, &cfg);
                        prop_assert!(out.damage);
                    }
                }
            }
        }
    }
}
