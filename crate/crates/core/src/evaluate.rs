//! Agreement against point-labelled reference surveys, distribution-overlap
//! diagnostics, and merging of CCD and reference damage.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aggregate::{BuildingDamageFlag, BuildingFootprint};
use crate::detect::{accumulate_damage, DetectionGrid};
use crate::error::{Error, Result};
use crate::raster::{Grid, MaskGrid};
use crate::reduce::StackSummary;

/// Default number of CCD timesteps after a survey whose flags still count.
pub const DEFAULT_GRACE_TIMESTEPS: usize = 9;
pub const DEFAULT_HISTOGRAM_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DamageLabel {
    Destroyed,
    Severe,
    Moderate,
    Possible,
}

impl FromStr for DamageLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "destroyed" => Ok(Self::Destroyed),
            "severe" | "severe damage" | "severely damaged" => Ok(Self::Severe),
            "moderate" | "moderate damage" | "moderately damaged" => Ok(Self::Moderate),
            "possible" | "possible damage" | "possibly damaged" => Ok(Self::Possible),
            other => Err(Error::Format(format!("unknown damage label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
    pub survey_date: NaiveDate,
    pub label: DamageLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    ValidOnly,
    All,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::ValidOnly => "valid-only",
            Scope::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointOutcome {
    Hit,
    Miss,
    OutOfValid,
    OutOfCoverage,
}

/// Classifies each point by the flag of its containing pixel. Damage
/// severities are not distinguished.
pub fn match_points(points: &[ReferencePoint], cumulative: &MaskGrid, valid: &MaskGrid, scope: Scope) -> Result<Vec<PointOutcome>> {
    cumulative.meta.ensure_aligned(&valid.meta, "validity mask")?;
    Ok(points
        .par_iter()
        .map(|p| match cumulative.meta.locate(p.x, p.y) {
            None => PointOutcome::OutOfCoverage,
            Some((r, c)) if scope == Scope::ValidOnly && !valid.is_set(r, c) => PointOutcome::OutOfValid,
            Some((r, c)) if cumulative.is_set(r, c) => PointOutcome::Hit,
            Some(_) => PointOutcome::Miss,
        })
        .collect())
}

/// Last timestep date whose flags count towards a survey on `survey_date`:
/// everything through the survey plus the next `grace` timesteps.
pub fn grace_cutoff(timesteps: &[NaiveDate], survey_date: NaiveDate, grace: usize) -> Option<NaiveDate> {
    let through = timesteps.partition_point(|&d| d <= survey_date);
    let last = (through + grace).min(timesteps.len());
    (last > 0).then(|| timesteps[last - 1])
}

/// Cumulative damage flags for a survey, honouring the grace window.
pub fn cumulative_for_survey(detections: &[DetectionGrid], survey_date: NaiveDate, grace: usize) -> Result<Option<MaskGrid>> {
    let dates: Vec<NaiveDate> = detections.iter().map(|d| d.timestep_date).collect();
    match grace_cutoff(&dates, survey_date, grace) {
        Some(cutoff) => accumulate_damage(detections, cutoff),
        None => Ok(detections.first().map(|d| Grid::filled(*d.meta(), 0u8))),
    }
}

/// Pixels valid for monitoring in at least `min_timesteps` of the detections
/// dated on or before `up_to`.
pub fn monitoring_valid_mask(detections: &[DetectionGrid], up_to: NaiveDate, min_timesteps: usize) -> Option<MaskGrid> {
    let first = detections.first()?;
    let mut counts = vec![0usize; first.meta().len()];
    for d in detections.iter().filter(|d| d.timestep_date <= up_to) {
        for (c, &v) in counts.iter_mut().zip(d.valid.values()) {
            *c += (v == 1) as usize;
        }
    }
    let data = counts.into_iter().map(|c| (c >= min_timesteps) as u8).collect();
    Grid::new(*first.meta(), data).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub survey_date: NaiveDate,
    pub scope: Scope,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub agreement: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
    pub csi: f64,
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// F1 as the harmonic mean of TPR and 1 − FPR, both given in percent.
pub fn f1_from_rates(tpr_pct: f64, fpr_pct: f64) -> f64 {
    let tpr = tpr_pct / 100.0;
    let tnr = 1.0 - fpr_pct / 100.0;
    if tpr + tnr == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * tpr * tnr / (tpr + tnr)
    }
}

impl AgreementReport {
    pub fn from_counts(survey_date: NaiveDate, scope: Scope, tp: u64, tn: u64, fp: u64, fn_: u64) -> Result<Self> {
        if tp + tn + fp + fn_ == 0 {
            return Err(Error::EmptyReport);
        }
        let tpr = pct(tp, tp + fn_);
        let fpr = pct(fp, fp + tn);
        Ok(Self {
            survey_date,
            scope,
            tp,
            tn,
            fp,
            fn_,
            agreement: pct(tp + tn, tp + tn + fp + fn_),
            tpr,
            fpr,
            f1: f1_from_rates(tpr, fpr),
            csi: pct(tp, tp + fp + fn_),
        })
    }

    /// Reference locations scored in the conflict epoch.
    pub fn total_locations(&self) -> u64 {
        self.tp + self.fn_
    }
}

/// Conflict-epoch hits are true positives; counterfactual-epoch hits are
/// false positives.
pub fn agreement_metrics(
    survey_date: NaiveDate,
    scope: Scope,
    conflict: &[PointOutcome],
    counterfactual: &[PointOutcome],
) -> Result<AgreementReport> {
    let count = |v: &[PointOutcome], o: PointOutcome| v.iter().filter(|&&x| x == o).count() as u64;
    AgreementReport::from_counts(
        survey_date,
        scope,
        count(conflict, PointOutcome::Hit),
        count(counterfactual, PointOutcome::Miss),
        count(counterfactual, PointOutcome::Hit),
        count(conflict, PointOutcome::Miss),
    )
}

pub fn write_agreement_csv<W: Write>(reports: &[AgreementReport], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    wtr.write_record(["image_date", "agreement", "tpr", "fpr", "f1", "csi", "total_locations"])
        .map_err(fmt)?;
    for r in reports {
        wtr.write_record([
            r.survey_date.to_string(),
            format!("{:.2}", r.agreement),
            format!("{:.2}", r.tpr),
            format!("{:.2}", r.fpr),
            format!("{:.2}", r.f1),
            format!("{:.2}", r.csi),
            r.total_locations().to_string(),
        ])
        .map_err(fmt)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Probability mass over explicit bin edges (`edges.len() == probs.len() + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Histogram {
    /// Normalised histogram of the finite `values` over `bins` equal-width bins
    /// on [lo, hi]; values outside the range are clamped into the end bins.
    pub fn from_values(values: impl IntoIterator<Item = f64>, bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Binning(format!("{bins} bins over [{lo}, {hi}]")));
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0u64; bins];
        let mut n = 0u64;
        for v in values.into_iter().filter(|v| v.is_finite()) {
            let idx = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[idx] += 1;
            n += 1;
        }
        let probs = counts
            .into_iter()
            .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        Ok(Self { edges, probs })
    }
}

/// Hellinger distance between two histograms on identical bin edges.
///
/// Inputs that do not sum to one are renormalised (with a warning); the
/// Bhattacharyya coefficient is divided by sqrt(ΣP·ΣQ), which keeps H(P,P)
/// exactly zero and the result exactly symmetric.
pub fn hellinger_distance(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges || p.probs.len() != q.probs.len() || p.edges.len() != p.probs.len() + 1 {
        return Err(Error::Binning("histograms do not share bin edges".into()));
    }
    if p.probs.iter().chain(&q.probs).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Binning("histogram has negative or non-finite mass".into()));
    }
    let sp: f64 = p.probs.iter().sum();
    let sq: f64 = q.probs.iter().sum();
    if sp == 0.0 || sq == 0.0 {
        return Err(Error::Binning("histogram has no mass".into()));
    }
    if (sp - 1.0).abs() > 1e-9 || (sq - 1.0).abs() > 1e-9 {
        tracing::warn!(sum_p = sp, sum_q = sq, "renormalising histograms for Hellinger distance");
    }
    let bc: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a * b).sqrt()).sum();
    Ok((1.0 - bc / (sp * sq).sqrt()).max(0.0).sqrt().min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub timestep_date: NaiveDate,
    pub hellinger: f64,
    /// Region-average mean coherence of the event stack minus that of the
    /// pre stack, over pixels defined in both.
    pub mean_offset: f64,
    pub pixels: usize,
}

/// Compares the distribution of stack-mean coherence inside `region`
/// between an event summary and its pre summary.
pub fn stability_report(region: &MaskGrid, conflict: &StackSummary, pre: &StackSummary, bins: usize) -> Result<StabilityReport> {
    region.meta.ensure_aligned(conflict.meta(), "conflict summary")?;
    region.meta.ensure_aligned(pre.meta(), "pre summary")?;
    let idx: Vec<usize> = region
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i)
        .collect();
    let values = |s: &StackSummary| -> Vec<f64> {
        idx.iter()
            .map(|&i| s.mean.values()[i] as f64)
            .filter(|v| v.is_finite())
            .collect()
    };
    let (vc, vp) = (values(conflict), values(pre));
    if vc.is_empty() || vp.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let hc = Histogram::from_values(vc, bins, 0.0, 1.0)?;
    let hp = Histogram::from_values(vp, bins, 0.0, 1.0)?;
    let both: Vec<(f64, f64)> = idx
        .iter()
        .map(|&i| (conflict.mean.values()[i] as f64, pre.mean.values()[i] as f64))
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .collect();
    let mean_offset = if both.is_empty() {
        0.0
    } else {
        both.iter().map(|(a, b)| a - b).sum::<f64>() / both.len() as f64
    };
    Ok(StabilityReport {
        timestep_date: conflict.label.timestep_date,
        hellinger: hellinger_distance(&hc, &hp)?,
        mean_offset,
        pixels: both.len(),
    })
}

pub fn write_stability_csv<W: Write>(reports: &[StabilityReport], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    wtr.write_record(["timestep_date", "hellinger", "mean_offset", "pixels"]).map_err(fmt)?;
    for r in reports {
        wtr.write_record([
            r.timestep_date.to_string(),
            format!("{:.6}", r.hellinger),
            format!("{:.6}", r.mean_offset),
            r.pixels.to_string(),
        ])
        .map_err(fmt)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    CcdOnly,
    ReferenceOnly,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedDamage {
    pub union_count: usize,
    /// Provenance of every union-damaged building, keyed by building id.
    pub provenance: BTreeMap<String, Provenance>,
}

impl MergedDamage {
    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.values().filter(|&&v| v == p).count()
    }
}

/// Coarse spatial hash of footprint bounding boxes.
struct FootprintIndex<'a> {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    footprints: &'a [BuildingFootprint],
}

impl<'a> FootprintIndex<'a> {
    fn new(footprints: &'a [BuildingFootprint], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, fp) in footprints.iter().enumerate() {
            let (x0, y0, x1, y1) = fp.bbox();
            for cx in (x0 / cell).floor() as i64..=(x1 / cell).floor() as i64 {
                for cy in (y0 / cell).floor() as i64..=(y1 / cell).floor() as i64 {
                    buckets.entry((cx, cy)).or_default().push(i);
                }
            }
        }
        Self { cell, buckets, footprints }
    }

    fn containing(&self, x: f64, y: f64) -> Option<usize> {
        let key = ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64);
        self.buckets
            .get(&key)?
            .iter()
            .copied()
            .find(|&i| self.footprints[i].contains((x, y)))
    }
}

/// Union of CCD-damaged buildings and buildings containing a reference point.
pub fn merge_sources(footprints: &[BuildingFootprint], flags: &[BuildingDamageFlag], points: &[ReferencePoint]) -> Result<MergedDamage> {
    if footprints.len() != flags.len() {
        return Err(Error::Accounting("footprint and flag counts differ".into()));
    }
    let index = FootprintIndex::new(footprints, 100.0);
    let mut referenced = vec![false; footprints.len()];
    let hits: Vec<Option<usize>> = points.par_iter().map(|p| index.containing(p.x, p.y)).collect();
    for i in hits.into_iter().flatten() {
        referenced[i] = true;
    }
    let mut provenance = BTreeMap::new();
    for ((fp, flag), &r) in footprints.iter().zip(flags).zip(&referenced) {
        let p = match (flag.damaged, r) {
            (true, true) => Provenance::Both,
            (true, false) => Provenance::CcdOnly,
            (false, true) => Provenance::ReferenceOnly,
            (false, false) => continue,
        };
        provenance.insert(fp.id.clone(), p);
    }
    Ok(MergedDamage {
        union_count: provenance.len(),
        provenance,
    })
}

/// Reads GeoJSON Point features carrying `label` and `survey_date` properties.
pub fn read_points_geojson(text: &str) -> Result<Vec<ReferencePoint>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("reference points: {e}")))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("reference points: not a FeatureCollection".into()))?;
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let coords = f
                .pointer("/geometry/coordinates")
                .and_then(Value::as_array)
                .filter(|c| f.pointer("/geometry/type").and_then(Value::as_str) == Some("Point") && c.len() >= 2)
                .ok_or_else(|| Error::Format(format!("feature {i}: expected a Point geometry")))?;
            let (Some(x), Some(y)) = (coords[0].as_f64(), coords[1].as_f64()) else {
                return Err(Error::Format(format!("feature {i}: non-numeric coordinates")));
            };
            let label = f
                .pointer("/properties/label")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Format(format!("feature {i}: missing label")))?
                .parse()?;
            let survey_date = f
                .pointer("/properties/survey_date")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Format(format!("feature {i}: missing survey_date")))?
                .parse::<NaiveDate>()
                .map_err(|e| Error::Format(format!("feature {i}: survey_date: {e}")))?;
            Ok(ReferencePoint { x, y, survey_date, label })
        })
        .collect()
}

pub fn read_points(path: &Path) -> Result<Vec<ReferencePoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_points_geojson(&text)
}

pub fn points_to_geojson(points: &[ReferencePoint]) -> Value {
    json!({
        "type": "FeatureCollection",
        "features": points.iter().map(|p| json!({
            "type": "Feature",
            "properties": { "label": p.label, "survey_date": p.survey_date.to_string() },
            "geometry": { "type": "Point", "coordinates": [p.x, p.y] },
        })).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Epoch;
    use crate::raster::{GridMeta, DEFAULT_EPSG};
    use crate::reduce::{reduce_stack, SummaryLabel};
    use proptest::prelude::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn meta() -> GridMeta {
        GridMeta::new(DEFAULT_EPSG, 0.0, 80.0, 40.0, 2, 2).unwrap()
    }

    fn point(x: f64, y: f64) -> ReferencePoint {
        ReferencePoint {
            x,
            y,
            survey_date: date(2023, 11, 7),
            label: DamageLabel::Destroyed,
        }
    }

    #[test]
    fn point_matching() {
        let flags = Grid::new(meta(), vec![1u8, 0, 1, 0]).unwrap();
        let valid = Grid::new(meta(), vec![1u8, 1, 0, 1]).unwrap();
        let pts = [point(10.0, 70.0), point(50.0, 70.0), point(10.0, 10.0), point(500.0, 10.0)];
        let out = match_points(&pts, &flags, &valid, Scope::ValidOnly).unwrap();
        assert_eq!(
            out,
            vec![PointOutcome::Hit, PointOutcome::Miss, PointOutcome::OutOfValid, PointOutcome::OutOfCoverage]
        );
        let all = match_points(&pts, &flags, &valid, Scope::All).unwrap();
        assert_eq!(all[2], PointOutcome::Hit);
    }

    #[test]
    fn agreement_example() {
        let r = AgreementReport::from_counts(date(2023, 11, 7), Scope::ValidOnly, 9, 10, 0, 1).unwrap();
        assert!((r.agreement - 95.0).abs() < 1e-12);
        assert!((r.tpr - 90.0).abs() < 1e-12);
        assert_eq!(r.fpr, 0.0);
        assert!((r.csi - 90.0).abs() < 1e-12);
        assert!((r.f1 - 94.7368).abs() < 1e-3);
    }

    #[test]
    fn f1_from_reference_rates() {
        assert!((f1_from_rates(56.25, 0.29) - 71.9).abs() < 0.05);
    }

    #[test]
    fn degenerate_and_empty_reports() {
        let r = AgreementReport::from_counts(date(2023, 11, 7), Scope::All, 0, 12, 0, 0).unwrap();
        assert_eq!((r.agreement, r.tpr, r.fpr, r.f1), (100.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            agreement_metrics(date(2023, 11, 7), Scope::All, &[], &[]),
            Err(Error::EmptyReport)
        ));
        let conflict = [PointOutcome::Hit, PointOutcome::Miss, PointOutcome::OutOfValid];
        let cf = [PointOutcome::Miss, PointOutcome::Hit, PointOutcome::OutOfValid];
        let r = agreement_metrics(date(2023, 11, 7), Scope::ValidOnly, &conflict, &cf).unwrap();
        assert_eq!((r.tp, r.fn_, r.fp, r.tn), (1, 1, 1, 1));
    }

    #[test]
    fn grace_window() {
        let ts: Vec<NaiveDate> = (0..12).map(|i| date(2023, 10, 12) + chrono::Duration::days(12 * i)).collect();
        assert_eq!(grace_cutoff(&ts, date(2023, 10, 12), 0), Some(ts[0]));
        assert_eq!(grace_cutoff(&ts, date(2023, 10, 20), 2), Some(ts[2]));
        assert_eq!(grace_cutoff(&ts, date(2023, 10, 20), 9), Some(ts[9]));
        assert_eq!(grace_cutoff(&ts, date(2023, 10, 20), 50), Some(ts[11]));
        assert_eq!(grace_cutoff(&ts, date(2023, 10, 1), 0), None);
        assert_eq!(grace_cutoff(&ts, date(2023, 10, 1), 1), Some(ts[0]));
    }

    #[test]
    fn hellinger_examples() {
        let h = |p: Vec<f64>, q: Vec<f64>| {
            let edges: Vec<f64> = (0..=p.len()).map(|i| i as f64).collect();
            hellinger_distance(
                &Histogram { edges: edges.clone(), probs: p },
                &Histogram { edges, probs: q },
            )
        };
        assert_eq!(h(vec![0.3, 0.7], vec![0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(h(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap(), 1.0);
        let expected = (1.0 - 0.5f64.sqrt()).sqrt();
        assert!((h(vec![0.5, 0.5], vec![1.0, 0.0]).unwrap() - expected).abs() < 1e-12);
        // Unnormalised input is rescaled.
        assert_eq!(h(vec![2.0, 2.0], vec![0.5, 0.5]).unwrap(), 0.0);
        let a = Histogram { edges: vec![0.0, 1.0], probs: vec![1.0] };
        let b = Histogram { edges: vec![0.0, 2.0], probs: vec![1.0] };
        assert!(matches!(hellinger_distance(&a, &b), Err(Error::Binning(_))));
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::from_values([0.0, 0.005, 0.5, 1.0, f64::NAN], 100, 0.0, 1.0).unwrap();
        assert_eq!(h.edges.len(), 101);
        assert_eq!(h.probs[0], 0.5);
        assert_eq!(h.probs[50], 0.25);
        assert_eq!(h.probs[99], 0.25);
    }

    fn summary(values: &[f32], epoch: Epoch) -> StackSummary {
        let m = GridMeta::new(DEFAULT_EPSG, 0.0, 0.0, 40.0, values.len(), 1).unwrap();
        let g = Grid::new(m, values.to_vec()).unwrap();
        reduce_stack(&[g.clone(), g], 2, SummaryLabel::new(epoch, date(2023, 11, 7))).unwrap()
    }

    #[test]
    fn stability_identity_and_shift() {
        let pre = summary(&[0.7, 0.72, 0.75, 0.8], Epoch::Pre);
        let region = Grid::filled(*pre.meta(), 1u8);
        let r = stability_report(&region, &pre, &pre, 100).unwrap();
        assert_eq!((r.hellinger, r.mean_offset), (0.0, 0.0));
        let war = summary(&[0.2, 0.22, 0.25, 0.3], Epoch::Conflict);
        let r = stability_report(&region, &war, &pre, 100).unwrap();
        assert_eq!(r.hellinger, 1.0);
        assert!((r.mean_offset + 0.5).abs() < 1e-6);
        let empty = Grid::filled(*pre.meta(), 0u8);
        assert!(matches!(stability_report(&empty, &war, &pre, 100), Err(Error::EmptyRegion)));
    }

    fn flag(id: &str, damaged: bool) -> BuildingDamageFlag {
        BuildingDamageFlag {
            building_id: id.into(),
            damaged,
            first_detected: None,
            coverage_fraction: 0.0,
            in_coverage: true,
        }
    }

    #[test]
    fn merging() {
        let fps: Vec<_> = (0..5)
            .map(|i| BuildingFootprint::rectangle(format!("b{i}"), "r", (i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0)).unwrap())
            .collect();
        let flags: Vec<_> = (0..5).map(|i| flag(&format!("b{i}"), i < 3)).collect();
        // Points in b2 (also CCD) and b3 (reference only), plus one in open ground.
        let pts = [point(45.0, 5.0), point(65.0, 5.0), point(15.0, 5.0)];
        let m = merge_sources(&fps, &flags, &pts).unwrap();
        assert_eq!(m.union_count, 4);
        assert_eq!(m.provenance["b2"], Provenance::Both);
        assert_eq!(m.provenance["b3"], Provenance::ReferenceOnly);
        assert_eq!(m.count(Provenance::CcdOnly), 2);
        assert_eq!(merge_sources(&fps, &flags, &[]).unwrap().union_count, 3);
    }

    #[test]
    fn points_geojson_roundtrip() {
        let pts = vec![point(1.5, 2.5)];
        let text = points_to_geojson(&pts).to_string();
        assert_eq!(read_points_geojson(&text).unwrap(), pts);
        assert!("Severe Damage".parse::<DamageLabel>().is_ok());
        assert!("rubble".parse::<DamageLabel>().is_err());
    }

    fn histogram_strategy(bins: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, bins).prop_filter("non-zero mass", |v| v.iter().sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn hellinger_properties(p in histogram_strategy(8), q in histogram_strategy(8)) {
            let edges: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
            let hp = Histogram { edges: edges.clone(), probs: p };
            let hq = Histogram { edges, probs: q };
            let pq = hellinger_distance(&hp, &hq).unwrap();
            let qp = hellinger_distance(&hq, &hp).unwrap();
            prop_assert_eq!(pq, qp);
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert_eq!(hellinger_distance(&hp, &hp).unwrap(), 0.0);
        }

        #[test]
        fn agreement_identities(tp in 0u64..10_000, tn in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
            prop_assume!(tp + tn + fp + fn_ > 0);
            let r = AgreementReport::from_counts(date(2024, 1, 6), Scope::All, tp, tn, fp, fn_).unwrap();
            let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
            prop_assert!((r.agreement - 100.0 * (tpf + tnf) / (tpf + tnf + fpf + fnf)).abs() < 1e-9);
            if tp + fn_ > 0 {
                prop_assert!((r.tpr - 100.0 * tpf / (tpf + fnf)).abs() < 1e-9);
            }
            if fp + tn > 0 {
                prop_assert!((r.fpr - 100.0 * fpf / (fpf + tnf)).abs() < 1e-9);
            }
            if tp + fp + fn_ > 0 {
                prop_assert!((r.csi - 100.0 * tpf / (tpf + fpf + fnf)).abs() < 1e-9);
            }
            let (a, b) = (r.tpr / 100.0, 1.0 - r.fpr / 100.0);
            let f1 = if a + b == 0.0 { 0.0 } else { 200.0 * a * b / (a + b) };
            prop_assert!((r.f1 - f1).abs() < 1e-9);
        }
    }
}
