//! Synthetic archives and coherence stacks with known ground truth.
//!
//! Pair coherence follows an exponential decay towards a long-term floor,
//! modulated by a seasonal term and a perpendicular-baseline penalty, plus
//! additive Gaussian noise. Damage replaces the signal with a floor draw for
//! every pair whose time span contains the pixel's event date. Each pair
//! draws from its own ChaCha stream, so output is bit-identical regardless of
//! how the work is partitioned.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::BuildingFootprint;
use crate::catalog::{Acquisition, Catalog, DateWindow, Direction, EpochConfig, InsarPair, StackPlan};
use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::evaluate::{DamageLabel, ReferencePoint};
use crate::raster::{CoherenceGrid, Grid, GridMeta, MaskGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandClass {
    Urban,
    Vegetated,
    Agricultural,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub gamma_base: f64,
    pub gamma_floor: f64,
    pub tau_days: f64,
    pub seasonal_amplitude: f64,
    /// Day of year at which the seasonal sine starts its positive half.
    pub seasonal_onset_doy: f64,
    pub noise_sigma: f64,
}

impl ClassModel {
    fn validate(&self, class: LandClass) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{class:?} model: {what}")));
        if !(0.0..=1.0).contains(&self.gamma_base) || !(0.0..=1.0).contains(&self.gamma_floor) {
            return bad("coherence levels must lie in [0, 1]");
        }
        if !(self.tau_days > 0.0) {
            return bad("decay constant must be positive");
        }
        if !(0.0..=1.0).contains(&self.seasonal_amplitude) {
            return bad("seasonal amplitude must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        Ok(())
    }

    /// Seasonal multiplier for a pair referenced on `date`.
    pub fn season(&self, date: NaiveDate) -> f64 {
        let doy = date.ordinal() as f64;
        1.0 - self.seasonal_amplitude * (2.0 * PI * (doy - self.seasonal_onset_doy) / 365.0).sin().max(0.0)
    }

    /// Noise-free coherence of an undamaged pixel for one pair.
    pub fn coherence(&self, abs_dt_days: f64, reference_date: NaiveDate, bperp_factor: f64) -> f64 {
        let decay = (-abs_dt_days / self.tau_days).exp();
        (self.gamma_floor + (self.gamma_base - self.gamma_floor) * decay * self.season(reference_date) * bperp_factor)
            .clamp(0.0, 1.0)
    }
}

/// Rectangle of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.rows && col >= self.col && col < self.col + self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBlock {
    #[serde(flatten)]
    pub block: Block,
    pub class: LandClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DamageBlock {
    #[serde(flatten)]
    pub block: Block,
    pub event_date: NaiveDate,
}

/// Regular single-track acquisition schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveSpec {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub revisit_days: i64,
    pub orbit_path: u32,
    pub direction: Direction,
    /// Spread of cross-track positions about the nominal track, meters.
    pub position_sigma_m: f64,
    /// Every n-th acquisition is displaced far off track (0 disables).
    pub outlier_every: usize,
    pub outlier_offset_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub crs_epsg: u32,
    pub seed: u64,
    pub background: LandClass,
    /// Later blocks overwrite earlier ones.
    pub class_blocks: Vec<ClassBlock>,
    pub damage_blocks: Vec<DamageBlock>,
    pub models: BTreeMap<LandClass, ClassModel>,
    /// Fractional coherence loss per meter of |B⊥|.
    pub bperp_coefficient_per_m: f64,
    pub archive: ArchiveSpec,
    pub epochs: EpochConfig,
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid literal date")
}

impl SceneSpec {
    /// The 256×256 reference scene: a dense urban core with ~5% of the image
    /// damaged in three waves, flanked by vegetation and farmland.
    pub fn standard(seed: u64) -> Self {
        let models = BTreeMap::from([
            (
                LandClass::Urban,
                ClassModel {
                    gamma_base: 0.8,
                    gamma_floor: 0.2,
                    tau_days: 2000.0,
                    seasonal_amplitude: 0.0,
                    seasonal_onset_doy: 0.0,
                    noise_sigma: 0.05,
                },
            ),
            (
                LandClass::Vegetated,
                ClassModel {
                    gamma_base: 0.45,
                    gamma_floor: 0.1,
                    tau_days: 40.0,
                    seasonal_amplitude: 0.3,
                    seasonal_onset_doy: 60.0,
                    noise_sigma: 0.12,
                },
            ),
            (
                LandClass::Agricultural,
                ClassModel {
                    gamma_base: 0.6,
                    gamma_floor: 0.15,
                    tau_days: 120.0,
                    seasonal_amplitude: 0.4,
                    seasonal_onset_doy: 90.0,
                    noise_sigma: 0.08,
                },
            ),
        ]);
        let block = |row, col, rows, cols| Block { row, col, rows, cols };
        Self {
            width: 256,
            height: 256,
            pixel_size: crate::raster::DEFAULT_PIXEL_SIZE,
            origin_x: 600_000.0,
            origin_y: 3_500_000.0,
            crs_epsg: crate::raster::DEFAULT_EPSG,
            seed,
            background: LandClass::Agricultural,
            class_blocks: vec![
                ClassBlock {
                    block: block(32, 32, 192, 128),
                    class: LandClass::Urban,
                },
                ClassBlock {
                    block: block(16, 176, 224, 64),
                    class: LandClass::Vegetated,
                },
            ],
            damage_blocks: vec![
                DamageBlock {
                    block: block(48, 40, 32, 34),
                    event_date: date(2023, 10, 9),
                },
                DamageBlock {
                    block: block(112, 48, 32, 34),
                    event_date: date(2023, 10, 20),
                },
                DamageBlock {
                    block: block(176, 40, 32, 34),
                    event_date: date(2023, 11, 5),
                },
            ],
            models,
            bperp_coefficient_per_m: 1e-4,
            archive: ArchiveSpec {
                start: date(2019, 1, 4),
                end: date(2024, 2, 28),
                revisit_days: 12,
                orbit_path: 160,
                direction: Direction::Ascending,
                position_sigma_m: 50.0,
                outlier_every: 23,
                outlier_offset_m: 400.0,
            },
            epochs: EpochConfig {
                conflict_window: DateWindow::new(date(2023, 10, 8), date(2024, 1, 31)),
                pre_window: DateWindow::new(date(2019, 1, 1), date(2023, 10, 6)),
                counterfactual_shift_months: 24,
                war_onset: date(2023, 10, 7),
            },
        }
    }

    /// The standard layout rescaled to `width`×`height` pixels.
    pub fn standard_sized(seed: u64, width: usize, height: usize) -> Self {
        let mut spec = Self::standard(seed);
        let (sx, sy) = (width as f64 / spec.width as f64, height as f64 / spec.height as f64);
        let scale = |b: &mut Block| {
            let (r0, c0) = ((b.row as f64 * sy).round() as usize, (b.col as f64 * sx).round() as usize);
            let r1 = (((b.row + b.rows) as f64 * sy).round() as usize).clamp(r0 + 1, height);
            let c1 = (((b.col + b.cols) as f64 * sx).round() as usize).clamp(c0 + 1, width);
            *b = Block { row: r0.min(height - 1), col: c0.min(width - 1), rows: r1 - r0.min(height - 1), cols: c1 - c0.min(width - 1) };
        };
        for b in &mut spec.class_blocks {
            scale(&mut b.block);
        }
        for b in &mut spec.damage_blocks {
            scale(&mut b.block);
        }
        spec.width = width;
        spec.height = height;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        GridMeta::new(self.crs_epsg, self.origin_x, self.origin_y, self.pixel_size, self.width, self.height)?;
        for class in [LandClass::Urban, LandClass::Vegetated, LandClass::Agricultural] {
            if let Some(m) = self.models.get(&class) {
                m.validate(class)?;
            }
        }
        let in_bounds = |b: &Block| b.row + b.rows <= self.height && b.col + b.cols <= self.width;
        for b in &self.class_blocks {
            if !in_bounds(&b.block) {
                return Err(Error::Config(format!("class block {:?} exceeds the scene", b.block)));
            }
        }
        for b in &self.damage_blocks {
            if !in_bounds(&b.block) {
                return Err(Error::Config(format!("damage block {:?} exceeds the scene", b.block)));
            }
        }
        if !(self.bperp_coefficient_per_m >= 0.0) {
            return Err(Error::Config("B⊥ coefficient must be non-negative".into()));
        }
        if self.archive.revisit_days < 1 || self.archive.start > self.archive.end {
            return Err(Error::Config("archive schedule is empty".into()));
        }
        self.epochs.validate()
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta {
            crs_epsg: self.crs_epsg,
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_size: self.pixel_size,
            width: self.width,
            height: self.height,
        }
    }

    fn model(&self, class: LandClass) -> Result<&ClassModel> {
        self.models
            .get(&class)
            .ok_or_else(|| Error::Config(format!("no coherence model for {class:?}")))
    }

    pub fn bperp_factor(&self, bperp_m: f64) -> f64 {
        (1.0 - self.bperp_coefficient_per_m * bperp_m.abs()).max(0.0)
    }
}

/// Sub-seed for a named purpose, so independent artefacts never share draws.
fn derive_seed(seed: u64, tag: &str) -> u64 {
    fnv1a(tag.as_bytes()) ^ seed.rotate_left(17)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Regular acquisition schedule with seeded cross-track jitter.
pub fn synthetic_catalog(archive: &ArchiveSpec, seed: u64) -> Result<Catalog> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "archive"));
    let jitter = Normal::new(0.0, archive.position_sigma_m.max(0.0))
        .map_err(|e| Error::Config(format!("position sigma: {e}")))?;
    let mut acquisitions = Vec::new();
    let mut d = archive.start;
    let mut i = 0usize;
    while d <= archive.end {
        let mut pos: f64 = jitter.sample(&mut rng);
        if archive.outlier_every > 0 && i % archive.outlier_every == archive.outlier_every - 1 {
            pos += archive.outlier_offset_m;
        }
        acquisitions.push(Acquisition {
            id: format!("S1_{:03}_{}", archive.orbit_path, d.format("%Y%m%d")),
            acquired_at: Utc.from_utc_datetime(&d.and_hms_opt(3, 50, 0).expect("valid time")),
            orbit_path: archive.orbit_path,
            direction: archive.direction,
            cross_track_position: (pos * 100.0).round() / 100.0,
        });
        d += chrono::Duration::days(archive.revisit_days);
        i += 1;
    }
    Catalog::new(acquisitions)
}

/// A materialised scene: class and damage maps plus its archive.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub meta: GridMeta,
    pub classes: Vec<LandClass>,
    pub damage: Vec<Option<NaiveDate>>,
    pub catalog: Catalog,
}

impl Scene {
    pub fn build(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let meta = spec.meta();
        let mut classes = vec![spec.background; meta.len()];
        let mut damage = vec![None; meta.len()];
        for (i, (class, dmg)) in classes.iter_mut().zip(damage.iter_mut()).enumerate() {
            let (row, col) = (i / meta.width, i % meta.width);
            for b in spec.class_blocks.iter().filter(|b| b.block.contains(row, col)) {
                *class = b.class;
            }
            for b in spec.damage_blocks.iter().filter(|b| b.block.contains(row, col)) {
                *dmg = Some(dmg.map_or(b.event_date, |d: NaiveDate| d.min(b.event_date)));
            }
        }
        for class in classes.iter().collect::<std::collections::BTreeSet<_>>() {
            spec.model(*class)?;
        }
        let catalog = synthetic_catalog(&spec.archive, spec.seed)?;
        Ok(Self {
            spec,
            meta,
            classes,
            damage,
            catalog,
        })
    }

    fn acquisition(&self, id: &str) -> Result<&Acquisition> {
        self.catalog.get(id).ok_or_else(|| Error::Catalog(id.to_string()))
    }

    /// Coherence raster for one pair.
    pub fn pair_coherence(&self, pair: &InsarPair) -> Result<CoherenceGrid> {
        let reference = self.acquisition(&pair.reference)?;
        let secondary = self.acquisition(&pair.secondary)?;
        let (ref_date, sec_date) = (reference.date(), secondary.date());
        let (early, late) = (ref_date.min(sec_date), ref_date.max(sec_date));
        let abs_dt = pair.temporal_baseline_days.unsigned_abs() as f64;
        let bperp = self.spec.bperp_factor(pair.perpendicular_baseline_m);

        // Per-class signal and noise distributions for this pair.
        let mut per_class: BTreeMap<LandClass, (f64, f64, Option<Normal<f64>>)> = BTreeMap::new();
        for (&class, m) in &self.spec.models {
            let noise = (m.noise_sigma > 0.0)
                .then(|| Normal::new(0.0, m.noise_sigma).expect("validated sigma"));
            per_class.insert(class, (m.coherence(abs_dt, ref_date, bperp), m.gamma_floor, noise));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(fnv1a(pair.key().as_bytes()));
        let data = self
            .classes
            .iter()
            .zip(&self.damage)
            .map(|(class, dmg)| {
                let (signal, floor, noise) = &per_class[class];
                let spans_event = dmg.is_some_and(|e| early < e && e <= late);
                let base = if spans_event { *floor } else { *signal };
                let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                (base + eps).clamp(0.0, 1.0) as f32
            })
            .collect();
        Grid::new(self.meta, data)
    }

    /// Coherence rasters for every pair of `plan`, in plan order.
    pub fn stack(&self, plan: &StackPlan) -> Result<Vec<CoherenceGrid>> {
        plan.pairs.par_iter().map(|p| self.pair_coherence(p)).collect()
    }

    /// Whether each pixel's population std over `plan`, as implied by the
    /// noise-free model plus noise variance, satisfies the validity rule.
    fn expected_valid_for(&self, plan: &StackPlan, cfg: &DetectorConfig) -> Result<BTreeMap<LandClass, bool>> {
        let reference = self.acquisition(&plan.reference)?;
        let mut out = BTreeMap::new();
        for (&class, m) in &self.spec.models {
            let values: Vec<f64> = plan
                .pairs
                .iter()
                .map(|p| {
                    m.coherence(
                        p.temporal_baseline_days.unsigned_abs() as f64,
                        reference.date(),
                        self.spec.bperp_factor(p.perpendicular_baseline_m),
                    )
                })
                .collect();
            let n = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n + m.noise_sigma.powi(2);
            out.insert(class, var.sqrt() <= cfg.max_valid_sigma());
        }
        Ok(out)
    }

    /// Ground truth for scoring: a pixel is expected valid when the model
    /// predicts a valid pre-stack std for every supplied baseline plan.
    pub fn truth(&self, baseline_plans: &[&StackPlan], cfg: &DetectorConfig) -> Result<SceneTruth> {
        let mut class_valid: BTreeMap<LandClass, bool> = self.spec.models.keys().map(|&c| (c, true)).collect();
        for plan in baseline_plans {
            for (class, ok) in self.expected_valid_for(plan, cfg)? {
                *class_valid.get_mut(&class).expect("same class set") &= ok;
            }
        }
        let valid = self.classes.iter().map(|c| class_valid[c] as u8).collect();
        Ok(SceneTruth {
            meta: self.meta,
            classes: self.classes.clone(),
            damage: self.damage.clone(),
            expected_valid: Grid::new(self.meta, valid)?,
        })
    }

    /// Pixel mask of one class.
    pub fn class_mask(&self, class: LandClass) -> MaskGrid {
        let data = self.classes.iter().map(|&c| (c == class) as u8).collect();
        Grid::new(self.meta, data).expect("scene shape")
    }

    /// Pixel mask of damaged pixels (any event date).
    pub fn damage_mask(&self) -> MaskGrid {
        let data = self.damage.iter().map(|d| d.is_some() as u8).collect();
        Grid::new(self.meta, data).expect("scene shape")
    }

    /// Small rectangular buildings, one centred in every second urban pixel,
    /// with a region per scene half.
    pub fn footprints(&self) -> Vec<BuildingFootprint> {
        let half = self.spec.pixel_size * 0.3;
        let mut out = Vec::new();
        for row in (0..self.meta.height).step_by(2) {
            for col in (0..self.meta.width).step_by(2) {
                if self.classes[row * self.meta.width + col] != LandClass::Urban {
                    continue;
                }
                let (cx, cy) = self.meta.cell_center(row, col);
                let region = if row < self.meta.height / 2 { "north" } else { "south" };
                out.push(
                    BuildingFootprint::rectangle(format!("b{row:04}_{col:04}"), region, (cx - half, cy - half, cx + half, cy + half))
                        .expect("non-degenerate rectangle"),
                );
            }
        }
        out
    }

    /// Reference survey points: `per_survey` random damaged pixels per survey
    /// date, drawn among pixels whose event precedes the survey.
    pub fn reference_points(&self, survey_dates: &[NaiveDate], per_survey: usize) -> Vec<ReferencePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, "reference-points"));
        let labels = [DamageLabel::Destroyed, DamageLabel::Severe, DamageLabel::Moderate, DamageLabel::Possible];
        let mut out = Vec::new();
        for &survey in survey_dates {
            let eligible: Vec<usize> = self
                .damage
                .iter()
                .enumerate()
                .filter(|(_, d)| d.is_some_and(|e| e <= survey))
                .map(|(i, _)| i)
                .collect();
            if eligible.is_empty() {
                continue;
            }
            for _ in 0..per_survey {
                let i = eligible[rng.random_range(0..eligible.len())];
                let (x0, y0, x1, y1) = self.meta.cell_bounds(i / self.meta.width, i % self.meta.width);
                out.push(ReferencePoint {
                    x: rng.random_range(x0..x1),
                    y: rng.random_range(y0..y1),
                    survey_date: survey,
                    label: labels[rng.random_range(0..labels.len())],
                });
            }
        }
        out
    }
}

/// Generates the scene and the coherence raster of every distinct pair in
/// `plans`, keyed by pair key.
pub fn generate_scene(
    spec: SceneSpec,
    plans: &[StackPlan],
    cfg: &DetectorConfig,
) -> Result<(Scene, SceneTruth, BTreeMap<String, CoherenceGrid>)> {
    let scene = Scene::build(spec)?;
    let mut pairs: BTreeMap<String, &InsarPair> = BTreeMap::new();
    for plan in plans {
        for p in &plan.pairs {
            pairs.entry(p.key()).or_insert(p);
        }
    }
    let grids: BTreeMap<String, CoherenceGrid> = pairs
        .into_par_iter()
        .map(|(k, p)| scene.pair_coherence(p).map(|g| (k, g)))
        .collect::<Result<_>>()?;
    let baselines: Vec<&StackPlan> = plans
        .iter()
        .filter(|p| matches!(p.epoch, crate::catalog::Epoch::Pre))
        .collect();
    let truth = scene.truth(&baselines, cfg)?;
    Ok((scene, truth, grids))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub meta: GridMeta,
    pub classes: Vec<LandClass>,
    pub damage: Vec<Option<NaiveDate>>,
    pub expected_valid: MaskGrid,
}

impl SceneTruth {
    /// The same scene with no damage, the truth for counterfactual scoring.
    pub fn undamaged(&self) -> Self {
        Self {
            damage: vec![None; self.damage.len()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScore {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Confusion counts of `flags` against truth over expected-valid pixels.
/// A pixel counts as damaged when its event is on or before `as_of`
/// (any event when `as_of` is `None`). Rates are fractions, 0 when undefined.
pub fn score_against_truth(flags: &MaskGrid, truth: &SceneTruth, as_of: Option<NaiveDate>) -> Result<OracleScore> {
    flags.meta.ensure_aligned(&truth.meta, "scene truth")?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for ((&f, &v), d) in flags.values().iter().zip(truth.expected_valid.values()).zip(&truth.damage) {
        if v != 1 {
            continue;
        }
        let damaged = d.is_some_and(|e| as_of.is_none_or(|a| e <= a));
        match (f == 1, damaged) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let rate = |a: u64, b: u64| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    Ok(OracleScore {
        tp,
        fp,
        fn_,
        tn,
        tpr: rate(tp, fn_),
        fpr: rate(fp, tn),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{plan_all_timesteps, Epoch, PlanningParams};
    use crate::detect::classify_damage;
    use crate::reduce::{reduce_stack, SummaryLabel};

    fn urban_only(spec: &mut SceneSpec) {
        spec.background = LandClass::Urban;
        spec.class_blocks.clear();
    }

    fn tiny_spec() -> SceneSpec {
        let mut spec = SceneSpec::standard(7);
        spec.width = 8;
        spec.height = 6;
        spec.class_blocks = vec![ClassBlock {
            block: Block { row: 0, col: 4, rows: 6, cols: 4 },
            class: LandClass::Vegetated,
        }];
        spec.background = LandClass::Urban;
        spec.damage_blocks = vec![DamageBlock {
            block: Block { row: 1, col: 1, rows: 2, cols: 2 },
            event_date: date(2023, 10, 9),
        }];
        spec
    }

    #[test]
    fn closed_form_coherence() {
        let m = ClassModel {
            gamma_base: 0.8,
            gamma_floor: 0.2,
            tau_days: 2000.0,
            seasonal_amplitude: 0.0,
            seasonal_onset_doy: 0.0,
            noise_sigma: 0.0,
        };
        let g = m.coherence(360.0, date(2023, 6, 1), 1.0);
        assert!((g - (0.2 + 0.6 * (-0.18f64).exp())).abs() < 1e-15);
        assert!((g - 0.701).abs() < 1e-3);
    }

    #[test]
    fn seasonal_term() {
        let m = ClassModel {
            gamma_base: 0.5,
            gamma_floor: 0.1,
            tau_days: 50.0,
            seasonal_amplitude: 0.4,
            seasonal_onset_doy: 0.0,
            noise_sigma: 0.0,
        };
        // Peak of the sine a quarter year after onset.
        let peak = NaiveDate::from_yo_opt(2023, 91).unwrap();
        assert!((m.season(peak) - (1.0 - 0.4 * (2.0 * PI * 91.0 / 365.0).sin())).abs() < 1e-12);
        // Negative half of the sine leaves coherence untouched.
        assert_eq!(m.season(NaiveDate::from_yo_opt(2023, 300).unwrap()), 1.0);
    }

    #[test]
    fn catalog_schedule() {
        let spec = SceneSpec::standard(1);
        let cat = synthetic_catalog(&spec.archive, 1).unwrap();
        let acq = cat.acquisitions();
        assert_eq!(acq[0].date(), spec.archive.start);
        assert!(acq.windows(2).all(|w| (w[1].date() - w[0].date()).num_days() == 12));
        assert!(acq[22].cross_track_position > 150.0);
        assert_eq!(synthetic_catalog(&spec.archive, 1).unwrap(), cat);
    }

    fn pair(scene: &Scene, r: usize, s: usize) -> InsarPair {
        let a = &scene.catalog.acquisitions()[r];
        let b = &scene.catalog.acquisitions()[s];
        crate::catalog::pair_baselines(a, b).unwrap()
    }

    #[test]
    fn damage_spanning_pairs_drop_to_floor() {
        let mut spec = tiny_spec();
        for m in spec.models.values_mut() {
            m.noise_sigma = 0.0;
        }
        let scene = Scene::build(spec).unwrap();
        let idx = |d: NaiveDate| scene.catalog.acquisitions().iter().position(|a| a.date() >= d).unwrap();
        let after = idx(date(2023, 10, 10));
        let before = after - 5;
        let spanning = scene.pair_coherence(&pair(&scene, after, before)).unwrap();
        let quiet = scene.pair_coherence(&pair(&scene, before, before - 5)).unwrap();
        assert_eq!(spanning.get(1, 1), 0.2);
        assert!(spanning.get(0, 0) > 0.6);
        assert!(quiet.get(1, 1) > 0.6);
        assert_eq!(quiet.get(1, 1), quiet.get(0, 0));
    }

    #[test]
    fn unknown_acquisition() {
        let scene = Scene::build(tiny_spec()).unwrap();
        let p = InsarPair {
            reference: "nope".into(),
            secondary: "also-nope".into(),
            temporal_baseline_days: 12,
            perpendicular_baseline_m: 0.0,
        };
        assert!(matches!(scene.pair_coherence(&p), Err(Error::Catalog(_))));
    }

    #[test]
    fn deterministic_per_pair() {
        let scene = Scene::build(tiny_spec()).unwrap();
        let p = pair(&scene, 120, 100);
        let a = scene.pair_coherence(&p).unwrap();
        let b = Scene::build(tiny_spec()).unwrap().pair_coherence(&p).unwrap();
        assert_eq!(a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut other_seed = tiny_spec();
        other_seed.seed = 8;
        assert_ne!(Scene::build(other_seed).unwrap().pair_coherence(&p).unwrap(), a);
    }

    #[test]
    fn oracle_scoring() {
        let meta = GridMeta::new(32636, 0.0, 0.0, 40.0, 2, 2).unwrap();
        let truth = SceneTruth {
            meta,
            classes: vec![LandClass::Urban; 4],
            damage: vec![Some(date(2023, 10, 9)), Some(date(2023, 10, 9)), None, None],
            expected_valid: Grid::filled(meta, 1u8),
        };
        let perfect = Grid::new(meta, vec![1u8, 1, 0, 0]).unwrap();
        let s = score_against_truth(&perfect, &truth, None).unwrap();
        assert_eq!((s.tp, s.tn, s.fp, s.fn_), (2, 2, 0, 0));
        let zero = Grid::filled(meta, 0u8);
        let s = score_against_truth(&zero, &truth, None).unwrap();
        assert_eq!((s.tpr, s.fpr), (0.0, 0.0));
        let s = score_against_truth(&perfect, &truth, Some(date(2023, 10, 1))).unwrap();
        assert_eq!((s.tp, s.fp), (0, 2));
    }

    #[test]
    fn noiseless_undamaged_scene_flags_nothing() {
        let mut spec = SceneSpec::standard(3);
        spec.width = 16;
        spec.height = 16;
        spec.class_blocks = vec![ClassBlock {
            block: Block { row: 0, col: 8, rows: 16, cols: 8 },
            class: LandClass::Vegetated,
        }];
        spec.damage_blocks.clear();
        for m in spec.models.values_mut() {
            m.noise_sigma = 0.0;
        }
        let scene = Scene::build(spec).unwrap();
        let params = PlanningParams::default();
        let plans = plan_all_timesteps(&scene.catalog, &scene.spec.epochs, false, &params).unwrap();
        for k in [-0.05, -0.2, -0.5] {
            let cfg = DetectorConfig { k, ..DetectorConfig::default() };
            for ts in plans.iter().take(3) {
                let reduce = |p: &StackPlan| {
                    let g = scene.stack(p).unwrap();
                    reduce_stack(&g, params.min_pairs, SummaryLabel::new(p.epoch, p.timestep_date)).unwrap()
                };
                let d = classify_damage(&reduce(&ts.conflict), &reduce(&ts.pre), &cfg).unwrap();
                assert_eq!(d.flag.count_set(), 0, "k = {k}, {}", ts.conflict.timestep_date);
            }
        }
    }

    #[test]
    fn noisier_vegetation_shrinks_valid_area() {
        let scene_with = |sigma: f64| {
            let mut spec = tiny_spec();
            let veg = spec.models.get_mut(&LandClass::Vegetated).unwrap();
            veg.tau_days = 5000.0;
            veg.seasonal_amplitude = 0.0;
            veg.noise_sigma = sigma;
            Scene::build(spec).unwrap()
        };
        let base = scene_with(0.0);
        let params = PlanningParams::default();
        let plans = plan_all_timesteps(&base.catalog, &base.spec.epochs, false, &params).unwrap();
        let pre: Vec<&StackPlan> = plans.iter().map(|t| &t.pre).collect();
        let cfg = DetectorConfig::default();
        let counts: Vec<usize> = [0.0, 0.05, 0.2]
            .iter()
            .map(|&s| scene_with(s).truth(&pre, &cfg).unwrap().expected_valid.count_set())
            .collect();
        assert!(counts[0] >= counts[1] && counts[1] > counts[2], "{counts:?}");
        assert!(pre.iter().all(|p| p.epoch == Epoch::Pre));
    }

    #[test]
    fn rescaled_layout() {
        let spec = SceneSpec::standard_sized(1, 64, 64);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.damage_blocks[0].block, Block { row: 12, col: 10, rows: 8, cols: 9 });
        assert_eq!(SceneSpec::standard_sized(1, 256, 256), SceneSpec::standard(1));
    }

    #[test]
    fn spec_json_roundtrip() {
        let mut spec = SceneSpec::standard(11);
        urban_only(&mut spec);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SceneSpec>(&text).unwrap(), spec);
        let mut bad = spec.clone();
        bad.models.get_mut(&LandClass::Urban).unwrap().tau_days = 0.0;
        assert!(matches!(Scene::build(bad), Err(Error::Config(_))));
    }
}
