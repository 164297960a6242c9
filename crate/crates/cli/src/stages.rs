//! One function per subcommand. Every stage reads its inputs from disk and
//! writes deterministic outputs under `paths.output`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use ltccd::aggregate::{self, BuildingDamageFlag, BuildingFootprint};
use ltccd::catalog::{self, Catalog, StackPlan, TimestepPlans};
use ltccd::detect::{self, DamageRecord, DetectionGrid, FirstDetection};
use ltccd::evaluate::{self, AgreementReport, PointOutcome, ReferencePoint, Scope};
use ltccd::raster::{self, Grid, GridMeta, MaskGrid};
use ltccd::reduce::{self, SummaryLabel};
use ltccd::synth::{self, Scene, SceneSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::svg;

/// Output directory layout.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.paths.output.clone(),
        }
    }

    pub fn plans(&self) -> PathBuf {
        self.root.join("plans")
    }
    pub fn summaries(&self) -> PathBuf {
        self.root.join("summaries")
    }
    pub fn detections(&self) -> PathBuf {
        self.root.join("detections")
    }
    pub fn masks(&self) -> PathBuf {
        self.root.join("masks")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn records(&self) -> PathBuf {
        self.detections().join("damage_records.csv")
    }
    pub fn detection_index(&self) -> PathBuf {
        self.detections().join("index.json")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ltccd::ingest::sha256_hex(&bytes))
}

/// Hash over an ordered list of labelled parts.
fn content_hash<'a>(parts: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut h = Sha256::new();
    for (label, value) in parts {
        h.update(label.as_bytes());
        h.update([0]);
        h.update(value.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn need(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ConfigError(format!("{what} {} does not exist ({hint})", path.display())).into())
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Serialize)]
pub struct SimulateSummary {
    pub acquisitions: usize,
    pub timesteps: usize,
    pub rasters: usize,
    pub footprints: usize,
    pub reference_points: usize,
}

fn scene_spec(cfg: &RunConfig) -> Result<SceneSpec> {
    let mut spec = match &cfg.paths.scene {
        Some(p) => read_json::<SceneSpec>(p)?,
        None => {
            let s = &cfg.simulate;
            let mut spec = SceneSpec::standard_sized(s.seed, s.width, s.height);
            spec.epochs = cfg.epochs.clone();
            spec
        }
    };
    if let Some(epsg) = cfg.crs_epsg {
        spec.crs_epsg = epsg;
    }
    spec.validate().map_err(|e| ConfigError(format!("scene: {e}")))?;
    Ok(spec)
}

pub fn simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    let layout = Layout::new(cfg);
    let spec = scene_spec(cfg)?;
    let scene = Scene::build(spec.clone())?;
    let plans = catalog::plan_all_timesteps(&scene.catalog, &spec.epochs, cfg.with_counterfactual, &cfg.planning)?;

    if let Some(parent) = cfg.paths.catalog.parent() {
        ensure_dir(parent)?;
    }
    scene.catalog.write_csv(&cfg.paths.catalog)?;

    let stacks: Vec<&StackPlan> = plans.iter().flat_map(TimestepPlans::all).collect();
    let jobs: Vec<(PathBuf, &ltccd::catalog::InsarPair)> = stacks
        .iter()
        .flat_map(|plan| {
            let dir = cfg.paths.rasters.join(plan.stem());
            plan.pairs.iter().map(move |p| (dir.join(format!("{}.tif", p.key())), p))
        })
        .collect();
    for plan in &stacks {
        ensure_dir(&cfg.paths.rasters.join(plan.stem()))?;
    }
    jobs.par_iter().try_for_each(|(path, pair)| -> Result<()> {
        let grid = scene.pair_coherence(pair)?;
        raster::write_geotiff(&grid, path)?;
        Ok(())
    })?;

    let footprints = scene.footprints();
    let points = scene.reference_points(&cfg.simulate.survey_dates, cfg.simulate.points_per_survey);
    for p in [&cfg.paths.footprints, &cfg.paths.reference_points] {
        if let Some(parent) = p.parent() {
            ensure_dir(parent)?;
        }
    }
    write_json(&cfg.paths.footprints, &aggregate::footprints_to_geojson(&footprints))?;
    write_json(&cfg.paths.reference_points, &evaluate::points_to_geojson(&points))?;

    let truth_dir = layout.truth();
    ensure_dir(&truth_dir)?;
    let pre: Vec<&StackPlan> = plans.iter().map(|p| &p.pre).collect();
    let truth = scene.truth(&pre, &cfg.detector)?;
    raster::write_geotiff(&scene.damage_mask(), truth_dir.join("damage.tif"))?;
    raster::write_geotiff(&truth.expected_valid, truth_dir.join("expected_valid.tif"))?;
    write_json(&truth_dir.join("scene.json"), &spec)?;

    tracing::info!(timesteps = plans.len(), rasters = jobs.len(), "scene simulated");
    Ok(SimulateSummary {
        acquisitions: scene.catalog.len(),
        timesteps: plans.len(),
        rasters: jobs.len(),
        footprints: footprints.len(),
        reference_points: points.len(),
    })
}

// -------------------------------------------------------------------- plan

pub fn plan(cfg: &RunConfig) -> Result<Vec<TimestepPlans>> {
    need(&cfg.paths.catalog, "catalog", "set paths.catalog or run `simulate`")?;
    let catalog = Catalog::read_csv(&cfg.paths.catalog)?;
    let plans = catalog::plan_all_timesteps(&catalog, &cfg.epochs, cfg.with_counterfactual, &cfg.planning)?;
    if plans.is_empty() {
        bail!(ConfigError("the conflict window holds no acquisitions".into()));
    }
    let dir = Layout::new(cfg).plans();
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    ensure_dir(&dir)?;
    for p in &plans {
        write_json(&dir.join(format!("{}.json", p.conflict.timestep_date)), p)?;
    }
    tracing::info!(timesteps = plans.len(), "stacks planned");
    Ok(plans)
}

pub fn load_plans(cfg: &RunConfig) -> Result<Vec<TimestepPlans>> {
    let dir = Layout::new(cfg).plans();
    need(&dir, "plan directory", "run `plan` first")?;
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    files.iter().map(|p| read_json(p)).collect()
}

// ------------------------------------------------------------------- fetch

#[derive(Debug, Serialize)]
pub struct FetchSummary {
    pub stacks: usize,
    pub products: usize,
    pub submissions: usize,
    pub failures: BTreeMap<String, String>,
}

pub fn fetch(cfg: &RunConfig, runtime: &tokio::runtime::Runtime) -> Result<FetchSummary> {
    cfg.ingest.validate().map_err(|e| ConfigError(e.to_string()))?;
    let plans = load_plans(cfg)?;
    let mut summary = FetchSummary {
        stacks: 0,
        products: 0,
        submissions: 0,
        failures: BTreeMap::new(),
    };
    for stack in plans.iter().flat_map(TimestepPlans::all) {
        let dir = cfg.paths.rasters.join(stack.stem());
        let report = runtime.block_on(ltccd::ingest::process_pairs(stack, &cfg.ingest, &dir))?;
        summary.stacks += 1;
        summary.products += report.products.len();
        summary.submissions += report.submissions;
        for (k, v) in report.failures {
            summary.failures.insert(format!("{}/{k}", stack.stem()), v);
        }
    }
    Ok(summary)
}

// ------------------------------------------------------------------ reduce

#[derive(Debug, Serialize)]
pub struct ReduceSummary {
    pub summaries: usize,
    pub missing_products: usize,
    pub clamped_samples: usize,
}

pub fn reduce(cfg: &RunConfig) -> Result<ReduceSummary> {
    let plans = load_plans(cfg)?;
    let out = Layout::new(cfg).summaries();
    ensure_dir(&out)?;
    let stacks: Vec<&StackPlan> = plans.iter().flat_map(TimestepPlans::all).collect();
    let results: Vec<(usize, usize)> = stacks
        .par_iter()
        .map(|plan| -> Result<(usize, usize)> {
            let dir = cfg.paths.rasters.join(plan.stem());
            let mut paths = Vec::new();
            let mut keys = Vec::new();
            let mut missing = 0;
            for p in &plan.pairs {
                let path = dir.join(format!("{}.tif", p.key()));
                if path.exists() {
                    paths.push(path);
                    keys.push(p.key());
                } else {
                    tracing::warn!(pair = %p.key(), stack = %plan.stem(), "coherence product missing");
                    missing += 1;
                }
            }
            let loaded = raster::load_aligned_stack(&paths, cfg.crs_epsg)
                .with_context(|| format!("loading stack {}", plan.stem()))?;
            let mut parts = vec![("min_count", cfg.reduce.min_count.to_string())];
            for (k, p) in keys.iter().zip(&paths) {
                parts.push(("pair", format!("{k}:{}", hash_file(p)?)));
            }
            let hash = content_hash(parts.iter().map(|(l, v)| (*l, v.clone())));
            let label = SummaryLabel::new(plan.epoch, plan.timestep_date).with_pairs(keys);
            let summary = reduce::reduce_stack(&loaded.grids, cfg.reduce.min_count, label)
                .with_context(|| format!("reducing stack {}", plan.stem()))?;
            reduce::write_summary(&summary, &out, Some(hash))?;
            Ok((missing, loaded.clamped))
        })
        .collect::<Result<_>>()?;
    Ok(ReduceSummary {
        summaries: results.len(),
        missing_products: results.iter().map(|r| r.0).sum(),
        clamped_samples: results.iter().map(|r| r.1).sum(),
    })
}

// ------------------------------------------------------------------ detect

/// Written next to the detection rasters; lists every timestep in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionIndex {
    pub timesteps: Vec<DetectionEntry>,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub timestep_date: NaiveDate,
    pub conflict_stem: String,
    pub flagged: usize,
    pub valid: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub counterfactual: Option<CounterfactualEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEntry {
    pub timestep_date: NaiveDate,
    pub stem: String,
    pub flagged: usize,
}

fn summary_hash(dir: &Path, stem: &str) -> Result<String> {
    hash_file(&reduce::SummaryPaths::in_dir(dir, stem).sidecar)
}

pub fn detect(cfg: &RunConfig) -> Result<DetectionIndex> {
    let layout = Layout::new(cfg);
    let plans = load_plans(cfg)?;
    let sdir = layout.summaries();
    need(&sdir, "summary directory", "run `reduce` first")?;
    let ddir = layout.detections();
    ensure_dir(&ddir)?;

    let classify = |event: &StackPlan, base: &StackPlan| -> Result<DetectionGrid> {
        let e = reduce::read_summary(&sdir, &event.stem())?;
        let b = reduce::read_summary(&sdir, &base.stem())?;
        let d = detect::classify_damage(&e, &b, &cfg.detector)?;
        detect::write_detection(&d, &ddir, &event.stem())?;
        Ok(d)
    };

    let results: Vec<(DetectionEntry, DetectionGrid)> = plans
        .par_iter()
        .map(|tp| -> Result<(DetectionEntry, DetectionGrid)> {
            let conflict = classify(&tp.conflict, &tp.pre)?;
            let counterfactual = match (&tp.counterfactual, &tp.counterfactual_baseline) {
                (Some(cf), Some(base)) => {
                    let d = classify(cf, base)?;
                    Some(CounterfactualEntry {
                        timestep_date: cf.timestep_date,
                        stem: cf.stem(),
                        flagged: d.flag.count_set(),
                    })
                }
                _ => None,
            };
            Ok((
                DetectionEntry {
                    timestep_date: tp.conflict.timestep_date,
                    conflict_stem: tp.conflict.stem(),
                    flagged: conflict.flag.count_set(),
                    valid: conflict.valid.count_set(),
                    counterfactual,
                },
                conflict,
            ))
        })
        .collect::<Result<_>>()?;

    let series: Vec<DetectionGrid> = results.iter().map(|(_, d)| d.clone()).collect();
    let persistence = detect::confirm_persistence(&series, &cfg.detector)?;
    let file = fs::File::create(layout.records()).with_context(|| format!("creating {}", layout.records().display()))?;
    detect::write_records_csv(&persistence.records, file)?;
    raster::write_geotiff(&persistence.confirmed, ddir.join("confirmed.tif"))?;

    let mut parts = vec![("detector", serde_json::to_string(&cfg.detector)?)];
    for tp in &plans {
        for s in tp.all() {
            parts.push(("summary", summary_hash(&sdir, &s.stem())?));
        }
    }
    let index = DetectionIndex {
        timesteps: results.into_iter().map(|(e, _)| e).collect(),
        content_hash: content_hash(parts),
    };
    write_json(&layout.detection_index(), &index)?;
    Ok(index)
}

/// Conflict and counterfactual detection series, in date order.
pub struct Detections {
    pub conflict: Vec<DetectionGrid>,
    pub counterfactual: Vec<DetectionGrid>,
}

impl Detections {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let layout = Layout::new(cfg);
        need(&layout.detection_index(), "detection index", "run `detect` first")?;
        let index: DetectionIndex = read_json(&layout.detection_index())?;
        let dir = layout.detections();
        let conflict = index
            .timesteps
            .par_iter()
            .map(|e| detect::read_detection(&dir, &e.conflict_stem, e.timestep_date))
            .collect::<ltccd::Result<Vec<_>>>()?;
        let counterfactual = index
            .timesteps
            .par_iter()
            .filter_map(|e| e.counterfactual.as_ref())
            .map(|c| detect::read_detection(&dir, &c.stem, c.timestep_date))
            .collect::<ltccd::Result<Vec<_>>>()?;
        if conflict.is_empty() {
            bail!(ltccd::Error::EmptyReport);
        }
        Ok(Self {
            conflict,
            counterfactual,
        })
    }

    pub fn meta(&self) -> GridMeta {
        *self.conflict[0].meta()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.conflict.iter().map(|d| d.timestep_date).collect()
    }

    pub fn last_date(&self) -> NaiveDate {
        self.conflict.last().expect("non-empty series").timestep_date
    }

    pub fn cumulative(&self) -> Result<MaskGrid> {
        Ok(detect::accumulate_damage(&self.conflict, self.last_date())?.expect("non-empty series"))
    }

    pub fn records(&self, cfg: &RunConfig) -> Result<Vec<DamageRecord>> {
        let path = Layout::new(cfg).records();
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        Ok(detect::read_records_csv(file)?)
    }
}

// -------------------------------------------------------------------- mask

#[derive(Debug, Serialize)]
pub struct MaskSummary {
    pub timesteps: usize,
    pub monitoring_valid: usize,
}

pub fn mask(cfg: &RunConfig) -> Result<MaskSummary> {
    let dets = Detections::load(cfg)?;
    let dir = Layout::new(cfg).masks();
    ensure_dir(&dir)?;
    for d in &dets.conflict {
        raster::write_geotiff(&d.valid, dir.join(format!("valid_{}.tif", d.timestep_date)))?;
    }
    let monitored = evaluate::monitoring_valid_mask(&dets.conflict, dets.last_date(), cfg.evaluation.valid_min_timesteps)
        .expect("non-empty series");
    raster::write_geotiff(&monitored, dir.join("monitoring_valid.tif"))?;
    Ok(MaskSummary {
        timesteps: dets.conflict.len(),
        monitoring_valid: monitored.count_set(),
    })
}

// --------------------------------------------------------------- aggregate

#[derive(Debug, Serialize)]
pub struct AggregateSummary {
    pub buildings: usize,
    pub in_coverage: usize,
    pub monitored: usize,
    pub damaged: usize,
    pub percent_damaged: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_change_percent: Option<f64>,
}

fn building_flags(cfg: &RunConfig, dets: &Detections, footprints: &[BuildingFootprint]) -> Result<Vec<BuildingDamageFlag>> {
    let records = dets.records(cfg)?;
    let first = FirstDetection::from_records(dets.meta(), &records);
    Ok(aggregate::mark_buildings(
        footprints,
        &dets.cumulative()?,
        &first,
        cfg.aggregate.coverage_threshold,
    )?)
}

fn load_footprints(cfg: &RunConfig) -> Result<Vec<BuildingFootprint>> {
    need(&cfg.paths.footprints, "footprints", "set paths.footprints or run `simulate`")?;
    Ok(aggregate::read_footprints(&cfg.paths.footprints)?)
}

pub fn aggregate(cfg: &RunConfig) -> Result<AggregateSummary> {
    let dets = Detections::load(cfg)?;
    let footprints = load_footprints(cfg)?;
    let flags = building_flags(cfg, &dets, &footprints)?;
    let valid: Vec<MaskGrid> = dets.conflict.iter().map(|d| d.valid.clone()).collect();
    let monitored = aggregate::monitoring_validity(&footprints, &valid, cfg.evaluation.valid_min_timesteps)?;

    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    let mut region_of: HashMap<String, String> = HashMap::new();
    for (fp, flag) in footprints.iter().zip(&flags) {
        region_of.insert(fp.id.clone(), fp.region_id.clone());
        let t = totals.entry(fp.region_id.clone()).or_default();
        if flag.in_coverage {
            *t += 1;
        }
    }
    let series = aggregate::region_timeseries(&flags, &region_of, &totals, &dets.dates())?;
    let combined = aggregate::combined_series(&series, &totals, &cfg.aggregate.total_region_id)?;

    let root = &cfg.paths.output;
    ensure_dir(root)?;
    write_json(&root.join("buildings.geojson"), &aggregate::flags_to_geojson(&footprints, &flags)?)?;
    let mut all = series.clone();
    all.push(combined.clone());
    let file = fs::File::create(root.join("series.csv"))?;
    aggregate::write_series_csv(&all, file)?;

    let rate_change_percent = match &cfg.aggregate.rate_windows {
        Some(w) => {
            let v = aggregate::rate_change(&combined, &w.reference, &w.comparison)?;
            write_json(&root.join("rates.json"), &serde_json::json!({ "rate_change_percent": v }))?;
            Some(v)
        }
        None => None,
    };

    let in_coverage = flags.iter().filter(|f| f.in_coverage).count();
    let damaged = flags.iter().filter(|f| f.damaged && f.in_coverage).count();
    Ok(AggregateSummary {
        buildings: footprints.len(),
        in_coverage,
        monitored: monitored.iter().filter(|&&m| m).count(),
        damaged,
        percent_damaged: aggregate::percent(damaged as u64, in_coverage as u64),
        rate_change_percent,
    })
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Serialize)]
pub struct EvaluateSummary {
    pub surveys: usize,
    pub valid_only: Vec<AgreementReport>,
    pub all: Vec<AgreementReport>,
    pub merged_union: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSummary>,
}

#[derive(Debug, Serialize)]
pub struct OracleSummary {
    pub conflict: synth::OracleScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<synth::OracleScore>,
}

fn survey_reports(
    cfg: &RunConfig,
    dets: &Detections,
    points: &[ReferencePoint],
    survey: NaiveDate,
) -> Result<Option<(AgreementReport, AgreementReport)>> {
    let grace = cfg.evaluation.grace_timesteps;
    let Some(cutoff) = evaluate::grace_cutoff(&dets.dates(), survey, grace) else {
        tracing::warn!(%survey, "survey precedes every timestep; skipped");
        return Ok(None);
    };
    let conflict = evaluate::cumulative_for_survey(&dets.conflict, survey, grace)?.expect("non-empty series");
    let cf_survey = cfg.epochs.counterfactual_date(survey)?;
    let counterfactual = match evaluate::cumulative_for_survey(&dets.counterfactual, cf_survey, grace)? {
        Some(m) => m,
        None => Grid::filled(dets.meta(), 0u8),
    };
    let valid = evaluate::monitoring_valid_mask(&dets.conflict, cutoff, cfg.evaluation.valid_min_timesteps)
        .expect("non-empty series");
    let mut out = Vec::with_capacity(2);
    for scope in [Scope::ValidOnly, Scope::All] {
        let hit_c: Vec<PointOutcome> = evaluate::match_points(points, &conflict, &valid, scope)?;
        let hit_f: Vec<PointOutcome> = evaluate::match_points(points, &counterfactual, &valid, scope)?;
        out.push(evaluate::agreement_metrics(survey, scope, &hit_c, &hit_f)?);
    }
    let all = out.pop().expect("two scopes");
    let valid_only = out.pop().expect("two scopes");
    Ok(Some((valid_only, all)))
}

fn oracle(cfg: &RunConfig, dets: &Detections) -> Result<Option<OracleSummary>> {
    let path = Layout::new(cfg).truth().join("scene.json");
    if !path.exists() {
        return Ok(None);
    }
    let spec: SceneSpec = read_json(&path)?;
    let scene = Scene::build(spec)?;
    let plans = load_plans(cfg)?;
    let pre: Vec<&StackPlan> = plans.iter().map(|p| &p.pre).collect();
    let truth = scene.truth(&pre, &cfg.detector)?;
    let conflict = synth::score_against_truth(&dets.cumulative()?, &truth, Some(dets.last_date()))?;
    let counterfactual = match dets.counterfactual.last() {
        Some(last) => {
            let flags = detect::accumulate_damage(&dets.counterfactual, last.timestep_date)?.expect("non-empty series");
            Some(synth::score_against_truth(&flags, &truth.undamaged(), None)?)
        }
        None => None,
    };
    Ok(Some(OracleSummary {
        conflict,
        counterfactual,
    }))
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvaluateSummary> {
    let dets = Detections::load(cfg)?;
    need(&cfg.paths.reference_points, "reference points", "set paths.reference_points")?;
    let points = evaluate::read_points(&cfg.paths.reference_points)?;
    let mut by_survey: BTreeMap<NaiveDate, Vec<ReferencePoint>> = BTreeMap::new();
    for p in &points {
        by_survey.entry(p.survey_date).or_default().push(p.clone());
    }

    let mut valid_only = Vec::new();
    let mut all = Vec::new();
    for (survey, pts) in &by_survey {
        if let Some((v, a)) = survey_reports(cfg, &dets, pts, *survey)? {
            valid_only.push(v);
            all.push(a);
        }
    }

    let root = &cfg.paths.output;
    ensure_dir(root)?;
    evaluate::write_agreement_csv(&valid_only, fs::File::create(root.join("agreement.csv"))?)?;
    evaluate::write_agreement_csv(&all, fs::File::create(root.join("agreement_all.csv"))?)?;

    let footprints = load_footprints(cfg)?;
    let flags = building_flags(cfg, &dets, &footprints)?;
    let merged = evaluate::merge_sources(&footprints, &flags, &points)?;
    write_json(&root.join("merged.json"), &merged)?;

    let oracle = oracle(cfg, &dets)?;
    if let Some(o) = &oracle {
        write_json(&root.join("oracle.json"), o)?;
    }
    Ok(EvaluateSummary {
        surveys: by_survey.len(),
        valid_only,
        all,
        merged_union: merged.union_count,
        oracle,
    })
}

// --------------------------------------------------------------- stability

/// Pixels whose centre lies in `[min_x, min_y, max_x, max_y]`.
pub fn region_mask(meta: &GridMeta, bbox: [f64; 4]) -> MaskGrid {
    let [x0, y0, x1, y1] = bbox;
    let mut m = Grid::filled(*meta, 0u8);
    for row in 0..meta.height {
        for col in 0..meta.width {
            let (x, y) = meta.cell_center(row, col);
            if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
                m.set(row, col, 1);
            }
        }
    }
    m
}

pub fn stability(cfg: &RunConfig) -> Result<Vec<evaluate::StabilityReport>> {
    let plans = load_plans(cfg)?;
    let sdir = Layout::new(cfg).summaries();
    need(&sdir, "summary directory", "run `reduce` first")?;
    let first = reduce::read_summary(&sdir, &plans[0].conflict.stem())?;
    let region = match cfg.evaluation.stable_region {
        Some(bbox) => region_mask(first.meta(), bbox),
        None => {
            // Without an explicit region, every pixel never flagged counts as stable.
            let dets = Detections::load(cfg)?;
            let cumulative = dets.cumulative()?;
            let data = cumulative.values().iter().map(|&v| (v == 0) as u8).collect();
            Grid::new(*first.meta(), data)?
        }
    };
    let reports = plans
        .par_iter()
        .map(|tp| -> Result<evaluate::StabilityReport> {
            let c = reduce::read_summary(&sdir, &tp.conflict.stem())?;
            let p = reduce::read_summary(&sdir, &tp.pre.stem())?;
            Ok(evaluate::stability_report(&region, &c, &p, cfg.evaluation.bins)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let root = &cfg.paths.output;
    evaluate::write_stability_csv(&reports, fs::File::create(root.join("stability.csv"))?)?;
    Ok(reports)
}

// ------------------------------------------------------------------ report

#[derive(Debug, Deserialize)]
struct SeriesRow {
    region_id: String,
    date: NaiveDate,
    #[allow(dead_code)]
    count: u64,
    percent: f64,
}

#[derive(Debug, Deserialize)]
struct AgreementRow {
    image_date: String,
    agreement: f64,
    tpr: f64,
    fpr: f64,
    f1: f64,
    csi: f64,
    total_locations: u64,
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn agreement_table(rows: &[AgreementRow]) -> String {
    let mut s = String::from("| image date | agreement | TPR | FPR | F1 | CSI | locations |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
            r.image_date, r.agreement, r.tpr, r.fpr, r.f1, r.csi, r.total_locations
        ));
    }
    s
}

/// Renders the report and returns the agreement table (Markdown).
pub fn report(cfg: &RunConfig) -> Result<String> {
    let root = &cfg.paths.output;
    let dir = Layout::new(cfg).report();
    ensure_dir(&dir)?;

    let series_path = root.join("series.csv");
    need(&series_path, "series table", "run `aggregate` first")?;
    let rows: Vec<SeriesRow> = read_csv_rows(&series_path)?;
    let mut by_region: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let epoch = rows.iter().map(|r| r.date).min();
    for r in &rows {
        let x = (r.date - epoch.expect("rows exist")).num_days() as f64;
        by_region.entry(r.region_id.clone()).or_default().push((x, r.percent));
    }
    let series: Vec<svg::Series> = by_region
        .into_iter()
        .map(|(name, points)| svg::Series { name, points })
        .collect();
    let subtitle = epoch.map(|d| format!("days since {d}")).unwrap_or_default();
    fs::write(
        dir.join("series.svg"),
        svg::line_chart("Cumulative damaged buildings", &subtitle, "% damaged", &series),
    )?;

    let dets_records = {
        let path = Layout::new(cfg).records();
        need(&path, "damage records", "run `detect` first")?;
        detect::read_records_csv(fs::File::open(&path)?)?
    };
    let cdf = detect::persistence_cdf(&dets_records);
    let cdf_series = vec![svg::Series {
        name: "confirmed".into(),
        points: cdf.iter().map(|p| (p.days as f64, 100.0 * p.probability)).collect(),
    }];
    fs::write(
        dir.join("persistence_cdf.svg"),
        svg::line_chart("Days to confirmation", "days after first detection", "% of flagged pixels", &cdf_series),
    )?;

    let agreement_path = root.join("agreement.csv");
    let table = if agreement_path.exists() {
        agreement_table(&read_csv_rows(&agreement_path)?)
    } else {
        String::from("(no agreement table; run `evaluate`)\n")
    };
    fs::write(dir.join("agreement.md"), &table)?;
    Ok(table)
}
