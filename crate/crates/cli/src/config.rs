//! Run configuration: one TOML file, optionally patched with `--set key=value`.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ltccd::catalog::{DateWindow, EpochConfig, PlanningParams};
use ltccd::detect::DetectorConfig;
use ltccd::ingest::IngestConfig;
use ltccd::synth::SceneSpec;
use serde::{Deserialize, Serialize};

/// Failure to load or validate the configuration; maps to exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub catalog: PathBuf,
    /// Coherence products, one sub-directory per stack plan.
    pub rasters: PathBuf,
    pub footprints: PathBuf,
    pub reference_points: PathBuf,
    /// Optional scene description for `simulate`; the standard scene otherwise.
    pub scene: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            catalog: "catalog.csv".into(),
            rasters: "rasters".into(),
            footprints: "footprints.geojson".into(),
            reference_points: "reference_points.geojson".into(),
            scene: None,
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceSection {
    pub min_count: usize,
}

impl Default for ReduceSection {
    fn default() -> Self {
        Self {
            min_count: ltccd::reduce::DEFAULT_MIN_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub grace_timesteps: usize,
    pub bins: usize,
    pub valid_min_timesteps: usize,
    /// Pseudo-stable region as [min_x, min_y, max_x, max_y] in the working CRS.
    pub stable_region: Option<[f64; 4]>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            grace_timesteps: ltccd::evaluate::DEFAULT_GRACE_TIMESTEPS,
            bins: ltccd::evaluate::DEFAULT_HISTOGRAM_BINS,
            valid_min_timesteps: 2,
            stable_region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateWindows {
    pub reference: DateWindow,
    pub comparison: DateWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateSection {
    pub coverage_threshold: f64,
    /// Id of the combined all-regions series.
    pub total_region_id: String,
    pub rate_windows: Option<RateWindows>,
}

impl Default for AggregateSection {
    fn default() -> Self {
        Self {
            coverage_threshold: ltccd::aggregate::DEFAULT_COVERAGE_THRESHOLD,
            total_region_id: "all".into(),
            rate_windows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub survey_dates: Vec<NaiveDate>,
    pub points_per_survey: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let d = |m, day| NaiveDate::from_ymd_opt(2023, m, day).expect("valid literal date");
        Self {
            seed: 42,
            width: 256,
            height: 256,
            survey_dates: vec![d(10, 15), d(11, 7), d(11, 26)],
            points_per_survey: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub crs_epsg: Option<u32>,
    pub epochs: EpochConfig,
    pub detector: DetectorConfig,
    pub planning: PlanningParams,
    pub with_counterfactual: bool,
    pub reduce: ReduceSection,
    pub evaluation: EvaluationSection,
    pub aggregate: AggregateSection,
    pub ingest: IngestConfig,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            crs_epsg: None,
            epochs: SceneSpec::standard(0).epochs,
            detector: DetectorConfig::default(),
            planning: PlanningParams::default(),
            with_counterfactual: true,
            reduce: ReduceSection::default(),
            evaluation: EvaluationSection::default(),
            aggregate: AggregateSection::default(),
            ingest: IngestConfig::default(),
            simulate: SimulateSection::default(),
        }
    }
}

/// Sets `dotted.key` in a TOML table. The value is parsed as TOML when
/// possible (numbers, booleans, arrays, quoted strings) and taken as a bare
/// string otherwise.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError(format!("override {assignment:?} has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut table = root;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override {key}: {part} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or defaults), applies overrides, and resolves relative
    /// paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        if let Ok(url) = std::env::var(ltccd::ingest::ENV_API_URL) {
            if cfg.ingest.api_url.is_empty() {
                cfg.ingest.api_url = url;
            }
        }
        cfg.ingest.token = std::env::var(ltccd::ingest::ENV_API_TOKEN).ok().filter(|t| !t.is_empty());
        cfg.paths.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: ltccd::Error| ConfigError(e.to_string());
        self.epochs.validate().map_err(wrap)?;
        self.detector.validate().map_err(wrap)?;
        if self.planning.min_pairs == 0 || self.planning.min_pairs > self.planning.max_pairs {
            return Err(ConfigError(format!(
                "planning: min_pairs {} must be in 1..=max_pairs {}",
                self.planning.min_pairs, self.planning.max_pairs
            )));
        }
        if !(self.planning.max_bperp_m > 0.0) || self.planning.tolerance_days < 0 || self.planning.window_days < 0 {
            return Err(ConfigError("planning: limits must be non-negative".into()));
        }
        if self.reduce.min_count == 0 {
            return Err(ConfigError("reduce.min_count must be at least 1".into()));
        }
        if self.evaluation.bins == 0 {
            return Err(ConfigError("evaluation.bins must be at least 1".into()));
        }
        if let Some([x0, y0, x1, y1]) = self.evaluation.stable_region {
            if !(x1 > x0 && y1 > y0) {
                return Err(ConfigError("evaluation.stable_region must be [min_x, min_y, max_x, max_y]".into()));
            }
        }
        let t = self.aggregate.coverage_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(ConfigError("aggregate.coverage_threshold must lie in (0, 1]".into()));
        }
        if self.simulate.width == 0 || self.simulate.height == 0 {
            return Err(ConfigError("simulate: scene must be at least 1x1".into()));
        }
        Ok(())
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.catalog,
            &mut self.rasters,
            &mut self.footprints,
            &mut self.reference_points,
            &mut self.output,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(s) = &mut self.scene {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
    }
}
