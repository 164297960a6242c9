//! End-to-end orchestration: planned stacks in, detections out.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::catalog::{plan_all_timesteps, PlanningParams, StackPlan, TimestepPlans};
use crate::detect::{accumulate_damage, classify_damage, confirm_persistence, DetectionGrid, DetectorConfig, Persistence};
use crate::error::{Error, Result};
use crate::evaluate::DEFAULT_GRACE_TIMESTEPS;
use crate::raster::{CoherenceGrid, MaskGrid};
use crate::reduce::{reduce_stack, StackSummary, SummaryLabel, DEFAULT_MIN_COUNT};
use crate::synth::{score_against_truth, OracleScore, Scene, SceneTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub planning: PlanningParams,
    pub min_count: usize,
    pub grace_timesteps: usize,
    pub coverage_threshold: f64,
    /// Timesteps a pixel must be valid in to count as monitored.
    pub valid_min_timesteps: usize,
    pub with_counterfactual: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            planning: PlanningParams::default(),
            min_count: DEFAULT_MIN_COUNT,
            grace_timesteps: DEFAULT_GRACE_TIMESTEPS,
            coverage_threshold: crate::aggregate::DEFAULT_COVERAGE_THRESHOLD,
            valid_min_timesteps: 2,
            with_counterfactual: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.planning.min_pairs == 0 || self.planning.min_pairs > self.planning.max_pairs {
            return Err(Error::Config(format!(
                "stack size bounds {}..={} are inconsistent",
                self.planning.min_pairs, self.planning.max_pairs
            )));
        }
        if !(self.planning.max_bperp_m > 0.0) {
            return Err(Error::Config("max |B⊥| must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coverage_threshold) || self.coverage_threshold == 0.0 {
            return Err(Error::Config("coverage threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Anything that can produce the coherence rasters of a planned stack.
pub trait StackSource: Sync {
    fn load(&self, plan: &StackPlan) -> Result<Vec<CoherenceGrid>>;
}

impl StackSource for Scene {
    fn load(&self, plan: &StackPlan) -> Result<Vec<CoherenceGrid>> {
        self.stack(plan)
    }
}

pub fn summarize(source: &dyn StackSource, plan: &StackPlan, min_count: usize) -> Result<StackSummary> {
    let grids = source.load(plan)?;
    let label = SummaryLabel::new(plan.epoch, plan.timestep_date).with_pairs(plan.pairs.iter().map(|p| p.key()).collect());
    reduce_stack(&grids, min_count, label)
}

/// Summaries and detections for one timestep.
#[derive(Debug, Clone)]
pub struct TimestepResult {
    pub plans: TimestepPlans,
    pub conflict_summary: StackSummary,
    pub pre_summary: StackSummary,
    pub conflict: DetectionGrid,
    pub counterfactual: Option<DetectionGrid>,
}

pub fn process_timestep(source: &dyn StackSource, plans: TimestepPlans, cfg: &PipelineConfig) -> Result<TimestepResult> {
    let conflict_summary = summarize(source, &plans.conflict, cfg.min_count)?;
    let pre_summary = summarize(source, &plans.pre, cfg.min_count)?;
    let conflict = classify_damage(&conflict_summary, &pre_summary, &cfg.detector)?;
    let counterfactual = match (&plans.counterfactual, &plans.counterfactual_baseline) {
        (Some(cf), Some(base)) => {
            let event = summarize(source, cf, cfg.min_count)?;
            let baseline = summarize(source, base, cfg.min_count)?;
            Some(classify_damage(&event, &baseline, &cfg.detector)?)
        }
        _ => None,
    };
    tracing::debug!(
        timestep = %plans.conflict.timestep_date,
        flagged = conflict.flag.count_set(),
        "timestep classified"
    );
    Ok(TimestepResult {
        plans,
        conflict_summary,
        pre_summary,
        conflict,
        counterfactual,
    })
}

/// Everything the synthetic pipeline produces.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub scene: Scene,
    pub truth: SceneTruth,
    pub timesteps: Vec<TimestepResult>,
    pub persistence: Persistence,
}

impl SyntheticRun {
    pub fn conflict_series(&self) -> Vec<DetectionGrid> {
        self.timesteps.iter().map(|t| t.conflict.clone()).collect()
    }

    pub fn counterfactual_series(&self) -> Vec<DetectionGrid> {
        self.timesteps.iter().filter_map(|t| t.counterfactual.clone()).collect()
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.timesteps.last().map(|t| t.conflict.timestep_date)
    }

    pub fn cumulative_conflict(&self) -> Result<Option<MaskGrid>> {
        match self.last_date() {
            Some(d) => accumulate_damage(&self.conflict_series(), d),
            None => Ok(None),
        }
    }

    /// Cumulative conflict flags scored against the scene truth.
    pub fn conflict_score(&self) -> Result<OracleScore> {
        let flags = self.cumulative_conflict()?.ok_or(Error::EmptyReport)?;
        score_against_truth(&flags, &self.truth, self.last_date())
    }

    /// Cumulative counterfactual flags scored against an undamaged scene.
    pub fn counterfactual_score(&self) -> Result<OracleScore> {
        let series = self.counterfactual_series();
        let last = series.last().ok_or(Error::EmptyReport)?.timestep_date;
        let flags = accumulate_damage(&series, last)?.ok_or(Error::EmptyReport)?;
        score_against_truth(&flags, &self.truth.undamaged(), None)
    }
}

/// Plans, simulates, reduces and classifies every timestep of `scene`.
pub fn run_synthetic(scene: Scene, cfg: &PipelineConfig) -> Result<SyntheticRun> {
    cfg.validate()?;
    let plans = plan_all_timesteps(&scene.catalog, &scene.spec.epochs, cfg.with_counterfactual, &cfg.planning)?;
    if plans.is_empty() {
        return Err(Error::Config("conflict window holds no acquisitions".into()));
    }
    let pre_plans: Vec<&StackPlan> = plans.iter().map(|p| &p.pre).collect();
    let truth = scene.truth(&pre_plans, &cfg.detector)?;
    let timesteps = plans
        .into_iter()
        .map(|p| process_timestep(&scene, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<DetectionGrid> = timesteps.iter().map(|t| t.conflict.clone()).collect();
    let persistence = confirm_persistence(&series, &cfg.detector)?;
    Ok(SyntheticRun {
        scene,
        truth,
        timesteps,
        persistence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{cdf_at, persistence_cdf};
    use crate::synth::SceneSpec;

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let mut bad = PipelineConfig::default();
        bad.planning.min_pairs = 30;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = PipelineConfig::default();
        bad.coverage_threshold = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_scene_end_to_end() {
        let mut spec = SceneSpec::standard(5);
        spec.width = 48;
        spec.height = 48;
        spec.class_blocks = vec![];
        spec.background = crate::synth::LandClass::Urban;
        spec.damage_blocks = vec![crate::synth::DamageBlock {
            block: crate::synth::Block { row: 10, col: 10, rows: 10, cols: 10 },
            event_date: NaiveDate::from_ymd_opt(2023, 10, 20).unwrap(),
        }];
        let run = run_synthetic(Scene::build(spec).unwrap(), &PipelineConfig::default()).unwrap();
        let s = run.conflict_score().unwrap();
        assert_eq!(s.tp + s.fn_, 100);
        assert!(s.tpr >= 0.95, "{s:?}");
        assert!(s.fpr <= 0.01, "{s:?}");
        let cf = run.counterfactual_score().unwrap();
        assert!(cf.fpr <= 0.01, "{cf:?}");
        let cdf = persistence_cdf(&run.persistence.records);
        assert!(cdf_at(&cdf, 12) >= 0.9);
    }
}
