//! Acquisition archive and baseline-matched stack planning.
//!
//! A monitoring timestep is anchored on one conflict-period acquisition (the
//! conflict reference). Around it we plan up to four single-reference stacks:
//!
//! * `conflict`: the conflict reference paired with the most recent pre-war
//!   acquisitions on the same track;
//! * `pre`: a reference acquired about one year earlier (smallest |B⊥|),
//!   paired with pre-war secondaries whose |ΔT| multiset matches the
//!   conflict stack;
//! * `counterfactual` and `counterfactual_baseline`: the same two stacks
//!   rebuilt with every date shifted back by the counterfactual shift, so the
//!   detector can be run over a period without fighting.
//!
//! All planning functions are pure over an immutable [`Catalog`].

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Months, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub id: String,
    pub acquired_at: DateTime<Utc>,
    pub orbit_path: u32,
    pub direction: Direction,
    /// Cross-track position inside the orbital tube, meters from track nominal.
    #[serde(rename = "cross_track_position_m")]
    pub cross_track_position: f64,
}

impl Acquisition {
    pub fn date(&self) -> NaiveDate {
        self.acquired_at.date_naive()
    }

    fn same_track(&self, other: &Acquisition) -> bool {
        self.orbit_path == other.orbit_path && self.direction == other.direction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsarPair {
    pub reference: String,
    pub secondary: String,
    /// reference date − secondary date, whole days.
    pub temporal_baseline_days: i64,
    /// reference position − secondary position, meters.
    pub perpendicular_baseline_m: f64,
}

impl InsarPair {
    pub fn abs_temporal_baseline(&self) -> i64 {
        self.temporal_baseline_days.abs()
    }

    /// Stable key used for product file names and manifests.
    pub fn key(&self) -> String {
        format!("{}__{}", self.reference, self.secondary)
    }
}

/// Forms the pair `a` (reference) × `b` (secondary).
pub fn pair_baselines(a: &Acquisition, b: &Acquisition) -> Result<InsarPair> {
    let pairing_error = |reason: String| Error::Pairing {
        reference: a.id.clone(),
        secondary: b.id.clone(),
        reason,
    };
    if a.id == b.id {
        return Err(pairing_error("reference and secondary are the same acquisition".into()));
    }
    if a.orbit_path != b.orbit_path {
        return Err(pairing_error(format!(
            "orbit paths differ ({} vs {})",
            a.orbit_path, b.orbit_path
        )));
    }
    if a.direction != b.direction {
        return Err(pairing_error("pass directions differ".into()));
    }
    Ok(InsarPair {
        reference: a.id.clone(),
        secondary: b.id.clone(),
        temporal_baseline_days: (a.date() - b.date()).num_days(),
        perpendicular_baseline_m: a.cross_track_position - b.cross_track_position,
    })
}

/// Acquisition archive, kept sorted by (date-time, id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    acquisitions: Vec<Acquisition>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(mut acquisitions: Vec<Acquisition>) -> Result<Self> {
        acquisitions.sort_by(|a, b| a.acquired_at.cmp(&b.acquired_at).then_with(|| a.id.cmp(&b.id)));
        let mut by_id = HashMap::with_capacity(acquisitions.len());
        for (i, acq) in acquisitions.iter().enumerate() {
            if by_id.insert(acq.id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate acquisition id {}", acq.id)));
            }
        }
        Ok(Self { acquisitions, by_id })
    }

    pub fn get(&self, id: &str) -> Option<&Acquisition> {
        self.by_id.get(id).map(|&i| &self.acquisitions[i])
    }

    pub fn acquisitions(&self) -> &[Acquisition] {
        &self.acquisitions
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    /// Same-track acquisitions (excluding `reference`) whose date lies in `window`.
    pub fn same_track_in<'a>(
        &'a self,
        reference: &'a Acquisition,
        window: DateWindow,
    ) -> impl Iterator<Item = &'a Acquisition> + 'a {
        self.acquisitions
            .iter()
            .filter(move |a| a.id != reference.id && a.same_track(reference) && window.contains(a.date()))
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut acquisitions = Vec::new();
        for row in rdr.deserialize() {
            let acq: Acquisition = row.map_err(|e| Error::Format(format!("catalog csv: {e}")))?;
            acquisitions.push(acq);
        }
        Self::new(acquisitions)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(file)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["id", "acquired_at", "orbit_path", "direction", "cross_track_position_m"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for a in &self.acquisitions {
            let direction = match a.direction {
                Direction::Ascending => "ascending",
                Direction::Descending => "descending",
            };
            wtr.write_record([
                a.id.as_str(),
                &a.acquired_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                &a.orbit_path.to_string(),
                direction,
                &a.cross_track_position.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv(std::io::BufWriter::new(file))
    }
}

/// Closed date interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    fn shifted_back(&self, months: u32) -> Option<Self> {
        Some(Self {
            start: self.start.checked_sub_months(Months::new(months))?,
            end: self.end.checked_sub_months(Months::new(months))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epoch {
    Pre,
    Conflict,
    Counterfactual,
    /// Pre-event baseline for a counterfactual timestep.
    CounterfactualBaseline,
}

impl Epoch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Epoch::Pre => "pre",
            Epoch::Conflict => "conflict",
            Epoch::Counterfactual => "counterfactual",
            Epoch::CounterfactualBaseline => "counterfactual_baseline",
        }
    }

    fn is_counterfactual(&self) -> bool {
        matches!(self, Epoch::Counterfactual | Epoch::CounterfactualBaseline)
    }
}

impl std::fmt::Display for Epoch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochConfig {
    pub conflict_window: DateWindow,
    /// Archive window from which pre-war secondaries and pre references are drawn.
    pub pre_window: DateWindow,
    #[serde(default = "default_shift")]
    pub counterfactual_shift_months: u32,
    pub war_onset: NaiveDate,
}

fn default_shift() -> u32 {
    24
}

impl EpochConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pre_window.start > self.pre_window.end || self.conflict_window.start > self.conflict_window.end {
            return Err(Error::Config("date window with start after end".into()));
        }
        if self.pre_window.end >= self.war_onset {
            return Err(Error::Config(format!(
                "pre window must end before war onset {}",
                self.war_onset
            )));
        }
        if self.conflict_window.start < self.war_onset {
            return Err(Error::Config(format!(
                "conflict window must start on or after war onset {}",
                self.war_onset
            )));
        }
        let cf = self
            .conflict_window
            .shifted_back(self.counterfactual_shift_months)
            .ok_or_else(|| Error::Config("counterfactual shift out of calendar range".into()))?;
        if cf.end >= self.war_onset {
            return Err(Error::Config(format!(
                "counterfactual window {}..{} does not fall entirely before war onset",
                cf.start, cf.end
            )));
        }
        Ok(())
    }

    fn shift(&self, d: NaiveDate) -> Result<NaiveDate> {
        d.checked_sub_months(Months::new(self.counterfactual_shift_months))
            .ok_or_else(|| Error::Config("counterfactual shift out of calendar range".into()))
    }

    /// Onset date that secondaries of `epoch` must strictly predate.
    pub fn onset_for(&self, epoch: Epoch) -> Result<NaiveDate> {
        if epoch.is_counterfactual() {
            self.shift(self.war_onset)
        } else {
            Ok(self.war_onset)
        }
    }

    /// Window of admissible secondary (and pre-reference) dates for `epoch`.
    pub fn secondary_window(&self, epoch: Epoch) -> Result<DateWindow> {
        let onset = self.onset_for(epoch)?;
        let base = if epoch.is_counterfactual() {
            self.pre_window
                .shifted_back(self.counterfactual_shift_months)
                .ok_or_else(|| Error::Config("counterfactual shift out of calendar range".into()))?
        } else {
            self.pre_window
        };
        let last = onset.pred_opt().unwrap_or(onset);
        Ok(DateWindow::new(base.start, base.end.min(last)))
    }

    pub fn counterfactual_window(&self) -> Result<DateWindow> {
        Ok(DateWindow::new(
            self.shift(self.conflict_window.start)?,
            self.shift(self.conflict_window.end)?,
        ))
    }

    pub fn counterfactual_date(&self, d: NaiveDate) -> Result<NaiveDate> {
        self.shift(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningParams {
    pub window_days: i64,
    pub max_pairs: usize,
    pub min_pairs: usize,
    pub max_bperp_m: f64,
    pub tolerance_days: i64,
    /// How many yearly anniversaries back a pre reference may be sought when
    /// the one-year window holds no pre-war candidate.
    pub max_years_back: u32,
}

impl Default for PlanningParams {
    fn default() -> Self {
        Self {
            window_days: 30,
            max_pairs: 25,
            min_pairs: 15,
            max_bperp_m: 250.0,
            tolerance_days: 6,
            max_years_back: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackPlan {
    pub epoch: Epoch,
    pub reference: String,
    pub pairs: Vec<InsarPair>,
    pub timestep_date: NaiveDate,
}

impl StackPlan {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// |ΔT| values sorted ascending.
    pub fn sorted_abs_baselines(&self) -> Vec<i64> {
        let mut v: Vec<i64> = self.pairs.iter().map(InsarPair::abs_temporal_baseline).collect();
        v.sort_unstable();
        v
    }

    /// File stem used for persisted artifacts, e.g. `conflict_2023-10-12`.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.epoch, self.timestep_date)
    }
}

fn sort_pairs(pairs: &mut [InsarPair]) {
    pairs.sort_by(|a, b| {
        a.abs_temporal_baseline()
            .cmp(&b.abs_temporal_baseline())
            .then_with(|| a.secondary.cmp(&b.secondary))
    });
}

/// Picks the pre-war acquisition closest to the one-year anniversary of
/// `conflict_ref` with the smallest |B⊥| relative to it.
pub fn select_reference<'a>(
    catalog: &'a Catalog,
    conflict_ref: &Acquisition,
    window_days: i64,
    war_onset: NaiveDate,
) -> Result<&'a Acquisition> {
    select_reference_years_back(catalog, conflict_ref, window_days, war_onset, 1)
}

/// As [`select_reference`] but around the `years`-th anniversary (365 days per year).
pub fn select_reference_years_back<'a>(
    catalog: &'a Catalog,
    conflict_ref: &Acquisition,
    window_days: i64,
    war_onset: NaiveDate,
    years: u32,
) -> Result<&'a Acquisition> {
    let anniversary = conflict_ref.date() - chrono::Duration::days(365 * years as i64);
    catalog
        .acquisitions()
        .iter()
        .filter(|a| {
            a.id != conflict_ref.id
                && a.same_track(conflict_ref)
                && a.date() < war_onset
                && (a.date() - anniversary).num_days().abs() <= window_days
        })
        .min_by(|a, b| {
            let ba = (a.cross_track_position - conflict_ref.cross_track_position).abs();
            let bb = (b.cross_track_position - conflict_ref.cross_track_position).abs();
            ba.total_cmp(&bb)
                .then_with(|| {
                    let da = (a.date() - anniversary).num_days().abs();
                    let db = (b.date() - anniversary).num_days().abs();
                    da.cmp(&db)
                })
                .then_with(|| a.id.cmp(&b.id))
        })
        .ok_or(Error::NoReference {
            target: anniversary,
            window_days,
            orbit_path: conflict_ref.orbit_path,
        })
}

/// Conflict-style stack: the `max_pairs` admissible pre-onset secondaries
/// closest in time to the onset.
pub fn plan_stack(
    catalog: &Catalog,
    reference: &Acquisition,
    epochs: &EpochConfig,
    epoch: Epoch,
    timestep_date: NaiveDate,
    params: &PlanningParams,
) -> Result<StackPlan> {
    let window = epochs.secondary_window(epoch)?;
    let mut candidates: Vec<InsarPair> = catalog
        .same_track_in(reference, window)
        .map(|s| pair_baselines(reference, s))
        .collect::<Result<_>>()?;
    candidates.retain(|p| p.perpendicular_baseline_m.abs() <= params.max_bperp_m);
    if candidates.len() < params.min_pairs {
        return Err(Error::InsufficientStack {
            available: candidates.len(),
            required: params.min_pairs,
            context: format!("{epoch} stack for reference {}", reference.id),
        });
    }
    // Secondaries all predate the reference's onset, so "closest to onset"
    // is "latest date"; the ids break any remaining tie.
    candidates.sort_by(|a, b| {
        let da = catalog.get(&a.secondary).map(Acquisition::date);
        let db = catalog.get(&b.secondary).map(Acquisition::date);
        db.cmp(&da)
            .then_with(|| a.perpendicular_baseline_m.abs().total_cmp(&b.perpendicular_baseline_m.abs()))
            .then_with(|| a.secondary.cmp(&b.secondary))
    });
    candidates.truncate(params.max_pairs);
    sort_pairs(&mut candidates);
    Ok(StackPlan {
        epoch,
        reference: reference.id.clone(),
        pairs: candidates,
        timestep_date,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub plan: StackPlan,
    /// Secondaries of the target plan that found no partner within tolerance.
    pub unmatched: Vec<String>,
}

impl MatchOutcome {
    pub fn is_degraded(&self) -> bool {
        !self.unmatched.is_empty()
    }
}

/// Builds a stack on `reference` whose |ΔT| multiset mirrors `target`.
///
/// Target baselines are visited in ascending |ΔT| order; each takes the
/// nearest unused candidate (ties: smaller |ΔT|, then id) if it lies within
/// `tolerance_days`.
pub fn match_temporal_baselines(
    target: &StackPlan,
    reference: &Acquisition,
    candidates: &[&Acquisition],
    epoch: Epoch,
    timestep_date: NaiveDate,
    params: &PlanningParams,
) -> Result<MatchOutcome> {
    let mut pool: Vec<InsarPair> = candidates
        .iter()
        .filter(|c| c.id != reference.id && c.same_track(reference))
        .map(|c| pair_baselines(reference, c))
        .collect::<Result<_>>()?;
    pool.retain(|p| p.perpendicular_baseline_m.abs() <= params.max_bperp_m);
    sort_pairs(&mut pool);

    let mut targets: Vec<&InsarPair> = target.pairs.iter().collect();
    targets.sort_by(|a, b| {
        a.abs_temporal_baseline()
            .cmp(&b.abs_temporal_baseline())
            .then_with(|| a.secondary.cmp(&b.secondary))
    });

    let mut used = vec![false; pool.len()];
    let mut matched = Vec::with_capacity(targets.len());
    let mut unmatched = Vec::new();
    for t in targets {
        let want = t.abs_temporal_baseline();
        let best = pool
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, p)| (i, (p.abs_temporal_baseline() - want).abs()))
            .filter(|&(_, gap)| gap <= params.tolerance_days)
            .min_by_key(|&(i, gap)| (gap, i));
        match best {
            Some((i, _)) => {
                used[i] = true;
                matched.push(pool[i].clone());
            }
            None => unmatched.push(t.secondary.clone()),
        }
    }
    if !unmatched.is_empty() {
        tracing::warn!(
            epoch = %epoch,
            reference = %reference.id,
            unmatched = unmatched.len(),
            "degraded temporal-baseline match"
        );
    }
    if matched.len() < params.min_pairs {
        return Err(Error::InsufficientStack {
            available: matched.len(),
            required: params.min_pairs,
            context: format!("{epoch} stack matched to {}", target.reference),
        });
    }
    sort_pairs(&mut matched);
    Ok(MatchOutcome {
        plan: StackPlan {
            epoch,
            reference: reference.id.clone(),
            pairs: matched,
            timestep_date,
        },
        unmatched,
    })
}

/// Same-track acquisition within ±`window_days` of `target` with the
/// smallest |B⊥| relative to `anchor`; ties by date distance, then id. This
/// mirrors the pre-reference rule and keeps off-track outliers from
/// anchoring a stack.
fn nearest_acquisition<'a>(
    catalog: &'a Catalog,
    anchor: &Acquisition,
    target: NaiveDate,
    window_days: i64,
) -> Option<&'a Acquisition> {
    catalog
        .acquisitions()
        .iter()
        .filter(|a| a.same_track(anchor) && (a.date() - target).num_days().abs() <= window_days)
        .min_by(|a, b| {
            let da = (a.date() - target).num_days().abs();
            let db = (b.date() - target).num_days().abs();
            let ba = (a.cross_track_position - anchor.cross_track_position).abs();
            let bb = (b.cross_track_position - anchor.cross_track_position).abs();
            ba.total_cmp(&bb).then(da.cmp(&db)).then_with(|| a.id.cmp(&b.id))
        })
}

/// Rebuilds the conflict stack `counterfactual_shift_months` earlier.
pub fn plan_counterfactual(
    catalog: &Catalog,
    epochs: &EpochConfig,
    conflict_plan: &StackPlan,
    params: &PlanningParams,
) -> Result<MatchOutcome> {
    let conflict_ref = catalog
        .get(&conflict_plan.reference)
        .ok_or_else(|| Error::Catalog(conflict_plan.reference.clone()))?;
    let shifted = epochs.counterfactual_date(conflict_ref.date())?;
    let reference = nearest_acquisition(catalog, conflict_ref, shifted, params.window_days).ok_or_else(|| {
        Error::InsufficientStack {
            available: 0,
            required: params.min_pairs,
            context: format!("no counterfactual reference near {shifted}"),
        }
    })?;
    let window = epochs.secondary_window(Epoch::Counterfactual)?;
    let candidates: Vec<&Acquisition> = catalog.same_track_in(reference, window).collect();
    let timestep = epochs.counterfactual_date(conflict_plan.timestep_date)?;
    match_temporal_baselines(conflict_plan, reference, &candidates, Epoch::Counterfactual, timestep, params)
}

/// All stacks serving one monitoring timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepPlans {
    pub conflict: StackPlan,
    pub pre: StackPlan,
    pub counterfactual: Option<StackPlan>,
    pub counterfactual_baseline: Option<StackPlan>,
}

impl TimestepPlans {
    pub fn all(&self) -> impl Iterator<Item = &StackPlan> {
        [Some(&self.conflict), Some(&self.pre), self.counterfactual.as_ref(), self.counterfactual_baseline.as_ref()]
            .into_iter()
            .flatten()
    }
}

fn find_baseline_reference<'a>(
    catalog: &'a Catalog,
    anchor: &Acquisition,
    onset: NaiveDate,
    window: DateWindow,
    params: &PlanningParams,
) -> Result<&'a Acquisition> {
    let mut last_err = None;
    for years in 1..=params.max_years_back.max(1) {
        match select_reference_years_back(catalog, anchor, params.window_days, onset, years) {
            Ok(r) if window.contains(r.date()) => return Ok(r),
            Ok(r) => {
                last_err = Some(Error::NoReference {
                    target: r.date(),
                    window_days: params.window_days,
                    orbit_path: anchor.orbit_path,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one year is tried"))
}

fn baseline_for(
    catalog: &Catalog,
    epochs: &EpochConfig,
    target: &StackPlan,
    anchor: &Acquisition,
    epoch: Epoch,
    timestep_date: NaiveDate,
    params: &PlanningParams,
) -> Result<MatchOutcome> {
    let onset = epochs.onset_for(epoch)?;
    let window = epochs.secondary_window(epoch)?;
    let reference = find_baseline_reference(catalog, anchor, onset, window, params)?;
    let candidates: Vec<&Acquisition> = catalog.same_track_in(reference, window).collect();
    match_temporal_baselines(target, reference, &candidates, epoch, timestep_date, params)
}

/// Plans every stack for the timestep anchored on `conflict_ref`.
///
/// When a matched stack cannot mirror some conflict pair within tolerance,
/// that conflict pair is dropped and matching restarts, so the accepted
/// stacks always agree element-wise on sorted |ΔT|.
pub fn plan_timestep(
    catalog: &Catalog,
    epochs: &EpochConfig,
    conflict_ref: &Acquisition,
    with_counterfactual: bool,
    params: &PlanningParams,
) -> Result<TimestepPlans> {
    let timestep = conflict_ref.date();
    let mut conflict = plan_stack(catalog, conflict_ref, epochs, Epoch::Conflict, timestep, params)?;
    loop {
        let pre = baseline_for(catalog, epochs, &conflict, conflict_ref, Epoch::Pre, timestep, params)?;
        let mut dropped: HashSet<String> = pre.unmatched.iter().cloned().collect();

        let mut cf_pair = None;
        if with_counterfactual {
            let cf = plan_counterfactual(catalog, epochs, &conflict, params)?;
            dropped.extend(cf.unmatched.iter().cloned());
            let cf_ref = catalog
                .get(&cf.plan.reference)
                .ok_or_else(|| Error::Catalog(cf.plan.reference.clone()))?;
            let cfb = baseline_for(
                catalog,
                epochs,
                &conflict,
                cf_ref,
                Epoch::CounterfactualBaseline,
                cf.plan.timestep_date,
                params,
            )?;
            dropped.extend(cfb.unmatched.iter().cloned());
            cf_pair = Some((cf.plan, cfb.plan));
        }

        if dropped.is_empty() {
            let (counterfactual, counterfactual_baseline) = match cf_pair {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            return Ok(TimestepPlans {
                conflict,
                pre: pre.plan,
                counterfactual,
                counterfactual_baseline,
            });
        }
        conflict.pairs.retain(|p| !dropped.contains(&p.secondary));
        if conflict.pairs.len() < params.min_pairs {
            return Err(Error::InsufficientStack {
                available: conflict.pairs.len(),
                required: params.min_pairs,
                context: format!("conflict stack {} after baseline matching", conflict.reference),
            });
        }
    }
}

/// Plans every monitoring timestep: one per acquisition inside the conflict
/// window, in date order.
pub fn plan_all_timesteps(
    catalog: &Catalog,
    epochs: &EpochConfig,
    with_counterfactual: bool,
    params: &PlanningParams,
) -> Result<Vec<TimestepPlans>> {
    epochs.validate()?;
    catalog
        .acquisitions()
        .iter()
        .filter(|a| epochs.conflict_window.contains(a.date()))
        .map(|a| plan_timestep(catalog, epochs, a, with_counterfactual, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Datelike, TimeZone};

    fn acq(id: &str, y: i32, m: u32, d: u32, path: u32, pos: f64) -> Acquisition {
        Acquisition {
            id: id.into(),
            acquired_at: Utc.with_ymd_and_hms(y, m, d, 3, 50, 0).unwrap(),
            orbit_path: path,
            direction: Direction::Ascending,
            cross_track_position: pos,
        }
    }

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn epochs() -> EpochConfig {
        EpochConfig {
            conflict_window: DateWindow::new(date(2023, 10, 12), date(2024, 10, 31)),
            pre_window: DateWindow::new(date(2019, 1, 1), date(2023, 10, 6)),
            counterfactual_shift_months: 24,
            war_onset: date(2023, 10, 7),
        }
    }

    /// 12-day repeat on one track from `start`, positions from `pos`.
    fn archive(start: NaiveDate, n: usize, pos: impl Fn(usize) -> f64) -> Vec<Acquisition> {
        (0..n)
            .map(|i| {
                let d = start + chrono::Duration::days(12 * i as i64);
                Acquisition {
                    id: format!("S1_{d}"),
                    acquired_at: Utc.from_utc_datetime(&d.and_hms_opt(3, 50, 0).unwrap()),
                    orbit_path: 160,
                    direction: Direction::Ascending,
                    cross_track_position: pos(i),
                }
            })
            .collect()
    }

    #[test]
    fn pair_baseline_examples() {
        let a = acq("a", 2023, 10, 12, 160, 30.0);
        let b = acq("b", 2022, 10, 18, 160, 15.0);
        let p = pair_baselines(&a, &b).unwrap();
        assert_eq!(p.temporal_baseline_days, 359);
        assert_eq!(p.perpendicular_baseline_m, 15.0);
        let c = acq("c", 2022, 10, 18, 94, 15.0);
        assert!(matches!(pair_baselines(&a, &c), Err(Error::Pairing { .. })));
        let mut d = b.clone();
        d.id = "d".into();
        d.direction = Direction::Descending;
        assert!(matches!(pair_baselines(&a, &d), Err(Error::Pairing { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = acq("a", 2023, 10, 12, 160, 0.0);
        assert!(Catalog::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn reference_selection() {
        let conflict = acq("c", 2023, 10, 12, 160, 0.0);
        let cat = Catalog::new(vec![
            conflict.clone(),
            acq("r1", 2022, 10, 6, 160, 42.0),
            acq("r2", 2022, 10, 18, 160, -15.0),
            acq("other_track", 2022, 10, 12, 94, 0.0),
        ])
        .unwrap();
        let onset = date(2023, 10, 7);
        assert_eq!(select_reference(&cat, &conflict, 30, onset).unwrap().id, "r2");

        let single = Catalog::new(vec![conflict.clone(), acq("r1", 2022, 10, 6, 160, 42.0)]).unwrap();
        assert_eq!(select_reference(&single, &conflict, 30, onset).unwrap().id, "r1");

        let far = Catalog::new(vec![conflict.clone(), acq("r1", 2022, 8, 1, 160, 1.0)]).unwrap();
        assert!(matches!(
            select_reference(&far, &conflict, 30, onset),
            Err(Error::NoReference { .. })
        ));
    }

    #[test]
    fn reference_ties_break_on_anniversary_then_id() {
        let conflict = acq("c", 2023, 10, 12, 160, 0.0);
        let cat = Catalog::new(vec![
            conflict.clone(),
            acq("b", 2022, 10, 20, 160, 10.0),
            acq("a", 2022, 10, 4, 160, -10.0),
            acq("z", 2022, 10, 13, 160, 10.0),
            acq("y", 2022, 10, 11, 160, -10.0),
        ])
        .unwrap();
        // Anniversary is 2022-10-12; y and z are both one day off.
        assert_eq!(select_reference(&cat, &conflict, 30, date(2023, 10, 7)).unwrap().id, "y");
    }

    #[test]
    fn stack_caps_and_floors() {
        let e = epochs();
        let params = PlanningParams::default();
        let mut acqs = archive(date(2022, 9, 1), 30, |_| 0.0);
        // Last archive date must precede onset.
        assert!(acqs.last().unwrap().date() < e.war_onset);
        let conflict = acq("conflict", 2023, 10, 12, 160, 0.0);
        acqs.push(conflict.clone());
        let cat = Catalog::new(acqs.clone()).unwrap();
        let plan = plan_stack(&cat, &conflict, &e, Epoch::Conflict, conflict.date(), &params).unwrap();
        assert_eq!(plan.len(), 25);
        // Most recent pre-war secondaries are kept.
        let oldest_kept = plan
            .pairs
            .iter()
            .map(|p| cat.get(&p.secondary).unwrap().date())
            .min()
            .unwrap();
        assert_eq!(oldest_kept, date(2022, 9, 1) + chrono::Duration::days(12 * 5));

        let few = archive(date(2022, 9, 1), 14, |_| 0.0)
            .into_iter()
            .chain([conflict.clone()])
            .collect();
        let cat = Catalog::new(few).unwrap();
        assert!(matches!(
            plan_stack(&cat, &conflict, &e, Epoch::Conflict, conflict.date(), &params),
            Err(Error::InsufficientStack { available: 14, .. })
        ));

        let mut with_outlier = archive(date(2022, 9, 1), 20, |_| 0.0);
        with_outlier[19].cross_track_position = 400.0;
        with_outlier.push(conflict.clone());
        let cat = Catalog::new(with_outlier).unwrap();
        let plan = plan_stack(&cat, &conflict, &e, Epoch::Conflict, conflict.date(), &params).unwrap();
        assert_eq!(plan.len(), 19);
        assert!(plan.pairs.iter().all(|p| p.perpendicular_baseline_m.abs() <= 250.0));
    }

    #[test]
    fn greedy_matching() {
        let params = PlanningParams {
            min_pairs: 3,
            ..Default::default()
        };
        let conflict_ref = acq("c", 2023, 10, 12, 160, 0.0);
        let pre_ref = acq("p", 2022, 10, 12, 160, 0.0);
        let mk_target = |days: &[i64]| StackPlan {
            epoch: Epoch::Conflict,
            reference: conflict_ref.id.clone(),
            pairs: days
                .iter()
                .map(|&d| InsarPair {
                    reference: "c".into(),
                    secondary: format!("t{d}"),
                    temporal_baseline_days: d,
                    perpendicular_baseline_m: 0.0,
                })
                .collect(),
            timestep_date: conflict_ref.date(),
        };
        let cands: Vec<Acquisition> = [352i64, 368, 380]
            .iter()
            .map(|&d| {
                let day = pre_ref.date() - chrono::Duration::days(d);
                Acquisition {
                    id: format!("s{d}"),
                    acquired_at: Utc.from_utc_datetime(&day.and_hms_opt(3, 50, 0).unwrap()),
                    ..pre_ref.clone()
                }
            })
            .collect();
        let refs: Vec<&Acquisition> = cands.iter().collect();

        let out = match_temporal_baselines(
            &mk_target(&[354, 366, 378]),
            &pre_ref,
            &refs,
            Epoch::Pre,
            conflict_ref.date(),
            &params,
        )
        .unwrap();
        assert!(!out.is_degraded());
        assert_eq!(out.plan.sorted_abs_baselines(), vec![352, 368, 380]);

        let exact = match_temporal_baselines(
            &mk_target(&[352, 368, 380]),
            &pre_ref,
            &refs,
            Epoch::Pre,
            conflict_ref.date(),
            &params,
        )
        .unwrap();
        assert_eq!(exact.plan.sorted_abs_baselines(), vec![352, 368, 380]);

        let relaxed = PlanningParams {
            min_pairs: 2,
            ..Default::default()
        };
        let out = match_temporal_baselines(
            &mk_target(&[354, 366, 720]),
            &pre_ref,
            &refs,
            Epoch::Pre,
            conflict_ref.date(),
            &relaxed,
        )
        .unwrap();
        assert_eq!(out.unmatched, vec!["t720".to_string()]);
        let err = match_temporal_baselines(
            &mk_target(&[354, 366, 720]),
            &pre_ref,
            &refs,
            Epoch::Pre,
            conflict_ref.date(),
            &params,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InsufficientStack { available: 2, required: 3, .. }));
    }

    #[test]
    fn counterfactual_shift() {
        let e = epochs();
        assert_eq!(e.counterfactual_date(date(2023, 10, 12)).unwrap(), date(2021, 10, 12));
        assert!(e.validate().is_ok());
        let params = PlanningParams::default();
        let acqs = archive(date(2019, 6, 3), 160, |i| ((i * 37) % 120) as f64 - 60.0);
        let cat = Catalog::new(acqs).unwrap();
        let conflict_ref = cat
            .acquisitions()
            .iter()
            .find(|a| a.date() >= e.conflict_window.start)
            .unwrap()
            .clone();
        let plans = plan_timestep(&cat, &e, &conflict_ref, true, &params).unwrap();
        let cf = plans.counterfactual.as_ref().unwrap();
        let cf_ref = cat.get(&cf.reference).unwrap();
        let shifted = e.counterfactual_date(conflict_ref.date()).unwrap();
        assert!((cf_ref.date() - shifted).num_days().abs() <= 6);
        let base = plans.conflict.sorted_abs_baselines();
        for other in plans.all() {
            let s = other.sorted_abs_baselines();
            assert_eq!(s.len(), base.len());
            assert!(s.iter().zip(&base).all(|(a, b)| (a - b).abs() <= 6), "{}", other.epoch);
        }
        let cf_onset = e.onset_for(Epoch::Counterfactual).unwrap();
        for p in &cf.pairs {
            assert!(cat.get(&p.secondary).unwrap().date() < cf_onset);
        }

        let empty_2021: Vec<Acquisition> = cat
            .acquisitions()
            .iter()
            .filter(|a| a.date().year() != 2021)
            .cloned()
            .collect();
        let cat = Catalog::new(empty_2021).unwrap();
        assert!(matches!(
            plan_counterfactual(&cat, &e, &plans.conflict, &params),
            Err(Error::InsufficientStack { .. })
        ));
    }

    #[test]
    fn epoch_config_validation() {
        let mut e = epochs();
        e.pre_window.end = date(2023, 10, 8);
        assert!(e.validate().is_err());
        let mut e = epochs();
        e.counterfactual_shift_months = 6;
        assert!(e.validate().is_err());
        let mut e = epochs();
        e.conflict_window.start = date(2023, 10, 1);
        assert!(e.validate().is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let cat = Catalog::new(vec![acq("a", 2023, 10, 12, 160, 30.5), acq("b", 2022, 10, 18, 94, -15.0)]).unwrap();
        let mut buf = Vec::new();
        cat.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,acquired_at,orbit_path,direction,cross_track_position_m\n"));
        assert!(text.contains("a,2023-10-12T03:50:00Z,160,ascending,30.5"));
        let back = Catalog::from_csv(&buf[..]).unwrap();
        assert_eq!(back.acquisitions(), cat.acquisitions());
    }
}
