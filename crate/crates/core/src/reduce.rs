//! Pixelwise mean / standard deviation over a coherence stack.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::Epoch;
use crate::error::{Error, Result};
use crate::raster::{self, CoherenceGrid, CountGrid, FloatGrid, Grid, GridMeta};

pub const DEFAULT_MIN_COUNT: usize = 15;

/// Which stack a summary describes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryLabel {
    pub epoch: Epoch,
    pub timestep_date: NaiveDate,
    /// Pair keys of the contributing coherence images.
    #[serde(default)]
    pub pairs: Vec<String>,
}

impl SummaryLabel {
    pub fn new(epoch: Epoch, timestep_date: NaiveDate) -> Self {
        Self {
            epoch,
            timestep_date,
            pairs: Vec::new(),
        }
    }

    pub fn with_pairs(mut self, pairs: Vec<String>) -> Self {
        self.pairs = pairs;
        self
    }

    pub fn stem(&self) -> String {
        format!("{}_{}", self.epoch, self.timestep_date)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackSummary {
    pub label: SummaryLabel,
    pub mean: FloatGrid,
    /// Population standard deviation.
    pub std: FloatGrid,
    pub count: CountGrid,
    pub min_count: usize,
}

impl StackSummary {
    pub fn meta(&self) -> &GridMeta {
        &self.mean.meta
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and population std of one pixel's members. Members are sorted first
/// so the result does not depend on stack order.
fn pixel_stats(members: &mut [f32]) -> (f64, f64) {
    members.sort_unstable_by(f32::total_cmp);
    let n = members.len() as f64;
    let mean = compensated_sum(members.iter().map(|&v| v as f64)) / n;
    let var = compensated_sum(members.iter().map(|&v| {
        let d = v as f64 - mean;
        d * d
    })) / n;
    (mean, var.max(0.0).sqrt())
}

/// Reduces an aligned stack to per-pixel mean, std and member count.
/// Pixels with fewer than `min_count` valid members become nodata.
pub fn reduce_stack(grids: &[CoherenceGrid], min_count: usize, label: SummaryLabel) -> Result<StackSummary> {
    if grids.len() < min_count || grids.is_empty() {
        return Err(Error::InsufficientStack {
            available: grids.len(),
            required: min_count.max(1),
            context: format!("{} stack reduction", label.stem()),
        });
    }
    let meta = grids[0].meta;
    for (i, g) in grids.iter().enumerate().skip(1) {
        meta.ensure_aligned(&g.meta, &format!("stack member {i}"))?;
    }
    if grids.len() > u16::MAX as usize - 1 {
        return Err(Error::Format(format!("stack of {} grids is too large", grids.len())));
    }

    let width = meta.width;
    let per_row: Vec<(Vec<f32>, Vec<f32>, Vec<u16>)> = (0..meta.height)
        .into_par_iter()
        .map(|row| {
            let mut mean = Vec::with_capacity(width);
            let mut std = Vec::with_capacity(width);
            let mut count = Vec::with_capacity(width);
            let mut members = Vec::with_capacity(grids.len());
            for col in 0..width {
                members.clear();
                members.extend(grids.iter().map(|g| g.get(row, col)).filter(|v| !v.is_nan()));
                count.push(members.len() as u16);
                if members.len() < min_count || members.is_empty() {
                    mean.push(f32::NAN);
                    std.push(f32::NAN);
                } else {
                    let (m, s) = pixel_stats(&mut members);
                    mean.push(m.clamp(0.0, 1.0) as f32);
                    std.push(s as f32);
                }
            }
            (mean, std, count)
        })
        .collect();

    let mut mean = Vec::with_capacity(meta.len());
    let mut std = Vec::with_capacity(meta.len());
    let mut count = Vec::with_capacity(meta.len());
    for (m, s, c) in per_row {
        mean.extend(m);
        std.extend(s);
        count.extend(c);
    }
    Ok(StackSummary {
        label,
        mean: Grid::new(meta, mean)?,
        std: Grid::new(meta, std)?,
        count: Grid::new(meta, count)?,
        min_count,
    })
}

/// JSON sidecar written next to the three summary rasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySidecar {
    pub epoch: Epoch,
    pub timestep_date: NaiveDate,
    pub pairs: Vec<String>,
    pub min_count: usize,
    pub std_kind: String,
    pub grid: GridMeta,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub content_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SummaryPaths {
    pub mean: PathBuf,
    pub std: PathBuf,
    pub count: PathBuf,
    pub sidecar: PathBuf,
}

impl SummaryPaths {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            mean: dir.join(format!("{stem}_mean.tif")),
            std: dir.join(format!("{stem}_std.tif")),
            count: dir.join(format!("{stem}_count.tif")),
            sidecar: dir.join(format!("{stem}.json")),
        }
    }
}

pub fn write_summary(summary: &StackSummary, dir: &Path, content_hash: Option<String>) -> Result<SummaryPaths> {
    let paths = SummaryPaths::in_dir(dir, &summary.label.stem());
    raster::write_geotiff(&summary.mean, &paths.mean)?;
    raster::write_geotiff(&summary.std, &paths.std)?;
    raster::write_geotiff(&summary.count, &paths.count)?;
    let sidecar = SummarySidecar {
        epoch: summary.label.epoch,
        timestep_date: summary.label.timestep_date,
        pairs: summary.label.pairs.clone(),
        min_count: summary.min_count,
        std_kind: "population".into(),
        grid: *summary.meta(),
        content_hash,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&paths.sidecar, json + "\n").map_err(|e| Error::io(&paths.sidecar, e))?;
    Ok(paths)
}

pub fn read_summary(dir: &Path, stem: &str) -> Result<StackSummary> {
    let paths = SummaryPaths::in_dir(dir, stem);
    let text = std::fs::read_to_string(&paths.sidecar).map_err(|e| Error::io(&paths.sidecar, e))?;
    let sidecar: SummarySidecar =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", paths.sidecar.display())))?;
    let mean: FloatGrid = raster::read_geotiff(&paths.mean)?;
    let std: FloatGrid = raster::read_geotiff(&paths.std)?;
    let count: CountGrid = raster::read_geotiff(&paths.count)?;
    mean.meta.ensure_aligned(&std.meta, "summary std")?;
    mean.meta.ensure_aligned(&count.meta, "summary count")?;
    Ok(StackSummary {
        label: SummaryLabel {
            epoch: sidecar.epoch,
            timestep_date: sidecar.timestep_date,
            pairs: sidecar.pairs,
        },
        mean,
        std,
        count,
        min_count: sidecar.min_count,
    })
}
