//! Gradient-attribution channel pre-selection and mask-matrix initialization.
//!
//! For every sampled image and every semantic region, the region's binary
//! mask is used as the output gradient and pulled back to the style channels.
//! Absolute channel gradients are divided by the region's pixel count,
//! averaged over iterations, and finally L1-normalized per channel across
//! regions, so a channel's row says where in the image it acts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{DifferentiableGenerator, RegionSegmenter};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::qmm::AttributeSpec;
use crate::stylespace::MaskMatrix;

pub const DEFAULT_ITERATIONS: usize = 256;

/// Per-(channel, region) attribution scores, `n x R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub regions: Vec<String>,
    pub editable: Vec<bool>,
    pub scores: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl AttributionTable {
    pub fn region_index(&self, region: &str) -> Result<usize> {
        self.regions
            .iter()
            .position(|r| r == region)
            .ok_or_else(|| Error::UnknownRegion(region.to_string()))
    }

    pub fn n_channels(&self) -> usize {
        self.scores.len()
    }

    /// Region with the largest score for a channel; `None` for an all-zero row.
    pub fn dominant_region(&self, channel: usize) -> Option<usize> {
        let row = &self.scores[channel];
        let (best, &v) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
        (v > 0.0).then_some(best)
    }
}

/// Pre-selection output consumed by training: the table plus the chosen
/// channels per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preselection {
    pub table: AttributionTable,
    pub channels: BTreeMap<String, Vec<usize>>,
}

impl Preselection {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::format("pre-selection", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("pre-selection", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn accumulate_attribution(
    generator: &dyn DifferentiableGenerator,
    segmenter: &dyn RegionSegmenter,
    iterations: usize,
    seed: u64,
) -> Result<AttributionTable> {
    if iterations == 0 {
        return Err(Error::invalid("attribution needs at least one iteration"));
    }
    let n = generator.n_channels();
    let regions = segmenter.regions().to_vec();
    let mut acc = vec![vec![0.0; regions.len()]; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..iterations {
        let style = generator.style_from_seed(rng.next_u64())?;
        let image = generator.synthesize(&style)?;
        let masks = segmenter.segment(&image)?;
        let (c, h, w) = image.shape();
        for (r, mask) in masks.iter().enumerate() {
            let count = mask.count();
            if count == 0 {
                continue;
            }
            let mut grad = Image::zeros(c, h, w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if mask.get(y, x) {
                            grad.set(ch, y, x, 1.0);
                        }
                    }
                }
            }
            let ds = generator.synthesize_vjp(&style, &grad)?;
            for (row, g) in acc.iter_mut().zip(ds) {
                row[r] += g.abs() / count as f64;
            }
        }
    }

    for row in &mut acc {
        let mean: Vec<f64> = row.iter().map(|v| v / iterations as f64).collect();
        let total: f64 = mean.iter().sum();
        *row = if total > 0.0 {
            mean.iter().map(|v| v / total).collect()
        } else {
            mean
        };
    }

    Ok(AttributionTable {
        regions,
        editable: generator.editable().to_vec(),
        scores: acc,
        iterations,
    })
}

/// Editable channels ranked by their score for `region` (descending, ties by
/// ascending index), truncated to `k`.
pub fn topk_channels(table: &AttributionTable, region: &str, k: usize) -> Result<Vec<usize>> {
    let r = table.region_index(region)?;
    let mut channels: Vec<usize> = (0..table.n_channels())
        .filter(|&c| table.editable[c])
        .collect();
    channels.sort_by(|&a, &b| {
        table.scores[b][r]
            .total_cmp(&table.scores[a][r])
            .then(a.cmp(&b))
    });
    channels.truncate(k);
    Ok(channels)
}

/// Top-`k_t` channels of each attribute's region; attributes with `k_t = 0`
/// are left to be discovered from scratch.
pub fn preselect_channels(
    table: &AttributionTable,
    specs: &[AttributeSpec],
) -> Result<BTreeMap<String, Vec<usize>>> {
    specs
        .iter()
        .filter(|s| s.k > 0)
        .map(|s| Ok((s.name.clone(), topk_channels(table, &s.region, s.k)?)))
        .collect()
}

/// Zeros everywhere; `d_t` at pre-selected `(t, i)`; `1` in the "others" row
/// for every channel no attribute pre-selected (non-editable ones included).
pub fn init_mask_matrix(
    n_channels: usize,
    specs: &[AttributeSpec],
    preselected: &BTreeMap<String, Vec<usize>>,
    editable: &[bool],
) -> Result<MaskMatrix> {
    if editable.len() != n_channels {
        return Err(Error::invalid(format!(
            "editability layout has {} channels, expected {n_channels}",
            editable.len()
        )));
    }
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let mut m = MaskMatrix::zeros(names, n_channels)?;
    let mut owner: Vec<Option<usize>> = vec![None; n_channels];

    for (name, channels) in preselected {
        let t = m
            .attribute_index(name)
            .ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
        for &c in channels {
            if c >= n_channels {
                return Err(Error::invalid(format!(
                    "pre-selected channel {c} out of range for {n_channels} channels"
                )));
            }
            if !editable[c] {
                return Err(Error::invalid(format!(
                    "channel {c} pre-selected by `{name}` is not editable"
                )));
            }
            match owner[c] {
                Some(prev) if prev != t => {
                    return Err(Error::invalid(format!(
                        "channel {c} pre-selected by both `{}` and `{name}`",
                        specs[prev].name
                    )))
                }
                _ => owner[c] = Some(t),
            }
            m.set(t, c, specs[t].d);
        }
    }
    let others = m.others_row();
    for (c, o) in owner.iter().enumerate() {
        if o.is_none() {
            m.set(others, c, 1.0);
        }
    }
    Ok(m)
}
