//! Template-matching pseudo-objectness: the maximum normalized cross
//! correlation between a window and a bank of known-positive patches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{crop, LabeledPatch};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::model::PATCH;
use crate::proposals::ObjectnessMap;
use crate::tensor::{dot_f64, xcorr2d_normalized, Tensor};

#[derive(Debug, Clone)]
pub struct TemplateBank {
    templates: Vec<Tensor>,
}

impl TemplateBank {
    pub fn new(templates: Vec<Tensor>) -> Result<TemplateBank> {
        if templates.is_empty() {
            return Err(Error::invalid("TemplateBank::new", "at least one template required"));
        }
        for t in &templates {
            if t.shape() != [1, PATCH, PATCH] {
                return Err(Error::invalid(
                    "TemplateBank::new",
                    format!("template shape {:?} is not [1, {PATCH}, {PATCH}]", t.shape()),
                ));
            }
        }
        Ok(TemplateBank { templates })
    }

    pub fn templates(&self) -> &[Tensor] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    fn stats(&self) -> Vec<TemplateStats<'_>> {
        self.templates.iter().map(TemplateStats::of).collect()
    }
}

/// Mean and centered energy of one template, precomputed for map scoring.
struct TemplateStats<'a> {
    data: &'a [f32],
    mean: f64,
    centered_energy: f64,
}

impl<'a> TemplateStats<'a> {
    fn of(t: &'a Tensor) -> TemplateStats<'a> {
        let data = t.data();
        let n = data.len() as f64;
        let sum: f64 = data.iter().map(|&v| v as f64).sum();
        let sq: f64 = data.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let mean = sum / n;
        TemplateStats {
            data,
            mean,
            centered_energy: sq - n * mean * mean,
        }
    }
}

fn correlation(patch: &[f32], pmean: f64, penergy: f64, t: &TemplateStats) -> f64 {
    let n = patch.len() as f64;
    let denom_sq = penergy * t.centered_energy;
    if denom_sq <= 0.0 {
        return 0.0;
    }
    let cross = dot_f64(patch, t.data) - n * pmean * t.mean;
    (cross / denom_sq.sqrt()).clamp(-1.0, 1.0)
}

fn patch_stats(patch: &[f32]) -> (f64, f64) {
    let n = patch.len() as f64;
    let sum: f64 = patch.iter().map(|&v| v as f64).sum();
    let sq: f64 = patch.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let mean = sum / n;
    (mean, sq - n * mean * mean)
}

/// Uniformly draws `t` distinct positive patches (objectness > 0) from the
/// training set.
pub fn select_templates(train_set: &[LabeledPatch], t: usize, seed: u64) -> Result<TemplateBank> {
    if t == 0 {
        return Err(Error::invalid("select_templates", "template count must be positive"));
    }
    let mut positives: Vec<&LabeledPatch> =
        train_set.iter().filter(|p| p.objectness > 0.0).collect();
    if positives.len() < t {
        return Err(Error::invalid(
            "select_templates",
            format!("need {t} positive patches, found {}", positives.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    TemplateBank::new(positives[..t].iter().map(|p| p.pixels.clone()).collect())
}

/// Best normalized cross correlation against the bank, clamped to [0, 1] so
/// it slots in wherever a network objectness score is expected.
pub fn tm_objectness(bank: &TemplateBank, patch: &Tensor) -> Result<f64> {
    if patch.shape() != [1, PATCH, PATCH] {
        return Err(Error::invalid(
            "tm_objectness",
            format!("patch shape {:?} is not [1, {PATCH}, {PATCH}]", patch.shape()),
        ));
    }
    let stats = bank.stats();
    let (pmean, penergy) = patch_stats(patch.data());
    let best = stats
        .iter()
        .map(|t| correlation(patch.data(), pmean, penergy, t))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best.clamp(0.0, 1.0))
}

/// Scores every stride-aligned window against the bank.
pub fn tm_objectness_map(bank: &TemplateBank, image: &Tensor, stride: usize) -> Result<ObjectnessMap> {
    let (c, h, w) = image.dims3("tm_objectness_map")?;
    if c != 1 {
        return Err(Error::invalid("tm_objectness_map", "expected a single-channel image"));
    }
    if h < PATCH || w < PATCH {
        return Err(Error::invalid(
            "tm_objectness_map",
            format!("{w}x{h} image is smaller than the {PATCH}x{PATCH} window"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("tm_objectness_map", "stride must be positive"));
    }
    let stats = bank.stats();
    let gh = (h - PATCH) / stride + 1;
    let gw = (w - PATCH) / stride + 1;
    let rows: Vec<Result<Vec<f32>>> = (0..gh)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(gw);
            for j in 0..gw {
                let win = BoundingBox {
                    x: (j * stride) as i64,
                    y: (i * stride) as i64,
                    w: PATCH as i64,
                    h: PATCH as i64,
                };
                let patch = crop(image, &win)?;
                let (pmean, penergy) = patch_stats(patch.data());
                let best = stats
                    .iter()
                    .map(|t| correlation(patch.data(), pmean, penergy, t))
                    .fold(f64::NEG_INFINITY, f64::max);
                row.push(best.clamp(0.0, 1.0) as f32);
            }
            Ok(row)
        })
        .collect();
    let mut grid = Vec::with_capacity(gh * gw);
    for row in rows {
        grid.extend(row?);
    }
    ObjectnessMap::from_grid(Tensor::from_vec(&[1, gh, gw], grid)?, w, h, PATCH, stride)
}

/// Direct-loop reference: full normalized correlation per template, no
/// precomputed statistics shared across templates.
pub fn tm_objectness_reference(bank: &TemplateBank, patch: &Tensor) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for t in bank.templates() {
        best = best.max(xcorr2d_normalized(patch, t)?);
    }
    Ok(best.clamp(0.0, 1.0))
}
