//! Window labelling and patch extraction: turns annotated images into the
//! labeled 96x96 patches the networks train on, and reads/writes the
//! annotation exchange format.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::imageio;
use crate::model::PATCH;
use crate::tensor::Tensor;

/// Windows below this overlap get objectness 0; above `1 - EPSILON` they
/// count as full objects.
pub const EPSILON: f64 = 0.2;

/// Pixel step between consecutive candidate windows.
pub const STRIDE: usize = 4;

/// Negative windows sampled per image.
pub const NEGATIVES_PER_IMAGE: usize = 10;

const REJECTION_ATTEMPTS: u32 = 10_000;

/// Maps a window's best IoU with ground truth onto its training label:
/// saturate to 1 above `1 - EPSILON`, zero out below `EPSILON`, keep the raw
/// value in between.
pub fn objectness_from_iou(value: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::invalid(
            "objectness_from_iou",
            format!("iou {value} outside [0, 1]"),
        ));
    }
    Ok(if value >= 1.0 - EPSILON {
        1.0
    } else if value > EPSILON {
        value
    } else {
        0.0
    })
}

/// One training example: a cropped patch, its objectness label, and the
/// window it came from.
#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub pixels: Tensor,
    pub objectness: f32,
    pub window: BoundingBox,
}

/// An image with its ground-truth boxes, pixels already normalized to [0,1].
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub file: String,
    pub image: Tensor,
    pub boxes: Vec<BoundingBox>,
}

pub fn crop(image: &Tensor, window: &BoundingBox) -> Result<Tensor> {
    let (_, h, w) = image.dims3("crop")?;
    if window.x < 0 || window.y < 0 || window.right() > w as i64 || window.bottom() > h as i64 {
        return Err(Error::invalid(
            "crop",
            format!("window {window:?} exceeds the {w}x{h} image"),
        ));
    }
    let (ww, wh) = (window.w as usize, window.h as usize);
    let mut data = Vec::with_capacity(ww * wh);
    for row in 0..wh {
        let start = (window.y as usize + row) * w + window.x as usize;
        data.extend_from_slice(&image.data()[start..start + ww]);
    }
    Tensor::from_vec(&[1, wh, ww], data)
}

/// All fully contained stride-aligned windows, row-major.
pub fn grid_windows(width: usize, height: usize, window: usize, stride: usize) -> Vec<BoundingBox> {
    let mut out = Vec::new();
    if width < window || height < window {
        return out;
    }
    let mut y = 0;
    while y + window <= height {
        let mut x = 0;
        while x + window <= width {
            out.push(BoundingBox {
                x: x as i64,
                y: y as i64,
                w: window as i64,
                h: window as i64,
            });
            x += stride;
        }
        y += stride;
    }
    out
}

/// For each ground-truth box, emit its best-overlapping window plus every
/// window with IoU >= 0.5, labeled through [`objectness_from_iou`]. A window
/// claimed by several boxes is emitted once with its largest label. Output
/// is in row-major window order.
pub fn generate_positive_windows(
    image: &Tensor,
    boxes: &[BoundingBox],
    window: usize,
    stride: usize,
) -> Result<Vec<LabeledPatch>> {
    let (_, h, w) = image.dims3("generate_positive_windows")?;
    if h < window || w < window {
        return Err(Error::invalid(
            "generate_positive_windows",
            format!("{w}x{h} image is smaller than the {window}x{window} window"),
        ));
    }
    let mut selected: HashMap<(i64, i64), f64> = HashMap::new();
    for gt in boxes {
        // Only windows overlapping the box can score above zero; scan the
        // stride-aligned range around it.
        let lo_x = ((gt.x - window as i64 + 1).max(0) as usize).div_ceil(stride) * stride;
        let lo_y = ((gt.y - window as i64 + 1).max(0) as usize).div_ceil(stride) * stride;
        let hi_x = (gt.right().min(w as i64 - window as i64)) as isize;
        let hi_y = (gt.bottom().min(h as i64 - window as i64)) as isize;

        let mut best: Option<((i64, i64), f64)> = None;
        let mut qualifying: Vec<((i64, i64), f64)> = Vec::new();
        let mut y = lo_y as isize;
        while y <= hi_y {
            let mut x = lo_x as isize;
            while x <= hi_x {
                let win = BoundingBox {
                    x: x as i64,
                    y: y as i64,
                    w: window as i64,
                    h: window as i64,
                };
                let overlap = iou(&win, gt);
                if best.as_ref().is_none_or(|&(_, b)| overlap > b) {
                    best = Some(((win.x, win.y), overlap));
                }
                if overlap >= 0.5 {
                    qualifying.push(((win.x, win.y), overlap));
                }
                x += stride as isize;
            }
            y += stride as isize;
        }
        // A box with no overlapping window at all still contributes its
        // nearest grid window (overlap 0, label 0).
        if best.is_none() {
            let bx = (gt.x.clamp(0, w as i64 - window as i64) as usize / stride * stride) as i64;
            let by = (gt.y.clamp(0, h as i64 - window as i64) as usize / stride * stride) as i64;
            best = Some(((bx, by), 0.0));
        }
        for (key, overlap) in qualifying.into_iter().chain(best) {
            let label = objectness_from_iou(overlap)?;
            let entry = selected.entry(key).or_insert(label);
            *entry = entry.max(label);
        }
    }
    let mut keys: Vec<(i64, i64)> = selected.keys().copied().collect();
    keys.sort_by_key(|&(x, y)| (y, x));
    keys.iter()
        .map(|&(x, y)| {
            let win = BoundingBox {
                x,
                y,
                w: window as i64,
                h: window as i64,
            };
            Ok(LabeledPatch {
                pixels: crop(image, &win)?,
                objectness: selected[&(x, y)] as f32,
                window: win,
            })
        })
        .collect()
}

/// Rejection-samples `n` uniformly placed windows whose best IoU with any
/// ground-truth box stays at or below [`EPSILON`]; all labeled 0.
pub fn sample_negative_windows(
    image: &Tensor,
    boxes: &[BoundingBox],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledPatch>> {
    let (_, h, w) = image.dims3("sample_negative_windows")?;
    if h < PATCH || w < PATCH {
        return Err(Error::invalid(
            "sample_negative_windows",
            format!("{w}x{h} image is smaller than the {PATCH}x{PATCH} window"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..REJECTION_ATTEMPTS {
            let win = BoundingBox {
                x: rng.gen_range(0..=(w - PATCH)) as i64,
                y: rng.gen_range(0..=(h - PATCH)) as i64,
                w: PATCH as i64,
                h: PATCH as i64,
            };
            let worst = boxes
                .iter()
                .map(|b| iou(&win, b))
                .fold(0.0f64, f64::max);
            if worst <= EPSILON {
                found = Some(win);
                break;
            }
        }
        let win = found.ok_or(Error::SamplingExhausted {
            attempts: REJECTION_ATTEMPTS,
        })?;
        out.push(LabeledPatch {
            pixels: crop(image, &win)?,
            objectness: 0.0,
            window: win,
        });
    }
    Ok(out)
}

/// Labeled patches for one image: positives from every ground-truth box plus
/// [`NEGATIVES_PER_IMAGE`] sampled negatives.
pub fn patches_for_image(image: &AnnotatedImage, seed: u64) -> Result<Vec<LabeledPatch>> {
    let mut patches = generate_positive_windows(&image.image, &image.boxes, PATCH, STRIDE)?;
    patches.extend(sample_negative_windows(
        &image.image,
        &image.boxes,
        NEGATIVES_PER_IMAGE,
        seed,
    )?);
    Ok(patches)
}

fn image_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Keeps at most `cap` positive patches (uniform seeded subsample, original
/// order preserved); zero-label patches pass through untouched.
pub fn cap_positive_patches(patches: &mut Vec<LabeledPatch>, cap: usize, seed: u64) {
    let positives: Vec<usize> = patches
        .iter()
        .enumerate()
        .filter(|(_, p)| p.objectness > 0.0)
        .map(|(i, _)| i)
        .collect();
    if positives.len() <= cap {
        return;
    }
    let mut order = positives;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let dropped: std::collections::HashSet<usize> = order[cap..].iter().copied().collect();
    let mut idx = 0;
    patches.retain(|_| {
        let keep = !dropped.contains(&idx);
        idx += 1;
        keep
    });
}

/// Splits images (not patches) into train/validation pools and extracts
/// labeled patches from each side.
pub fn build_patch_dataset(
    images: &[AnnotatedImage],
    split: f64,
    seed: u64,
) -> Result<(Vec<LabeledPatch>, Vec<LabeledPatch>)> {
    build_patch_dataset_capped(images, split, seed, None)
}

/// [`build_patch_dataset`] with an optional per-image cap on positive
/// patches, for keeping training budgets bounded on dense annotations.
pub fn build_patch_dataset_capped(
    images: &[AnnotatedImage],
    split: f64,
    seed: u64,
    max_positives: Option<usize>,
) -> Result<(Vec<LabeledPatch>, Vec<LabeledPatch>)> {
    if images.is_empty() {
        return Err(Error::invalid("build_patch_dataset", "no annotated images"));
    }
    if !(0.0..=1.0).contains(&split) {
        return Err(Error::invalid(
            "build_patch_dataset",
            format!("split fraction {split} outside [0, 1]"),
        ));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    // Rounded split, but both sides stay nonempty once there are >= 2 images.
    let mut train_count = (images.len() as f64 * split).round() as usize;
    if images.len() >= 2 {
        train_count = train_count.clamp(1, images.len() - 1);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (pos, &idx) in order.iter().enumerate() {
        let mut patches = patches_for_image(&images[idx], image_seed(seed, idx))?;
        if let Some(cap) = max_positives {
            cap_positive_patches(&mut patches, cap, image_seed(seed ^ 0x5AB5_0CA7, idx));
        }
        if pos < train_count {
            train.extend(patches);
        } else {
            val.extend(patches);
        }
    }
    Ok((train, val))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoundingBox>,
}

/// The on-disk dataset description: one JSON document listing every image
/// and its ground-truth boxes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ImageRecord>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

/// Loads a manifest and every image it references (paths resolved relative
/// to the manifest), validating that each box lies inside its image.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.images.len());
    for (idx, record) in manifest.images.iter().enumerate() {
        let location = || format!("{} record {idx} ({})", path.display(), record.file);
        for b in &record.boxes {
            if b.w <= 0 || b.h <= 0 {
                return Err(Error::parse(location(), format!("degenerate box {b:?}")));
            }
            if b.x < 0
                || b.y < 0
                || b.right() > record.width as i64
                || b.bottom() > record.height as i64
            {
                return Err(Error::parse(
                    location(),
                    format!(
                        "box {b:?} exceeds the declared {}x{} extent",
                        record.width, record.height
                    ),
                ));
            }
        }
        let image = imageio::load_gray(&base.join(&record.file))?;
        let (_, h, w) = image.dims3("load_annotations")?;
        if (w, h) != (record.width, record.height) {
            return Err(Error::parse(
                location(),
                format!(
                    "image is {w}x{h} but the record declares {}x{}",
                    record.width, record.height
                ),
            ));
        }
        out.push(AnnotatedImage {
            file: record.file.clone(),
            image,
            boxes: record.boxes.clone(),
        });
    }
    Ok(out)
}

fn xml_tag<'a>(text: &'a str, tag: &str, location: &str) -> Result<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text
        .find(&open)
        .ok_or_else(|| Error::parse(location, format!("missing <{tag}>")))?
        + open.len();
    let end = text[start..]
        .find(&close)
        .ok_or_else(|| Error::parse(location, format!("unterminated <{tag}>")))?;
    Ok(text[start..start + end].trim())
}

fn xml_int(text: &str, tag: &str, location: &str) -> Result<i64> {
    let raw = xml_tag(text, tag, location)?;
    raw.parse::<f64>()
        .map(|v| v.round() as i64)
        .map_err(|_| Error::parse(location, format!("<{tag}> is not numeric: {raw:?}")))
}

/// Converts one VOC-style XML annotation (filename, size, object/bndbox
/// records with 1-based inclusive corners) into an [`ImageRecord`].
pub fn convert_voc_xml(xml: &str, location: &str) -> Result<ImageRecord> {
    let file = xml_tag(xml, "filename", location)?.to_string();
    let size = xml_tag(xml, "size", location)?;
    let width = xml_int(size, "width", location)?;
    let height = xml_int(size, "height", location)?;
    if width <= 0 || height <= 0 {
        return Err(Error::parse(location, "non-positive image extent"));
    }
    let mut boxes = Vec::new();
    let mut rest = xml;
    while let Some(pos) = rest.find("<object>") {
        let end = rest[pos..]
            .find("</object>")
            .ok_or_else(|| Error::parse(location, "unterminated <object>"))?;
        let object = &rest[pos..pos + end];
        let bnd = xml_tag(object, "bndbox", location)?;
        let xmin = xml_int(bnd, "xmin", location)?;
        let ymin = xml_int(bnd, "ymin", location)?;
        let xmax = xml_int(bnd, "xmax", location)?;
        let ymax = xml_int(bnd, "ymax", location)?;
        if xmax <= xmin || ymax <= ymin {
            return Err(Error::parse(location, format!("empty bndbox {xmin},{ymin},{xmax},{ymax}")));
        }
        // 1-based inclusive corners to 0-based half-open extents.
        boxes.push(BoundingBox {
            x: xmin - 1,
            y: ymin - 1,
            w: xmax - xmin + 1,
            h: ymax - ymin + 1,
        });
        rest = &rest[pos + end..];
    }
    Ok(ImageRecord {
        file,
        width: width as usize,
        height: height as usize,
        boxes,
    })
}

/// Builds a manifest from a directory of VOC-style XML files.
pub fn convert_voc_dir(dir: &Path) -> Result<Manifest> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("xml"))
        .collect();
    entries.sort();
    let mut manifest = Manifest::default();
    for path in entries {
        let xml = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        manifest
            .images
            .push(convert_voc_xml(&xml, &path.display().to_string())?);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objectness_branches() {
        assert_eq!(objectness_from_iou(0.85).unwrap(), 1.0);
        assert_eq!(objectness_from_iou(0.8).unwrap(), 1.0);
        assert_eq!(objectness_from_iou(0.5).unwrap(), 0.5);
        assert_eq!(objectness_from_iou(0.2).unwrap(), 0.0);
        assert_eq!(objectness_from_iou(0.1).unwrap(), 0.0);
        assert!(objectness_from_iou(1.2).is_err());
        assert!(objectness_from_iou(-0.1).is_err());
    }

    #[test]
    fn objectness_is_monotone() {
        let mut prev = 0.0;
        for i in 0..=100 {
            let v = objectness_from_iou(i as f64 / 100.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    fn gradient_image(w: usize, h: usize) -> Tensor {
        let data = (0..w * h).map(|i| (i % 251) as f32 / 251.0).collect();
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn window_aligned_box_gets_label_one() {
        let image = gradient_image(200, 200);
        let gt = BoundingBox::new(12, 16, 96, 96).unwrap();
        let patches = generate_positive_windows(&image, &[gt], PATCH, STRIDE).unwrap();
        let exact = patches
            .iter()
            .find(|p| p.window.x == 12 && p.window.y == 16)
            .expect("the coincident window is emitted");
        assert_eq!(exact.objectness, 1.0);
        assert_eq!(exact.pixels.shape(), &[1, 96, 96]);
    }

    #[test]
    fn positive_windows_match_brute_force_enumeration() {
        let image = gradient_image(200, 200);
        let gt = BoundingBox::new(10, 10, 96, 96).unwrap();
        let got = generate_positive_windows(&image, &[gt], PATCH, STRIDE).unwrap();

        // Oracle: scan every grid window, apply the two selection rules.
        let all = grid_windows(200, 200, PATCH, STRIDE);
        let mut best: Option<(BoundingBox, f64)> = None;
        let mut expected: Vec<(BoundingBox, f64)> = Vec::new();
        for win in &all {
            let overlap = iou(win, &gt);
            if best.is_none() || overlap > best.unwrap().1 {
                best = Some((*win, overlap));
            }
            if overlap >= 0.5 {
                expected.push((*win, overlap));
            }
        }
        let best = best.unwrap();
        if !expected.iter().any(|(w, _)| *w == best.0) {
            expected.push(best);
        }
        expected.sort_by_key(|(w, _)| (w.y, w.x));

        assert_eq!(got.len(), expected.len());
        for (p, (win, overlap)) in got.iter().zip(&expected) {
            assert_eq!(p.window, *win);
            assert_eq!(p.objectness, objectness_from_iou(*overlap).unwrap() as f32);
        }
    }

    #[test]
    fn positive_labels_respect_construction_invariant() {
        let image = gradient_image(256, 256);
        let boxes = [
            BoundingBox::new(30, 40, 80, 70).unwrap(),
            BoundingBox::new(140, 120, 100, 90).unwrap(),
        ];
        let patches = generate_positive_windows(&image, &boxes, PATCH, STRIDE).unwrap();
        assert!(!patches.is_empty());
        for p in &patches {
            let best = boxes.iter().map(|b| iou(&p.window, b)).fold(0.0, f64::max);
            assert_eq!(p.objectness, objectness_from_iou(best).unwrap() as f32);
            // Either a qualifying window or some box's best window.
            assert!(p.objectness == 0.0 || p.objectness >= 0.2);
        }
    }

    #[test]
    fn negative_sampling_respects_overlap_bound_and_seed() {
        let image = gradient_image(220, 220);
        let boxes = [BoundingBox::new(60, 60, 96, 96).unwrap()];
        let a = sample_negative_windows(&image, &boxes, 10, 7).unwrap();
        let b = sample_negative_windows(&image, &boxes, 10, 7).unwrap();
        assert_eq!(a.len(), 10);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.window, pb.window);
            assert_eq!(pa.objectness, 0.0);
            assert!(iou(&pa.window, &boxes[0]) <= EPSILON);
        }
        let c = sample_negative_windows(&image, &boxes, 10, 8).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.window != y.window));
    }

    #[test]
    fn negative_sampling_exhausts_when_everything_overlaps() {
        // A 96x96 image with a coincident ground-truth box admits only the
        // one window, whose IoU is 1.
        let image = gradient_image(96, 96);
        let boxes = [BoundingBox::new(0, 0, 96, 96).unwrap()];
        let err = sample_negative_windows(&image, &boxes, 1, 0).unwrap_err();
        assert!(matches!(err, Error::SamplingExhausted { .. }));
    }

    #[test]
    fn empty_annotation_samples_freely() {
        let image = gradient_image(200, 200);
        let patches = sample_negative_windows(&image, &[], 5, 3).unwrap();
        assert_eq!(patches.len(), 5);
        assert!(patches.iter().all(|p| p.objectness == 0.0));
    }

    fn tiny_dataset(n: usize) -> Vec<AnnotatedImage> {
        (0..n)
            .map(|i| AnnotatedImage {
                file: format!("img{i}.png"),
                image: gradient_image(200, 200),
                boxes: vec![BoundingBox::new(20 + i as i64, 30, 90, 90).unwrap()],
            })
            .collect()
    }

    #[test]
    fn split_partitions_images() {
        let images = tiny_dataset(10);
        let (train, val) = build_patch_dataset(&images, 0.7, 11).unwrap();
        assert!(!train.is_empty() && !val.is_empty());
        // 7 images' worth of negatives on one side, 3 on the other.
        let train_neg = train.iter().filter(|p| p.objectness == 0.0).count();
        let val_neg = val.iter().filter(|p| p.objectness == 0.0).count();
        assert_eq!(train_neg, 7 * NEGATIVES_PER_IMAGE);
        assert_eq!(val_neg, 3 * NEGATIVES_PER_IMAGE);
        assert!(build_patch_dataset(&[], 0.7, 0).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let images = tiny_dataset(6);
        let (a, _) = build_patch_dataset(&images, 0.7, 5).unwrap();
        let (b, _) = build_patch_dataset(&images, 0.7, 5).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.window, y.window);
            assert_eq!(x.objectness, y.objectness);
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let image = gradient_image(128, 128);
        imageio::save_gray(&dir.path().join("a.png"), &image).unwrap();
        let manifest = Manifest {
            images: vec![ImageRecord {
                file: "a.png".into(),
                width: 128,
                height: 128,
                boxes: vec![BoundingBox::new(5, 6, 30, 40).unwrap()],
            }],
        };
        let path = dir.path().join("data.json");
        manifest.save(&path).unwrap();
        let loaded = load_annotations(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].boxes, manifest.images[0].boxes);

        // Out-of-bounds box is a parse error, not a silent clamp.
        let bad = Manifest {
            images: vec![ImageRecord {
                file: "a.png".into(),
                width: 128,
                height: 128,
                boxes: vec![BoundingBox::new(100, 100, 40, 40).unwrap()],
            }],
        };
        bad.save(&path).unwrap();
        let err = load_annotations(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, "{\"images\": []}\n").unwrap();
        assert!(load_annotations(&path).unwrap().is_empty());
    }

    #[test]
    fn voc_conversion_maps_corners() {
        let xml = r#"
            <annotation>
              <filename>scene.png</filename>
              <size><width>320</width><height>240</height><depth>1</depth></size>
              <object>
                <name>debris</name>
                <bndbox><xmin>11</xmin><ymin>21</ymin><xmax>60</xmax><ymax>90</ymax></bndbox>
              </object>
              <object>
                <name>debris</name>
                <bndbox><xmin>200</xmin><ymin>100</ymin><xmax>250</xmax><ymax>150</ymax></bndbox>
              </object>
            </annotation>"#;
        let record = convert_voc_xml(xml, "test").unwrap();
        assert_eq!(record.file, "scene.png");
        assert_eq!((record.width, record.height), (320, 240));
        assert_eq!(record.boxes.len(), 2);
        assert_eq!(record.boxes[0], BoundingBox { x: 10, y: 20, w: 50, h: 70 });

        assert!(convert_voc_xml("<annotation></annotation>", "test").is_err());
        let bad = xml.replace("<xmax>60</xmax>", "<xmax>5</xmax>");
        assert!(convert_voc_xml(&bad, "test").is_err());
    }

    #[test]
    fn positive_cap_subsamples_only_positives() {
        let window = BoundingBox::new(0, 0, PATCH as i64, PATCH as i64).unwrap();
        let mut patches: Vec<LabeledPatch> = (0..20)
            .map(|i| LabeledPatch {
                pixels: Tensor::zeros(&[1, 1, 1]),
                objectness: if i % 2 == 0 { 0.0 } else { 0.6 },
                window,
            })
            .collect();
        let mut capped = patches.clone();
        cap_positive_patches(&mut capped, 4, 9);
        assert_eq!(capped.iter().filter(|p| p.objectness > 0.0).count(), 4);
        assert_eq!(capped.iter().filter(|p| p.objectness == 0.0).count(), 10);
        let mut again = patches.clone();
        cap_positive_patches(&mut again, 4, 9);
        for (a, b) in capped.iter().zip(&again) {
            assert_eq!(a.objectness, b.objectness);
            assert_eq!(a.window, b.window);
        }
        // A generous cap leaves the set untouched.
        cap_positive_patches(&mut patches, 100, 9);
        assert_eq!(patches.len(), 20);
    }
}
