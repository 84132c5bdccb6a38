//! Dense objectness maps over full images and their reduction to ranked,
//! non-overlapping detection proposals.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::crop;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::model::{LayerSpec, Network, PATCH};
use crate::tensor::{bilinear_resize, Tensor};

/// Window scores for one image. `grid` holds one score per stride-aligned
/// window, with `(i, j)` belonging to the window whose top-left corner is
/// `(stride*j, stride*i)`. `map` is the same signal bilinearly upsampled to
/// image extent, each score attributed to the pixel at its window's center;
/// pixels whose centered window does not fit stay zero.
#[derive(Debug, Clone)]
pub struct ObjectnessMap {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub stride: usize,
    pub grid: Tensor,
    pub map: Tensor,
}

impl ObjectnessMap {
    /// Builds the upsampled map from a grid of window scores.
    pub fn from_grid(
        grid: Tensor,
        width: usize,
        height: usize,
        window: usize,
        stride: usize,
    ) -> Result<ObjectnessMap> {
        let (_, gh, gw) = grid.dims3("ObjectnessMap::from_grid")?;
        let expect_h = (height - window) / stride + 1;
        let expect_w = (width - window) / stride + 1;
        if (gh, gw) != (expect_h, expect_w) {
            return Err(Error::invalid(
                "ObjectnessMap::from_grid",
                format!(
                    "{gh}x{gw} grid does not cover a {width}x{height} image with \
                     {window}px windows at stride {stride} (expected {expect_h}x{expect_w})"
                ),
            ));
        }
        // Corner-aligned upsampling by exactly `stride`, so every grid value
        // lands untouched on its own window center.
        let span_h = (gh - 1) * stride + 1;
        let span_w = (gw - 1) * stride + 1;
        let block = bilinear_resize(&grid, span_h, span_w)?;
        let half = window / 2;
        let mut map = Tensor::zeros(&[1, height, width]);
        let last_valid_r = height - half;
        let last_valid_c = width - half;
        {
            let md = map.data_mut();
            let bd = block.data();
            for r in half..=last_valid_r {
                // Centers past the last grid row keep that row's values
                // (at most stride-1 replicated rows).
                let br = (r - half).min(span_h - 1);
                for c in half..=last_valid_c {
                    let bc = (c - half).min(span_w - 1);
                    md[r * width + c] = bd[br * span_w + bc];
                }
            }
        }
        Ok(ObjectnessMap {
            width,
            height,
            window,
            stride,
            grid,
            map,
        })
    }

    /// Whether the window centered at pixel (r, c) lies inside the image.
    pub fn mask(&self, r: usize, c: usize) -> bool {
        let half = self.window / 2;
        r >= half && c >= half && r + half <= self.height && c + half <= self.width
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid.shape()[1], self.grid.shape()[2])
    }

    pub fn window_at(&self, i: usize, j: usize) -> BoundingBox {
        BoundingBox {
            x: (j * self.stride) as i64,
            y: (i * self.stride) as i64,
            w: self.window as i64,
            h: self.window as i64,
        }
    }
}

fn check_image_extent(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (c, h, w) = image.dims3(op)?;
    if c != 1 {
        return Err(Error::invalid(op, "expected a single-channel image"));
    }
    if h < PATCH || w < PATCH {
        return Err(Error::invalid(
            op,
            format!("{w}x{h} image is smaller than the {PATCH}x{PATCH} window"),
        ));
    }
    Ok((h, w))
}

/// Scores every stride-aligned window with the patch network.
pub fn objectness_map_sliding(
    net: &Network,
    image: &Tensor,
    stride: usize,
) -> Result<ObjectnessMap> {
    let (h, w) = check_image_extent(image, "objectness_map_sliding")?;
    if stride == 0 {
        return Err(Error::invalid("objectness_map_sliding", "stride must be positive"));
    }
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
                row.push(net.forward_patch(&crop(image, &win)?)?);
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

/// Scores all windows in one full-image pass with a converted network; the
/// output grid is the stride-4 window grid of [`objectness_map_sliding`].
pub fn objectness_map_fcn(net: &Network, image: &Tensor) -> Result<ObjectnessMap> {
    let (h, w) = check_image_extent(image, "objectness_map_fcn")?;
    if net.spec.layers.iter().any(|l| matches!(l, LayerSpec::Dense { .. })) {
        return Err(Error::invalid(
            "objectness_map_fcn",
            "network still contains dense layers; convert it with fc_to_conv first",
        ));
    }
    let stride = 4;
    let out = net.forward(image)?;
    let (_, gh, gw) = out.dims3("objectness_map_fcn")?;
    let expect_h = (h - PATCH) / stride + 1;
    let expect_w = (w - PATCH) / stride + 1;
    if (gh, gw) != (expect_h, expect_w) {
        return Err(Error::invalid(
            "objectness_map_fcn",
            format!(
                "network produced a {gh}x{gw} map where the {PATCH}px/{stride}px window grid \
                 is {expect_h}x{expect_w}; it is not a converted patch scorer"
            ),
        ));
    }
    ObjectnessMap::from_grid(out, w, h, PATCH, stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub window: BoundingBox,
    pub score: f32,
}

/// Descending score, ties broken by row-major window position.
fn sort_key(p: &Proposal) -> (std::cmp::Reverse<ordered_score>, i64, i64) {
    (std::cmp::Reverse(ordered_score(p.score)), p.window.y, p.window.x)
}

/// f32 wrapper ordered like the raw number; scores are never NaN.
#[derive(PartialEq, PartialOrd)]
#[allow(non_camel_case_types)]
struct ordered_score(f32);

impl Eq for ordered_score {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for ordered_score {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("objectness scores are finite")
    }
}

pub(crate) fn sorted_desc(mut proposals: Vec<Proposal>) -> Vec<Proposal> {
    proposals.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    proposals
}

/// Every grid window with its score, best first.
pub fn proposals_all(map: &ObjectnessMap) -> Vec<Proposal> {
    sorted_desc(all_grid_proposals(map))
}

fn all_grid_proposals(map: &ObjectnessMap) -> Vec<Proposal> {
    let (gh, gw) = map.grid_dims();
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            out.push(Proposal {
                window: map.window_at(i, j),
                score: map.grid.data()[i * gw + j],
            });
        }
    }
    out
}

/// Every grid window scoring strictly above `t_o`, best first.
pub fn proposals_by_threshold(map: &ObjectnessMap, t_o: f64) -> Result<Vec<Proposal>> {
    if !(0.0..=1.0).contains(&t_o) {
        return Err(Error::invalid(
            "proposals_by_threshold",
            format!("threshold {t_o} outside [0, 1]"),
        ));
    }
    let kept = all_grid_proposals(map)
        .into_iter()
        .filter(|p| p.score as f64 > t_o)
        .collect();
    Ok(sorted_desc(kept))
}

/// The k best-scoring grid windows; `k = 0` yields an empty list and `k`
/// beyond the grid size yields every window. With the fixed tie order,
/// smaller k always produces a prefix of larger k.
pub fn proposals_by_ranking(map: &ObjectnessMap, k: usize) -> Vec<Proposal> {
    let mut all = sorted_desc(all_grid_proposals(map));
    all.truncate(k);
    all
}

/// Greedy overlap suppression: repeatedly keep the best remaining proposal
/// and drop everything overlapping it with IoU strictly above `t_s`.
/// Survivors come back best first, boxes and scores untouched.
pub fn nms(proposals: &[Proposal], t_s: f64) -> Result<Vec<Proposal>> {
    if !(0.0..=1.0).contains(&t_s) {
        return Err(Error::invalid("nms", format!("threshold {t_s} outside [0, 1]")));
    }
    let sorted = sorted_desc(proposals.to_vec());
    let mut suppressed = vec![false; sorted.len()];
    let mut out = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        for j in i + 1..sorted.len() {
            if !suppressed[j] && iou(&sorted[i].window, &sorted[j].window) > t_s {
                suppressed[j] = true;
            }
        }
        out.push(sorted[i]);
    }
    Ok(out)
}

/// Whether ranking truncates to k before or after overlap suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingOrder {
    TruncateThenNms,
    NmsThenTruncate,
}

/// Ranking extraction combined with NMS in the chosen order.
pub fn ranked_proposals(
    map: &ObjectnessMap,
    k: usize,
    t_s: f64,
    order: RankingOrder,
) -> Result<Vec<Proposal>> {
    match order {
        RankingOrder::TruncateThenNms => nms(&proposals_by_ranking(map, k), t_s),
        RankingOrder::NmsThenTruncate => {
            let mut kept = nms(&all_grid_proposals(map), t_s)?;
            kept.truncate(k);
            Ok(kept)
        }
    }
}

pub fn write_proposals_csv(path: &Path, proposals: &[Proposal]) -> Result<()> {
    let mut text = String::from("x,y,w,h,score\n");
    for p in proposals {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.window.x, p.window.y, p.window.w, p.window.h, p.score
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_proposals_csv(path: &Path) -> Result<Vec<Proposal>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with('x')) {
            continue;
        }
        let loc = || format!("{} row {}", path.display(), idx + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::parse(loc(), format!("expected 5 columns, got {}", fields.len())));
        }
        let num = |s: &str, name: &str| -> Result<i64> {
            s.parse()
                .map_err(|_| Error::parse(loc(), format!("{name} is not an integer: {s:?}")))
        };
        let score: f32 = fields[4]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("score is not numeric: {:?}", fields[4])))?;
        if !score.is_finite() {
            return Err(Error::parse(loc(), "score is not finite"));
        }
        let window = BoundingBox::new(
            num(fields[0], "x")?,
            num(fields[1], "y")?,
            num(fields[2], "w")?,
            num(fields[3], "h")?,
        )
        .map_err(|e| Error::parse(loc(), e.to_string()))?;
        out.push(Proposal { window, score });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_fcn_tiny;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, width: usize, height: usize) -> ObjectnessMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gh = (height - PATCH) / 4 + 1;
        let gw = (width - PATCH) / 4 + 1;
        let data = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
        let grid = Tensor::from_vec(&[1, gh, gw], data).unwrap();
        ObjectnessMap::from_grid(grid, width, height, PATCH, 4).unwrap()
    }

    #[test]
    fn constant_network_gives_constant_valid_region() {
        let mut net = build_fcn_tiny(0).unwrap();
        for p in &mut net.params {
            p.weights.data_mut().fill(0.0);
            p.bias.data_mut().fill(0.0);
        }
        let image = Tensor::filled(&[1, 128, 140], 0.4);
        let map = objectness_map_sliding(&net, &image, 4).unwrap();
        assert!(map.grid.data().iter().all(|&v| v == 0.5));
        for r in 0..128 {
            for c in 0..140 {
                let v = map.map.data()[r * 140 + c];
                if map.mask(r, c) {
                    assert_eq!(v, 0.5);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn grid_values_equal_patch_scores() {
        let net = build_fcn_tiny(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (112, 120);
        let data = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let image = Tensor::from_vec(&[1, h, w], data).unwrap();
        let map = objectness_map_sliding(&net, &image, 4).unwrap();
        let (gh, gw) = map.grid_dims();
        assert_eq!((gh, gw), ((h - PATCH) / 4 + 1, (w - PATCH) / 4 + 1));
        for i in 0..gh {
            for j in 0..gw {
                let score = net
                    .forward_patch(&crop(&image, &map.window_at(i, j)).unwrap())
                    .unwrap();
                assert_eq!(map.grid.data()[i * gw + j].to_bits(), score.to_bits());
                // The window-center pixel of the upsampled map carries the
                // grid value untouched.
                let (r, c) = (i * 4 + PATCH / 2, j * 4 + PATCH / 2);
                assert_eq!(map.map.data()[r * w + c].to_bits(), score.to_bits());
            }
        }
    }

    #[test]
    fn fcn_map_requires_converted_network() {
        let net = build_fcn_tiny(1).unwrap();
        let image = Tensor::filled(&[1, 128, 128], 0.2);
        assert!(objectness_map_fcn(&net, &image).is_err());
        let converted = net.fc_to_conv().unwrap();
        let map = objectness_map_fcn(&converted, &image).unwrap();
        assert_eq!(map.grid_dims(), (9, 9));
    }

    #[test]
    fn threshold_boundaries_and_monotonicity() {
        let map = random_map(3, 128, 128);
        assert!(proposals_by_threshold(&map, 1.0).unwrap().is_empty());
        let all = proposals_by_threshold(&map, 0.0).unwrap();
        let (gh, gw) = map.grid_dims();
        assert_eq!(all.len(), gh * gw);
        let mut prev = usize::MAX;
        for t in [0.0, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let n = proposals_by_threshold(&map, t).unwrap().len();
            assert!(n <= prev);
            prev = n;
        }
        assert!(proposals_by_threshold(&map, 1.5).is_err());
    }

    #[test]
    fn threshold_output_is_sorted_and_strict() {
        let map = random_map(4, 120, 120);
        let t = 0.5;
        let out = proposals_by_threshold(&map, t).unwrap();
        assert!(out.iter().all(|p| p.score as f64 > t));
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ranking_prefix_and_boundaries() {
        let map = random_map(5, 140, 124);
        let (gh, gw) = map.grid_dims();
        assert!(proposals_by_ranking(&map, 0).is_empty());
        assert_eq!(proposals_by_ranking(&map, gh * gw + 50).len(), gh * gw);
        let one = proposals_by_ranking(&map, 1);
        let best = map
            .grid
            .data()
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(one[0].score, best);
        let ten = proposals_by_ranking(&map, 10);
        let twenty = proposals_by_ranking(&map, 20);
        assert_eq!(&twenty[..10], &ten[..]);
    }

    #[test]
    fn nms_closed_form_cases() {
        let a = Proposal {
            window: BoundingBox::new(0, 0, 96, 96).unwrap(),
            score: 0.9,
        };
        let b = Proposal {
            window: BoundingBox::new(4, 0, 96, 96).unwrap(),
            score: 0.8,
        };
        // IoU = 8832/9600 = 0.92 > 0.8, so only the stronger one survives.
        assert!((iou(&a.window, &b.window) - 0.92).abs() < 1e-12);
        let out = nms(&[b, a], 0.8).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);

        // Identical boxes, identical scores: the earlier row-major position
        // wins the tie.
        let c = Proposal {
            window: BoundingBox::new(10, 10, 96, 96).unwrap(),
            score: 0.7,
        };
        let out = nms(&[c, c], 0.8).unwrap();
        assert_eq!(out.len(), 1);
        assert!(nms(&[a], 1.2).is_err());
    }

    /// Survivor-set reference built from the declarative definition: a
    /// proposal survives iff no earlier-ordered survivor overlaps it.
    fn nms_reference(proposals: &[Proposal], t_s: f64) -> Vec<Proposal> {
        let sorted = sorted_desc(proposals.to_vec());
        let mut survivors: Vec<Proposal> = Vec::new();
        for p in sorted {
            if survivors.iter().all(|s| iou(&s.window, &p.window) <= t_s) {
                survivors.push(p);
            }
        }
        survivors
    }

    #[test]
    fn nms_matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n = rng.gen_range(0..40);
            let proposals: Vec<Proposal> = (0..n)
                .map(|_| Proposal {
                    window: BoundingBox::new(
                        rng.gen_range(0..120),
                        rng.gen_range(0..120),
                        96,
                        96,
                    )
                    .unwrap(),
                    score: (rng.gen_range(0..100) as f32) / 100.0,
                })
                .collect();
            let t_s = rng.gen_range(0.0..1.0);
            let got = nms(&proposals, t_s).unwrap();
            let want = nms_reference(&proposals, t_s);
            assert_eq!(got, want);
            // Antichain: no surviving pair overlaps beyond the threshold.
            for (i, a) in got.iter().enumerate() {
                for b in &got[i + 1..] {
                    assert!(iou(&a.window, &b.window) <= t_s);
                }
                assert!(proposals.contains(a));
            }
            assert!(got.len() <= proposals.len());
        }
    }

    #[test]
    fn ranking_order_flag_changes_survivor_budget() {
        let map = random_map(9, 160, 160);
        let truncate_first = ranked_proposals(&map, 10, 0.3, RankingOrder::TruncateThenNms).unwrap();
        let nms_first = ranked_proposals(&map, 10, 0.3, RankingOrder::NmsThenTruncate).unwrap();
        // Truncating first can only lose survivors relative to suppressing
        // over the full grid.
        assert!(truncate_first.len() <= nms_first.len());
        assert!(nms_first.len() <= 10);
    }

    #[test]
    fn proposals_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("props.csv");
        let proposals = vec![
            Proposal {
                window: BoundingBox::new(4, 8, 96, 96).unwrap(),
                score: 0.875,
            },
            Proposal {
                window: BoundingBox::new(40, 12, 96, 96).unwrap(),
                score: 0.25,
            },
        ];
        write_proposals_csv(&path, &proposals).unwrap();
        let back = read_proposals_csv(&path).unwrap();
        assert_eq!(back, proposals);

        std::fs::write(&path, "x,y,w,h,score\n1,2,3\n").unwrap();
        let err = read_proposals_csv(&path).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }
}
