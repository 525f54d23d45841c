//! Downstream evaluation: overlap scores, linear probing of frozen
//! features, registration accuracy against ground truth, and a scalar
//! clustering-contrast measure of feature quality.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{jacobian_determinant, Dvf};
use crate::graph::{Bindings, Graph, GraphError};
use crate::io::{LoadedDataset, Split};
use crate::models::{self, ModelError, ModelWeights, ParamNodes};
use crate::optim::{adam_update, AdamHyper, AdamState};
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::trainer::TrainError;
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label grids have different extents: {0:?} vs {1:?}")]
    ExtentMismatch([usize; 3], [usize; 3]),
    #[error("label {found} outside expected range 0..{classes}")]
    LabelOutOfRange { found: i32, classes: usize },
    #[error("dataset split {0:?} is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    /// Per class, index = label id (0 = background).
    pub per_class: Vec<f64>,
    /// Mean over foreground classes 1..classes.
    pub mean_foreground: f64,
}

/// 2|P n T| / (|P| + |T|) per class; a class empty in both grids scores 1.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<DiceScores, EvalError> {
    if pred.extents() != truth.extents() {
        return Err(EvalError::ExtentMismatch(pred.extents(), truth.extents()));
    }
    for &l in pred.data().iter().chain(truth.data()) {
        if l < 0 || l as usize >= classes {
            return Err(EvalError::LabelOutOfRange {
                found: l,
                classes,
            });
        }
    }
    let mut inter = vec![0u64; classes];
    let mut p_count = vec![0u64; classes];
    let mut t_count = vec![0u64; classes];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        p_count[p as usize] += 1;
        t_count[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| {
            let denom = p_count[c] + t_count[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect();
    let fg = &per_class[1..];
    let mean_foreground = if fg.is_empty() {
        1.0
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    };
    Ok(DiceScores {
        per_class,
        mean_foreground,
    })
}

// ---------------------------------------------------------------------------
// feature extraction
// ---------------------------------------------------------------------------

/// Frozen-backbone local features [1, C_l, Z, Y, X] for one volume.
pub fn local_features(weights: &ModelWeights, vol: &Volume) -> Result<Tensor, EvalError> {
    let extent = vol.extents();
    let mut g = Graph::new();
    let mut pn = ParamNodes::new();
    let x = g.input("x", vec![1, 1, extent[0], extent[1], extent[2]])?;
    let (_f_g, f_l) = models::backbone_forward(&mut g, &mut pn, &weights.arch, x)?;
    g.mark_output("f_l", f_l);
    let mut bindings = Bindings::new();
    weights.bind_into(&mut bindings);
    bindings.set("x", vol.to_tensor5());
    let exec = g.evaluate(&bindings)?;
    Ok(exec.output("f_l")?.clone())
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub mean_foreground_dice: f64,
    pub per_class_dice: Vec<f64>,
    /// Mean foreground Dice per test volume.
    pub per_volume: Vec<f64>,
    /// True when no foreground voxels were present in the test labels.
    pub degenerate: bool,
}

/// Trains a single 1x1x1 convolution with softmax cross-entropy on frozen
/// local features over the train split, then reports Dice on the test
/// split. The backbone itself is never updated.
pub fn linear_probe(
    weights: &ModelWeights,
    dataset: &LoadedDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, EvalError> {
    let train_idx = dataset.split_indices(Split::Train);
    let test_idx = dataset.split_indices(Split::Test);
    if train_idx.is_empty() {
        return Err(EvalError::EmptySplit(Split::Train));
    }
    if test_idx.is_empty() {
        return Err(EvalError::EmptySplit(Split::Test));
    }
    let classes = dataset.manifest.regions + 1;
    let local_ch = weights.arch.local_channels();

    // Frozen features are computed once per volume.
    let mut feats: BTreeMap<usize, Tensor> = BTreeMap::new();
    for &i in train_idx.iter().chain(&test_idx) {
        feats.insert(i, local_features(weights, &dataset.entries[i].volume)?);
    }

    // One probe graph per training volume (labels are baked into the loss
    // node); the probe parameters are shared by name.
    let mut train_graphs = Vec::new();
    for &i in &train_idx {
        let entry = &dataset.entries[i];
        let e = entry.volume.extents();
        let mut g = Graph::new();
        let fl = g.input("f_l", vec![1, local_ch, e[0], e[1], e[2]])?;
        let w = g.param("probe/w", vec![classes, local_ch, 1, 1, 1])?;
        let b = g.param("probe/b", vec![classes])?;
        let logits = g.conv3d(fl, w, Some(b), 1, 0)?;
        let labels: Vec<i32> = entry.labels.data().to_vec();
        let loss = g.softmax_cross_entropy(logits, Arc::new(labels))?;
        g.mark_output("loss", loss);
        train_graphs.push((i, g, loss));
    }

    let mut rng = DetRng::from_seed_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let std = (2.0 / local_ch as f64).sqrt();
    let mut probe_w = Tensor::from_fn(&[classes, local_ch, 1, 1, 1], |_| std * rng.normal());
    let mut probe_b = Tensor::zeros(&[classes]);
    let mut adam_w = AdamState::new(probe_w.shape());
    let mut adam_b = AdamState::new(probe_b.shape());
    let hyper = AdamHyper::default();

    for _ in 0..cfg.iterations {
        let pick = rng.uniform_usize(0, train_graphs.len());
        let (i, g, loss) = &train_graphs[pick];
        let mut bindings = Bindings::new();
        bindings.set("f_l", feats[i].clone());
        bindings.set("probe/w", probe_w.clone());
        bindings.set("probe/b", probe_b.clone());
        let exec = g.evaluate(&bindings)?;
        let grads = exec.backpropagate(*loss)?.params(g);
        adam_update(&mut probe_w, &grads["probe/w"], &mut adam_w, cfg.lr, &hyper)
            .expect("fixed shapes");
        adam_update(&mut probe_b, &grads["probe/b"], &mut adam_b, cfg.lr, &hyper)
            .expect("fixed shapes");
    }

    // Inference on the test split: argmax logits per voxel.
    let mut per_volume = Vec::new();
    let mut per_class_acc = vec![0.0; classes];
    let mut any_foreground = false;
    for &i in &test_idx {
        let entry = &dataset.entries[i];
        let e = entry.volume.extents();
        let feat = &feats[&i];
        let spatial = e[0] * e[1] * e[2];
        let mut pred = LabelVolume::zeros(e);
        for p in 0..spatial {
            let mut best_c = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..classes {
                let mut acc = probe_b.data()[c];
                for ch in 0..local_ch {
                    acc += probe_w.data()[c * local_ch + ch] * feat.data()[ch * spatial + p];
                }
                if acc > best_v {
                    best_v = acc;
                    best_c = c;
                }
            }
            pred.data_mut()[p] = best_c as i32;
        }
        if entry.labels.data().iter().any(|&l| l > 0) {
            any_foreground = true;
        }
        let scores = dice(&pred, &entry.labels, classes)?;
        per_volume.push(scores.mean_foreground);
        for (acc, s) in per_class_acc.iter_mut().zip(&scores.per_class) {
            *acc += s;
        }
    }
    let n = per_volume.len() as f64;
    let per_class_dice: Vec<f64> = per_class_acc.iter().map(|v| v / n).collect();
    Ok(ProbeReport {
        mean_foreground_dice: per_volume.iter().sum::<f64>() / n,
        per_class_dice,
        per_volume,
        degenerate: !any_foreground,
    })
}

// ---------------------------------------------------------------------------
// registration accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RegReport {
    pub warped_label_dice: f64,
    pub per_class_dice: Vec<f64>,
    /// Mean Euclidean gap |pred(p) - gt(p)| over target-frame foreground.
    pub endpoint_error: f64,
    pub pct_negative_jacobian: f64,
}

/// Warps A's labels by the predicted field (nearest neighbor) and scores
/// them against B's labels; endpoint error is measured over voxels where
/// B's labels are foreground.
pub fn registration_eval(
    pred: &Dvf,
    gt: &Dvf,
    labels_a: &LabelVolume,
    labels_b: &LabelVolume,
) -> Result<RegReport, EvalError> {
    if pred.extents() != gt.extents() || labels_a.extents() != pred.extents() {
        return Err(EvalError::ExtentMismatch(pred.extents(), gt.extents()));
    }
    let classes = labels_a
        .max_label()
        .max(labels_b.max_label()) as usize
        + 1;
    let warped = labels_a.warp_nearest(pred);
    let scores = dice(&warped, labels_b, classes)?;

    let [z, y, x] = pred.extents();
    let mut err_acc = 0.0;
    let mut count = 0usize;
    for zi in 0..z {
        for yi in 0..y {
            for xi in 0..x {
                if labels_b.at(zi, yi, xi) == 0 {
                    continue;
                }
                let p = pred.at(zi, yi, xi);
                let g = gt.at(zi, yi, xi);
                let d = [p[0] - g[0], p[1] - g[1], p[2] - g[2]];
                err_acc += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                count += 1;
            }
        }
    }
    let endpoint_error = if count > 0 { err_acc / count as f64 } else { 0.0 };

    let jac = jacobian_determinant(pred);
    let neg = jac.data().iter().filter(|&&d| d <= 0.0).count();
    Ok(RegReport {
        warped_label_dice: scores.mean_foreground,
        per_class_dice: scores.per_class,
        endpoint_error,
        pct_negative_jacobian: 100.0 * neg as f64 / jac.numel() as f64,
    })
}

// ---------------------------------------------------------------------------
// clustering contrast
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ContrastReport {
    /// Mean same-label similarity divided by mean cross-label similarity;
    /// infinity when the cross-label mean vanishes.
    pub ratio: f64,
    pub same_mean: f64,
    pub cross_mean: f64,
    /// Classes skipped for lack of interior voxels.
    pub skipped_classes: Vec<i32>,
}

fn interior_voxels(labels: &LabelVolume, class: i32) -> Vec<usize> {
    let [z, y, x] = labels.extents();
    let mut out = Vec::new();
    for zi in 1..z.saturating_sub(1) {
        for yi in 1..y.saturating_sub(1) {
            for xi in 1..x.saturating_sub(1) {
                if labels.at(zi, yi, xi) != class {
                    continue;
                }
                let same = labels.at(zi - 1, yi, xi) == class
                    && labels.at(zi + 1, yi, xi) == class
                    && labels.at(zi, yi - 1, xi) == class
                    && labels.at(zi, yi + 1, xi) == class
                    && labels.at(zi, yi, xi - 1) == class
                    && labels.at(zi, yi, xi + 1) == class;
                if same {
                    out.push((zi * y + yi) * x + xi);
                }
            }
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Measures how well features of the same semantic region cluster across
/// images: for each pair, local feature vectors are sampled at
/// label-interior voxels of the foreground classes, and the mean cosine
/// similarity of same-label cross-image pairs is divided by the mean over
/// different-label pairs.
pub fn clustering_contrast(
    weights: &ModelWeights,
    pairs: &[(&Volume, &LabelVolume, &Volume, &LabelVolume)],
    samples_per_class: usize,
    seed: u64,
) -> Result<ContrastReport, EvalError> {
    assert!(pairs.len() >= 1, "need at least one pair");
    let mut rng = DetRng::from_seed_u64(seed);
    let mut same_acc = 0.0;
    let mut same_n = 0usize;
    let mut cross_acc = 0.0;
    let mut cross_n = 0usize;
    let mut skipped = Vec::new();

    for (vol_a, lab_a, vol_b, lab_b) in pairs {
        let fa = local_features(weights, vol_a)?;
        let fb = local_features(weights, vol_b)?;
        let ch = weights.arch.local_channels();
        let e = vol_a.extents();
        let spatial = e[0] * e[1] * e[2];
        let classes = lab_a.max_label().max(lab_b.max_label());
        let vector = |f: &Tensor, p: usize| -> Vec<f64> {
            (0..ch).map(|c| f.data()[c * spatial + p]).collect()
        };
        let mut by_class: Vec<(i32, Vec<Vec<f64>>, Vec<Vec<f64>>)> = Vec::new();
        for class in 1..=classes {
            let mut ia = interior_voxels(lab_a, class);
            let mut ib = interior_voxels(lab_b, class);
            if ia.len() < 2 || ib.len() < 2 {
                skipped.push(class);
                continue;
            }
            if ia.len() > samples_per_class {
                ia = rng
                    .sample_distinct(ia.len(), samples_per_class)
                    .into_iter()
                    .map(|k| ia[k])
                    .collect();
            }
            if ib.len() > samples_per_class {
                ib = rng
                    .sample_distinct(ib.len(), samples_per_class)
                    .into_iter()
                    .map(|k| ib[k])
                    .collect();
            }
            let va: Vec<Vec<f64>> = ia.iter().map(|&p| vector(&fa, p)).collect();
            let vb: Vec<Vec<f64>> = ib.iter().map(|&p| vector(&fb, p)).collect();
            by_class.push((class, va, vb));
        }
        for (ca, va, _) in &by_class {
            for (cb, _, vb) in &by_class {
                for a in va {
                    for b in vb {
                        let s = cosine(a, b);
                        if ca == cb {
                            same_acc += s;
                            same_n += 1;
                        } else {
                            cross_acc += s;
                            cross_n += 1;
                        }
                    }
                }
            }
        }
    }

    let same_mean = if same_n > 0 { same_acc / same_n as f64 } else { 0.0 };
    let cross_mean = if cross_n > 0 { cross_acc / cross_n as f64 } else { 0.0 };
    let ratio = if cross_mean.abs() <= 1e-12 {
        f64::INFINITY
    } else {
        same_mean / cross_mean
    };
    skipped.sort_unstable();
    skipped.dedup();
    Ok(ContrastReport {
        ratio,
        same_mean,
        cross_mean,
        skipped_classes: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from(data: Vec<i32>, e: [usize; 3]) -> LabelVolume {
        LabelVolume::new(data, e).unwrap()
    }

    #[test]
    fn dice_identical_grids_is_one() {
        let l = labels_from(vec![0, 1, 1, 2, 0, 2, 1, 0], [2, 2, 2]);
        let d = dice(&l, &l, 3).unwrap();
        assert_eq!(d.per_class, vec![1.0, 1.0, 1.0]);
        assert_eq!(d.mean_foreground, 1.0);
    }

    #[test]
    fn dice_disjoint_masks_is_zero() {
        let a = labels_from(vec![1, 1, 0, 0, 0, 0, 0, 0], [2, 2, 2]);
        let b = labels_from(vec![0, 0, 1, 1, 0, 0, 0, 0], [2, 2, 2]);
        let d = dice(&a, &b, 2).unwrap();
        assert_eq!(d.per_class[1], 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        // |P| = 8, |T| = 8, overlap 4 -> 0.5.
        let mut a = vec![0i32; 27];
        let mut b = vec![0i32; 27];
        for i in 0..8 {
            a[i] = 1;
            b[i + 4] = 1;
        }
        let d = dice(
            &labels_from(a, [3, 3, 3]),
            &labels_from(b, [3, 3, 3]),
            2,
        )
        .unwrap();
        assert_eq!(d.per_class[1], 0.5);
    }

    #[test]
    fn dice_empty_class_scores_one() {
        let a = labels_from(vec![0; 8], [2, 2, 2]);
        let d = dice(&a, &a, 3).unwrap();
        assert_eq!(d.per_class, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn dice_is_symmetric_and_matches_counting_oracle() {
        let mut rng = DetRng::from_seed_u64(31);
        for _ in 0..10 {
            let e = [8, 8, 8];
            let classes = 4usize;
            let a = labels_from(
                (0..512).map(|_| rng.uniform_usize(0, classes) as i32).collect(),
                e,
            );
            let b = labels_from(
                (0..512).map(|_| rng.uniform_usize(0, classes) as i32).collect(),
                e,
            );
            let ab = dice(&a, &b, classes).unwrap();
            let ba = dice(&b, &a, classes).unwrap();
            assert_eq!(ab.per_class, ba.per_class);
            // Brute-force per-voxel counting oracle.
            for c in 0..classes as i32 {
                let pa = a.data().iter().filter(|&&l| l == c).count() as f64;
                let pb = b.data().iter().filter(|&&l| l == c).count() as f64;
                let inter = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .filter(|(&x, &y)| x == c && y == c)
                    .count() as f64;
                let want = if pa + pb == 0.0 {
                    1.0
                } else {
                    2.0 * inter / (pa + pb)
                };
                assert_eq!(ab.per_class[c as usize], want);
            }
        }
    }

    #[test]
    fn endpoint_error_is_translation_equivariant() {
        let grid = crate::geometry::VolumeGrid::new([6, 6, 6]).unwrap();
        let mut pred = Dvf::zeros(&grid);
        let mut gt = Dvf::zeros(&grid);
        let mut rng = DetRng::from_seed_u64(3);
        for v in pred.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        for v in gt.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let labels = labels_from(
            (0..216).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect(),
            [6, 6, 6],
        );
        let base = registration_eval(&pred, &gt, &labels, &labels).unwrap();
        let mut pred2 = pred.clone();
        let mut gt2 = gt.clone();
        for v in pred2.data_mut() {
            *v += 2.5;
        }
        for v in gt2.data_mut() {
            *v += 2.5;
        }
        let shifted = registration_eval(&pred2, &gt2, &labels, &labels).unwrap();
        assert!((base.endpoint_error - shifted.endpoint_error).abs() < 1e-12);
    }

    #[test]
    fn zero_pred_on_translated_pair_scores_the_translation() {
        let grid = crate::geometry::VolumeGrid::new([6, 6, 6]).unwrap();
        let pred = Dvf::zeros(&grid);
        let mut gt = Dvf::zeros(&grid);
        let s = gt.voxels();
        for p in 0..s {
            gt.data_mut()[p] = 2.0; // u_x = 2
        }
        let labels = labels_from(vec![1; 216], [6, 6, 6]);
        let rep = registration_eval(&pred, &gt, &labels, &labels).unwrap();
        assert!((rep.endpoint_error - 2.0).abs() < 1e-12);
        // pred == gt has zero error.
        let rep2 = registration_eval(&gt, &gt, &labels, &labels).unwrap();
        assert_eq!(rep2.endpoint_error, 0.0);
        assert_eq!(rep2.pct_negative_jacobian, 0.0);
    }

    #[test]
    fn cosine_sentinels() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
