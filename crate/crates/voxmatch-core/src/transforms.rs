//! Appearance corruption transforms: random in-painting, local voxel
//! shuffling, and monotone Bézier intensity remapping. A sampled
//! [`TransformSpec`] fully determines the transform, so any application can
//! be replayed bit-for-bit from its serialized form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::VolumeGrid;
use crate::rng::DetRng;
use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("grid extents {0:?} too small, every axis must be at least 8")]
    GridTooSmall([usize; 3]),
    #[error("box {corner:?}+{extent:?} exceeds volume extents {extents:?}")]
    BoxOutOfRange {
        corner: [usize; 3],
        extent: [usize; 3],
        extents: [usize; 3],
    },
    #[error("intensity {value} at flat index {index} outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("no transform kinds enabled")]
    NoKindsEnabled,
    #[error("spec is for kind {spec:?}, which is missing its parameters")]
    IncompleteSpec { spec: TransformKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Inpaint,
    Shuffle,
    Bezier,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] =
        [TransformKind::Inpaint, TransformKind::Shuffle, TransformKind::Bezier];
}

/// Axis-aligned box, corner and extent in (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub corner: [usize; 3],
    pub extent: [usize; 3],
}

/// Interior control points of the intensity curve; the endpoints are pinned
/// at (0,0) and (1,1), and p1.x <= p2.x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BezierSpec {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
}

/// Replayable description of one appearance transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<BoxRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bezier: Option<BezierSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub enabled: Vec<TransformKind>,
    /// When set, that many independently sampled transforms are applied in
    /// sequence instead of one.
    pub compose_count: Option<usize>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            enabled: TransformKind::ALL.to_vec(),
            compose_count: None,
        }
    }
}

/// Number of parametric samples used to tabulate the Bézier curve.
pub const BEZIER_TABLE_SIZE: usize = 1000;

/// Draws one transform description. In-painting boxes span 10-25% of each
/// axis, shuffle boxes at most max(2, axis/4); Bézier interior control
/// points are uniform in the unit square, then ordered by x.
pub fn sample_transform(
    rng: &mut DetRng,
    grid: &VolumeGrid,
    cfg: &TransformConfig,
) -> Result<TransformSpec, TransformError> {
    if grid.extents.iter().any(|&e| e < 8) {
        return Err(TransformError::GridTooSmall(grid.extents));
    }
    if cfg.enabled.is_empty() {
        return Err(TransformError::NoKindsEnabled);
    }
    let kind = cfg.enabled[rng.uniform_usize(0, cfg.enabled.len())];
    let seed = (rng.next_f64() * (u64::MAX as f64 / 2.0)) as u64;
    let spec = match kind {
        TransformKind::Inpaint => {
            let count = rng.uniform_usize(1, 6);
            let boxes = (0..count)
                .map(|_| {
                    let mut corner = [0usize; 3];
                    let mut extent = [0usize; 3];
                    for a in 0..3 {
                        let axis = grid.extents[a];
                        let frac = rng.uniform(0.10, 0.25);
                        let e = ((axis as f64 * frac).round() as usize).max(1);
                        corner[a] = rng.uniform_usize(0, axis - e + 1);
                        extent[a] = e;
                    }
                    BoxRegion { corner, extent }
                })
                .collect();
            TransformSpec {
                kind,
                seed,
                boxes,
                bezier: None,
            }
        }
        TransformKind::Shuffle => {
            let count = rng.uniform_usize(1, 6);
            let boxes = (0..count)
                .map(|_| {
                    let mut corner = [0usize; 3];
                    let mut extent = [0usize; 3];
                    for a in 0..3 {
                        let axis = grid.extents[a];
                        let cap = (axis / 4).max(2);
                        let e = rng.uniform_usize(2, cap + 1);
                        corner[a] = rng.uniform_usize(0, axis - e + 1);
                        extent[a] = e;
                    }
                    BoxRegion { corner, extent }
                })
                .collect();
            TransformSpec {
                kind,
                seed,
                boxes,
                bezier: None,
            }
        }
        TransformKind::Bezier => {
            let mut p1 = [rng.next_f64(), rng.next_f64()];
            let mut p2 = [rng.next_f64(), rng.next_f64()];
            if p2[0] < p1[0] {
                std::mem::swap(&mut p1, &mut p2);
            }
            TransformSpec {
                kind,
                seed,
                boxes: Vec::new(),
                bezier: Some(BezierSpec { p1, p2 }),
            }
        }
    };
    Ok(spec)
}

/// Draws `cfg.compose_count` transforms (one, by default).
pub fn sample_transforms(
    rng: &mut DetRng,
    grid: &VolumeGrid,
    cfg: &TransformConfig,
) -> Result<Vec<TransformSpec>, TransformError> {
    let n = cfg.compose_count.unwrap_or(1).max(1);
    (0..n).map(|_| sample_transform(rng, grid, cfg)).collect()
}

/// The sampled (x, y) table of the cubic Bézier with endpoints (0,0), (1,1).
/// x is non-decreasing because the control x-coordinates are ordered; y is
/// non-decreasing for any interior controls inside the unit square.
pub fn bezier_table(spec: &BezierSpec) -> Vec<(f64, f64)> {
    let (x1, y1) = (spec.p1[0], spec.p1[1]);
    let (x2, y2) = (spec.p2[0], spec.p2[1]);
    (0..BEZIER_TABLE_SIZE)
        .map(|i| {
            let t = i as f64 / (BEZIER_TABLE_SIZE - 1) as f64;
            let u = 1.0 - t;
            let b1 = 3.0 * u * u * t;
            let b2 = 3.0 * u * t * t;
            let b3 = t * t * t;
            (b1 * x1 + b2 * x2 + b3, b1 * y1 + b2 * y2 + b3)
        })
        .collect()
}

fn bezier_lookup(table: &[(f64, f64)], v: f64) -> f64 {
    // x is non-decreasing with x[0] = 0 and x[last] = 1, so any v in [0, 1]
    // is bracketed.
    let mut lo = 0;
    let mut hi = table.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if table[mid].0 <= v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (x0, y0) = table[lo];
    let (x1, y1) = table[hi];
    let y = if x1 > x0 {
        y0 + (y1 - y0) * (v - x0) / (x1 - x0)
    } else {
        y0
    };
    y.clamp(0.0, 1.0)
}

fn check_boxes(spec: &TransformSpec, extents: [usize; 3]) -> Result<(), TransformError> {
    for b in &spec.boxes {
        for a in 0..3 {
            if b.corner[a] + b.extent[a] > extents[a] || b.extent[a] == 0 {
                return Err(TransformError::BoxOutOfRange {
                    corner: b.corner,
                    extent: b.extent,
                    extents,
                });
            }
        }
    }
    Ok(())
}

fn box_indices(b: &BoxRegion, extents: [usize; 3]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b.extent.iter().product());
    for dz in 0..b.extent[0] {
        for dy in 0..b.extent[1] {
            for dx in 0..b.extent[2] {
                let z = b.corner[0] + dz;
                let y = b.corner[1] + dy;
                let x = b.corner[2] + dx;
                idx.push((z * extents[1] + y) * extents[2] + x);
            }
        }
    }
    idx
}

/// Applies a spec; bit-identical on replay. Voxels outside declared boxes
/// are untouched by the inpaint and shuffle kinds; output stays in [0, 1].
pub fn apply_transform(volume: &Volume, spec: &TransformSpec) -> Result<Volume, TransformError> {
    if let Some(i) = volume
        .data()
        .iter()
        .position(|&v| !(0.0..=1.0).contains(&v))
    {
        return Err(TransformError::IntensityOutOfRange {
            index: i,
            value: volume.data()[i],
        });
    }
    let extents = volume.extents();
    check_boxes(spec, extents)?;
    let mut out = volume.clone();
    let mut rng = DetRng::from_seed_u64(spec.seed);
    match spec.kind {
        TransformKind::Inpaint => {
            for b in &spec.boxes {
                for idx in box_indices(b, extents) {
                    out.data_mut()[idx] = rng.next_f64();
                }
            }
        }
        TransformKind::Shuffle => {
            for b in &spec.boxes {
                let idx = box_indices(b, extents);
                let mut values: Vec<f64> = idx.iter().map(|&i| out.data()[i]).collect();
                rng.shuffle(&mut values);
                for (i, v) in idx.into_iter().zip(values) {
                    out.data_mut()[i] = v;
                }
            }
        }
        TransformKind::Bezier => {
            let bez = spec.bezier.as_ref().ok_or(TransformError::IncompleteSpec {
                spec: TransformKind::Bezier,
            })?;
            let table = bezier_table(bez);
            for v in out.data_mut() {
                *v = bezier_lookup(&table, *v);
            }
        }
    }
    Ok(out)
}

/// Applies several specs in sequence.
pub fn apply_transforms(
    volume: &Volume,
    specs: &[TransformSpec],
) -> Result<Volume, TransformError> {
    let mut v = volume.clone();
    for s in specs {
        v = apply_transform(&v, s)?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_volume() -> Volume {
        Volume::from_fn([12, 12, 12], |z, y, x| {
            0.5 + 0.4 * ((z + 2 * y + 3 * x) as f64 * 0.37).sin()
        })
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let grid = VolumeGrid::new([16, 16, 16]).unwrap();
        let cfg = TransformConfig::default();
        let a = sample_transform(&mut DetRng::from_seed_u64(5), &grid, &cfg).unwrap();
        let b = sample_transform(&mut DetRng::from_seed_u64(5), &grid, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restricting_kinds_is_respected() {
        let grid = VolumeGrid::new([16, 16, 16]).unwrap();
        let cfg = TransformConfig {
            enabled: vec![TransformKind::Bezier],
            compose_count: None,
        };
        for seed in 0..20 {
            let s = sample_transform(&mut DetRng::from_seed_u64(seed), &grid, &cfg).unwrap();
            assert_eq!(s.kind, TransformKind::Bezier);
        }
    }

    #[test]
    fn kind_frequencies_are_near_uniform() {
        let grid = VolumeGrid::new([16, 16, 16]).unwrap();
        let cfg = TransformConfig::default();
        let mut rng = DetRng::from_seed_u64(99);
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            let s = sample_transform(&mut rng, &grid, &cfg).unwrap();
            let k = match s.kind {
                TransformKind::Inpaint => 0,
                TransformKind::Shuffle => 1,
                TransformKind::Bezier => 2,
            };
            counts[k] += 1;
        }
        for &c in &counts {
            let f = c as f64 / 1000.0;
            assert!((0.25..=0.42).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn grid_too_small_rejected() {
        let grid = VolumeGrid::new([7, 16, 16]).unwrap();
        let err =
            sample_transform(&mut DetRng::from_seed_u64(1), &grid, &TransformConfig::default())
                .unwrap_err();
        assert!(matches!(err, TransformError::GridTooSmall(_)));
    }

    #[test]
    fn replay_is_bit_identical() {
        let vol = test_volume();
        let grid = VolumeGrid::new(vol.extents()).unwrap();
        for seed in 0..6 {
            let spec = sample_transform(
                &mut DetRng::from_seed_u64(seed),
                &grid,
                &TransformConfig::default(),
            )
            .unwrap();
            let a = apply_transform(&vol, &spec).unwrap();
            let b = apply_transform(&vol, &spec).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn diagonal_bezier_is_identity() {
        let vol = test_volume();
        let spec = TransformSpec {
            kind: TransformKind::Bezier,
            seed: 0,
            boxes: Vec::new(),
            bezier: Some(BezierSpec {
                p1: [1.0 / 3.0, 1.0 / 3.0],
                p2: [2.0 / 3.0, 2.0 / 3.0],
            }),
        };
        let out = apply_transform(&vol, &spec).unwrap();
        for (a, b) in vol.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn bezier_endpoints_are_fixed() {
        let mut vol = Volume::zeros([8, 8, 8]);
        vol.set(0, 0, 0, 0.0);
        vol.set(0, 0, 1, 1.0);
        for seed in 0..10 {
            let grid = VolumeGrid::new([8, 8, 8]).unwrap();
            let cfg = TransformConfig {
                enabled: vec![TransformKind::Bezier],
                compose_count: None,
            };
            let spec = sample_transform(&mut DetRng::from_seed_u64(seed), &grid, &cfg).unwrap();
            let out = apply_transform(&vol, &spec).unwrap();
            assert_eq!(out.at(0, 0, 0), 0.0);
            assert_eq!(out.at(0, 0, 1), 1.0);
        }
    }

    #[test]
    fn bezier_table_is_monotone_non_decreasing() {
        for seed in 0..50 {
            let mut rng = DetRng::from_seed_u64(seed);
            let mut p1 = [rng.next_f64(), rng.next_f64()];
            let mut p2 = [rng.next_f64(), rng.next_f64()];
            if p2[0] < p1[0] {
                std::mem::swap(&mut p1, &mut p2);
            }
            let table = bezier_table(&BezierSpec { p1, p2 });
            for w in table.windows(2) {
                assert!(w[1].0 >= w[0].0 - 1e-12, "x not sorted");
                assert!(w[1].1 >= w[0].1 - 1e-12, "y not monotone: {:?}", (p1, p2));
            }
        }
    }

    #[test]
    fn shuffle_preserves_multiset_and_outside_voxels() {
        let vol = test_volume();
        let b = BoxRegion {
            corner: [2, 3, 4],
            extent: [3, 4, 2],
        };
        let spec = TransformSpec {
            kind: TransformKind::Shuffle,
            seed: 77,
            boxes: vec![b],
            bezier: None,
        };
        let out = apply_transform(&vol, &spec).unwrap();
        let idx = box_indices(&b, vol.extents());
        let mut before: Vec<f64> = idx.iter().map(|&i| vol.data()[i]).collect();
        let mut after: Vec<f64> = idx.iter().map(|&i| out.data()[i]).collect();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        assert_eq!(before, after);
        let inside: std::collections::HashSet<usize> = idx.into_iter().collect();
        for i in 0..vol.voxels() {
            if !inside.contains(&i) {
                assert_eq!(vol.data()[i], out.data()[i]);
            }
        }
    }

    #[test]
    fn inpaint_touches_exactly_the_box() {
        let vol = Volume::from_fn([10, 10, 10], |_, _, _| 0.5);
        let b = BoxRegion {
            corner: [1, 2, 3],
            extent: [4, 4, 4],
        };
        let spec = TransformSpec {
            kind: TransformKind::Inpaint,
            seed: 5,
            boxes: vec![b],
            bezier: None,
        };
        let out = apply_transform(&vol, &spec).unwrap();
        let changed = out
            .data()
            .iter()
            .zip(vol.data())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 64);
        let (lo, hi) = out.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn out_of_range_intensity_rejected() {
        let mut vol = Volume::zeros([8, 8, 8]);
        vol.set(0, 0, 0, 1.5);
        let spec = TransformSpec {
            kind: TransformKind::Bezier,
            seed: 0,
            boxes: Vec::new(),
            bezier: Some(BezierSpec {
                p1: [0.2, 0.8],
                p2: [0.8, 0.2],
            }),
        };
        assert!(matches!(
            apply_transform(&vol, &spec),
            Err(TransformError::IntensityOutOfRange { .. })
        ));
    }

    #[test]
    fn box_outside_volume_rejected() {
        let vol = Volume::zeros([8, 8, 8]);
        let spec = TransformSpec {
            kind: TransformKind::Shuffle,
            seed: 0,
            boxes: vec![BoxRegion {
                corner: [6, 0, 0],
                extent: [4, 2, 2],
            }],
            bezier: None,
        };
        assert!(matches!(
            apply_transform(&vol, &spec),
            Err(TransformError::BoxOutOfRange { .. })
        ));
    }
}
