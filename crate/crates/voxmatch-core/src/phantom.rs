//! Synthetic anatomy with known ground truth.
//!
//! Every phantom is a warped instance of one canonical template (nested
//! ellipsoids plus a tube), so all instances share region count and
//! adjacency while differing in shape and intensity. Each instance records
//! the affine jitter and the smooth deformation that produced it.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{
    affine_matrix_from_params, compose_dvf, jacobian_determinant, AffineParams, Dvf, VolumeGrid,
};
use crate::io::{self, DatasetManifest, IoError, ManifestEntry, Split};
use crate::rng::DetRng;
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("extent {0} too small, need at least 16")]
    ExtentTooSmall(usize),
    #[error("need at least 2 regions, got {0}")]
    TooFewRegions(usize),
    #[error("count {0} too small, need at least 2")]
    CountTooSmall(usize),
    #[error("could not sample a deformation with positive Jacobian in {0} tries")]
    JacobianRejection(usize),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomConfig {
    pub extent: usize,
    pub regions: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extent: 32,
            regions: 4,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.extent < 16 {
            return Err(PhantomError::ExtentTooSmall(self.extent));
        }
        if self.regions < 2 {
            return Err(PhantomError::TooFewRegions(self.regions));
        }
        Ok(())
    }
}

/// One generated instance with its ground-truth transform.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub gt_affine: AffineParams,
    pub gt_deform: Dvf,
}

/// Base intensities per region id (background is index 0); cycled when more
/// regions are requested.
const REGION_INTENSITIES: [f64; 6] = [0.05, 0.35, 0.60, 0.85, 0.70, 0.45];

pub fn region_base_intensity(label: usize) -> f64 {
    REGION_INTENSITIES[label % REGION_INTENSITIES.len()]
}

/// The canonical template: labels 1..regions-1 are nested ellipsoids,
/// label `regions` is a tube along z touching the outer ellipsoid.
pub fn template(cfg: &PhantomConfig) -> (Volume, LabelVolume) {
    let e = cfg.extent;
    let c = (e - 1) as f64 / 2.0;
    let nested = cfg.regions - 1;
    let outer = [0.34 * e as f64, 0.31 * e as f64, 0.28 * e as f64];
    // Fixed-voxel shell thickness keeps the adjacency graph stable under
    // the deformation and affine jitter applied later.
    let margin = (0.085 * e as f64).max(2.6);
    let mut labels = LabelVolume::zeros([e, e, e]);
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let d = [x as f64 - c, y as f64 - c, z as f64 - c];
                let mut lab = 0;
                for k in 0..nested {
                    let shrink = margin * k as f64;
                    let r = [
                        (outer[0] - shrink).max(1.5),
                        (outer[1] - shrink).max(1.5),
                        (outer[2] - shrink).max(1.5),
                    ];
                    let q = (d[0] / r[0]).powi(2) + (d[1] / r[1]).powi(2) + (d[2] / r[2]).powi(2);
                    if q <= 1.0 {
                        lab = k as i32 + 1;
                    }
                }
                // Tube along z at a -y offset, carved only outside the body.
                if lab == 0 {
                    let ty = c - 0.36 * e as f64;
                    let rr = (x as f64 - c).powi(2) + (y as f64 - ty).powi(2);
                    let tube_r = 0.07 * e as f64;
                    if rr <= tube_r * tube_r {
                        lab = cfg.regions as i32;
                    }
                }
                labels.set(z, y, x, lab);
            }
        }
    }
    let vol = Volume::from_fn([e, e, e], |z, y, x| {
        region_base_intensity(labels.at(z, y, x) as usize)
    });
    (vol, labels)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur of one [Z, Y, X] channel, edge-clamped.
fn blur3(data: &mut Vec<f64>, extents: [usize; 3], kernel: &[f64]) {
    let [z, y, x] = extents;
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0; data.len()];
    // Along x.
    for zi in 0..z {
        for yi in 0..y {
            for xi in 0..x {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let s = (xi as isize + ki as isize - radius as isize).clamp(0, x as isize - 1);
                    acc += kv * data[(zi * y + yi) * x + s as usize];
                }
                tmp[(zi * y + yi) * x + xi] = acc;
            }
        }
    }
    // Along y.
    for zi in 0..z {
        for xi in 0..x {
            for yi in 0..y {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let s = (yi as isize + ki as isize - radius as isize).clamp(0, y as isize - 1);
                    acc += kv * tmp[(zi * y + s as usize) * x + xi];
                }
                data[(zi * y + yi) * x + xi] = acc;
            }
        }
    }
    // Along z.
    tmp.copy_from_slice(data);
    for yi in 0..y {
        for xi in 0..x {
            for zi in 0..z {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let s = (zi as isize + ki as isize - radius as isize).clamp(0, z as isize - 1);
                    acc += kv * tmp[(s as usize * y + yi) * x + xi];
                }
                data[(zi * y + yi) * x + xi] = acc;
            }
        }
    }
}

/// Gaussian-smoothed random field rescaled to a peak displacement of
/// extent/12, resampled until det(I + grad u) > 0 everywhere.
fn sample_smooth_deform(rng: &mut DetRng, extent: usize) -> Result<Dvf, PhantomError> {
    let grid = VolumeGrid::new([extent, extent, extent]).expect("extent >= 16");
    let kernel = gaussian_kernel(extent as f64 / 5.0);
    let target = extent as f64 / 12.0;
    const MAX_TRIES: usize = 20;
    for _ in 0..MAX_TRIES {
        let mut dvf = Dvf::zeros(&grid);
        let voxels = grid.voxels();
        for ch in 0..3 {
            let mut noise: Vec<f64> = (0..voxels).map(|_| rng.normal()).collect();
            blur3(&mut noise, grid.extents, &kernel);
            dvf.data_mut()[ch * voxels..(ch + 1) * voxels].copy_from_slice(&noise);
        }
        let peak = dvf.max_abs();
        if peak == 0.0 {
            continue;
        }
        let scale = target / peak;
        for v in dvf.data_mut() {
            *v *= scale;
        }
        let jac = jacobian_determinant(&dvf);
        if jac.data().iter().all(|&d| d > 0.0) {
            return Ok(dvf);
        }
    }
    Err(PhantomError::JacobianRejection(MAX_TRIES))
}

/// Deterministic per seed: template warped by a smooth field and an affine
/// jitter, per-region intensity shifts, additive noise, clamp to [0, 1].
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<Phantom, PhantomError> {
    cfg.validate()?;
    let mut rng = DetRng::from_seed_u64(seed);
    let (mut tvol, tlab) = template(cfg);

    // Per-region intensity perturbation on the template.
    let shifts: Vec<f64> = (0..=cfg.regions).map(|_| rng.uniform(-0.1, 0.1)).collect();
    for (v, &lab) in tvol.data_mut().iter_mut().zip(tlab.data()) {
        if lab > 0 {
            *v = (*v + shifts[lab as usize]).clamp(0.0, 1.0);
        }
    }

    let gt_deform = sample_smooth_deform(&mut rng, cfg.extent)?;
    let e = cfg.extent as f64;
    let gt_affine = AffineParams {
        rot: [
            rng.uniform(-0.2, 0.2),
            rng.uniform(-0.2, 0.2),
            rng.uniform(-0.2, 0.2),
        ],
        trans: [
            rng.uniform(-e / 10.0, e / 10.0),
            rng.uniform(-e / 10.0, e / 10.0),
            rng.uniform(-e / 10.0, e / 10.0),
        ],
        scale: [
            rng.uniform(0.9, 1.1),
            rng.uniform(0.9, 1.1),
            rng.uniform(0.9, 1.1),
        ],
        shear: [
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1),
        ],
    };
    let matrix = affine_matrix_from_params(&gt_affine).expect("jitter ranges keep scale positive");
    let fused = compose_dvf(&matrix, &gt_deform);

    let warped = crate::geometry::warp_trilinear(&tvol.to_tensor4(), &fused)
        .expect("grid matches template");
    let labels = tlab.warp_nearest(&fused);
    let mut volume = Volume::from_tensor(&warped, [1.0; 3]).expect("warp keeps values finite");
    for v in volume.data_mut() {
        *v = (*v + 0.02 * rng.normal()).clamp(0.0, 1.0);
    }

    Ok(Phantom {
        volume,
        labels,
        gt_affine,
        gt_deform,
    })
}

/// Split sizes: train = floor(0.70 count), val = floor(0.15 count), test
/// takes the remainder.
pub fn split_counts(count: usize) -> (usize, usize, usize) {
    let train = count * 70 / 100;
    let val = count * 15 / 100;
    (train, val, count - train - val)
}

/// Generates `count` phantoms with seeds seed, seed+1, ... and writes them
/// plus a checksummed manifest into `out_dir`.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    cfg: &PhantomConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, PhantomError> {
    cfg.validate()?;
    if count < 2 {
        return Err(PhantomError::CountTooSmall(count));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let (train, val, _test) = split_counts(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let phantom = generate_phantom(seed.wrapping_add(i as u64), cfg)?;
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        let volume = format!("vol_{i:03}.gvol");
        let labels = format!("lab_{i:03}.gvol");
        let gt_affine = format!("gta_{i:03}.toml");
        let gt_deform = format!("gtd_{i:03}.gvol");
        io::write_volume(&out_dir.join(&volume), &phantom.volume)?;
        io::write_labels(&out_dir.join(&labels), &phantom.labels)?;
        let affine_text = toml::to_string(&phantom.gt_affine)
            .map_err(|er| IoError::Manifest(er.to_string()))?;
        io::atomic_write(&out_dir.join(&gt_affine), affine_text.as_bytes())?;
        io::write_dvf(&out_dir.join(&gt_deform), &phantom.gt_deform)?;
        entries.push(ManifestEntry {
            checksum_volume: io::sha256_file(&out_dir.join(&volume))?,
            checksum_labels: io::sha256_file(&out_dir.join(&labels))?,
            checksum_gt_affine: io::sha256_file(&out_dir.join(&gt_affine))?,
            checksum_gt_deform: io::sha256_file(&out_dir.join(&gt_deform))?,
            volume,
            labels,
            gt_affine,
            gt_deform,
            split,
        });
    }
    let manifest = DatasetManifest {
        seed,
        count,
        extent: cfg.extent,
        regions: cfg.regions,
        entries,
    };
    io::save_manifest(&out_dir.join("manifest.toml"), &manifest)?;
    Ok(manifest)
}

/// Validates the phantom invariants; used by tests and the generator's
/// debug assertions.
pub fn validate_phantom(p: &Phantom, cfg: &PhantomConfig) -> Result<(), String> {
    let total = p.labels.data().len();
    let labeled = p.labels.data().iter().filter(|&&l| l > 0).count();
    if (labeled as f64) < 0.05 * total as f64 {
        return Err(format!(
            "labels cover {labeled}/{total} voxels, below 5%"
        ));
    }
    for r in 1..=cfg.regions as i32 {
        if !p.labels.data().contains(&r) {
            return Err(format!("label {r} missing"));
        }
    }
    let (lo, hi) = p.volume.min_max();
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(format!("intensities [{lo}, {hi}] escape [0, 1]"));
    }
    let jac = jacobian_determinant(&p.gt_deform);
    if jac.data().iter().any(|&d| d <= 0.0) {
        return Err("ground-truth deformation folds".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(5, &cfg).unwrap();
        let b = generate_phantom(5, &cfg).unwrap();
        assert_eq!(a.volume.data(), b.volume.data());
        assert_eq!(a.labels.data(), b.labels.data());
        assert_eq!(a.gt_deform.data(), b.gt_deform.data());
        assert_eq!(a.gt_affine, b.gt_affine);
    }

    #[test]
    fn labels_contain_exactly_the_configured_ids() {
        let cfg = PhantomConfig::default();
        let p = generate_phantom(3, &cfg).unwrap();
        let present: BTreeSet<i32> = p.labels.data().iter().copied().collect();
        let expected: BTreeSet<i32> = (0..=4).collect();
        assert_eq!(present, expected);
    }

    #[test]
    fn invariants_hold_across_seeds() {
        let cfg = PhantomConfig::default();
        for seed in 0..10 {
            let p = generate_phantom(seed, &cfg).unwrap();
            validate_phantom(&p, &cfg).unwrap();
        }
    }

    /// 6-neighborhood adjacency edges between label ids.
    fn adjacency(labels: &LabelVolume) -> BTreeSet<(i32, i32)> {
        let [z, y, x] = labels.extents();
        let mut edges = BTreeSet::new();
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..x {
                    let a = labels.at(zi, yi, xi);
                    let mut visit = |b: i32| {
                        if a != b {
                            edges.insert((a.min(b), a.max(b)));
                        }
                    };
                    if xi + 1 < x {
                        visit(labels.at(zi, yi, xi + 1));
                    }
                    if yi + 1 < y {
                        visit(labels.at(zi, yi + 1, xi));
                    }
                    if zi + 1 < z {
                        visit(labels.at(zi + 1, yi, xi));
                    }
                }
            }
        }
        edges
    }

    #[test]
    fn label_topology_is_shared_across_seeds() {
        let cfg = PhantomConfig::default();
        let reference = adjacency(&generate_phantom(0, &cfg).unwrap().labels);
        assert!(!reference.is_empty());
        for seed in 1..10 {
            let p = generate_phantom(seed, &cfg).unwrap();
            assert_eq!(
                adjacency(&p.labels),
                reference,
                "seed {seed} changed the region adjacency graph"
            );
        }
    }

    #[test]
    fn per_region_intensity_varies_across_seeds() {
        let cfg = PhantomConfig::default();
        for region in 1..=4i32 {
            let mut means = Vec::new();
            for seed in 0..10 {
                let p = generate_phantom(seed, &cfg).unwrap();
                let (mut acc, mut n) = (0.0, 0usize);
                for (v, &l) in p.volume.data().iter().zip(p.labels.data()) {
                    if l == region {
                        acc += v;
                        n += 1;
                    }
                }
                means.push(acc / n as f64);
            }
            let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo >= 0.02, "region {region} spread {}", hi - lo);
        }
    }

    #[test]
    fn split_rule_gives_7_1_2_for_ten() {
        assert_eq!(split_counts(10), (7, 1, 2));
        assert_eq!(split_counts(2), (1, 0, 1));
    }

    #[test]
    fn dataset_round_trip_checksums_match() {
        let dir = std::env::temp_dir().join(format!("phantom-ds-{}", std::process::id()));
        let cfg = PhantomConfig {
            extent: 16,
            regions: 3,
        };
        let m1 = generate_dataset(7, 4, &cfg, &dir).unwrap();
        let loaded = io::load_dataset(&dir.join("manifest.toml")).unwrap();
        assert_eq!(loaded.entries.len(), 4);
        // Regenerating with the same seed reproduces identical files.
        let dir2 = std::env::temp_dir().join(format!("phantom-ds2-{}", std::process::id()));
        let m2 = generate_dataset(7, 4, &cfg, &dir2).unwrap();
        for (a, b) in m1.entries.iter().zip(&m2.entries) {
            assert_eq!(a.checksum_volume, b.checksum_volume);
            assert_eq!(a.checksum_labels, b.checksum_labels);
            assert_eq!(a.checksum_gt_deform, b.checksum_gt_deform);
        }
        std::fs::remove_dir_all(&dir).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }
}
