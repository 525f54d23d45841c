//! Scalar intensity volumes and integer label grids.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("volume extents {0:?} invalid (need every axis >= 1)")]
    BadExtents([usize; 3]),
    #[error("data length {actual} does not match extents {extents:?} ({expected})")]
    LengthMismatch {
        extents: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("non-finite intensity at flat index {0}")]
    NonFinite(usize),
}

/// Dense scalar grid over (Z, Y, X) with voxel spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f64>,
    extents: [usize; 3],
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Vec<f64>, extents: [usize; 3]) -> Result<Self, VolumeError> {
        if extents.iter().any(|&e| e == 0) {
            return Err(VolumeError::BadExtents(extents));
        }
        let expected: usize = extents.iter().product();
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                extents,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            data,
            extents,
            spacing: [1.0; 3],
        })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            data: vec![0.0; extents.iter().product()],
            extents,
            spacing: [1.0; 3],
        }
    }

    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [z, y, x] = extents;
        let mut data = Vec::with_capacity(z * y * x);
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..x {
                    data.push(f(zi, yi, xi));
                }
            }
        }
        Self {
            data,
            extents,
            spacing: [1.0; 3],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.extents[1] + y) * self.extents[2] + x]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f64) {
        self.data[(z * self.extents[1] + y) * self.extents[2] + x] = v;
    }

    /// As a graph input [1, 1, Z, Y, X].
    pub fn to_tensor5(&self) -> Tensor {
        let [z, y, x] = self.extents;
        Tensor::new(vec![1, 1, z, y, x], self.data.clone()).expect("volume layout")
    }

    /// As a warp source [1, Z, Y, X].
    pub fn to_tensor4(&self) -> Tensor {
        let [z, y, x] = self.extents;
        Tensor::new(vec![1, z, y, x], self.data.clone()).expect("volume layout")
    }

    pub fn from_tensor(t: &Tensor, spacing: [f64; 3]) -> Result<Self, VolumeError> {
        let sh = t.shape();
        let extents = match sh.len() {
            3 => [sh[0], sh[1], sh[2]],
            4 => [sh[1], sh[2], sh[3]],
            5 => [sh[2], sh[3], sh[4]],
            _ => return Err(VolumeError::BadExtents([0, 0, 0])),
        };
        let mut v = Self::new(t.data().to_vec(), extents)?;
        v.spacing = spacing;
        Ok(v)
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v;
        }
        acc / self.data.len() as f64
    }
}

/// Integer label grid aligned with a volume; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    data: Vec<i32>,
    extents: [usize; 3],
}

impl LabelVolume {
    pub fn new(data: Vec<i32>, extents: [usize; 3]) -> Result<Self, VolumeError> {
        let expected: usize = extents.iter().product();
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                extents,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { data, extents })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            data: vec![0; extents.iter().product()],
            extents,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> i32 {
        self.data[(z * self.extents[1] + y) * self.extents[2] + x]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: i32) {
        self.data[(z * self.extents[1] + y) * self.extents[2] + x] = v;
    }

    pub fn max_label(&self) -> i32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Pull-based nearest-neighbor warp; out-of-bounds reads background 0.
    pub fn warp_nearest(&self, dvf: &crate::geometry::Dvf) -> LabelVolume {
        let [z, y, x] = self.extents;
        let mut out = LabelVolume::zeros(self.extents);
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..x {
                    let u = dvf.at(zi, yi, xi);
                    let sx = (xi as f64 + u[0]).round() as isize;
                    let sy = (yi as f64 + u[1]).round() as isize;
                    let sz = (zi as f64 + u[2]).round() as isize;
                    let v = if sx >= 0
                        && sy >= 0
                        && sz >= 0
                        && sx < x as isize
                        && sy < y as isize
                        && sz < z as isize
                    {
                        self.at(sz as usize, sy as usize, sx as usize)
                    } else {
                        0
                    };
                    out.set(zi, yi, xi, v);
                }
            }
        }
        out
    }
}
