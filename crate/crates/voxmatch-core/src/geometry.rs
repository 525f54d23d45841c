//! Affine parameterization, displacement vector fields, the fusion of the
//! two, and the differentiable trilinear spatial transformer.
//!
//! Conventions (used everywhere in this crate):
//! - Voxel positions are integer-centered, p = (p_x, p_y, p_z) with x along
//!   the fastest-varying array axis.
//! - Displacements are in voxel units; a DVF stores channels (u_x, u_y, u_z)
//!   over a [3, Z, Y, X] grid.
//! - Affine transforms act about the grid center, so identity-adjacent
//!   parameters do not translate content.
//! - Warping is pull-based: out(p) reads the source at p + u(p), with zero
//!   fill outside the source.

use crate::kernels;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("scale components must be positive, got ({0}, {1}, {2})")]
    NonPositiveScale(f64, f64, f64),
    #[error("affine matrix last row must be [0,0,0,1]")]
    BadLastRow,
    #[error("affine matrix upper 3x3 block is singular")]
    Singular,
    #[error("grid extents must be at least 2 per axis, got {0:?}")]
    GridTooSmall([usize; 3]),
    #[error("field extents {field:?} do not match grid {grid:?}")]
    ExtentMismatch { field: [usize; 3], grid: [usize; 3] },
    #[error("non-finite parameter")]
    NonFinite,
}

pub type Mat4 = [[f64; 4]; 4];

/// The 15 scalars of the global transform: rotations (radians), translations
/// (voxels), scalings, and the six shearing coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rot: [f64; 3],       // theta_x, theta_y, theta_z
    pub trans: [f64; 3],     // t_x, t_y, t_z
    pub scale: [f64; 3],     // s_x, s_y, s_z
    pub shear: [f64; 6],     // sh_xy, sh_xz, sh_yx, sh_yz, sh_zx, sh_zy
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rot: [0.0; 3],
            trans: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 6],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            trans: t,
            ..Self::identity()
        }
    }

    /// Flattens to the canonical 15-vector
    /// [rot; trans; scale; shear] used by the graph op.
    pub fn to_vec15(&self) -> [f64; 15] {
        let mut v = [0.0; 15];
        v[..3].copy_from_slice(&self.rot);
        v[3..6].copy_from_slice(&self.trans);
        v[6..9].copy_from_slice(&self.scale);
        v[9..].copy_from_slice(&self.shear);
        v
    }

    pub fn from_vec15(v: &[f64]) -> Self {
        debug_assert_eq!(v.len(), 15);
        Self {
            rot: [v[0], v[1], v[2]],
            trans: [v[3], v[4], v[5]],
            scale: [v[6], v[7], v[8]],
            shear: [v[9], v[10], v[11], v[12], v[13], v[14]],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all = self.to_vec15();
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::NonPositiveScale(
                self.scale[0],
                self.scale[1],
                self.scale[2],
            ));
        }
        Ok(())
    }
}

/// Homogeneous 4x4 transform, row-major, last row [0,0,0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMatrix(pub Mat4);

impl AffineMatrix {
    pub fn identity() -> Self {
        Self(mat4_identity())
    }

    pub fn new(m: Mat4) -> Result<Self, GeometryError> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::BadLastRow);
        }
        if det3(&m).abs() == 0.0 {
            return Err(GeometryError::Singular);
        }
        Ok(Self(m))
    }

    pub fn det3(&self) -> f64 {
        det3(&self.0)
    }

    /// Applies the raw (uncentered) homogeneous transform to (x, y, z).
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Applies the transform about `center`: p_hat = M3 (p - c) + c + t.
    pub fn apply_centered(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let q = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let m = &self.0;
        [
            m[0][0] * q[0] + m[0][1] * q[1] + m[0][2] * q[2] + m[0][3] + center[0],
            m[1][0] * q[0] + m[1][1] * q[1] + m[1][2] * q[2] + m[1][3] + center[1],
            m[2][0] * q[0] + m[2][1] * q[1] + m[2][2] * q[2] + m[2][3] + center[2],
        ]
    }

    pub fn inverse(&self) -> Option<AffineMatrix> {
        let m = &self.0;
        let d = det3(m);
        if d == 0.0 {
            return None;
        }
        let inv_d = 1.0 / d;
        let a = m;
        // Inverse of the 3x3 block by adjugate.
        let mut r = mat4_identity();
        r[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_d;
        r[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_d;
        r[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_d;
        r[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_d;
        r[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_d;
        r[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_d;
        r[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_d;
        r[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_d;
        r[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_d;
        // -R^{-1} t
        let t = [m[0][3], m[1][3], m[2][3]];
        for i in 0..3 {
            r[i][3] = -(r[i][0] * t[0] + r[i][1] * t[1] + r[i][2] * t[2]);
        }
        Some(AffineMatrix(r))
    }
}

fn mat4_identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut r = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for (k, bk) in b.iter().enumerate() {
                acc += a[i][k] * bk[j];
            }
            r[i][j] = acc;
        }
    }
    r
}

fn det3(m: &Mat4) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// The four factor matrices of the global transform.
pub fn factor_matrices(p: &AffineParams) -> [Mat4; 4] {
    let (sx, cx) = p.rot[0].sin_cos();
    let (sy, cy) = p.rot[1].sin_cos();
    let (sz, cz) = p.rot[2].sin_cos();
    let mut rot = mat4_identity();
    rot[0][0] = cy * cz;
    rot[0][1] = sx * sy * cz - sz * cx;
    rot[0][2] = sy * cx * cz + sx * cz;
    rot[1][0] = cy * sz;
    rot[1][1] = cx * cz + sx * sy * sz;
    rot[1][2] = -sx * cz + sz * sy * cx;
    rot[2][0] = -sy;
    rot[2][1] = sx * cy;
    rot[2][2] = cx * cy;

    let mut scale = mat4_identity();
    scale[0][0] = p.scale[0];
    scale[1][1] = p.scale[1];
    scale[2][2] = p.scale[2];

    let [sh_xy, sh_xz, sh_yx, sh_yz, sh_zx, sh_zy] = p.shear;
    let mut shear = mat4_identity();
    shear[0][1] = sh_yx;
    shear[0][2] = sh_zx;
    shear[1][0] = sh_xy;
    shear[1][2] = sh_zy;
    shear[2][0] = sh_xz;
    shear[2][1] = sh_yz;

    let mut trans = mat4_identity();
    trans[0][3] = p.trans[0];
    trans[1][3] = p.trans[1];
    trans[2][3] = p.trans[2];

    [rot, scale, shear, trans]
}

/// Composes the factor matrices in the fixed order
/// Rotation * Scaling * Shearing * Translation.
pub fn affine_matrix_from_params(p: &AffineParams) -> Result<AffineMatrix, GeometryError> {
    p.validate()?;
    let [rot, scale, shear, trans] = factor_matrices(p);
    let m = mat4_mul(&mat4_mul(&mat4_mul(&rot, &scale), &shear), &trans);
    AffineMatrix::new(m)
}

/// Forward pass for the graph op: raw 15-vector in canonical order to the
/// 4x4 matrix, without the typed validation (scale positivity is checked by
/// the caller).
pub fn affine_matrix_forward(v15: &[f64]) -> Mat4 {
    let p = AffineParams::from_vec15(v15);
    let [rot, scale, shear, trans] = factor_matrices(&p);
    mat4_mul(&mat4_mul(&mat4_mul(&rot, &scale), &shear), &trans)
}

/// Partial derivatives of the matrix w.r.t. each of the 15 parameters.
pub fn affine_matrix_partials(v15: &[f64]) -> [Mat4; 15] {
    let p = AffineParams::from_vec15(v15);
    let [rot, scale, shear, trans] = factor_matrices(&p);
    let (sx, cx) = p.rot[0].sin_cos();
    let (sy, cy) = p.rot[1].sin_cos();
    let (sz, cz) = p.rot[2].sin_cos();

    let zero = [[0.0; 4]; 4];
    let mut d_rot_x = zero;
    d_rot_x[0][1] = cx * sy * cz + sz * sx;
    d_rot_x[0][2] = -sy * sx * cz + cx * cz;
    d_rot_x[1][1] = -sx * cz + cx * sy * sz;
    d_rot_x[1][2] = -cx * cz - sz * sy * sx;
    d_rot_x[2][1] = cx * cy;
    d_rot_x[2][2] = -sx * cy;

    let mut d_rot_y = zero;
    d_rot_y[0][0] = -sy * cz;
    d_rot_y[0][1] = sx * cy * cz;
    d_rot_y[0][2] = cy * cx * cz;
    d_rot_y[1][0] = -sy * sz;
    d_rot_y[1][1] = sx * cy * sz;
    d_rot_y[1][2] = sz * cy * cx;
    d_rot_y[2][0] = -cy;
    d_rot_y[2][1] = -sx * sy;
    d_rot_y[2][2] = -cx * sy;

    let mut d_rot_z = zero;
    d_rot_z[0][0] = -cy * sz;
    d_rot_z[0][1] = -sx * sy * sz - cz * cx;
    d_rot_z[0][2] = -sy * cx * sz - sx * sz;
    d_rot_z[1][0] = cy * cz;
    d_rot_z[1][1] = -cx * sz + sx * sy * cz;
    d_rot_z[1][2] = sx * sz + cz * sy * cx;

    let chain_rot = |dr: &Mat4| mat4_mul(&mat4_mul(&mat4_mul(dr, &scale), &shear), &trans);
    let chain_scale = |i: usize| {
        let mut ds = zero;
        ds[i][i] = 1.0;
        mat4_mul(&mat4_mul(&mat4_mul(&rot, &ds), &shear), &trans)
    };
    let chain_shear = |r: usize, c: usize| {
        let mut dsh = zero;
        dsh[r][c] = 1.0;
        mat4_mul(&mat4_mul(&mat4_mul(&rot, &scale), &dsh), &trans)
    };
    let chain_trans = |i: usize| {
        let mut dt = zero;
        dt[i][3] = 1.0;
        mat4_mul(&mat4_mul(&mat4_mul(&rot, &scale), &shear), &dt)
    };

    [
        chain_rot(&d_rot_x),
        chain_rot(&d_rot_y),
        chain_rot(&d_rot_z),
        chain_trans(0),
        chain_trans(1),
        chain_trans(2),
        chain_scale(0),
        chain_scale(1),
        chain_scale(2),
        chain_shear(1, 0), // sh_xy
        chain_shear(2, 0), // sh_xz
        chain_shear(0, 1), // sh_yx
        chain_shear(2, 1), // sh_yz
        chain_shear(0, 2), // sh_zx
        chain_shear(1, 2), // sh_zy
    ]
}

/// Target voxel lattice: extents (Z, Y, X), integer voxel centers, transforms
/// centered at the grid center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub extents: [usize; 3], // (Z, Y, X)
}

impl VolumeGrid {
    pub fn new(extents: [usize; 3]) -> Result<Self, GeometryError> {
        if extents.iter().any(|&e| e < 2) {
            return Err(GeometryError::GridTooSmall(extents));
        }
        Ok(Self { extents })
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    /// Grid center in (x, y, z) order.
    pub fn center_xyz(&self) -> [f64; 3] {
        [
            (self.extents[2] - 1) as f64 / 2.0,
            (self.extents[1] - 1) as f64 / 2.0,
            (self.extents[0] - 1) as f64 / 2.0,
        ]
    }
}

/// Dense displacement field [3, Z, Y, X], channels (u_x, u_y, u_z), voxel
/// units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dvf {
    data: Vec<f64>,
    extents: [usize; 3],
    pub spacing: [f64; 3],
}

impl Dvf {
    pub fn zeros(grid: &VolumeGrid) -> Self {
        Self {
            data: vec![0.0; 3 * grid.voxels()],
            extents: grid.extents,
            spacing: [1.0; 3],
        }
    }

    pub fn new(data: Vec<f64>, extents: [usize; 3]) -> Result<Self, GeometryError> {
        if data.len() != 3 * extents.iter().product::<usize>() {
            return Err(GeometryError::ExtentMismatch {
                field: extents,
                grid: extents,
            });
        }
        Ok(Self {
            data,
            extents,
            spacing: [1.0; 3],
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn grid(&self) -> VolumeGrid {
        VolumeGrid {
            extents: self.extents,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    /// Displacement (u_x, u_y, u_z) at voxel (z, y, x).
    pub fn at(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        let s = self.voxels();
        let p = (z * self.extents[1] + y) * self.extents[2] + x;
        [self.data[p], self.data[s + p], self.data[2 * s + p]]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, u: [f64; 3]) {
        let s = self.voxels();
        let p = (z * self.extents[1] + y) * self.extents[2] + x;
        self.data[p] = u[0];
        self.data[s + p] = u[1];
        self.data[2 * s + p] = u[2];
    }

    pub fn mean_abs(&self) -> f64 {
        let s = self.voxels();
        let mut acc = 0.0;
        for p in 0..s {
            let ux = self.data[p];
            let uy = self.data[s + p];
            let uz = self.data[2 * s + p];
            acc += (ux * ux + uy * uy + uz * uz).sqrt();
        }
        acc / s as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// As a graph-ready tensor [1, 3, Z, Y, X].
    pub fn to_tensor(&self) -> Tensor {
        let [z, y, x] = self.extents;
        Tensor::new(vec![1, 3, z, y, x], self.data.clone()).expect("dvf layout")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, GeometryError> {
        let sh = t.shape();
        let (c, e) = match sh.len() {
            4 => (sh[0], [sh[1], sh[2], sh[3]]),
            5 => (sh[1], [sh[2], sh[3], sh[4]]),
            _ => (0, [0, 0, 0]),
        };
        if c != 3 {
            return Err(GeometryError::ExtentMismatch {
                field: [c, 0, 0],
                grid: e,
            });
        }
        Dvf::new(t.data().to_vec(), e)
    }
}

/// dvf(p) = p_hat - p for every voxel, with p_hat the centered affine image
/// of p.
pub fn affine_to_dvf(matrix: &AffineMatrix, grid: &VolumeGrid) -> Dvf {
    let [z, y, x] = grid.extents;
    let c = grid.center_xyz();
    let s = grid.voxels();
    let mut data = vec![0.0; 3 * s];
    for zi in 0..z {
        for yi in 0..y {
            for xi in 0..x {
                let p = [(xi) as f64, (yi) as f64, (zi) as f64];
                let ph = matrix.apply_centered(p, c);
                let idx = (zi * y + yi) * x + xi;
                data[idx] = ph[0] - p[0];
                data[s + idx] = ph[1] - p[1];
                data[2 * s + idx] = ph[2] - p[2];
            }
        }
    }
    Dvf {
        data,
        extents: grid.extents,
        spacing: [1.0; 3],
    }
}

/// Pull-based trilinear warp of a [C, Z, Y, X] tensor by a matching DVF.
pub fn warp_trilinear(source: &Tensor, dvf: &Dvf) -> Result<Tensor, GeometryError> {
    let sh = source.shape();
    if sh.len() != 4 || [sh[1], sh[2], sh[3]] != dvf.extents {
        return Err(GeometryError::ExtentMismatch {
            field: dvf.extents,
            grid: [sh.get(1).copied().unwrap_or(0), sh.get(2).copied().unwrap_or(0), sh.get(3).copied().unwrap_or(0)],
        });
    }
    let ss: kernels::Shape5 = [1, sh[0], sh[1], sh[2], sh[3]];
    let out = kernels::warp_forward(source.data(), &ss, dvf.data());
    Ok(Tensor::new(sh.to_vec(), out).expect("warp shape"))
}

/// Fuses a global affine with a local deformation:
/// psi(p) = psi_l(p_hat) + p_hat - p, sampling psi_l trilinearly at p_hat.
pub fn compose_dvf(affine: &AffineMatrix, deform: &Dvf) -> Dvf {
    let grid = deform.grid();
    let aff = affine_to_dvf(affine, &grid);
    let [z, y, x] = grid.extents;
    let ss: kernels::Shape5 = [1, 3, z, y, x];
    let warped = kernels::warp_forward(deform.data(), &ss, aff.data());
    let data: Vec<f64> = warped
        .iter()
        .zip(aff.data().iter())
        .map(|(w, a)| w + a)
        .collect();
    Dvf {
        data,
        extents: grid.extents,
        spacing: deform.spacing,
    }
}

/// det(I + grad u) per voxel via forward differences, replicated at the far
/// boundary (derivative zero there). Returns a [Z, Y, X] tensor.
pub fn jacobian_determinant(dvf: &Dvf) -> Tensor {
    let [z, y, x] = dvf.extents;
    let s = dvf.voxels();
    let xs: kernels::Shape5 = [1, 3, z, y, x];
    // d[axis] holds the forward difference of all three channels along that
    // spatial axis (0 = z, 1 = y, 2 = x).
    let dz = kernels::forward_diff(dvf.data(), &xs, 0);
    let dy = kernels::forward_diff(dvf.data(), &xs, 1);
    let dx = kernels::forward_diff(dvf.data(), &xs, 2);
    let mut out = vec![0.0; s];
    for p in 0..s {
        // Rows: u_x, u_y, u_z; columns: d/dx, d/dy, d/dz.
        let j = [
            [1.0 + dx[p], dy[p], dz[p]],
            [dx[s + p], 1.0 + dy[s + p], dz[s + p]],
            [dx[2 * s + p], dy[2 * s + p], 1.0 + dz[2 * s + p]],
        ];
        out[p] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
    }
    Tensor::new(vec![z, y, x], out).expect("jacobian shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_params_give_identity_matrix() {
        let m = affine_matrix_from_params(&AffineParams::identity()).unwrap();
        assert_eq!(m, AffineMatrix::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_offset_to_y_offset() {
        let p = AffineParams {
            rot: [0.0, 0.0, std::f64::consts::FRAC_PI_2],
            ..AffineParams::identity()
        };
        let m = affine_matrix_from_params(&p).unwrap();
        let out = m.apply([1.0, 0.0, 0.0]);
        assert!((out[0] - 0.0).abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
        assert!((out[2] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_scale_rejected() {
        let p = AffineParams {
            scale: [1.0, 0.0, 1.0],
            ..AffineParams::identity()
        };
        assert!(matches!(
            affine_matrix_from_params(&p),
            Err(GeometryError::NonPositiveScale(..))
        ));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let p = AffineParams {
            rot: [0.1, -0.2, 0.3],
            trans: [1.0, -2.0, 0.5],
            scale: [1.1, 0.9, 1.05],
            shear: [0.05, -0.02, 0.03, 0.01, -0.04, 0.02],
        };
        let m = affine_matrix_from_params(&p).unwrap();
        let inv = m.inverse().unwrap();
        let prod = mat4_mul(&m.0, &inv.0);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i][j] - want).abs() < 1e-12, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn identity_affine_yields_zero_field() {
        let grid = VolumeGrid::new([4, 5, 6]).unwrap();
        let d = affine_to_dvf(&AffineMatrix::identity(), &grid);
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_translation_yields_constant_field() {
        let grid = VolumeGrid::new([5, 5, 5]).unwrap();
        let m = affine_matrix_from_params(&AffineParams::translation([2.0, 0.0, 0.0])).unwrap();
        let d = affine_to_dvf(&m, &grid);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    assert_eq!(d.at(z, y, x), [2.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn zero_field_jacobian_is_one() {
        let grid = VolumeGrid::new([4, 4, 4]).unwrap();
        let j = jacobian_determinant(&Dvf::zeros(&grid));
        assert!(j.data().iter().all(|&v| v == 1.0));
    }
}
