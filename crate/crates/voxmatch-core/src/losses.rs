//! Differentiable objectives: windowed squared local correlation, field
//! smoothness, and restoration error, built as graph fragments.

use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossConfigError {
    #[error("ncc window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("ncc epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("smooth weight must be non-negative, got {0}")]
    BadWeight(f64),
}

/// Configuration for the similarity and regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Odd cube window edge for the local correlation, in voxels.
    pub ncc_window: usize,
    /// Added to the variance product in the correlation denominator.
    pub ncc_epsilon: f64,
    /// Weight of the smoothness term in the combined objective.
    pub smooth_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ncc_window: 5,
            ncc_epsilon: 1e-5,
            smooth_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossConfigError> {
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(LossConfigError::BadWindow(self.ncc_window));
        }
        if !(self.ncc_epsilon > 0.0) {
            return Err(LossConfigError::BadEpsilon(self.ncc_epsilon));
        }
        if self.smooth_weight < 0.0 {
            return Err(LossConfigError::BadWeight(self.smooth_weight));
        }
        Ok(())
    }
}

fn shape_guard(g: &Graph, a: NodeId, b: NodeId, what: &str) -> Result<(), GraphError> {
    if g.shape(a) != g.shape(b) {
        return Err(GraphError::Shape {
            context: what.to_string(),
            source: crate::tensor::TensorError::ShapeMismatch {
                left: g.shape(a).to_vec(),
                right: g.shape(b).to_vec(),
                context: what.to_string(),
            },
        });
    }
    Ok(())
}

/// Negated mean of the squared local correlation over all voxels whose
/// window lies fully inside the volume. Windowed sums come from box-filter
/// convolutions with a constant ones kernel, so the whole expression is
/// differentiable w.r.t. both images. Minimizing drives alignment; the value
/// lies in [-1, 0].
pub fn local_ncc_loss(
    g: &mut Graph,
    x_ab: NodeId,
    x_b: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId, GraphError> {
    shape_guard(g, x_ab, x_b, "local_ncc_loss inputs")?;
    let shape = g.shape(x_ab).to_vec();
    if shape.len() != 5 {
        return Err(GraphError::Shape {
            context: "local_ncc_loss expects [n, c, z, y, x]".into(),
            source: crate::tensor::TensorError::InvalidShape {
                shape,
                reason: "rank must be 5".into(),
            },
        });
    }
    let w = cfg.ncc_window;
    let (n, c, z, y, x) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if w > z || w > y || w > x {
        return Err(GraphError::Shape {
            context: "ncc window larger than volume".into(),
            source: crate::tensor::TensorError::InvalidShape {
                shape: vec![w],
                reason: format!("window {w} exceeds extents ({z}, {y}, {x})"),
            },
        });
    }
    let pad = w / 2;
    let inv_n3 = 1.0 / (w * w * w) as f64;

    let ones = g.constant(Tensor::full(&[1, c, w, w, w], 1.0));
    let boxed = |node: NodeId, g: &mut Graph| g.conv3d(node, ones, None, 1, pad);

    let s_b = boxed(x_b, g)?;
    let s_ab = boxed(x_ab, g)?;
    let b_sq = g.square(x_b);
    let ab_sq = g.square(x_ab);
    let cross = g.mul(x_b, x_ab)?;
    let s_bb = boxed(b_sq, g)?;
    let s_abab = boxed(ab_sq, g)?;
    let s_cross = boxed(cross, g)?;

    // cov = s_cross - s_b * s_ab / n^3
    let prod_means = g.mul(s_b, s_ab)?;
    let prod_means = g.scale(prod_means, inv_n3);
    let cov = g.sub(s_cross, prod_means)?;

    // var_b = s_bb - s_b^2 / n^3 (and same for the warped image)
    let sb2 = g.square(s_b);
    let sb2 = g.scale(sb2, inv_n3);
    let var_b = g.sub(s_bb, sb2)?;
    let sab2 = g.square(s_ab);
    let sab2 = g.scale(sab2, inv_n3);
    let var_ab = g.sub(s_abab, sab2)?;

    let num = g.square(cov);
    let den = g.mul(var_b, var_ab)?;
    let eps = g.scalar_const(cfg.ncc_epsilon);
    let den = g.add(den, eps)?;
    let cc2 = g.div(num, den)?;

    // Average only over voxels with a fully interior window.
    let mask = interior_mask(&shape, pad);
    let count = n as f64 * c as f64 * ((z - 2 * pad) * (y - 2 * pad) * (x - 2 * pad)) as f64;
    let mask = g.constant(mask);
    let masked = g.mul(cc2, mask)?;
    let total = g.sum(masked);
    Ok(g.scale(total, -1.0 / count))
}

fn interior_mask(shape: &[usize], pad: usize) -> Tensor {
    let (n, c, z, y, x) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    Tensor::from_fn(shape, |i| {
        let xi = i % x;
        let yi = (i / x) % y;
        let zi = (i / (x * y)) % z;
        let _ = (n, c);
        let inside = zi >= pad
            && zi + pad < z
            && yi >= pad
            && yi + pad < y
            && xi >= pad
            && xi + pad < x;
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

/// Mean squared Frobenius norm of the field's spatial Jacobian, forward
/// differences with a zero derivative at the far boundary.
pub fn smoothness_loss(g: &mut Graph, dvf: NodeId) -> Result<NodeId, GraphError> {
    let shape = g.shape(dvf).to_vec();
    if shape.len() != 5 || shape[1] != 3 {
        return Err(GraphError::Shape {
            context: "smoothness_loss expects [n, 3, z, y, x]".into(),
            source: crate::tensor::TensorError::InvalidShape {
                shape,
                reason: "need a 3-channel displacement field".into(),
            },
        });
    }
    let voxels = (shape[0] * shape[2] * shape[3] * shape[4]) as f64;
    let mut acc: Option<NodeId> = None;
    for axis in 0..3 {
        let d = g.forward_diff(dvf, axis)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    Ok(g.scale(acc.expect("three axes"), 1.0 / voxels))
}

/// Mean squared difference between the restored and original volumes.
pub fn restoration_mse(
    g: &mut Graph,
    restored: NodeId,
    original: NodeId,
) -> Result<NodeId, GraphError> {
    shape_guard(g, restored, original, "restoration_mse inputs")?;
    let d = g.sub(restored, original)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// ncc + smooth_weight * smooth.
pub fn gvsl_total(
    g: &mut Graph,
    ncc: NodeId,
    smooth: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId, GraphError> {
    let weighted = g.scale(smooth, cfg.smooth_weight);
    g.add(ncc, weighted)
}
