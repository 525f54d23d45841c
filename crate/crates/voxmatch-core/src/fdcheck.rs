//! Central-difference validation of analytic gradients, per op kind.
//!
//! Each kind gets a small fixed scenario (inputs drawn from a seeded RNG,
//! constraints such as "away from the activation kink" built in), a scalar
//! loss formed as a randomly weighted sum of the op output, and an
//! elementwise comparison of backpropagated against numeric derivatives with
//! rel_err = |a - n| / max(1, |a|, |n|).

use std::sync::Arc;

use crate::graph::{Bindings, Graph, GraphError, NodeId};
use crate::losses::{self, LossConfig};
use crate::rng::DetRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Op kinds covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdOpKind {
    Add,
    Sub,
    Mul,
    Div,
    Square,
    Sqrt,
    Negate,
    Scale,
    Sum,
    Mean,
    Concat,
    Conv3dStride1,
    Conv3dStride2,
    Upsample2,
    Linear,
    LeakyRelu,
    Sigmoid,
    Tanh,
    GroupNorm,
    GlobalAvgPool,
    WarpSource,
    WarpDvf,
    AffineMatrix,
    AffineToDvf,
    ForwardDiff,
    SoftmaxCrossEntropy,
    NccLoss,
    SmoothnessLoss,
    RestorationMse,
}

impl FdOpKind {
    pub const ALL: [FdOpKind; 29] = [
        FdOpKind::Add,
        FdOpKind::Sub,
        FdOpKind::Mul,
        FdOpKind::Div,
        FdOpKind::Square,
        FdOpKind::Sqrt,
        FdOpKind::Negate,
        FdOpKind::Scale,
        FdOpKind::Sum,
        FdOpKind::Mean,
        FdOpKind::Concat,
        FdOpKind::Conv3dStride1,
        FdOpKind::Conv3dStride2,
        FdOpKind::Upsample2,
        FdOpKind::Linear,
        FdOpKind::LeakyRelu,
        FdOpKind::Sigmoid,
        FdOpKind::Tanh,
        FdOpKind::GroupNorm,
        FdOpKind::GlobalAvgPool,
        FdOpKind::WarpSource,
        FdOpKind::WarpDvf,
        FdOpKind::AffineMatrix,
        FdOpKind::AffineToDvf,
        FdOpKind::ForwardDiff,
        FdOpKind::SoftmaxCrossEntropy,
        FdOpKind::NccLoss,
        FdOpKind::SmoothnessLoss,
        FdOpKind::RestorationMse,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FdOpKind::Add => "add",
            FdOpKind::Sub => "sub",
            FdOpKind::Mul => "mul",
            FdOpKind::Div => "div",
            FdOpKind::Square => "square",
            FdOpKind::Sqrt => "sqrt",
            FdOpKind::Negate => "negate",
            FdOpKind::Scale => "scale",
            FdOpKind::Sum => "sum",
            FdOpKind::Mean => "mean",
            FdOpKind::Concat => "concat",
            FdOpKind::Conv3dStride1 => "conv3d_stride1",
            FdOpKind::Conv3dStride2 => "conv3d_stride2",
            FdOpKind::Upsample2 => "upsample2",
            FdOpKind::Linear => "linear",
            FdOpKind::LeakyRelu => "leaky_relu",
            FdOpKind::Sigmoid => "sigmoid",
            FdOpKind::Tanh => "tanh",
            FdOpKind::GroupNorm => "group_norm",
            FdOpKind::GlobalAvgPool => "global_average_pool",
            FdOpKind::WarpSource => "warp_source",
            FdOpKind::WarpDvf => "warp_dvf",
            FdOpKind::AffineMatrix => "affine_matrix",
            FdOpKind::AffineToDvf => "affine_to_dvf",
            FdOpKind::ForwardDiff => "forward_diff",
            FdOpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            FdOpKind::NccLoss => "local_ncc_loss",
            FdOpKind::SmoothnessLoss => "smoothness_loss",
            FdOpKind::RestorationMse => "restoration_mse",
        }
    }
}

fn rand_tensor(rng: &mut DetRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Reduces a non-scalar op output to a scalar loss via a fixed random
/// weighting, so permutation-style gradient bugs do not cancel out.
fn weighted_loss(
    g: &mut Graph,
    out: NodeId,
    rng: &mut DetRng,
) -> Result<NodeId, GraphError> {
    if g.shape(out).iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let w = rand_tensor(rng, &g.shape(out).to_vec(), -1.0, 1.0);
    let wc = g.constant(w);
    let prod = g.mul(out, wc)?;
    Ok(g.sum(prod))
}

/// Compares analytic to central-difference gradients of `loss` w.r.t. the
/// named bindings. All named tensors must be parameters of the graph.
pub fn check_loss_gradients(
    g: &Graph,
    bindings: &Bindings,
    loss: NodeId,
    wrt: &[&str],
    h: f64,
    tol: f64,
) -> Result<FdReport, GraphError> {
    let exec = g.evaluate(bindings)?;
    let grads = exec.backpropagate(loss)?;
    let analytic = grads.params(g);

    let mut max_rel = 0.0_f64;
    let mut checked = 0;
    for name in wrt {
        let base = bindings
            .get(name)
            .ok_or_else(|| GraphError::UnboundInput {
                name: name.to_string(),
            })?
            .clone();
        let a = analytic.get(*name).ok_or_else(|| GraphError::UnboundInput {
            name: name.to_string(),
        })?;
        for i in 0..base.numel() {
            let mut plus = bindings.clone();
            let mut t = base.clone();
            t.data_mut()[i] += h;
            plus.set(*name, t);
            let lp = g.evaluate(&plus)?.value(loss).item();

            let mut minus = bindings.clone();
            let mut t = base.clone();
            t.data_mut()[i] -= h;
            minus.set(*name, t);
            let lm = g.evaluate(&minus)?.value(loss).item();

            let numeric = (lp - lm) / (2.0 * h);
            let av = a.data()[i];
            let rel = (av - numeric).abs() / 1.0_f64.max(av.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(FdReport {
        op: String::new(),
        max_rel_err: max_rel,
        tol,
        checked,
        pass: max_rel <= tol,
    })
}

/// Builds the standard scenario for an op kind and runs the check.
pub fn finite_difference_check(
    kind: FdOpKind,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<FdReport, GraphError> {
    assert!(h > 0.0 && h <= 1e-2, "step must lie in (0, 1e-2]");
    let mut rng = DetRng::from_seed_u64(seed ^ 0x5eed_f00d);
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut wrt: Vec<String> = Vec::new();

    let mkparam = |g: &mut Graph,
                       bindings: &mut Bindings,
                       wrt: &mut Vec<String>,
                       rng: &mut DetRng,
                       name: &str,
                       shape: &[usize],
                       lo: f64,
                       hi: f64|
     -> Result<NodeId, GraphError> {
        let id = g.param(name, shape.to_vec())?;
        bindings.set(name, rand_tensor(rng, shape, lo, hi));
        wrt.push(name.to_string());
        Ok(id)
    };

    let out = match kind {
        FdOpKind::Add | FdOpKind::Sub | FdOpKind::Mul => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], -1.0, 1.0)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "b", &[2, 3], -1.0, 1.0)?;
            match kind {
                FdOpKind::Add => g.add(a, b)?,
                FdOpKind::Sub => g.sub(a, b)?,
                _ => g.mul(a, b)?,
            }
        }
        FdOpKind::Div => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], -1.0, 1.0)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "b", &[2, 3], 0.5, 1.5)?;
            g.div(a, b)?
        }
        FdOpKind::Square => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], -1.0, 1.0)?;
            g.square(a)
        }
        FdOpKind::Sqrt => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], 0.5, 2.0)?;
            g.sqrt(a)
        }
        FdOpKind::Negate => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], -1.0, 1.0)?;
            g.neg(a)
        }
        FdOpKind::Scale => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], -1.0, 1.0)?;
            g.scale(a, 2.5)
        }
        FdOpKind::Sum => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], -1.0, 1.0)?;
            g.sum(a)
        }
        FdOpKind::Mean => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[2, 3], -1.0, 1.0)?;
            g.mean(a)
        }
        FdOpKind::Concat => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "a", &[1, 2, 2, 2, 2], -1.0, 1.0)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "b", &[1, 3, 2, 2, 2], -1.0, 1.0)?;
            g.concat(&[a, b], 1)?
        }
        FdOpKind::Conv3dStride1 => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[1, 2, 4, 4, 4], -1.0, 1.0)?;
            let w = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "w", &[3, 2, 3, 3, 3], -0.5, 0.5)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "b", &[3], -0.5, 0.5)?;
            g.conv3d(x, w, Some(b), 1, 1)?
        }
        FdOpKind::Conv3dStride2 => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[1, 2, 6, 6, 6], -1.0, 1.0)?;
            let w = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "w", &[2, 2, 3, 3, 3], -0.5, 0.5)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "b", &[2], -0.5, 0.5)?;
            g.conv3d(x, w, Some(b), 2, 1)?
        }
        FdOpKind::Upsample2 => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[1, 2, 3, 3, 3], -1.0, 1.0)?;
            g.upsample2(x)?
        }
        FdOpKind::Linear => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[2, 5], -1.0, 1.0)?;
            let w = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "w", &[3, 5], -0.5, 0.5)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "b", &[3], -0.5, 0.5)?;
            g.linear(x, w, b)?
        }
        FdOpKind::LeakyRelu => {
            // Inputs bounded away from the kink by more than 2h.
            let id = g.param("x", vec![2, 4])?;
            let t = Tensor::from_fn(&[2, 4], |_| {
                let mag = rng.uniform(0.1, 1.0);
                if rng.next_f64() < 0.5 {
                    -mag
                } else {
                    mag
                }
            });
            bindings.set("x", t);
            wrt.push("x".into());
            g.leaky_relu(id, 0.01)
        }
        FdOpKind::Sigmoid => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[2, 3], -2.0, 2.0)?;
            g.sigmoid(a)
        }
        FdOpKind::Tanh => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[2, 3], -2.0, 2.0)?;
            g.tanh(a)
        }
        FdOpKind::GroupNorm => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[1, 8, 4, 4, 4], -1.0, 1.0)?;
            let gamma = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "gamma", &[8], 0.5, 1.5)?;
            let beta = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "beta", &[8], -0.5, 0.5)?;
            g.group_norm(x, gamma, beta, 4, 1e-5)?
        }
        FdOpKind::GlobalAvgPool => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[1, 3, 2, 2, 2], -1.0, 1.0)?;
            g.global_avg_pool(x)?
        }
        FdOpKind::WarpSource | FdOpKind::WarpDvf => {
            let src = g.param("src", vec![1, 2, 5, 5, 5])?;
            bindings.set("src", rand_tensor(&mut rng, &[1, 2, 5, 5, 5], 0.0, 1.0));
            let dvf = g.param("dvf", vec![1, 3, 5, 5, 5])?;
            // Fractional parts in [0.25, 0.45]: sample coordinates stay well
            // clear of the integer-lattice kinks.
            let t = Tensor::from_fn(&[1, 3, 5, 5, 5], |_| {
                let s = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                s * rng.uniform(0.25, 0.45)
            });
            bindings.set("dvf", t);
            match kind {
                FdOpKind::WarpSource => wrt.push("src".into()),
                _ => wrt.push("dvf".into()),
            }
            g.warp(src, dvf)?
        }
        FdOpKind::AffineMatrix => {
            let id = g.param("p", vec![15])?;
            let mut vals = vec![0.0; 15];
            for v in vals.iter_mut().take(3) {
                *v = rng.uniform(-0.3, 0.3);
            }
            for v in vals.iter_mut().take(6).skip(3) {
                *v = rng.uniform(-2.0, 2.0);
            }
            for v in vals.iter_mut().take(9).skip(6) {
                *v = rng.uniform(0.8, 1.2);
            }
            for v in vals.iter_mut().skip(9) {
                *v = rng.uniform(-0.1, 0.1);
            }
            bindings.set("p", Tensor::new(vec![15], vals).expect("params"));
            wrt.push("p".into());
            g.affine_matrix(id)?
        }
        FdOpKind::AffineToDvf => {
            let id = g.param("m", vec![4, 4])?;
            let mut vals = vec![0.0; 16];
            for (i, v) in vals.iter_mut().enumerate() {
                let (r, c) = (i / 4, i % 4);
                *v = if r == c { 1.0 } else { 0.0 };
                if r < 3 {
                    *v += rng.uniform(-0.2, 0.2);
                }
            }
            bindings.set("m", Tensor::new(vec![4, 4], vals).expect("matrix"));
            wrt.push("m".into());
            g.affine_to_dvf(id, [3, 4, 5])?
        }
        FdOpKind::ForwardDiff => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x", &[1, 2, 4, 4, 4], -1.0, 1.0)?;
            let d0 = g.forward_diff(x, 0)?;
            let d1 = g.forward_diff(x, 1)?;
            let d2 = g.forward_diff(x, 2)?;
            let s = g.add(d0, d1)?;
            g.add(s, d2)?
        }
        FdOpKind::SoftmaxCrossEntropy => {
            let x = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "logits", &[1, 3, 2, 2, 2], -1.0, 1.0)?;
            let labels: Vec<i32> = (0..8).map(|_| rng.uniform_usize(0, 3) as i32).collect();
            g.softmax_cross_entropy(x, Arc::new(labels))?
        }
        FdOpKind::NccLoss => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x_ab", &[1, 1, 7, 7, 7], 0.0, 1.0)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "x_b", &[1, 1, 7, 7, 7], 0.0, 1.0)?;
            let cfg = LossConfig {
                ncc_window: 3,
                ..LossConfig::default()
            };
            losses::local_ncc_loss(&mut g, a, b, &cfg)?
        }
        FdOpKind::SmoothnessLoss => {
            let d = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "dvf", &[1, 3, 4, 4, 4], -1.0, 1.0)?;
            losses::smoothness_loss(&mut g, d)?
        }
        FdOpKind::RestorationMse => {
            let a = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "restored", &[1, 1, 3, 3, 3], 0.0, 1.0)?;
            let b = mkparam(&mut g, &mut bindings, &mut wrt, &mut rng, "original", &[1, 1, 3, 3, 3], 0.0, 1.0)?;
            losses::restoration_mse(&mut g, a, b)?
        }
    };

    let loss = weighted_loss(&mut g, out, &mut rng)?;
    let wrt_refs: Vec<&str> = wrt.iter().map(|s| s.as_str()).collect();
    let mut report = check_loss_gradients(&g, &bindings, loss, &wrt_refs, h, tol)?;
    report.op = kind.name().to_string();
    Ok(report)
}
