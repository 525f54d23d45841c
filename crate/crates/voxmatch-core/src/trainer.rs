//! The joint pre-training loop and a network-free classical registration
//! mode optimizing the same objective.
//!
//! One training step, per batch member: corrupt x_A by a sampled appearance
//! transform, run both images through the shared backbone, restore x_A from
//! the corrupted features (restoration error against the original), predict
//! the affine values from the pooled global features, align A's local
//! features by the affine field, predict the local displacement, fuse the
//! two fields, warp the original x_A, and score alignment plus field
//! smoothness. The backbone receives gradients from both objectives; the
//! matching head only from alignment; the restoration head only from
//! restoration.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{
    affine_matrix_from_params, compose_dvf, AffineParams, Dvf, GeometryError, VolumeGrid,
};
use crate::graph::{Bindings, Graph, GraphError, NodeId};
use crate::io::{self, IoError, LoadedDataset, Split};
use crate::losses::{self, LossConfig, LossConfigError};
use crate::models::{
    self, BackboneArch, ModelError, ModelWeights, ParamNodes,
};
use crate::optim::{adam_update, AdamHyper};
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::transforms::{self, TransformConfig, TransformError};
use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}: {source}")]
    NonFinite {
        iteration: u64,
        source: GraphError,
    },
    #[error("training split has {available} volumes, step needs {needed} distinct ones")]
    DatasetTooSmall { available: usize, needed: usize },
    #[error("volumes share no common grid: {0:?} vs {1:?}")]
    GridMismatch([usize; 3], [usize; 3]),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Loss(#[from] LossConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Which field the smoothness penalty sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothTarget {
    /// The fused field (default).
    Fused,
    /// Only the local deformable component.
    LocalOnly,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossConfig,
    /// Iterations at the start trained on the restoration loss alone.
    pub warmup_restoration_iters: u64,
    /// When false, the restoration loss is reported but neither optimized
    /// nor routed into any update (matching-only training).
    pub restoration_enabled: bool,
    pub smooth_target: SmoothTarget,
    pub seed: u64,
    /// Save a resumable checkpoint every this many iterations (0 = never).
    pub checkpoint_every: u64,
    pub arch: BackboneArch,
    pub transforms: TransformConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch: 2,
            lr: 1e-4,
            loss: LossConfig::default(),
            warmup_restoration_iters: 0,
            restoration_enabled: true,
            smooth_target: SmoothTarget::Fused,
            seed: 0,
            checkpoint_every: 0,
            arch: BackboneArch::default(),
            transforms: TransformConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iter: u64,
    pub ncc: f64,
    pub smooth: f64,
    pub mse: f64,
    pub total: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "iter,ncc,smooth,mse,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.ncc, self.smooth, self.mse, self.total
        )
    }

    pub fn parse_csv_row(row: &str) -> Option<StepMetrics> {
        let mut parts = row.split(',');
        Some(StepMetrics {
            iter: parts.next()?.parse().ok()?,
            ncc: parts.next()?.parse().ok()?,
            smooth: parts.next()?.parse().ok()?,
            mse: parts.next()?.parse().ok()?,
            total: parts.next()?.parse().ok()?,
        })
    }
}

#[derive(Debug)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub rng: DetRng,
    pub iteration: u64,
    pub history: Vec<StepMetrics>,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self, TrainError> {
        Ok(Self {
            weights: models::init_weights(cfg.seed, &cfg.arch)?,
            rng: DetRng::from_seed_u64(cfg.seed).substream(1),
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: io::Checkpoint) -> Self {
        Self {
            rng: DetRng::from_state(&ckpt.rng),
            iteration: ckpt.iteration,
            weights: ckpt.weights,
            history: Vec::new(),
        }
    }

    pub fn to_checkpoint(&self) -> io::Checkpoint {
        io::Checkpoint {
            weights: self.weights.clone(),
            rng: self.rng.state(),
            iteration: self.iteration,
        }
    }
}

/// The static step graph: built once per (arch, extent, batch, loss config).
pub struct TrainGraph {
    pub graph: Graph,
    pub batch: usize,
    pub extent: usize,
    loss_joint: NodeId,
    loss_gvsl: NodeId,
    loss_mse: NodeId,
}

/// Batch-mean of scalar nodes.
fn mean_of(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId, GraphError> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

pub fn build_train_graph(
    arch: &BackboneArch,
    extent: usize,
    batch: usize,
    loss_cfg: &LossConfig,
    smooth_target: SmoothTarget,
) -> Result<TrainGraph, TrainError> {
    loss_cfg.validate()?;
    let mut g = Graph::new();
    let mut pn = ParamNodes::new();
    let shape = vec![1, 1, extent, extent, extent];
    let grid = [extent, extent, extent];
    let mut nccs = Vec::new();
    let mut smooths = Vec::new();
    let mut mses = Vec::new();
    for i in 0..batch {
        let xat = g.input(&format!("x_a_t{i}"), shape.clone())?;
        let xa = g.input(&format!("x_a{i}"), shape.clone())?;
        let xb = g.input(&format!("x_b{i}"), shape.clone())?;
        let (f_ga, f_la) = models::backbone_forward(&mut g, &mut pn, arch, xat)?;
        let (f_gb, f_lb) = models::backbone_forward(&mut g, &mut pn, arch, xb)?;
        let restored = models::restoration_head_forward(&mut g, &mut pn, arch, f_la)?;
        let mse = losses::restoration_mse(&mut g, restored, xa)?;
        let head = models::affine_head_forward(&mut g, &mut pn, arch, f_ga, f_gb)?;
        let aff = g.affine_to_dvf(head.matrix, grid)?;
        let f_la_aligned = g.warp(f_la, aff)?;
        let psi_l = models::deformable_head_forward(&mut g, &mut pn, arch, f_la_aligned, f_lb)?;
        let psi_l_at = g.warp(psi_l, aff)?;
        let psi = g.add(psi_l_at, aff)?;
        // Alg. line: the original (untransformed) image is aligned.
        let x_ab = g.warp(xa, psi)?;
        let ncc = losses::local_ncc_loss(&mut g, x_ab, xb, loss_cfg)?;
        let smooth = match smooth_target {
            SmoothTarget::Fused => losses::smoothness_loss(&mut g, psi)?,
            SmoothTarget::LocalOnly => losses::smoothness_loss(&mut g, psi_l)?,
        };
        nccs.push(ncc);
        smooths.push(smooth);
        mses.push(mse);
        if i == 0 {
            g.mark_output("psi", psi);
            g.mark_output("params15", head.params15);
            g.mark_output("x_ab", x_ab);
        }
    }
    let ncc = mean_of(&mut g, &nccs)?;
    let smooth = mean_of(&mut g, &smooths)?;
    let mse = mean_of(&mut g, &mses)?;
    let gvsl = losses::gvsl_total(&mut g, ncc, smooth, loss_cfg)?;
    let joint = g.add(gvsl, mse)?;
    g.mark_output("ncc", ncc);
    g.mark_output("smooth", smooth);
    g.mark_output("mse", mse);
    Ok(TrainGraph {
        graph: g,
        batch,
        extent,
        loss_joint: joint,
        loss_gvsl: gvsl,
        loss_mse: mse,
    })
}

fn update_namespaces(
    weights: &mut ModelWeights,
    grads: &std::collections::BTreeMap<String, Tensor>,
    namespaces: &[&str],
    lr: f64,
) -> Result<(), TrainError> {
    let hyper = AdamHyper::default();
    let names: Vec<String> = weights
        .tensors
        .keys()
        .filter(|n| namespaces.iter().any(|ns| n.starts_with(ns)))
        .cloned()
        .collect();
    for name in names {
        let grad = &grads[&name];
        let param = weights.tensors.get_mut(&name).expect("known param");
        let state = weights.adam.get_mut(&name).expect("known state");
        adam_update(param, grad, state, lr, &hyper).map_err(|e| {
            TrainError::Graph(GraphError::Shape {
                context: format!("adam update of {name}"),
                source: e,
            })
        })?;
    }
    Ok(())
}

/// One optimization step over a batch of (x_A, x_B) pairs.
pub fn gvsl_train_step(
    state: &mut TrainState,
    tg: &TrainGraph,
    cfg: &TrainConfig,
    pairs: &[(&Volume, &Volume)],
) -> Result<StepMetrics, TrainError> {
    assert_eq!(pairs.len(), tg.batch, "batch size fixed by the graph");
    let expected = [tg.extent; 3];
    for (xa, xb) in pairs {
        if xa.extents() != expected || xb.extents() != expected {
            return Err(TrainError::GridMismatch(xa.extents(), xb.extents()));
        }
    }
    let grid = VolumeGrid::new(expected).expect("extent >= 2");
    let mut bindings = Bindings::new();
    state.weights.bind_into(&mut bindings);
    for (i, (xa, xb)) in pairs.iter().enumerate() {
        let specs = transforms::sample_transforms(&mut state.rng, &grid, &cfg.transforms)?;
        let xat = transforms::apply_transforms(xa, &specs)?;
        bindings.set(format!("x_a_t{i}"), xat.to_tensor5());
        bindings.set(format!("x_a{i}"), xa.to_tensor5());
        bindings.set(format!("x_b{i}"), xb.to_tensor5());
    }
    let exec = tg.graph.evaluate(&bindings).map_err(|source| TrainError::NonFinite {
        iteration: state.iteration + 1,
        source,
    })?;

    let in_warmup = state.iteration < cfg.warmup_restoration_iters;
    let (root, namespaces): (NodeId, &[&str]) = if !cfg.restoration_enabled {
        (tg.loss_gvsl, &["backbone/", "zmatch."])
    } else if in_warmup {
        (tg.loss_mse, &["backbone/", "restore/"])
    } else {
        (tg.loss_joint, &["backbone/", "zmatch.", "restore/"])
    };
    let grads = exec.backpropagate(root)?.params(&tg.graph);
    update_namespaces(&mut state.weights, &grads, namespaces, cfg.lr)?;

    let ncc = exec.output("ncc")?.item();
    let smooth = exec.output("smooth")?.item();
    let mse = exec.output("mse")?.item();
    state.iteration += 1;
    let metrics = StepMetrics {
        iter: state.iteration,
        ncc,
        smooth,
        mse,
        total: ncc + cfg.loss.smooth_weight * smooth + mse,
    };
    state.history.push(metrics);
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub history: Vec<StepMetrics>,
}

/// Runs the outer loop over a dataset's training split: uniform pair
/// sampling without replacement per step, a CSV metrics row per iteration,
/// and final plus best-total checkpoints in `out_dir`. Pass `resume` to
/// continue from a saved checkpoint bit-exactly.
pub fn pretrain(
    dataset: &LoadedDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutput, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let train_idx = dataset.split_indices(Split::Train);
    let needed = 2 * cfg.batch;
    if train_idx.len() < needed {
        return Err(TrainError::DatasetTooSmall {
            available: train_idx.len(),
            needed,
        });
    }
    let extent = dataset.manifest.extent;
    let tg = build_train_graph(&cfg.arch, extent, cfg.batch, &cfg.loss, cfg.smooth_target)?;

    let mut state = match resume {
        Some(path) => {
            let ckpt = io::load_checkpoint(path)?;
            io::verify_arch(&ckpt, &cfg.arch)?;
            TrainState::from_checkpoint(ckpt)
        }
        None => TrainState::fresh(cfg)?,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut log = if resume.is_some() && metrics_path.exists() {
        OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|source| IoError::Io {
                path: metrics_path.clone(),
                source,
            })?
    } else {
        let mut f = std::fs::File::create(&metrics_path).map_err(|source| IoError::Io {
            path: metrics_path.clone(),
            source,
        })?;
        writeln!(f, "{}", StepMetrics::CSV_HEADER).map_err(|source| IoError::Io {
            path: metrics_path.clone(),
            source,
        })?;
        f
    };

    let mut best_total = f64::INFINITY;
    let mut best: Option<io::Checkpoint> = None;
    while state.iteration < cfg.iterations {
        let picks = state.rng.sample_distinct(train_idx.len(), needed);
        let pairs: Vec<(&Volume, &Volume)> = (0..cfg.batch)
            .map(|i| {
                (
                    &dataset.entries[train_idx[picks[2 * i]]].volume,
                    &dataset.entries[train_idx[picks[2 * i + 1]]].volume,
                )
            })
            .collect();
        let metrics = gvsl_train_step(&mut state, &tg, cfg, &pairs)?;
        writeln!(log, "{}", metrics.csv_row()).map_err(|source| IoError::Io {
            path: metrics_path.clone(),
            source,
        })?;
        if metrics.total < best_total {
            best_total = metrics.total;
            best = Some(state.to_checkpoint());
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            io::save_checkpoint(&out_dir.join("latest.gvck"), &state.to_checkpoint())?;
        }
    }
    log.flush().map_err(|source| IoError::Io {
        path: metrics_path.clone(),
        source,
    })?;

    let final_checkpoint = out_dir.join("final.gvck");
    io::save_checkpoint(&final_checkpoint, &state.to_checkpoint())?;
    let best_checkpoint = out_dir.join("best.gvck");
    io::save_checkpoint(&best_checkpoint, best.as_ref().unwrap_or(&state.to_checkpoint()))?;
    Ok(PretrainOutput {
        final_checkpoint,
        best_checkpoint,
        metrics_path,
        history: state.history,
    })
}

/// Registration graph for inference: predicts the fused field for one pair.
pub struct RegisterGraph {
    pub graph: Graph,
    pub extent: usize,
}

pub fn build_register_graph(arch: &BackboneArch, extent: usize) -> Result<RegisterGraph, TrainError> {
    let mut g = Graph::new();
    let mut pn = ParamNodes::new();
    let shape = vec![1, 1, extent, extent, extent];
    let grid = [extent, extent, extent];
    let xa = g.input("x_a", shape.clone())?;
    let xb = g.input("x_b", shape)?;
    let (f_ga, f_la) = models::backbone_forward(&mut g, &mut pn, arch, xa)?;
    let (f_gb, f_lb) = models::backbone_forward(&mut g, &mut pn, arch, xb)?;
    let head = models::affine_head_forward(&mut g, &mut pn, arch, f_ga, f_gb)?;
    let aff = g.affine_to_dvf(head.matrix, grid)?;
    let f_la_aligned = g.warp(f_la, aff)?;
    let psi_l = models::deformable_head_forward(&mut g, &mut pn, arch, f_la_aligned, f_lb)?;
    let psi_l_at = g.warp(psi_l, aff)?;
    let psi = g.add(psi_l_at, aff)?;
    let x_ab = g.warp(xa, psi)?;
    g.mark_output("params15", head.params15);
    g.mark_output("psi", psi);
    g.mark_output("x_ab", x_ab);
    Ok(RegisterGraph { graph: g, extent })
}

/// Runs the trained matching head on a pair: the predicted affine values,
/// the fused displacement field, and the aligned moving image.
pub fn network_register(
    weights: &ModelWeights,
    xa: &Volume,
    xb: &Volume,
) -> Result<(AffineParams, Dvf, Volume), TrainError> {
    if xa.extents() != xb.extents() {
        return Err(TrainError::GridMismatch(xa.extents(), xb.extents()));
    }
    let extent = xa.extents()[0];
    let rg = build_register_graph(&weights.arch, extent)?;
    let mut bindings = Bindings::new();
    weights.bind_into(&mut bindings);
    bindings.set("x_a", xa.to_tensor5());
    bindings.set("x_b", xb.to_tensor5());
    let exec = rg.graph.evaluate(&bindings)?;
    let params = AffineParams::from_vec15(exec.output("params15")?.data());
    let dvf = Dvf::from_tensor(exec.output("psi")?)?;
    let warped = Volume::from_tensor(exec.output("x_ab")?, xa.spacing)?;
    Ok((params, dvf, warped))
}

// ---------------------------------------------------------------------------
// classical (network-free) registration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassicalConfig {
    pub affine_iters: usize,
    pub deform_iters: usize,
    pub lr_affine: f64,
    pub lr_deform: f64,
    pub loss: LossConfig,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            affine_iters: 150,
            deform_iters: 100,
            lr_affine: 0.05,
            lr_deform: 0.1,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassicalTrace {
    /// Alignment loss of the identity transform.
    pub ncc_initial: f64,
    /// Per-iteration alignment loss of the affine stage.
    pub ncc_affine: Vec<f64>,
    /// Best alignment loss reached in the affine stage.
    pub ncc_affine_best: f64,
    /// Per-iteration combined loss of the deformable stage.
    pub total_deform: Vec<f64>,
    /// Alignment loss of the returned solution.
    pub ncc_final: f64,
    /// Mean magnitude of the local deformation component returned.
    pub mean_local_disp: f64,
}

#[derive(Debug, Clone)]
pub struct ClassicalResult {
    pub affine: AffineParams,
    /// Fused field of the returned solution.
    pub dvf: Dvf,
    pub trace: ClassicalTrace,
}

/// Stage 1 optimizes the 15 affine values directly by Adam on the alignment
/// loss; stage 2 freezes the affine and optimizes a free per-voxel field on
/// alignment plus smoothness of the fused field. Both stages return their
/// best-loss iterate, so the final loss never exceeds the initial one.
pub fn classical_register(
    xa: &Volume,
    xb: &Volume,
    cfg: &ClassicalConfig,
) -> Result<ClassicalResult, TrainError> {
    if xa.extents() != xb.extents() {
        return Err(TrainError::GridMismatch(xa.extents(), xb.extents()));
    }
    cfg.loss.validate()?;
    let extents = xa.extents();
    let grid = [extents[0], extents[1], extents[2]];
    let hyper = AdamHyper::default();

    // Stage 1: affine only.
    let mut g = Graph::new();
    let part_shapes: [(&str, usize); 4] =
        [("rot", 3), ("trans", 3), ("scale_raw", 3), ("shear", 6)];
    let mut part_nodes = Vec::new();
    for (name, n) in part_shapes {
        part_nodes.push(g.param(&format!("opt/{name}"), vec![1, n])?);
    }
    let one = g.scalar_const(1.0);
    let scale_mapped = g.add(part_nodes[2], one)?;
    let params15 = g.concat(&[part_nodes[0], part_nodes[1], scale_mapped, part_nodes[3]], 1)?;
    let matrix = g.affine_matrix(params15)?;
    let aff = g.affine_to_dvf(matrix, grid)?;
    let xa_const = g.constant(xa.to_tensor5());
    let xb_const = g.constant(xb.to_tensor5());
    let x_ab = g.warp(xa_const, aff)?;
    let ncc = losses::local_ncc_loss(&mut g, x_ab, xb_const, &cfg.loss)?;
    g.mark_output("ncc", ncc);

    let mut values: std::collections::BTreeMap<String, Tensor> = part_shapes
        .iter()
        .map(|(name, n)| (format!("opt/{name}"), Tensor::zeros(&[1, *n])))
        .collect();
    let mut adam: std::collections::BTreeMap<String, crate::optim::AdamState> = values
        .iter()
        .map(|(k, t)| (k.clone(), crate::optim::AdamState::new(t.shape())))
        .collect();

    let mut ncc_trace = Vec::with_capacity(cfg.affine_iters + 1);
    let mut best_ncc = f64::INFINITY;
    let mut best_params = values.clone();
    for it in 0..=cfg.affine_iters {
        let mut bindings = Bindings::new();
        for (k, v) in &values {
            bindings.set(k.clone(), v.clone());
        }
        let exec = g.evaluate(&bindings).map_err(|source| TrainError::NonFinite {
            iteration: it as u64,
            source,
        })?;
        let loss = exec.output("ncc")?.item();
        ncc_trace.push(loss);
        if loss < best_ncc {
            best_ncc = loss;
            best_params = values.clone();
        }
        if it == cfg.affine_iters {
            break;
        }
        let grads = exec.backpropagate(ncc)?.params(&g);
        for (k, v) in values.iter_mut() {
            adam_update(v, &grads[k], adam.get_mut(k).unwrap(), cfg.lr_affine, &hyper)
                .expect("shapes fixed");
        }
    }
    let ncc_initial = ncc_trace[0];

    let affine = {
        let mut v = [0.0; 15];
        v[..3].copy_from_slice(best_params["opt/rot"].data());
        v[3..6].copy_from_slice(best_params["opt/trans"].data());
        for (i, s) in best_params["opt/scale_raw"].data().iter().enumerate() {
            v[6 + i] = 1.0 + s;
        }
        v[9..].copy_from_slice(best_params["opt/shear"].data());
        AffineParams::from_vec15(&v)
    };
    let matrix = affine_matrix_from_params(&affine)?;

    // Stage 2: free per-voxel field on top of the frozen affine.
    let vgrid = VolumeGrid::new(extents).expect("valid extents");
    let aff_field = crate::geometry::affine_to_dvf(&matrix, &vgrid);
    let mut g2 = Graph::new();
    let deform = g2.param("opt/deform", vec![1, 3, grid[0], grid[1], grid[2]])?;
    let aff_const = g2.constant(aff_field.to_tensor());
    let psi_l_at = g2.warp(deform, aff_const)?;
    let psi = g2.add(psi_l_at, aff_const)?;
    let xa_const = g2.constant(xa.to_tensor5());
    let xb_const = g2.constant(xb.to_tensor5());
    let x_ab = g2.warp(xa_const, psi)?;
    let ncc2 = losses::local_ncc_loss(&mut g2, x_ab, xb_const, &cfg.loss)?;
    let smooth2 = losses::smoothness_loss(&mut g2, psi)?;
    let total2 = losses::gvsl_total(&mut g2, ncc2, smooth2, &cfg.loss)?;
    g2.mark_output("ncc", ncc2);
    g2.mark_output("total", total2);

    let mut field = Tensor::zeros(&[1, 3, grid[0], grid[1], grid[2]]);
    let mut field_adam = crate::optim::AdamState::new(field.shape());
    let mut best_total = f64::INFINITY;
    let mut best_field = field.clone();
    let mut best_ncc2 = f64::INFINITY;
    let mut total_trace = Vec::with_capacity(cfg.deform_iters + 1);
    for it in 0..=cfg.deform_iters {
        let mut bindings = Bindings::new();
        bindings.set("opt/deform", field.clone());
        let exec = g2.evaluate(&bindings).map_err(|source| TrainError::NonFinite {
            iteration: it as u64,
            source,
        })?;
        let total = exec.output("total")?.item();
        total_trace.push(total);
        if total < best_total {
            best_total = total;
            best_field = field.clone();
            best_ncc2 = exec.output("ncc")?.item();
        }
        if it == cfg.deform_iters {
            break;
        }
        let grads = exec.backpropagate(total2)?.params(&g2);
        adam_update(
            &mut field,
            &grads["opt/deform"],
            &mut field_adam,
            cfg.lr_deform,
            &hyper,
        )
        .expect("shapes fixed");
    }

    let local = Dvf::from_tensor(&best_field)?;
    let fused = compose_dvf(&matrix, &local);
    Ok(ClassicalResult {
        affine,
        dvf: fused,
        trace: ClassicalTrace {
            ncc_initial,
            ncc_affine: ncc_trace,
            ncc_affine_best: best_ncc,
            total_deform: total_trace,
            ncc_final: best_ncc2,
            mean_local_disp: local.mean_abs(),
        },
    })
}
