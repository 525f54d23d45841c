//! The pre-training networks as graph builders: a small 3D encoder-decoder
//! backbone emitting global (bottleneck) and local (full-resolution)
//! features, the matching head that predicts the 15 affine values and the
//! local deformation, and the restoration head.
//!
//! Parameter tensors live in a [`ModelWeights`] map under the namespaces
//! `backbone/` (theta), `zmatch.affine/` and `zmatch.deform/` (xi), and
//! `restore/` (iota); graph builders reference them by name so both images
//! of a pair route through identical weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::optim::AdamState;
use crate::rng::DetRng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("base channels {base} must be divisible by groupnorm groups {groups}")]
    ChannelsNotDivisible { base: usize, groups: usize },
    #[error("spatial extent {extent} not divisible by 2^levels = {factor}")]
    ExtentNotDivisible { extent: usize, factor: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Architecture hyperparameters of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneArch {
    pub levels: usize,
    pub base_channels: usize,
    pub groups: usize,
    pub in_channels: usize,
}

impl Default for BackboneArch {
    fn default() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            groups: 4,
            in_channels: 1,
        }
    }
}

impl BackboneArch {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base_channels % self.groups != 0 {
            return Err(ModelError::ChannelsNotDivisible {
                base: self.base_channels,
                groups: self.groups,
            });
        }
        Ok(())
    }

    /// Channels at encoder depth d (0 = full resolution, levels = bottleneck).
    pub fn channels_at(&self, depth: usize) -> usize {
        self.base_channels << depth.min(self.levels.saturating_sub(1))
    }

    /// Channel count of the global (bottleneck) features.
    pub fn global_channels(&self) -> usize {
        self.channels_at(self.levels)
    }

    /// Channel count of the local (final-layer) features.
    pub fn local_channels(&self) -> usize {
        self.base_channels
    }

    pub fn check_extent(&self, extent: usize) -> Result<(), ModelError> {
        let factor = 1usize << self.levels;
        if extent % factor != 0 {
            return Err(ModelError::ExtentNotDivisible { extent, factor });
        }
        Ok(())
    }
}

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with std sqrt(2 / fan_in).
    Kaiming { fan_in: usize },
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_group_specs(prefix: &str, cin: usize, cout: usize, out: &mut Vec<ParamSpec>) {
    let fan_in = cin * 27;
    out.push(ParamSpec {
        name: format!("{prefix}.conv.w"),
        shape: vec![cout, cin, 3, 3, 3],
        init: Init::Kaiming { fan_in },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.conv.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.gn.gamma"),
        shape: vec![cout],
        init: Init::One,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.gn.beta"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

/// Full parameter listing for the backbone and all heads.
pub fn parameter_specs(arch: &BackboneArch) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    // Backbone encoder.
    conv_group_specs("backbone/enc0", arch.in_channels, arch.channels_at(0), &mut specs);
    for d in 1..=arch.levels {
        conv_group_specs(
            &format!("backbone/down{d}"),
            arch.channels_at(d - 1),
            arch.channels_at(d),
            &mut specs,
        );
    }
    // Backbone decoder.
    for d in (0..arch.levels).rev() {
        conv_group_specs(
            &format!("backbone/dec{d}"),
            arch.channels_at(d + 1) + arch.channels_at(d),
            arch.channels_at(d),
            &mut specs,
        );
    }
    // Affine head: pool over concatenated global features, then four
    // parallel linear layers, all zero-initialized so a fresh model emits
    // the exact identity transform.
    let pooled = 2 * arch.global_channels();
    for (name, outs) in [("rot", 3), ("trans", 3), ("scale", 3), ("shear", 6)] {
        specs.push(ParamSpec {
            name: format!("zmatch.affine/{name}.w"),
            shape: vec![outs, pooled],
            init: Init::Zero,
        });
        specs.push(ParamSpec {
            name: format!("zmatch.affine/{name}.b"),
            shape: vec![outs],
            init: Init::Zero,
        });
    }
    // Deformable head: two conv groups then a zero-initialized 3-channel
    // convolution so the initial local field is exactly zero.
    let local = arch.local_channels();
    conv_group_specs("zmatch.deform/cg1", 2 * local, local, &mut specs);
    conv_group_specs("zmatch.deform/cg2", local, local, &mut specs);
    specs.push(ParamSpec {
        name: "zmatch.deform/out.w".into(),
        shape: vec![3, local, 3, 3, 3],
        init: Init::Zero,
    });
    specs.push(ParamSpec {
        name: "zmatch.deform/out.b".into(),
        shape: vec![3],
        init: Init::Zero,
    });
    // Restoration head: conv group then a 1-channel convolution + sigmoid.
    conv_group_specs("restore/cg", local, local, &mut specs);
    specs.push(ParamSpec {
        name: "restore/out.w".into(),
        shape: vec![1, local, 3, 3, 3],
        init: Init::Kaiming { fan_in: local * 27 },
    });
    specs.push(ParamSpec {
        name: "restore/out.b".into(),
        shape: vec![1],
        init: Init::Zero,
    });
    specs
}

/// Named parameters plus per-parameter optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: BackboneArch,
    pub tensors: BTreeMap<String, Tensor>,
    pub adam: BTreeMap<String, AdamState>,
}

pub const NAMESPACES: [&str; 4] = ["backbone/", "zmatch.affine/", "zmatch.deform/", "restore/"];

impl ModelWeights {
    pub fn names_in(&self, namespace: &str) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| n.starts_with(namespace))
            .cloned()
            .collect()
    }

    /// Copies every parameter into a bindings map.
    pub fn bind_into(&self, bindings: &mut crate::graph::Bindings) {
        for (name, t) in &self.tensors {
            bindings.set(name.clone(), t.clone());
        }
    }

    /// Content hash over names, shapes, and raw parameter bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Deterministic initialization: Kaiming fan-in normals for convolution and
/// linear weights, zeros for biases, ones for norm gains, zeros for both
/// head output layers (identity start).
pub fn init_weights(seed: u64, arch: &BackboneArch) -> Result<ModelWeights, ModelError> {
    arch.validate()?;
    let mut rng = DetRng::from_seed_u64(seed);
    let mut tensors = BTreeMap::new();
    let mut adam = BTreeMap::new();
    for spec in parameter_specs(arch) {
        let t = match spec.init {
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| std * rng.normal())
            }
            Init::Zero => Tensor::zeros(&spec.shape),
            Init::One => Tensor::full(&spec.shape, 1.0),
        };
        adam.insert(spec.name.clone(), AdamState::new(&spec.shape));
        tensors.insert(spec.name, t);
    }
    Ok(ModelWeights {
        arch: *arch,
        tensors,
        adam,
    })
}

/// Tracks which parameter names already have graph nodes so repeated
/// builder calls share weights.
#[derive(Debug, Default)]
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(
        &mut self,
        g: &mut Graph,
        name: &str,
        shape: Vec<usize>,
    ) -> Result<NodeId, GraphError> {
        if let Some(&id) = self.map.get(name) {
            return Ok(id);
        }
        let id = g.param(name, shape)?;
        self.map.insert(name.to_string(), id);
        Ok(id)
    }
}

fn conv_group(
    g: &mut Graph,
    pn: &mut ParamNodes,
    prefix: &str,
    cin: usize,
    cout: usize,
    groups: usize,
    input: NodeId,
    stride: usize,
) -> Result<NodeId, GraphError> {
    let w = pn.node(g, &format!("{prefix}.conv.w"), vec![cout, cin, 3, 3, 3])?;
    let b = pn.node(g, &format!("{prefix}.conv.b"), vec![cout])?;
    let gamma = pn.node(g, &format!("{prefix}.gn.gamma"), vec![cout])?;
    let beta = pn.node(g, &format!("{prefix}.gn.beta"), vec![cout])?;
    let conv = g.conv3d(input, w, Some(b), stride, 1)?;
    let norm = g.group_norm(conv, gamma, beta, groups, GN_EPS)?;
    Ok(g.leaky_relu(norm, LEAKY_SLOPE))
}

/// Encoder-decoder with skip concatenation. Returns (f_g, f_l): bottleneck
/// features and final-layer features at input resolution.
pub fn backbone_forward(
    g: &mut Graph,
    pn: &mut ParamNodes,
    arch: &BackboneArch,
    input: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    arch.validate()?;
    for &e in &g.shape(input)[2..] {
        arch.check_extent(e)?;
    }
    let groups = arch.groups;
    let mut skips = Vec::new();
    let mut cur = conv_group(
        g,
        pn,
        "backbone/enc0",
        arch.in_channels,
        arch.channels_at(0),
        groups,
        input,
        1,
    )?;
    skips.push((cur, arch.channels_at(0)));
    for d in 1..=arch.levels {
        cur = conv_group(
            g,
            pn,
            &format!("backbone/down{d}"),
            arch.channels_at(d - 1),
            arch.channels_at(d),
            groups,
            cur,
            2,
        )?;
        if d < arch.levels {
            skips.push((cur, arch.channels_at(d)));
        }
    }
    let f_g = cur;
    for d in (0..arch.levels).rev() {
        let up = g.upsample2(cur)?;
        let (skip, skip_ch) = skips[d];
        let cat = g.concat(&[up, skip], 1)?;
        cur = conv_group(
            g,
            pn,
            &format!("backbone/dec{d}"),
            arch.channels_at(d + 1) + skip_ch,
            arch.channels_at(d),
            groups,
            cat,
            1,
        )?;
    }
    Ok((f_g, cur))
}

/// Nodes produced by the affine head.
#[derive(Debug, Clone, Copy)]
pub struct AffineHeadNodes {
    /// The 15 transform scalars [1, 15] in canonical order.
    pub params15: NodeId,
    /// The composed homogeneous matrix [4, 4].
    pub matrix: NodeId,
}

/// Concatenates the two global feature maps, pools, and runs four parallel
/// linear layers. Raw outputs map as theta = raw, t = raw, s = 1 + raw,
/// sh = raw, so zero-initialized layers give the exact identity transform.
pub fn affine_head_forward(
    g: &mut Graph,
    pn: &mut ParamNodes,
    arch: &BackboneArch,
    f_ga: NodeId,
    f_gb: NodeId,
) -> Result<AffineHeadNodes, ModelError> {
    let cat = g.concat(&[f_ga, f_gb], 1)?;
    let pooled = g.global_avg_pool(cat)?;
    let pooled_ch = 2 * arch.global_channels();
    let mut parts = Vec::new();
    for (name, outs) in [("rot", 3), ("trans", 3), ("scale", 3), ("shear", 6)] {
        let w = pn.node(g, &format!("zmatch.affine/{name}.w"), vec![outs, pooled_ch])?;
        let b = pn.node(g, &format!("zmatch.affine/{name}.b"), vec![outs])?;
        let raw = g.linear(pooled, w, b)?;
        let mapped = if name == "scale" {
            let one = g.scalar_const(1.0);
            g.add(raw, one)?
        } else {
            raw
        };
        parts.push(mapped);
    }
    let params15 = g.concat(&parts, 1)?;
    let matrix = g.affine_matrix(params15)?;
    Ok(AffineHeadNodes { params15, matrix })
}

/// Concatenates the globally aligned local features of A with B's local
/// features, then two conv groups and a zero-initialized 3-channel
/// convolution: the local displacement field [1, 3, Z, Y, X].
pub fn deformable_head_forward(
    g: &mut Graph,
    pn: &mut ParamNodes,
    arch: &BackboneArch,
    f_la_aligned: NodeId,
    f_lb: NodeId,
) -> Result<NodeId, ModelError> {
    let local = arch.local_channels();
    let cat = g.concat(&[f_la_aligned, f_lb], 1)?;
    let h1 = conv_group(g, pn, "zmatch.deform/cg1", 2 * local, local, arch.groups, cat, 1)?;
    let h2 = conv_group(g, pn, "zmatch.deform/cg2", local, local, arch.groups, h1, 1)?;
    let w = pn.node(g, "zmatch.deform/out.w", vec![3, local, 3, 3, 3])?;
    let b = pn.node(g, "zmatch.deform/out.b", vec![3])?;
    Ok(g.conv3d(h2, w, Some(b), 1, 1)?)
}

/// Conv group, 1-channel convolution, sigmoid: intensities in (0, 1).
pub fn restoration_head_forward(
    g: &mut Graph,
    pn: &mut ParamNodes,
    arch: &BackboneArch,
    f_l: NodeId,
) -> Result<NodeId, ModelError> {
    let local = arch.local_channels();
    let h = conv_group(g, pn, "restore/cg", local, local, arch.groups, f_l, 1)?;
    let w = pn.node(g, "restore/out.w", vec![1, local, 3, 3, 3])?;
    let b = pn.node(g, "restore/out.b", vec![1])?;
    let conv = g.conv3d(h, w, Some(b), 1, 1)?;
    Ok(g.sigmoid(conv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Bindings;

    fn bindings_for(w: &ModelWeights) -> Bindings {
        let mut b = Bindings::new();
        w.bind_into(&mut b);
        b
    }

    #[test]
    fn backbone_shapes_match_architecture_arithmetic() {
        let arch = BackboneArch::default();
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("x", vec![1, 1, 32, 32, 32]).unwrap();
        let (f_g, f_l) = backbone_forward(&mut g, &mut pn, &arch, x).unwrap();
        assert_eq!(g.shape(f_g), &[1, 16, 8, 8, 8]);
        assert_eq!(g.shape(f_l), &[1, 8, 32, 32, 32]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let arch = BackboneArch::default();
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("x", vec![1, 1, 30, 32, 32]).unwrap();
        assert!(matches!(
            backbone_forward(&mut g, &mut pn, &arch, x),
            Err(ModelError::ExtentNotDivisible { .. })
        ));
    }

    #[test]
    fn init_is_deterministic_and_identity_at_heads() {
        let arch = BackboneArch::default();
        let a = init_weights(7, &arch).unwrap();
        let b = init_weights(7, &arch).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        // Head output layers are zero.
        assert!(a.tensors["zmatch.deform/out.w"].data().iter().all(|&v| v == 0.0));
        assert!(a.tensors["zmatch.affine/rot.w"].data().iter().all(|&v| v == 0.0));
        let c = init_weights(8, &arch).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn affine_head_emits_identity_on_fresh_weights() {
        let arch = BackboneArch::default();
        let weights = init_weights(3, &arch).unwrap();
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let fa = g.input("fa", vec![1, 16, 2, 2, 2]).unwrap();
        let fb = g.input("fb", vec![1, 16, 2, 2, 2]).unwrap();
        let head = affine_head_forward(&mut g, &mut pn, &arch, fa, fb).unwrap();
        g.mark_output("p", head.params15);
        g.mark_output("m", head.matrix);
        let mut bind = bindings_for(&weights);
        bind.set("fa", Tensor::from_fn(&[1, 16, 2, 2, 2], |i| (i as f64).sin()));
        bind.set("fb", Tensor::from_fn(&[1, 16, 2, 2, 2], |i| (i as f64).cos()));
        let exec = g.evaluate(&bind).unwrap();
        let p = exec.output("p").unwrap();
        let want = crate::geometry::AffineParams::identity().to_vec15();
        assert_eq!(p.data(), &want[..]);
        let m = exec.output("m").unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert_eq!(m.data()[r * 4 + c], expect);
            }
        }
    }

    #[test]
    fn affine_head_is_order_sensitive_for_generic_weights() {
        let arch = BackboneArch::default();
        let mut weights = init_weights(3, &arch).unwrap();
        let mut rng = crate::rng::DetRng::from_seed_u64(42);
        for name in ["rot", "trans", "scale", "shear"] {
            let key = format!("zmatch.affine/{name}.w");
            let t = weights.tensors.get_mut(&key).unwrap();
            for v in t.data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let fa = g.input("fa", vec![1, 16, 2, 2, 2]).unwrap();
        let fb = g.input("fb", vec![1, 16, 2, 2, 2]).unwrap();
        let head = affine_head_forward(&mut g, &mut pn, &arch, fa, fb).unwrap();
        g.mark_output("p", head.params15);
        let ta = Tensor::from_fn(&[1, 16, 2, 2, 2], |i| (i as f64 * 0.3).sin());
        let tb = Tensor::from_fn(&[1, 16, 2, 2, 2], |i| (i as f64 * 0.7).cos());
        let mut bind = bindings_for(&weights);
        bind.set("fa", ta.clone());
        bind.set("fb", tb.clone());
        let ab = g.evaluate(&bind).unwrap().output("p").unwrap().clone();
        bind.set("fa", tb);
        bind.set("fb", ta);
        let ba = g.evaluate(&bind).unwrap().output("p").unwrap().clone();
        assert_ne!(ab.data(), ba.data());
    }

    #[test]
    fn deformable_head_zero_at_init_with_full_shape() {
        let arch = BackboneArch::default();
        let weights = init_weights(5, &arch).unwrap();
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let fa = g.input("fa", vec![1, 8, 8, 8, 8]).unwrap();
        let fb = g.input("fb", vec![1, 8, 8, 8, 8]).unwrap();
        let psi = deformable_head_forward(&mut g, &mut pn, &arch, fa, fb).unwrap();
        assert_eq!(g.shape(psi), &[1, 3, 8, 8, 8]);
        g.mark_output("psi", psi);
        let mut bind = bindings_for(&weights);
        bind.set("fa", Tensor::from_fn(&[1, 8, 8, 8, 8], |i| (i as f64).sin()));
        bind.set("fb", Tensor::from_fn(&[1, 8, 8, 8, 8], |i| (i as f64).cos()));
        let exec = g.evaluate(&bind).unwrap();
        assert!(exec.output("psi").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn restoration_output_strictly_inside_unit_interval() {
        let arch = BackboneArch::default();
        let weights = init_weights(11, &arch).unwrap();
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let fl = g.input("fl", vec![1, 8, 8, 8, 8]).unwrap();
        let out = restoration_head_forward(&mut g, &mut pn, &arch, fl).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 8, 8, 8]);
        g.mark_output("out", out);
        let mut bind = bindings_for(&weights);
        bind.set("fl", Tensor::from_fn(&[1, 8, 8, 8, 8], |i| (i as f64 * 0.13).sin()));
        let a = g.evaluate(&bind).unwrap().output("out").unwrap().clone();
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let b = g.evaluate(&bind).unwrap().output("out").unwrap().clone();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_weights_with_biases_give_constant_maps() {
        let arch = BackboneArch::default();
        let mut weights = init_weights(2, &arch).unwrap();
        for (name, t) in weights.tensors.iter_mut() {
            if name.ends_with(".conv.w") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            if name.ends_with(".conv.b") {
                for v in t.data_mut() {
                    *v = 0.25;
                }
            }
        }
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("x", vec![1, 1, 16, 16, 16]).unwrap();
        let (_f_g, f_l) = backbone_forward(&mut g, &mut pn, &arch, x).unwrap();
        g.mark_output("f_l", f_l);
        let mut bind = bindings_for(&weights);
        bind.set("x", Tensor::from_fn(&[1, 1, 16, 16, 16], |i| ((i % 17) as f64) / 17.0));
        let out = g.evaluate(&bind).unwrap().output("f_l").unwrap().clone();
        // Every channel is spatially constant under zero conv weights.
        let spatial = 16 * 16 * 16;
        for c in 0..8 {
            let chan = &out.data()[c * spatial..(c + 1) * spatial];
            for &v in chan {
                assert!((v - chan[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_reaches_global_features_through_affine_head() {
        let arch = BackboneArch::default();
        let mut weights = init_weights(3, &arch).unwrap();
        let mut rng = crate::rng::DetRng::from_seed_u64(4242);
        for name in ["rot", "trans", "scale", "shear"] {
            let key = format!("zmatch.affine/{name}.w");
            for v in weights.tensors.get_mut(&key).unwrap().data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let fa = g.param("fa", vec![1, 16, 2, 2, 2]).unwrap();
        let fb = g.input("fb", vec![1, 16, 2, 2, 2]).unwrap();
        let head = affine_head_forward(&mut g, &mut pn, &arch, fa, fb).unwrap();
        let wsum = g.constant(Tensor::from_fn(&[1, 15], |i| (i as f64 + 1.0) * 0.1));
        let prod = g.mul(head.params15, wsum).unwrap();
        let loss = g.sum(prod);
        let mut bind = bindings_for(&weights);
        bind.set("fa", Tensor::from_fn(&[1, 16, 2, 2, 2], |i| (i as f64 * 0.3).sin()));
        bind.set("fb", Tensor::from_fn(&[1, 16, 2, 2, 2], |i| (i as f64 * 0.7).cos()));
        let rep =
            crate::fdcheck::check_loss_gradients(&g, &bind, loss, &["fa"], 1e-3, 1e-4).unwrap();
        assert!(rep.pass, "rel err {}", rep.max_rel_err);
        let exec = g.evaluate(&bind).unwrap();
        let grads = exec.backpropagate(loss).unwrap().params(&g);
        assert!(grads["fa"].data().iter().any(|&v| v != 0.0));
    }
}
