//! Self-supervised volumetric registration engine.
//!
//! The crate builds everything needed to pre-train a small 3D backbone by
//! geometric matching on synthetic phantoms: an f64 autodiff graph with the
//! volumetric ops (convolution, group norm, trilinear warping), affine and
//! deformable field geometry, the windowed-correlation and smoothness
//! objectives, appearance corruption transforms, a phantom generator with
//! ground truth, the joint training loop, downstream evaluation, and
//! bit-exact persistence for volumes and checkpoints.

pub mod evalkit;
pub mod fdcheck;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transforms;
pub mod volume;

pub use geometry::{AffineMatrix, AffineParams, Dvf, VolumeGrid};
pub use graph::{Bindings, Graph, NodeId};
pub use tensor::Tensor;
pub use volume::{LabelVolume, Volume};
