//! Depth-adaptive multiscale (DaM) convolution networks with hand-written
//! backpropagation.
//!
//! A DaM convolution spaces its kernel taps per pixel according to a depth
//! map, so an object seen at twice the distance is read with half the tap
//! spacing and produces the same activations. The crate contains the layer
//! itself ([`dam`]), the surrounding network machinery ([`layers`],
//! [`network`], [`optim`], [`train`]), a pinhole-camera scene generator
//! ([`synth`]), segmentation metrics ([`metrics`]) and numerical checks
//! ([`gradcheck`], [`invariance`]).
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod checkpoint;
pub mod config;
pub mod dam;
pub mod error;
pub mod gradcheck;
pub mod invariance;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use dam::{Activation, DamConv, DamLayerState, MultiscaleParams, Spacing, SparsityMap};
pub use error::{Error, Result};
pub use layers::LossConfig;
pub use metrics::{ConfusionMatrix, Metrics};
pub use network::{LayerSpec, Network, NetworkSpec, Sample, TrainRecord};
pub use optim::{Schedule, SgdState};
pub use tensor::{DepthMap, FeatureMap, HoleFill, LabelMap, WeightTensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/spacing.md")]
    mod spacing {}
    #[doc = include_str!("../../../book/src/convolution.md")]
    mod convolution {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/checks.md")]
    mod checks {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
