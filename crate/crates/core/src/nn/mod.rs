//! Layers with hand-written forward and backward passes.
//!
//! Every layer owns handles into a shared [`ParamStore`]. `forward` is pure
//! inference; `forward_train` caches what `backward` needs, and `backward`
//! accumulates parameter gradients into the store.

pub mod conv;
pub mod linear;
pub mod mhsa;
pub mod norm;
pub mod ops;
pub mod param;

pub use conv::{Conv2d, ConvConfig};
pub use linear::Linear;
pub use mhsa::{Mhsa, MhsaConfig};
pub use norm::{BatchNorm2d, Ibn, InstanceNorm2d, Norm};
pub use ops::MaxPool;
pub use param::{ParamGroup, ParamId, ParamStore, Scope, Slot, SlotKind};
