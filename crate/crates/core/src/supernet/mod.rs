//! Weight-shared elastic network over a four-stage hybrid backbone.
//!
//! A [`Supernet`] holds every block at its maximal depth and width. Any
//! [`SubnetConfig`] of its [`SearchSpace`] resolves to a [`Network`] that
//! reads leading slices of the shared weights and the normalization set of
//! its own width; [`Supernet::extract`] copies those slices out into a
//! standalone [`Subnet`].

mod checkpoint;
mod net;
mod space;
mod train;

pub use checkpoint::{assign, load_archive, save_archive, Archive};
pub use net::{BlockDef, BlockKey, BlockKind, DownDef, Layer, Network, Placed, Subnet, Supernet};
pub use space::{is_attention_stage, SearchSpace, SubnetConfig, STAGES, STAGE_REDUCTION};
pub use train::{accumulate_loss, sample_subnet, sandwich_train_step, SampleKind, SandwichLosses};
