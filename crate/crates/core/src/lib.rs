//! Global and part-aware feature learning for identity retrieval.
//!
//! A convolutional backbone produces an activation tensor `T`. A global
//! branch average-pools all of `T`; a local branch average-pools each cell
//! of a uniform `H_p × V_p` grid over `T`. During training every pooled
//! feature feeds its own reduction + classifier under a label-smoothed
//! cross-entropy; at test time the pooled features are concatenated into a
//! descriptor and matched by cosine distance.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod head;
pub mod io;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
