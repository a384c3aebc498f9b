//! Multi-agent safe control with learned, symmetry-respecting control
//! barrier functions.
//!
//! The geometric and dynamical layers ([`liegroup`], [`dynamics`]) are generic
//! over [`scalar::Real`]; everything above them runs in `f64`.

pub mod dynamics;
pub mod egformer;
pub mod graph;
pub mod harness;
pub mod learn;
pub mod liegroup;
pub mod safectrl;
pub mod scalar;
pub mod world;

pub type GroupElement = liegroup::GroupElement<f64>;
pub type GroupElement32 = liegroup::GroupElement<f32>;
pub type AgentState = dynamics::AgentState<f64>;
pub type AgentState32 = dynamics::AgentState<f32>;
pub type Control = dynamics::Control<f64>;
pub type ControlBounds = dynamics::ControlBounds<f64>;
pub type ModelParams = dynamics::ModelParams<f64>;
pub type ModelParams32 = dynamics::ModelParams<f32>;

pub use dynamics::{System, STATE_DIM};
