//! A small reverse-mode automatic differentiation engine.
//!
//! Ops are methods on [`Graph`]; each appends a node holding its value and a
//! closure mapping the output gradient to input gradients.

mod attention;
mod basic;
mod graph;
mod layers;
mod loss;

pub use attention::AttnMask;
pub use graph::{Branches, Graph, Var};
pub use layers::{BatchStats, Reduce};
pub use loss::{ce_dice_parts, NceAnchor, NcePlan, DICE_EPS};
