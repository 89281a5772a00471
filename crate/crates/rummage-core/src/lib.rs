//! Mechanical-search testbed: a deterministic clutter simulator with
//! occlusion-aware sensing, a priority-guided threshold policy trained with
//! PPO, a TSDF-backed next-best-view planner, and an evaluation harness.

pub mod config;
pub mod decision;
pub mod env;
pub mod eval;
pub mod error;
pub mod geom;
pub mod oracle;
pub mod nbv;
pub mod net;
pub mod perception;
pub mod ppo;
pub mod scene;
pub mod tsdf;
