//! Closed-loop symbolic-option reinforcement learning for office-style
//! gridworlds: STRIPS models learned from experience, a weighted forward
//! planner, tabular option policies, a semantically indexed skill library,
//! and natural-language constraint enforcement.

pub mod annotator;
pub mod constraint;
pub mod env;
pub mod harness;
pub mod meta;
pub mod options;
pub mod planner;
pub mod skills;
pub mod symbolic;
