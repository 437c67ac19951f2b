//! Offline batch inference planning with explicit prefix sharing.
//!
//! * [`workload`]: requests, synthetic generators, workload files
//! * [`prefix_tree`]: radix tree, first-level prefix enlargement, groups
//! * [`scheduler`]: iteration-level continuous batching simulator
//! * [`metrics`]: saving ratios, valley statistics, reports
//! * [`attention`]: prefix-shared attention reference in `f64`

pub mod attention;
pub mod metrics;
pub mod prefix_tree;
pub mod scheduler;
pub mod workload;
