//! Fully-dynamic eps-coresets for k-median and k-means.
//!
//! A static coreset construction, plugged in behind a declared contract
//! (size bound, weight inflation, failure probability), is lifted to a
//! fully-dynamic structure supporting insert, delete, and weight update
//! with worst-case per-update work: a complete binary tree over the live
//! points whose internal nodes cache constructor outputs, two refresh
//! pointers that keep every node's parameters within one phase of
//! current, and an exact rational weight pipeline whose denominators are
//! tracked structurally so numbers never blow up near the root.
//!
//! Modules:
//! - [`metric`]: spaces, weighted points, linear clustering costs
//! - [`weights`]: exact rationals, structured denominators, rounding
//! - [`static_coreset`]: the constructor contract and implementations
//! - [`dyntree`]: the fully-dynamic structure
//! - [`mergereduce`]: the insertion-only merge-and-reduce comparator
//! - [`oracle`]: brute-force certification and tiny-instance optima
//! - [`baseline`]: full-recompute comparator

pub mod baseline;
pub mod dyntree;
pub mod mergereduce;
pub mod metric;
pub mod oracle;
pub mod static_coreset;
pub mod weights;

pub use dyntree::{CoresetTree, OuterMode, TreeConfig, Validation};
pub use metric::{Objective, Point, Space, WeightedPoint};
pub use static_coreset::{Constructor, ConstructorKind};
pub use weights::{BoundedRational, WeightParams};
