//! Path-based deep network matching: two-hop path scoring over
//! user -> trigger -> target graphs, with offline top-k index generation,
//! online greedy retrieval, a Pearson item-based CF baseline, and a
//! leave-one-out evaluation harness.

pub mod baseline_cf;
pub mod cli;
pub mod evaluation;
pub mod features;
pub mod index;
pub mod model;
pub mod retrieval;
pub mod tensorcore;
pub mod training;
