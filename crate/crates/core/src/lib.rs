//! Pipeline toolkit for context-aware multi-human behavior prediction.
//!
//! The modules follow the data flow of an experiment: synthetic
//! [`scenario`]s over [`scene_graph`]s produce labelled samples kept in a
//! [`store`]; [`prompt`]s are sent to a [`client`] backend; replies are
//! parsed by [`labels`] and scored by [`metrics`]; [`miner`] turns repeated
//! replies into preference pairs that are curated through [`review`]; and
//! [`dpo`] holds the verified SFT/DPO loss kernels.

pub mod client;
pub mod dpo;
pub mod labels;
pub mod metrics;
pub mod pipeline;
pub mod miner;
pub mod prompt;
pub mod review;
pub mod room;
pub mod scenario;
pub mod scene_graph;
pub mod store;
pub mod testing;
