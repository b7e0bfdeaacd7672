//! Counterfactual clinical-trial result imagination.

pub mod fixture;
pub mod imagination;
pub mod learn;
pub mod pair_miner;
pub mod pipeline;
pub mod reward_eval;
pub mod similarity;
pub mod trial_model;
