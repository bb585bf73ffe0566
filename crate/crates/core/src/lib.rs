//! Sparse training of small MLPs by two-part description-length
//! minimization: reverse-mode autodiff, factored masked models, Gaussian
//! and cross-entropy code lengths, l0-surrogate regularizers, pruning
//! procedures, and phase-scheduled training.

pub mod autodiff;
pub mod data;
pub mod loss;
pub mod model;
pub mod pruning;
pub mod regularizer;
pub mod training;
