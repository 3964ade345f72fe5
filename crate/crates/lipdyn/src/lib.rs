//! Lipschitz invariant manifolds, hyperbolicity certificates, perturbation
//! continuation and connection graphs for discrete-time dynamical systems.

pub mod spectral_split;
pub mod graph_transform;
pub mod hyperbolicity;
pub mod graph_ops;
pub mod perturbation;
pub mod transversality;
pub mod chafee_infante;
pub mod morse_smale;
pub mod models;
