//! Graph-based model poisoning: benign-update graph, VGAE manifold model,
//! Lagrange-dual latent search, and graph-spectral update synthesis.

pub mod craft;
pub mod dual;
pub mod graph;
pub mod spectral;
pub mod vgae;

pub use craft::{
    collect_benign_observations, craft_malicious_update, estimate_threshold,
    project_to_stealth_cone, reconstruct_benign_mean, AttackTrace, CraftedUpdate, GrmpConfig,
    Knowledge, Observations, RoundObservation,
};
pub use dual::{lagrange_dual_search, threshold_adjacency, DualConfig, DualState, LatentState};
pub use graph::{build_update_graph, laplacian, UpdateGraph};
pub use spectral::{gsp_decompose, gsp_synthesize, SpectralDecomposition};
pub use vgae::{
    fit_vgae, fit_vgae_projected, vgae_decode, vgae_encode, vgae_loss, Encoding, VgaeLoss,
    VgaeParams,
};
