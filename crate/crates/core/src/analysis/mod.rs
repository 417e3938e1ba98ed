//! Representation instruments: feature extraction, covariance power-law
//! slope, CKA, a linear probe, and image dumps of reconstructions, spectra
//! and spectral filters.

mod cka;
mod features;
mod powerlaw;
mod probe;
mod visualize;

pub use cka::{cka, cka_matrix, hsic, write_cka_csv, write_last_layer_csv, CenteredGram};
pub use features::{extract_features, FeatureMatrix};
pub use powerlaw::{default_fit_range, fit_power_law, write_powerlaw_csv, PowerLawFit};
pub use probe::{linear_probe, write_probe_csv, ProbeConfig, ProbeEpoch, ProbeResult};
pub use visualize::{emit_visualizations, spectrum_map};

/// Settings for `analyze` and `visualize`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    /// First eigenvalue index (1-based) of the power-law fit window.
    pub j0: usize,
    /// Last index of the fit window; 0 picks `min(C, N, 512)/2`.
    pub j1: usize,
    /// Mean-center features before forming the covariance.
    pub center: bool,
    /// Cap on evaluated images; 0 uses the whole split.
    pub max_images: usize,
    pub visualize_count: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { j0: 10, j1: 0, center: false, max_images: 0, visualize_count: 4 }
    }
}
