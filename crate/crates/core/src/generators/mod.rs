//! Steering vector generators.

mod activations;
mod caa;
mod lm_steer;
mod sae;
mod sta;

pub use activations::{collect_activations, collect_token_activations, ActivationSet, ActivationSource, PositionRule};
pub use caa::{caa_from_activations, generate_caa};
pub use lm_steer::{
    apply_lm_steer_logits, build_lm_steer_problem, train_lm_steer, train_lm_steer_on, LmSteerConfig, LmSteerMatrix,
    LmSteerProblem, LmSteerProcessor, SteerExample,
};
pub use sae::{
    label_sae_features, sae_feature_vector, search_sae_features, train_sae, train_sae_observed, SaeConfig, SaeFeature,
    SaeGradients, SaeModel,
};
pub use sta::{generate_sta, sae_contrast_scores, sta_from_scores, StaConfig, STA_VARIANT_TAG};
