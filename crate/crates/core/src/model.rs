//! Whole-model parameter assembly. Every variant shares one parameter
//! layout, so checkpoints and optimizer state line up across variants;
//! parameters a variant never touches simply receive zero gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::NUM_CLASSES;
use crate::fusion::FusionParams;
use crate::nn::LinearParams;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::semantic::SemanticParams;
use crate::visual::VisualParams;

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub visual: VisualParams,
    pub semantic: SemanticParams,
    pub fusion: FusionParams,
    /// Head over the three concatenated pooled cues (baseline wiring).
    pub cue_concat_head: LinearParams,
    /// Head over the concatenated visual and semantic representations
    /// (flat-fusion wiring).
    pub flat_concat_head: LinearParams,
}

impl ModelParams {
    /// Build every parameter tensor from the run seed, in a fixed
    /// construction order, so equal configurations always produce bitwise
    /// equal initial states.
    pub fn init<S: Scalar>(cfg: &RunConfig) -> (ParamStore<S>, ModelParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let visual = VisualParams::init(
            &mut store,
            "visual",
            cfg.hidden,
            cfg.heads,
            cfg.fusion_depth,
            &mut rng,
        );
        let semantic = SemanticParams::init(
            &mut store,
            "semantic",
            cfg.embed_dim,
            cfg.gcn_width(),
            cfg.hidden,
            cfg.esem_pool,
            &mut rng,
        );
        let fusion = FusionParams::init(
            &mut store,
            "fusion",
            cfg.hidden,
            cfg.heads,
            cfg.fusion_depth,
            &mut rng,
        );
        let cue_concat_head = LinearParams::init(
            &mut store,
            "cue_concat_head",
            NUM_CLASSES * cfg.hidden,
            NUM_CLASSES,
            &mut rng,
        );
        let flat_concat_head = LinearParams::init(
            &mut store,
            "flat_concat_head",
            2 * cfg.hidden,
            NUM_CLASSES,
            &mut rng,
        );
        (store, ModelParams { visual, semantic, fusion, cue_concat_head, flat_concat_head })
    }
}
