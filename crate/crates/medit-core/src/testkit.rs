//! Shared fixtures for integration-style unit tests: a small but fully wired
//! model set (correct dependency hashes, woken conditioning paths) and toy
//! inputs. Compiled only for tests.

use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diffusion::autoencoder::Autoencoder;
use crate::diffusion::unet::UNet;
use crate::editpipe::EditModels;
use crate::embedder::Embedder;
use crate::mml::model::MmlModel;
use crate::mml::vocab::Vocabulary;
use crate::tensor::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{DiffusionMeta, EMBEDDER_HASH_KEY, UNET_HEADS};

/// Configuration small enough that a full edit runs in milliseconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.embedder.dim = 16;
    cfg.mml.embed_dim = 16;
    cfg.mml.layers = 2;
    cfg.mml.d_model = 32;
    cfg.mml.heads = 2;
    cfg.mml.patch = 8;
    cfg.mml.tap_layer = Some(1);
    cfg.mml.max_target_len = 12;
    cfg.diffusion.timesteps = 6;
    cfg.validate().unwrap();
    cfg
}

/// Build a full model set from freshly initialized (untrained) weights,
/// wiring the dependency hashes the way training would.
pub fn fresh_models(dir: &Path) -> (RunConfig, EditModels) {
    let cfg = tiny_config();

    let vocab = Vocabulary::core();
    let emb = Embedder::new(cfg.embedder.dim, vocab.len()).unwrap();
    let emb_path = dir.join("embedder.ckpt");
    let emb_hash = checkpoint::save(&emb_path, &emb.init_params(101)).unwrap();

    let model = MmlModel::from_config(&cfg.mml, &vocab).unwrap();
    let mut mml_store = model.init_params(102);
    checkpoint::embed_dependency_hash(&mut mml_store, EMBEDDER_HASH_KEY, &emb_hash);
    let mml_path = dir.join("mml.ckpt");
    checkpoint::save(&mml_path, &mml_store).unwrap();

    let ae_path = dir.join("ae.ckpt");
    let ae_hash = checkpoint::save(&ae_path, &Autoencoder::init_params(103)).unwrap();

    let unet = UNet::new(cfg.embedder.dim, UNET_HEADS).unwrap();
    let mut unet_store = unet.init_params(104);
    // Fresh attention sites and the output conv start at zero (no-op), so
    // conditioning would be invisible; give them small random weights so
    // tests can tell "inert by flag" from "inert by init".
    let mut wake = Rng::seeded(105);
    for name in ["unet.attn1.out.w", "unet.attn2.out.w", "unet.out.conv.w"] {
        for v in unet_store.get_mut(name).unwrap().data.iter_mut() {
            *v = 0.05 * wake.normal();
        }
    }
    DiffusionMeta {
        embedder_hash: emb_hash,
        autoencoder_hash: ae_hash,
        mml_hash: None,
        latent_scale: 0.8,
        timesteps: cfg.diffusion.timesteps,
        beta_start: cfg.diffusion.beta_start,
        beta_end: cfg.diffusion.beta_end,
    }
    .write(&mut unet_store);
    let unet_path = dir.join("diffusion.ckpt");
    checkpoint::save(&unet_path, &unet_store).unwrap();

    let models = EditModels::load(&cfg, &emb_path, &mml_path, &ae_path, &unet_path).unwrap();
    (cfg, models)
}

/// A soft random RGB image in [0, 1].
pub fn toy_image(seed: u64) -> Tensor {
    let mut rng = Rng::seeded(seed);
    Tensor::randn(&[3, 32, 32], &mut rng).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
}
