//! Model assembly: registers every subsystem's tensors in one store and
//! wires the conditioning path (image embedding → feature compensation →
//! quantity attention → backbone injection).
//!
//! Training has two phases: the bare backbone is pretrained unconditionally
//! and frozen, then only the adapter tensors learn. Phase switching is a
//! trainable-flag sweep over name prefixes.

use crate::backbone::{self, InjectionHook, UnetTrace};
use crate::config::RunConfig;
use crate::encoders::{self, ImageEmbedding, PromptEmbedding};
use crate::fecom;
use crate::num::Scalar;
use crate::qttn;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Backbone trains; adapters and encoders frozen.
    PretrainBase,
    /// Adapters train; backbone and encoders frozen.
    Adapters,
    /// Everything frozen (sampling, evaluation).
    Frozen,
}

/// Registers all tensors for the configured model.
pub fn init_model<T: Scalar>(cfg: &RunConfig, seed: u64) -> ParamStore<T> {
    cfg.validate().expect("config must validate before init");
    let mut store = ParamStore::new();
    encoders::init_encoders(&mut store, &cfg.enc, cfg.unet.image, seed);
    backbone::init_unet(&mut store, &cfg.unet, cfg.enc.d_t, seed);
    if cfg.fecom_enabled {
        fecom::init_fecom(&mut store, &cfg.fecom, seed);
    }
    if cfg.qttn_enabled {
        for &k in &cfg.unet.injection {
            let dims = cfg.qttn_dims_for_block(k).expect("validated");
            qttn::init_qttn(
                &mut store,
                &format!("qttn.b{k}"),
                &dims,
                seed.wrapping_add(k as u64),
            );
        }
    }
    set_phase(&mut store, Phase::Frozen);
    store
}

pub fn set_phase<T: Scalar>(store: &mut ParamStore<T>, phase: Phase) {
    store.set_all_trainable(false);
    match phase {
        Phase::PretrainBase => store.set_trainable("unet.", true),
        Phase::Adapters => {
            store.set_trainable("fecom.", true);
            store.set_trainable("qttn.", true);
        }
        Phase::Frozen => {}
    }
}

pub fn adapters_present<T: Scalar>(store: &ParamStore<T>) -> bool {
    store
        .names()
        .any(|n| n.starts_with("fecom.") || n.starts_with("qttn."))
}

/// Enhanced feature on the tape. With feature compensation enabled and a
/// nonzero λ this is the compensated embedding; otherwise the raw image
/// embedding enters unchanged (bitwise the same vector).
pub fn enhanced_feature<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    image_emb: &ImageEmbedding<T>,
    caption: &PromptEmbedding<T>,
    lambda: f64,
) -> Var {
    let fecom_available = cfg.fecom_enabled && store.contains("fecom.ft.w");
    if fecom_available && lambda != 0.0 {
        let trace = fecom_forward_here(tape, store, cfg, image_emb, caption, lambda);
        trace.enhanced
    } else {
        tape.constant(&image_emb.vector)
    }
}

fn fecom_forward_here<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    image_emb: &ImageEmbedding<T>,
    caption: &PromptEmbedding<T>,
    lambda: f64,
) -> fecom::FeComTrace {
    fecom::fecom_forward(
        tape,
        store,
        &cfg.fecom,
        cfg.layernorm,
        image_emb,
        caption,
        lambda,
    )
}

/// Noise prediction with optional quantity-attention injection.
#[allow(clippy::too_many_arguments)]
pub fn predict_noise<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    x: &Tensor<T>,
    t: usize,
    edit_prompt: &PromptEmbedding<T>,
    enhanced: Option<Var>,
    beta: f64,
) -> (Var, UnetTrace<T>) {
    let xv = tape.constant(x);
    let qttn_available = cfg.qttn_enabled
        && !cfg.unet.injection.is_empty()
        && cfg
            .unet
            .injection
            .iter()
            .all(|k| store.contains(&format!("qttn.b{k}.wq.w")));
    let hook = match enhanced {
        Some(e) if qttn_available && beta != 0.0 => Some(InjectionHook {
            enhanced: e,
            beta,
            extraction_enabled: cfg.extraction,
            heads: cfg.qttn_heads,
            n_ctx: cfg.qttn_ctx,
            d_i: cfg.enc.d_i,
        }),
        _ => None,
    };
    backbone::unet_forward(tape, store, &cfg.unet, xv, t, edit_prompt, hook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{encode_image, null_text, ImageSample};
    use crate::synthdata::gen_scene;
    use crate::tensor::from_f32;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.corpus.size = 4;
        cfg
    }

    #[test]
    fn init_registers_all_subsystems() {
        let cfg = small_cfg();
        let store: ParamStore<f32> = init_model(&cfg, 7);
        assert!(store.contains("enc_text.embed"));
        assert!(store.contains("enc_image.w1"));
        assert!(store.contains("unet.b01.wq.w"));
        assert!(store.contains("unet.b11.f2.b"));
        assert!(store.contains("fecom.out.w"));
        assert!(store.contains("qttn.b4.wq.w"));
        assert!(adapters_present(&store));
    }

    #[test]
    fn phases_toggle_the_right_prefixes() {
        let cfg = small_cfg();
        let mut store: ParamStore<f32> = init_model(&cfg, 7);
        set_phase(&mut store, Phase::PretrainBase);
        assert!(store.param("unet.b01.wq.w").trainable);
        assert!(!store.param("fecom.out.w").trainable);
        assert!(!store.param("enc_text.embed").trainable);
        set_phase(&mut store, Phase::Adapters);
        assert!(!store.param("unet.b01.wq.w").trainable);
        assert!(store.param("fecom.out.w").trainable);
        assert!(store.param("qttn.b4.wv.w").trainable);
        assert!(
            !store.param("enc_image.w1").trainable,
            "image encoder stays frozen"
        );
        set_phase(&mut store, Phase::Frozen);
        assert!(store.iter().all(|(_, p)| !p.trainable));
    }

    #[test]
    fn disabled_modules_register_nothing() {
        let mut cfg = small_cfg();
        cfg.fecom_enabled = false;
        cfg.qttn_enabled = false;
        cfg.unet.injection.clear();
        let store: ParamStore<f32> = init_model(&cfg, 7);
        assert!(!adapters_present(&store));
    }

    #[test]
    fn enhanced_feature_falls_back_to_raw_embedding() {
        let cfg = small_cfg();
        let store: ParamStore<f32> = init_model(&cfg, 7);
        let scene = gen_scene(4, 0, 11).unwrap();
        let img: ImageSample<f32> = ImageSample::new(from_f32(scene.image.raster())).unwrap();
        let emb = encode_image(&store, &cfg.enc, &img);
        let caption = crate::encoders::encode_text(
            &store,
            &cfg.enc,
            &scene.caption(cfg.enc.l_t).unwrap(),
            crate::encoders::PromptKind::QuantityCaption,
        );
        let mut tape: Tape<f32> = Tape::new();
        let ig0 = enhanced_feature(&mut tape, &store, &cfg, &emb, &caption, 0.0);
        assert!(tape.tensor(ig0).bitwise_eq(&emb.vector));
        // with zero-initialized final FC the λ=1 value also equals the input
        let ig1 = enhanced_feature(&mut tape, &store, &cfg, &emb, &caption, 1.0);
        assert!(tape.tensor(ig1).max_abs_diff(&emb.vector) == 0.0);
    }

    #[test]
    fn predict_noise_without_adapters_matches_beta_zero() {
        let cfg = small_cfg();
        let store: ParamStore<f32> = init_model(&cfg, 9);
        let x = Tensor::from_fn(&[32, 32, 3], |i| ((i % 13) as f32 - 6.0) * 0.1);
        let prompt = null_text(&store, &cfg.enc);
        let run = |enh: bool, beta: f64| {
            let mut tape: Tape<f32> = Tape::new();
            let e = if enh {
                let v = Tensor::from_fn(&[128], |i| (i as f32).sin());
                Some(tape.constant(&v))
            } else {
                None
            };
            let (eps, _) = predict_noise(&mut tape, &store, &cfg, &x, 100, &prompt, e, beta);
            tape.tensor(eps)
        };
        let plain = run(false, 1.0);
        let beta_zero = run(true, 0.0);
        assert!(plain.bitwise_eq(&beta_zero));
    }
}
