//! Conditioning diagnostics on a trained checkpoint: per-timestep loss
//! with the injection on versus off, quantity-attention entropy, and
//! injection magnitudes.

use mqedit_core::checkpoint::load_checkpoint;
use mqedit_core::diffusion::{q_sample, schedule_from, to_signed};
use mqedit_core::encoders::{encode_image, encode_text, null_text, ImageSample, PromptKind};
use mqedit_core::model::{enhanced_feature, predict_noise};
use mqedit_core::qttn::qttn_attend;
use mqedit_core::rng::Rng;
use mqedit_core::synthdata::gen_scene;
use mqedit_core::tape::Tape;
use mqedit_core::tensor::{from_f32, Tensor};

fn main() {
    let path = std::env::args().nth(1).expect("usage: diag2 <ckpt>");
    let (store, cfg) = load_checkpoint(std::path::Path::new(&path)).unwrap();
    let schedule = schedule_from(&cfg);
    let prompt = null_text(&store, &cfg.enc);

    println!("per-timestep loss, conditioned (β=1, λ=1) vs bare (β=0):");
    for &t in &[25usize, 100, 200, 300, 450, 600, 800] {
        let mut on_acc = 0.0;
        let mut off_acc = 0.0;
        let scenes = 6;
        for s in 0..scenes {
            let scene = gen_scene(3 + (s % 7), s % 6, 777_000 + s as u64).unwrap();
            let x0 = to_signed::<f32>(&scene.image);
            let mut rng = Rng::seeded(31_000 + (t * 13 + s) as u64);
            let mut nd = vec![0.0f32; x0.numel()];
            rng.fill_normal(&mut nd, 1.0);
            let eps = Tensor::new(x0.shape(), nd);
            let x_t = q_sample(&x0, t, &eps, &schedule);
            let img = ImageSample::new(from_f32(scene.image.raster())).unwrap();
            let emb = encode_image(&store, &cfg.enc, &img);
            let caption = encode_text(
                &store,
                &cfg.enc,
                &scene.caption(cfg.enc.l_t).unwrap(),
                PromptKind::QuantityCaption,
            );
            for on in [true, false] {
                let mut tape: Tape<f32> = Tape::new();
                let cond = if on {
                    Some(enhanced_feature(
                        &mut tape, &store, &cfg, &emb, &caption, 1.0,
                    ))
                } else {
                    None
                };
                let beta = if on { 1.0 } else { 0.0 };
                let (ep, _) = predict_noise(&mut tape, &store, &cfg, &x_t, t, &prompt, cond, beta);
                let mse: f64 = tape
                    .data(ep)
                    .iter()
                    .zip(eps.data().iter())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / eps.numel() as f64;
                if on {
                    on_acc += mse;
                } else {
                    off_acc += mse;
                }
            }
        }
        println!(
            "t={t:4}: on={:.5} off={:.5} ratio={:.3}",
            on_acc / scenes as f64,
            off_acc / scenes as f64,
            on_acc / off_acc
        );
    }

    // attention structure at the injection block
    let scene = gen_scene(6, 0, 424242).unwrap();
    let img = ImageSample::new(from_f32(scene.image.raster())).unwrap();
    let emb = encode_image(&store, &cfg.enc, &img);
    let caption = encode_text(
        &store,
        &cfg.enc,
        &scene.caption(cfg.enc.l_t).unwrap(),
        PromptKind::QuantityCaption,
    );
    let x0 = to_signed::<f32>(&scene.image);
    let mut rng = Rng::seeded(5150);
    let mut nd = vec![0.0f32; x0.numel()];
    rng.fill_normal(&mut nd, 1.0);
    let eps = Tensor::new(x0.shape(), nd);
    let x_t = q_sample(&x0, 400, &eps, &schedule);
    let mut tape: Tape<f32> = Tape::new();
    let cond = enhanced_feature(&mut tape, &store, &cfg, &emb, &caption, 1.0);
    let (_, trace) = predict_noise(&mut tape, &store, &cfg, &x_t, 400, &prompt, Some(cond), 1.0);
    let block1 = cfg.unet.injection[0];
    let z = trace.block_input(block1).clone();
    let dims = cfg.qttn_dims_for_block(block1).unwrap();
    let mut tape2: Tape<f32> = Tape::new();
    let pos = mqedit_core::backbone::position_table::<f32>(z.shape()[0], z.shape()[1]);
    let zp = {
        let zv = tape2.constant(&z);
        let pv = tape2.constant(&pos);
        tape2.add(zv, pv)
    };
    let mut tape3 = tape2;
    let ig = {
        let mut t = Tape::new();
        let v = enhanced_feature(&mut t, &store, &cfg, &emb, &caption, 1.0);
        t.tensor(v)
    };
    let igv = tape3.constant(&ig);
    let qt = qttn_attend(
        &mut tape3,
        &store,
        &format!("qttn.b{block1}"),
        &dims,
        zp,
        igv,
        cfg.extraction,
    );
    let attn = tape3.tensor(qt.attn);
    let heads = dims.heads;
    let n_z = z.shape()[0];
    for h in 0..heads.min(4) {
        let mut ent = 0.0;
        for i in 0..n_z {
            for j in 0..dims.n_ctx {
                let p = attn.data()[h * n_z * dims.n_ctx + i * dims.n_ctx + j] as f64;
                if p > 1e-12 {
                    ent -= p * p.ln();
                }
            }
        }
        println!(
            "head {h}: mean attention entropy {:.3} (uniform would be {:.3})",
            ent / n_z as f64,
            (dims.n_ctx as f64).ln()
        );
    }
    let inj = tape3.tensor(qt.injection);
    let inj_norm: f64 = inj
        .data()
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let z_norm: f64 = z
        .data()
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    println!("|V_new| = {inj_norm:.3}, |z4| = {z_norm:.3}");
}
