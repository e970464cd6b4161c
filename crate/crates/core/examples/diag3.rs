//! Leverage probe: how strongly does the trained backbone's output react
//! to perturbations injected at the insertion block, relative to its
//! reaction at other depths? Uses β-scaled random injections as controlled
//! perturbations of the cross-attention branch.

use mqedit_core::backbone::InjectionHook;
use mqedit_core::checkpoint::load_checkpoint;
use mqedit_core::config::RunConfig;
use mqedit_core::diffusion::{q_sample, schedule_from, to_signed};
use mqedit_core::encoders::null_text;
use mqedit_core::model::init_model;
use mqedit_core::qttn::init_qttn;
use mqedit_core::rng::Rng;
use mqedit_core::synthdata::gen_scene;
use mqedit_core::tape::Tape;
use mqedit_core::tensor::{ParamStore, Tensor};

fn main() {
    let path = std::env::args().nth(1).expect("usage: diag3 <base_ckpt>");
    let (base, cfg0) = load_checkpoint(std::path::Path::new(&path)).unwrap();
    let scene = gen_scene(6, 0, 31415).unwrap();
    let x0 = to_signed::<f32>(&scene.image);
    let schedule = schedule_from(&cfg0);
    for &t in &[100usize, 400, 700] {
        let mut rng = Rng::seeded(2000 + t as u64);
        let mut nd = vec![0.0f32; x0.numel()];
        rng.fill_normal(&mut nd, 1.0);
        let eps = Tensor::new(x0.shape(), nd);
        let x_t = q_sample(&x0, t, &eps, &schedule);
        print!("t={t:4}: ");
        for k in 1..=11usize {
            let mut cfg = RunConfig::desk();
            cfg.unet.injection = vec![k];
            // fresh random injector at block k over the trained backbone
            let mut store: ParamStore<f32> = base.clone();
            let dims = cfg.qttn_dims_for_block(k).unwrap();
            init_qttn(&mut store, &format!("qttn.b{k}"), &dims, 99 + k as u64);
            let ctx_out = dims.n_ctx * dims.heads * dims.head_dim;
            let mut rng2 = Rng::seeded(500 + k as u64);
            let mut wv = vec![0.0f32; cfg.enc.d_i * ctx_out];
            rng2.fill_normal(&mut wv, 1.0 / (cfg.enc.d_i as f64).sqrt());
            store.param_mut(&format!("qttn.b{k}.wv.w")).value =
                Tensor::new(&[cfg.enc.d_i, ctx_out], wv);
            // missing fecom is fine: raw embedding feeds the injector
            cfg.fecom_enabled = false;
            let prompt = null_text(&store, &cfg.enc);
            let emb = Tensor::from_fn(&[128], |i| ((i * 37 % 29) as f32 - 14.0) * 0.1);
            let run = |beta: f64| {
                let mut tape: Tape<f32> = Tape::new();
                let hook = if beta != 0.0 {
                    let e = tape.constant(&emb);
                    Some(InjectionHook {
                        enhanced: e,
                        beta,
                        extraction_enabled: true,
                        heads: cfg.qttn_heads,
                        n_ctx: cfg.qttn_ctx,
                        d_i: cfg.enc.d_i,
                    })
                } else {
                    None
                };
                let xv = tape.constant(&x_t);
                let (ep, _) = mqedit_core::backbone::unet_forward(
                    &mut tape, &store, &cfg.unet, xv, t, &prompt, hook,
                );
                tape.tensor(ep)
            };
            let off = run(0.0);
            let on = run(1.0);
            let delta: f64 = off
                .data()
                .iter()
                .zip(on.data().iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            print!("b{k}={delta:.3} ");
        }
        println!();
    }
    // keep the pretrained-store path alive for type of init_model
    let _unused: ParamStore<f32> = init_model(&RunConfig::desk(), 1);
}
