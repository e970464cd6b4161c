//! Diagnostics on a cached backbone checkpoint: per-timestep denoising
//! quality, single-step reconstruction, full sampling statistics.

use mqedit_core::checkpoint::load_checkpoint;
use mqedit_core::config::RunConfig;
use mqedit_core::diffusion::{edit, q_sample, schedule_from, to_signed, EditRequest, ImageInput};
use mqedit_core::encoders::null_text;
use mqedit_core::model::predict_noise;
use mqedit_core::rng::Rng;
use mqedit_core::synthdata::{count_objects, gen_scene};
use mqedit_core::tape::Tape;
use mqedit_core::tensor::Tensor;

fn main() {
    let path = std::env::args().nth(1).expect("usage: diag <ckpt>");
    let (store, mut cfg) = load_checkpoint(std::path::Path::new(&path)).unwrap();
    // evaluate the backbone alone
    cfg.fecom_enabled = false;
    cfg.qttn_enabled = false;
    cfg.unet.injection.clear();
    let _ = RunConfig::desk();
    let schedule = schedule_from(&cfg);
    let scene = gen_scene(5, 0, 4141).unwrap();
    let x0 = to_signed::<f32>(&scene.image);
    let prompt = null_text(&store, &cfg.enc);

    println!("per-timestep: loss = E|eps_hat-eps|^2, x0_mse = |x0_hat-x0|^2");
    for &t in &[25usize, 100, 300, 500, 700, 900, 980] {
        let mut loss_acc = 0.0;
        let mut x0_acc = 0.0;
        let trials = 4;
        for trial in 0..trials {
            let mut rng = Rng::seeded(900 + trial);
            let mut nd = vec![0.0f32; x0.numel()];
            rng.fill_normal(&mut nd, 1.0);
            let eps = Tensor::new(x0.shape(), nd);
            let x_t = q_sample(&x0, t, &eps, &schedule);
            let mut tape: Tape<f32> = Tape::new();
            let (ep, _) = predict_noise(&mut tape, &store, &cfg, &x_t, t, &prompt, None, 0.0);
            let eps_hat = tape.tensor(ep);
            let ab = schedule.alpha_bar(t as isize);
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let mut l = 0.0f64;
            let mut xm = 0.0f64;
            for i in 0..x0.numel() {
                let e = eps_hat.data()[i];
                l += ((e - eps.data()[i]) as f64).powi(2);
                let x0_hat = (x_t.data()[i] - sb * e) / sa;
                xm += ((x0_hat - x0.data()[i]) as f64).powi(2);
            }
            loss_acc += l / x0.numel() as f64;
            x0_acc += xm / x0.numel() as f64;
        }
        println!(
            "t={t:4}  ab={:.4}  loss={:.4}  x0_mse={:.4}",
            schedule.alpha_bar(t as isize),
            loss_acc / trials as f64,
            x0_acc / trials as f64
        );
    }

    // full unconditional samples
    for seed in [5u64, 6, 7] {
        let req = EditRequest {
            image: ImageInput::Raster(scene.image.clone()),
            caption: scene.caption(cfg.enc.l_t).unwrap(),
            edit: None,
            lambda: 0.0,
            beta: 0.0,
            seed,
            steps: 50,
            perturb: None,
        };
        let out = edit(&store, &cfg, &req).unwrap();
        let data = out.raster().data();
        let mn = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let mx = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mean: f32 = data.iter().sum::<f32>() / data.len() as f32;
        let at_bounds =
            data.iter().filter(|&&v| v == 0.0 || v == 1.0).count() as f64 / data.len() as f64;
        let report = count_objects(&out, 0.5);
        println!(
            "sample seed={seed}: min={mn:.3} max={mx:.3} mean={mean:.3} clamped={:.2} detected={} masses={:?}",
            at_bounds, report.detected, report.masses
        );
    }
}
