//! Rough timing of the hot paths.

use mqedit_core::config::RunConfig;
use mqedit_core::diffusion::{build_train_loss, schedule_from, TrainPhase};
use mqedit_core::model::{init_model, set_phase, Phase};
use mqedit_core::rng::Rng;
use mqedit_core::synthdata::gen_scene;
use mqedit_core::tape::Tape;
use mqedit_core::tensor::Tensor;

fn main() {
    let mut cfg = RunConfig::desk();
    cfg.corpus.size = 4;
    let scene = gen_scene(4, 0, 1).unwrap();
    let schedule = schedule_from(&cfg);

    let mut s64 = init_model::<f64>(&cfg, 7);
    set_phase(&mut s64, Phase::Adapters);
    let mut s32 = init_model::<f32>(&cfg, 7);
    set_phase(&mut s32, Phase::Adapters);

    let mut rng = Rng::seeded(3);
    let mut n64 = vec![0.0f64; 3072];
    rng.fill_normal(&mut n64, 1.0);
    let e64 = Tensor::new(&[32, 32, 3], n64.clone());
    let e32 = Tensor::new(
        &[32, 32, 3],
        n64.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
    );

    let t0 = std::time::Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let mut tape: Tape<f64> = Tape::new();
        let loss = build_train_loss(
            &mut tape,
            &s64,
            &cfg,
            &scene,
            TrainPhase::Adapter,
            500,
            &e64,
            &schedule,
        );
        std::hint::black_box(tape.scalar(loss));
    }
    println!(
        "f64 forward: {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape: Tape<f32> = Tape::new();
        let loss = build_train_loss(
            &mut tape,
            &s32,
            &cfg,
            &scene,
            TrainPhase::Adapter,
            500,
            &e32,
            &schedule,
        );
        std::hint::black_box(tape.scalar(loss));
    }
    println!(
        "f32 forward: {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape: Tape<f32> = Tape::new();
        let loss = build_train_loss(
            &mut tape,
            &s32,
            &cfg,
            &scene,
            TrainPhase::Adapter,
            500,
            &e32,
            &schedule,
        );
        let grads = tape.backward(loss);
        std::hint::black_box(tape.named_grads(&grads).len());
    }
    println!(
        "f32 fwd+bwd: {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    // raw matmul speed
    let mut a = vec![0.0f32; 256 * 256];
    let mut b = vec![0.0f32; 256 * 256];
    rng.fill_normal(&mut a, 1.0);
    rng.fill_normal(&mut b, 1.0);
    let mut out = vec![0.0f32; 256 * 256];
    let t0 = std::time::Instant::now();
    let reps = 200;
    for _ in 0..reps {
        out.iter_mut().for_each(|v| *v = 0.0);
        mqedit_core::tensor::mm_nn(&a, &b, 256, 256, 256, &mut out);
        std::hint::black_box(out[0]);
    }
    let gmacs = (256f64 * 256.0 * 256.0 * reps as f64) / t0.elapsed().as_secs_f64() / 1e9;
    println!("mm_nn f32 256^3: {:.2} GMAC/s", gmacs);

    let mut a64 = vec![0.0f64; 256 * 256];
    let mut b64 = vec![0.0f64; 256 * 256];
    rng.fill_normal(&mut a64, 1.0);
    rng.fill_normal(&mut b64, 1.0);
    let mut out64 = vec![0.0f64; 256 * 256];
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        out64.iter_mut().for_each(|v| *v = 0.0);
        mqedit_core::tensor::mm_nn(&a64, &b64, 256, 256, 256, &mut out64);
        std::hint::black_box(out64[0]);
    }
    let gmacs = (256f64 * 256.0 * 256.0 * reps as f64) / t0.elapsed().as_secs_f64() / 1e9;
    println!("mm_nn f64 256^3: {:.2} GMAC/s", gmacs);
}
