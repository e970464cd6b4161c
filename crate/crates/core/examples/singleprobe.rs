//! Pathway probe: can the adapters memorize a single image? If the
//! adapter-phase loss on one repeated scene does not collapse well below
//! the unconditional floor, the injection path is starved.

use mqedit_core::config::RunConfig;
use mqedit_core::diffusion::{run_phase, TrainPhase};
use mqedit_core::model::init_model;
use mqedit_core::synthdata::gen_scene;

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().unwrap())
        .collect();
    let (base_steps, adapter_steps) = (args[0], args[1]);
    let mut cfg = RunConfig::desk();
    cfg.train.base_steps = base_steps;
    cfg.train.steps = adapter_steps;
    cfg.train.batch = 4;
    cfg.train.log_every = 50;
    let scene = gen_scene(6, 0, 777).unwrap();
    let scenes = vec![scene];
    let mut store = init_model::<f32>(&cfg, cfg.seed);
    let t0 = std::time::Instant::now();
    run_phase(&mut store, &cfg, &scenes, TrainPhase::Base, &mut |e| {
        eprintln!("[{:.0}s] {}", t0.elapsed().as_secs_f64(), e.render())
    })
    .unwrap();
    run_phase(&mut store, &cfg, &scenes, TrainPhase::Adapter, &mut |e| {
        eprintln!("[{:.0}s] {}", t0.elapsed().as_secs_f64(), e.render())
    })
    .unwrap();
    // how big did the injection actually get?
    let wv = store.get("qttn.b4.wv.w");
    let norm: f64 = wv
        .data()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    println!("|qttn.b4.wv.w| = {norm:.4}");
}
