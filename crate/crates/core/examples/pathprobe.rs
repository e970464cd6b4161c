//! Conditioning-pathway probe on a small corpus: with a handful of
//! distinct scenes, an unconditional model cannot resolve which scene a
//! mid-noise sample came from, so any adapter-phase loss drop below the
//! base plateau is attributable to the injected conditioning.

use mqedit_core::config::RunConfig;
use mqedit_core::diffusion::{run_phase, TrainPhase};
use mqedit_core::model::init_model;
use mqedit_core::synthdata::gen_corpus;

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().unwrap())
        .collect();
    let (corpus, base_steps, adapter_steps) = (args[0], args[1], args[2]);
    let mut cfg = RunConfig::desk();
    cfg.train.base_steps = base_steps;
    cfg.train.steps = adapter_steps;
    cfg.train.batch = 8;
    cfg.train.log_every = 50;
    cfg.corpus.size = corpus;
    let scenes = gen_corpus(&cfg.corpus).unwrap();
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
}
