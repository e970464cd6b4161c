//! Pilot run: trains the desk model at a configurable scale and prints the
//! count-match rates that drive the quantity-consistency gates.
//!
//!   cargo run --release -p mqedit-core --example pilot -- \
//!       <base_steps> <adapter_steps> <corpus> <eval_scenes>

use mqedit_core::ablate::{base_store, evaluate};
use mqedit_core::config::RunConfig;
use mqedit_core::diffusion::{run_phase, TrainPhase};
use mqedit_core::model::{init_model, set_phase, Phase};
use mqedit_core::synthdata::gen_corpus;

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric args"))
        .collect();
    let mut cfg = RunConfig::desk();
    if args.len() >= 4 {
        cfg.train.base_steps = args[0];
        cfg.train.steps = args[1];
        cfg.corpus.size = args[2];
        cfg.eval.scenes = args[3];
    }
    if args.len() >= 5 {
        cfg.seed = args[4] as u64;
    }
    eprintln!(
        "pilot: base={} adapter={} corpus={} eval={}",
        cfg.train.base_steps, cfg.train.steps, cfg.corpus.size, cfg.eval.scenes
    );
    let t0 = std::time::Instant::now();
    let scenes = gen_corpus(&cfg.corpus).unwrap();
    let workdir = std::env::temp_dir().join("mq_pilot_cache");
    std::fs::create_dir_all(&workdir).unwrap();
    let base = base_store(&cfg, &scenes, &workdir, &mut |m| {
        eprintln!("[{:.0}s] {m}", t0.elapsed().as_secs_f64())
    })
    .unwrap();
    let mut store = init_model::<f32>(&cfg, cfg.seed);
    for (name, p) in base.iter() {
        if store.contains(name) && store.get(name).shape() == p.value.shape() {
            store.param_mut(name).value = p.value.clone();
        }
    }
    run_phase(&mut store, &cfg, &scenes, TrainPhase::Adapter, &mut |e| {
        eprintln!("[{:.0}s] {}", t0.elapsed().as_secs_f64(), e.render())
    })
    .unwrap();
    set_phase(&mut store, Phase::Frozen);
    mqedit_core::checkpoint::save_checkpoint(&workdir.join("full.mqck"), &store, &cfg).unwrap();
    eprintln!("[{:.0}s] evaluating (λ=1, β=1)", t0.elapsed().as_secs_f64());
    let (mse_on, rate_on) = evaluate(&store, &cfg, 1.0, 1.0, None).unwrap();
    eprintln!("[{:.0}s] evaluating (β=0)", t0.elapsed().as_secs_f64());
    let (mse_off, rate_off) = evaluate(&store, &cfg, 1.0, 0.0, None).unwrap();
    println!(
        "ON  (λ=1,β=1): recon_mse={mse_on:.5} count_match={rate_on:.3}\nOFF (β=0):     recon_mse={mse_off:.5} count_match={rate_off:.3}\ntotal {:.0}s",
        t0.elapsed().as_secs_f64()
    );
}
