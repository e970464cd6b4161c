//! Finite-difference verification of recorded gradients.
//!
//! For every trainable parameter reached by the probe loss, up to
//! `max_coords` coordinates are sampled with a fixed per-name seed and the
//! analytic gradient is compared against central differences
//! (f(θ+h·e) − f(θ−h·e))/2h. The per-tensor relative error is
//! ‖analytic − fd‖₂ / max(‖fd‖₂, floor) over the sampled coordinates, so a
//! gradient that is wrong by a factor of two reports an error of 1.

use std::collections::BTreeMap;

use crate::num::Scalar;
use crate::rng::{derive_seed, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per tensor.
    pub max_coords: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Relative quantization of one loss evaluation (machine epsilon of
    /// the storage type); sets the FD noise floor.
    pub eps_t: f64,
}

impl GradCheckOpts {
    /// 64-bit defaults.
    pub fn f64_default() -> Self {
        GradCheckOpts {
            step: 1e-4,
            max_coords: 64,
            seed: 0x9d_c0de,
            floor: 1e-9,
            eps_t: f64::EPSILON,
        }
    }

    /// 32-bit storage needs a larger step to beat quantization noise.
    pub fn f32_default() -> Self {
        GradCheckOpts {
            step: 2e-2,
            max_coords: 64,
            seed: 0x9d_c0de,
            floor: 1e-4,
            eps_t: f32::EPSILON as f64,
        }
    }

    /// Smallest gradient magnitude resolvable by the central difference at
    /// this loss magnitude; coordinates where both sides sit below it are
    /// agreement within noise.
    pub fn noise_threshold(&self, loss_magnitude: f64) -> f64 {
        8.0 * self.eps_t * loss_magnitude.abs().max(1.0) / (2.0 * self.step)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// ‖analytic − fd‖₂ / max(‖fd‖₂, floor) over sampled coordinates.
    pub rel_err: f64,
    /// (flat index, analytic, fd) of the worst sampled coordinate.
    pub worst: (usize, f64, f64),
    pub coords: usize,
    pub non_finite: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                if e.non_finite {
                    f64::INFINITY
                } else {
                    e.rel_err
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn any_non_finite(&self) -> bool {
        self.entries.iter().any(|e| e.non_finite)
    }
}

/// Analytic gradients of the probe loss for every named parameter leaf.
pub fn analytic_grads<T: Scalar>(
    store: &ParamStore<T>,
    build: &dyn Fn(&mut Tape<T>, &ParamStore<T>) -> Var,
) -> Vec<(String, Vec<T>)> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss);
    tape.named_grads(&grads)
}

fn eval_loss<T: Scalar>(
    store: &ParamStore<T>,
    build: &dyn Fn(&mut Tape<T>, &ParamStore<T>) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.scalar(loss).to_f64()
}

/// Central differences at sampled coordinates for each named tensor.
pub fn fd_grads_sampled<T: Scalar>(
    store: &ParamStore<T>,
    build: &dyn Fn(&mut Tape<T>, &ParamStore<T>) -> Var,
    names: &[String],
    opts: &GradCheckOpts,
) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut work = store.clone();
    let mut out = BTreeMap::new();
    for name in names {
        let n = work.get(name).numel();
        let coords = sample_coords(n, opts.max_coords, derive_seed(opts.seed, name));
        let mut fd = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = work.get(name).data()[i];
            let h = T::from_f64(opts.step);
            work.param_mut(name).value.data_mut()[i] = orig + h;
            let fp = eval_loss(&work, build);
            work.param_mut(name).value.data_mut()[i] = orig - h;
            let fm = eval_loss(&work, build);
            work.param_mut(name).value.data_mut()[i] = orig;
            fd.push((i, (fp - fm) / (2.0 * opts.step)));
        }
        out.insert(name.clone(), fd);
    }
    out
}

fn sample_coords(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = Rng::seeded(seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < max {
        picked.insert(rng.range(0, n));
    }
    picked.into_iter().collect()
}

/// Parallel central differences: tensors are distributed over workers,
/// each with its own store copy, and collected by name, so the result is
/// identical to the sequential path.
pub fn fd_grads_sampled_parallel<T: Scalar>(
    store: &ParamStore<T>,
    build: &(dyn Fn(&mut Tape<T>, &ParamStore<T>) -> Var + Sync),
    names: &[String],
    opts: &GradCheckOpts,
    threads: usize,
) -> BTreeMap<String, Vec<(usize, f64)>> {
    let per_name: Vec<Vec<(usize, f64)>> = crate::par::map_indexed(names.len(), threads, |ni| {
        let name = &names[ni];
        let mut work = store.clone();
        let n = work.get(name).numel();
        let coords = sample_coords(n, opts.max_coords, derive_seed(opts.seed, name));
        let mut fd = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = work.get(name).data()[i];
            let h = T::from_f64(opts.step);
            work.param_mut(name).value.data_mut()[i] = orig + h;
            let fp = eval_loss(&work, build);
            work.param_mut(name).value.data_mut()[i] = orig - h;
            let fm = eval_loss(&work, build);
            work.param_mut(name).value.data_mut()[i] = orig;
            fd.push((i, (fp - fm) / (2.0 * opts.step)));
        }
        fd
    });
    names.iter().cloned().zip(per_name).collect()
}

/// Compares analytic gradients against sampled finite differences.
/// Coordinates where both sides are below `noise` contribute nothing:
/// an exactly-zero gradient confirmed as noise by the FD is agreement,
/// while a nonzero analytic value against a zero FD still registers.
pub fn compare_grads<T: Scalar>(
    analytic: &[(String, Vec<T>)],
    fd: &BTreeMap<String, Vec<(usize, f64)>>,
    opts: &GradCheckOpts,
    noise: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (name, a) in analytic {
        let Some(samples) = fd.get(name) else {
            continue;
        };
        let mut diff_sq = 0.0;
        let mut fd_sq = 0.0;
        let mut worst = (0usize, 0.0, 0.0);
        let mut worst_gap = -1.0;
        let mut non_finite = false;
        for &(i, n_i) in samples {
            let a_i = a[i].to_f64();
            if !a_i.is_finite() || !n_i.is_finite() {
                non_finite = true;
            }
            if a_i.abs() <= noise && n_i.abs() <= noise {
                continue;
            }
            let gap = (a_i - n_i).abs();
            diff_sq += gap * gap;
            fd_sq += n_i * n_i;
            if gap > worst_gap {
                worst_gap = gap;
                worst = (i, a_i, n_i);
            }
        }
        let rel_err = diff_sq.sqrt() / fd_sq.sqrt().max(opts.floor);
        report.entries.push(GradCheckEntry {
            name: name.clone(),
            rel_err,
            worst,
            coords: samples.len(),
            non_finite,
        });
    }
    report
}

/// Full check: analytic vs central differences for every trainable
/// parameter the probe loss reaches.
pub fn grad_check<T: Scalar>(
    store: &ParamStore<T>,
    build: &dyn Fn(&mut Tape<T>, &ParamStore<T>) -> Var,
    opts: &GradCheckOpts,
) -> GradCheckReport {
    let analytic = analytic_grads(store, build);
    let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
    let fd = fd_grads_sampled(store, build, &names, opts);
    let noise = opts.noise_threshold(eval_loss(store, build));
    compare_grads(&analytic, &fd, opts, noise)
}

// ── Per-module suite ──────────────────────────────────────────────────
//
// 64-bit checks compare f64 gradients against f64 central differences.
// 32-bit checks compare the f32 tape's gradients against the same f64
// finite-difference oracle evaluated at the exact same parameter point
// (the f32 → f64 embedding is lossless); a plain f32 difference quotient
// would drown in forward-rounding noise long before the 1e-3 gate.

pub const F64_GATE: f64 = 1e-4;
pub const F32_GATE: f64 = 1e-3;
/// Gradient magnitude below which an f32 analytic value and the f64
/// reference are both treated as zero.
const F32_ZERO_BAND: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub bits: u32,
    pub threshold: f64,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        !self.report.any_non_finite() && self.report.max_rel_err() <= self.threshold
    }

    pub fn render(&self) -> String {
        format!(
            "module={} bits={} tensors={} max_rel_err={:.3e} threshold={:.0e} time={:.2}s {}",
            self.module,
            self.bits,
            self.report.entries.len(),
            self.report.max_rel_err(),
            self.threshold,
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOutcome {
    pub checks: Vec<ModuleCheck>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }
}

/// f32 gradients against the f64 finite-difference oracle at the same
/// point. The oracle evaluations spread over `threads` workers.
pub fn grad_check_f32_against_f64(
    store32: &ParamStore<f32>,
    build32: &dyn Fn(&mut Tape<f32>, &ParamStore<f32>) -> Var,
    build64: &(dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var + Sync),
    threads: usize,
) -> GradCheckReport {
    let analytic32 = analytic_grads(store32, build32);
    let analytic: Vec<(String, Vec<f64>)> = analytic32
        .into_iter()
        .map(|(n, g)| (n, g.into_iter().map(|v| v as f64).collect()))
        .collect();
    let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
    let store64: ParamStore<f64> = store32.convert();
    let opts = GradCheckOpts {
        floor: 1e-4,
        ..GradCheckOpts::f64_default()
    };
    let fd = fd_grads_sampled_parallel(&store64, build64, &names, &opts, threads);
    compare_grads(&analytic, &fd, &opts, F32_ZERO_BAND)
}

/// Replaces the zero-initialized adapter tensors with small seeded values
/// so every gradient path is exercised at a generic point.
fn randomize_adapters<T: Scalar>(store: &mut ParamStore<T>, seed: u64) {
    let names: Vec<String> = store
        .names()
        .filter(|n| (n.starts_with("fecom.") || n.starts_with("qttn.")) && n.ends_with(".w"))
        .map(|s| s.to_string())
        .collect();
    for name in names {
        let shape = store.get(&name).shape().to_vec();
        let fan_in = shape[0].max(1);
        let mut rng = Rng::for_tag(seed, &format!("probe.{name}"));
        let mut data = vec![T::ZERO; shape.iter().product()];
        rng.fill_normal(&mut data, 0.5 / (fan_in as f64).sqrt());
        store.param_mut(&name).value = crate::tensor::Tensor::new(&shape, data);
    }
}

mod probes {
    //! Probe losses for the suite, generic over the scalar type so the
    //! 32-bit and 64-bit sides share one definition.

    use super::*;
    use crate::config::RunConfig;
    use crate::synthdata::Scene;
    use crate::tensor::Tensor;

    pub fn fecom<T: Scalar>(
        cfg: &RunConfig,
        scene: &Scene,
    ) -> impl Fn(&mut Tape<T>, &ParamStore<T>) -> Var {
        let cfg = cfg.clone();
        let scene = scene.clone();
        move |tape, s| {
            let img =
                crate::encoders::ImageSample::new(crate::tensor::from_f32(scene.image.raster()))
                    .expect("scene in range");
            let emb = crate::encoders::encode_image(s, &cfg.enc, &img);
            let caption = crate::encoders::encode_text(
                s,
                &cfg.enc,
                &scene.caption(cfg.enc.l_t).expect("caption"),
                crate::encoders::PromptKind::QuantityCaption,
            );
            let trace = crate::fecom::fecom_forward(
                tape,
                s,
                &cfg.fecom,
                cfg.layernorm,
                &emb,
                &caption,
                1.0,
            );
            let loss = tape.half_sum_sq(trace.enhanced);
            tape.scale(loss, T::from_f64(1e-2))
        }
    }

    pub fn qttn<T: Scalar>(
        cfg: &RunConfig,
        block1: usize,
    ) -> impl Fn(&mut Tape<T>, &ParamStore<T>) -> Var {
        let dims = cfg.qttn_dims_for_block(block1).expect("validated");
        let desc = *cfg.unet.block(block1);
        let d_i = cfg.enc.d_i;
        let seed = cfg.seed;
        move |tape, s| {
            let mut rng = Rng::for_tag(seed, "gradcheck.qttn.z");
            let mut zd = vec![T::ZERO; desc.tokens * desc.width];
            rng.fill_normal(&mut zd, 0.7);
            let z = tape.constant(&Tensor::new(&[desc.tokens, desc.width], zd));
            let mut ed = vec![T::ZERO; d_i];
            rng.fill_normal(&mut ed, 1.0);
            let e = tape.constant(&Tensor::new(&[d_i], ed));
            let trace =
                crate::qttn::qttn_attend(tape, s, &format!("qttn.b{block1}"), &dims, z, e, true);
            let loss = tape.half_sum_sq(trace.injection);
            tape.scale(loss, T::from_f64(1e-2))
        }
    }

    pub fn unet_block<T: Scalar>(
        cfg: &RunConfig,
        block1: usize,
    ) -> impl Fn(&mut Tape<T>, &ParamStore<T>) -> Var {
        let unet_cfg = cfg.unet.clone();
        let desc = *cfg.unet.block(block1);
        let (l_t, d_t) = (cfg.enc.l_t, cfg.enc.d_t);
        let seed = cfg.seed;
        move |tape, s| {
            let mut rng = Rng::for_tag(seed, "gradcheck.block.z");
            let mut zd = vec![T::ZERO; desc.tokens * desc.width];
            rng.fill_normal(&mut zd, 0.5);
            let z = tape.constant(&Tensor::new(&[desc.tokens, desc.width], zd));
            let mut cd = vec![T::ZERO; l_t * d_t];
            rng.fill_normal(&mut cd, 1.0);
            let ctx = tape.constant(&Tensor::new(&[l_t, d_t], cd));
            let tsin = tape.constant(&crate::backbone::sinusoid::<T>(
                13.0,
                crate::backbone::TIME_DIM,
            ));
            let out =
                crate::backbone::block_forward(tape, s, &unet_cfg, block1, z, ctx, tsin, None);
            let loss = tape.half_sum_sq(out);
            tape.scale(loss, T::from_f64(1e-3))
        }
    }

    pub fn pipeline<T: Scalar>(
        cfg: &RunConfig,
        scene: &Scene,
    ) -> impl Fn(&mut Tape<T>, &ParamStore<T>) -> Var {
        use crate::diffusion::{build_train_loss, schedule_from, TrainPhase};
        let cfg = cfg.clone();
        let scene = scene.clone();
        let schedule = schedule_from(&cfg);
        let t = cfg.schedule.timesteps / 2;
        move |tape, s| {
            let mut rng = Rng::for_tag(cfg.seed, "gradcheck.pipeline.eps");
            let mut nd = vec![T::ZERO; scene.image.raster().numel()];
            rng.fill_normal(&mut nd, 1.0);
            let eps = Tensor::new(scene.image.raster().shape(), nd);
            build_train_loss(
                tape,
                s,
                &cfg,
                &scene,
                TrainPhase::Adapter,
                t,
                &eps,
                &schedule,
            )
        }
    }
}

/// Gradient fidelity across the adapter modules and one backbone block:
/// f64 gradients against f64 central differences at the 1e-4 gate, f32
/// gradients against the f64 oracle at the 1e-3 gate, plus the full
/// training loss on a one-item batch with fixed timestep and noise.
pub fn run_suite(cfg: &crate::config::RunConfig) -> Result<SuiteOutcome, crate::error::MqError> {
    use crate::model::{init_model, set_phase, Phase};
    use crate::synthdata::gen_scene;

    cfg.validate()?;
    if !cfg.qttn_enabled || cfg.unet.injection.is_empty() || !cfg.fecom_enabled {
        return Err(crate::error::MqError::config(
            "gradient check needs both adapter modules enabled",
        ));
    }
    let scene = gen_scene(cfg.corpus.count_min.max(3), 0, cfg.corpus.seed)?;
    let block1 = cfg.unet.injection[0];

    let mut store64: ParamStore<f64> = init_model(cfg, cfg.seed);
    randomize_adapters(&mut store64, cfg.seed ^ 0xabcd);
    let mut store32: ParamStore<f32> = init_model(cfg, cfg.seed);
    randomize_adapters(&mut store32, cfg.seed ^ 0xabcd);

    let mut outcome = SuiteOutcome::default();
    let scoped64 = |module: &'static str,
                    outcome: &mut SuiteOutcome,
                    trainable: &[&str],
                    build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var| {
        let mut probe = store64.clone();
        probe.set_all_trainable(false);
        for prefix in trainable {
            probe.set_trainable(prefix, true);
        }
        let t0 = std::time::Instant::now();
        let report = grad_check(&probe, build, &GradCheckOpts::f64_default());
        outcome.checks.push(ModuleCheck {
            module,
            bits: 64,
            threshold: F64_GATE,
            report,
            seconds: t0.elapsed().as_secs_f64(),
        });
    };
    let scoped32 =
        |module: &'static str,
         outcome: &mut SuiteOutcome,
         store32: &ParamStore<f32>,
         trainable: &[&str],
         build32: &dyn Fn(&mut Tape<f32>, &ParamStore<f32>) -> Var,
         build64: &(dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var + Sync)| {
            let mut probe = store32.clone();
            probe.set_all_trainable(false);
            for prefix in trainable {
                probe.set_trainable(prefix, true);
            }
            let t0 = std::time::Instant::now();
            let report =
                grad_check_f32_against_f64(&probe, build32, build64, crate::par::worker_count());
            outcome.checks.push(ModuleCheck {
                module,
                bits: 32,
                threshold: F32_GATE,
                report,
                seconds: t0.elapsed().as_secs_f64(),
            });
        };

    let qttn_prefix = format!("qttn.b{block1}.");
    let block_prefix = format!("unet.b{block1:02}.");
    scoped64(
        "fecom",
        &mut outcome,
        &["fecom."],
        &probes::fecom::<f64>(cfg, &scene),
    );
    scoped64(
        "qttn",
        &mut outcome,
        &[&qttn_prefix],
        &probes::qttn::<f64>(cfg, block1),
    );
    scoped64(
        "unet-block",
        &mut outcome,
        &[&block_prefix],
        &probes::unet_block::<f64>(cfg, block1),
    );
    scoped32(
        "fecom",
        &mut outcome,
        &store32,
        &["fecom."],
        &probes::fecom::<f32>(cfg, &scene),
        &probes::fecom::<f64>(cfg, &scene),
    );
    scoped32(
        "qttn",
        &mut outcome,
        &store32,
        &[&qttn_prefix],
        &probes::qttn::<f32>(cfg, block1),
        &probes::qttn::<f64>(cfg, block1),
    );
    scoped32(
        "unet-block",
        &mut outcome,
        &store32,
        &[&block_prefix],
        &probes::unet_block::<f32>(cfg, block1),
        &probes::unet_block::<f64>(cfg, block1),
    );

    // full adapter pipeline, 32-bit gradients vs the f64 oracle
    {
        let mut probe = store32.clone();
        set_phase(&mut probe, Phase::Adapters);
        let t0 = std::time::Instant::now();
        let report = grad_check_f32_against_f64(
            &probe,
            &probes::pipeline::<f32>(cfg, &scene),
            &probes::pipeline::<f64>(cfg, &scene),
            crate::par::worker_count(),
        );
        outcome.checks.push(ModuleCheck {
            module: "pipeline",
            bits: 32,
            threshold: F32_GATE,
            report,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn store_with(name: &str, shape: &[usize], seed: u64) -> ParamStore<f64> {
        let mut rng = Rng::seeded(seed);
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        rng.fill_normal(&mut data, 1.0);
        let mut store = ParamStore::new();
        store.insert(name, Tensor::new(shape, data), true);
        store
    }

    #[test]
    fn linear_function_is_exact() {
        // f = Σ w·x for fixed x: the FD of a linear map is exact up to
        // rounding, so agreement must be at the 1e-10 level.
        let store = store_with("w", &[32], 1);
        let x = {
            let mut rng = Rng::seeded(2);
            let mut d = vec![0.0f64; 32];
            rng.fill_normal(&mut d, 1.0);
            Tensor::new(&[32], d)
        };
        let build = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let w = tape.param(s, "w");
            let xv = tape.constant(&x);
            let w2 = tape.reshape(w, &[1, 32]);
            let x2 = tape.reshape(xv, &[32, 1]);
            let y = tape.matmul(w2, x2);
            tape.sum_all(y)
        };
        let report = grad_check(&store, &build, &GradCheckOpts::f64_default());
        assert_eq!(report.entries.len(), 1);
        assert!(report.max_rel_err() <= 1e-10, "{}", report.max_rel_err());
    }

    #[test]
    fn softmax_attention_block_under_1e5() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seeded(3);
        for (name, shape) in [("q", &[4, 6][..]), ("k", &[5, 6][..]), ("v", &[5, 6][..])] {
            let n: usize = shape.iter().product();
            let mut d = vec![0.0f64; n];
            rng.fill_normal(&mut d, 1.0);
            store.insert(name, Tensor::new(shape, d), true);
        }
        let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let q = tape.param(s, "q");
            let k = tape.param(s, "k");
            let v = tape.param(s, "v");
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, 1.0 / 6.0f64.sqrt());
            let attn = tape.softmax_rows(scores);
            let out = tape.matmul(attn, v);
            tape.half_sum_sq(out)
        };
        let report = grad_check(&store, &build, &GradCheckOpts::f64_default());
        assert_eq!(report.entries.len(), 3);
        assert!(report.max_rel_err() <= 1e-5, "{}", report.max_rel_err());
    }

    #[test]
    fn planted_fault_reports_rel_err_near_one() {
        let store = store_with("w", &[16], 4);
        let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let w = tape.param(s, "w");
            tape.half_sum_sq(w)
        };
        let opts = GradCheckOpts::f64_default();
        let mut analytic = analytic_grads(&store, &build);
        for g in analytic[0].1.iter_mut() {
            *g *= 2.0; // corrupted gradient
        }
        let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
        let fd = fd_grads_sampled(&store, &build, &names, &opts);
        let noise = opts.noise_threshold(eval_loss(&store, &build));
        let report = compare_grads(&analytic, &fd, &opts, noise);
        let err = report.max_rel_err();
        assert!((err - 1.0).abs() < 0.05, "expected ~1, got {err}");
    }

    #[test]
    fn non_finite_analytic_is_flagged() {
        let store = store_with("w", &[4], 5);
        let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let w = tape.param(s, "w");
            tape.half_sum_sq(w)
        };
        let opts = GradCheckOpts::f64_default();
        let mut analytic = analytic_grads(&store, &build);
        analytic[0].1[0] = f64::NAN;
        let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
        let fd = fd_grads_sampled(&store, &build, &names, &opts);
        let noise = opts.noise_threshold(eval_loss(&store, &build));
        let report = compare_grads(&analytic, &fd, &opts, noise);
        assert!(report.any_non_finite());
        assert!(report.max_rel_err().is_infinite());
    }
}

#[cfg(test)]
mod suite_tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn desk_suite_passes_its_gates() {
        let mut cfg = RunConfig::desk();
        cfg.corpus.size = 4;
        let outcome = run_suite(&cfg).unwrap();
        assert_eq!(outcome.checks.len(), 7);
        for c in &outcome.checks {
            eprintln!("{}", c.render());
            assert!(c.passed(), "{}", c.render());
        }
    }
}
