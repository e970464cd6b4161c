//! Noise schedule, MSE trainer, and deterministic sampler.
//!
//! Training is plain noise-prediction MSE. The edit prompt is the null
//! text throughout training; the quantity caption always conditions the
//! feature-compensation branch. The backbone is pretrained unconditionally
//! first, then frozen while only the adapters learn. Sampling is a
//! deterministic (η = 0) subsequence walk over the schedule from seeded
//! initial noise, so identical requests produce bitwise identical rasters.

use crate::config::RunConfig;
use crate::encoders::{
    encode_image, encode_text, null_text, perturb_embedding, ImageEmbedding, ImageSample,
    PromptEmbedding, PromptKind, TokenSequence,
};
use crate::error::MqError;
use crate::model::{self, Phase};
use crate::num::Scalar;
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::rng::{derive_seed, Rng};
use crate::synthdata::Scene;
use crate::tape::{Tape, Var};
use crate::tensor::{from_f32, ParamStore, Tensor};

// ── Schedule ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// Π α up to and including t; queries at t = -1 return 1.
    pub fn alpha_bar(&self, t: isize) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bar[t as usize]
        }
    }
}

/// Linear β schedule; enforces the monotonicity invariants.
pub fn make_schedule(
    timesteps: usize,
    beta_first: f64,
    beta_last: f64,
) -> Result<NoiseSchedule, MqError> {
    if !(beta_first > 0.0 && beta_first < beta_last && beta_last < 1.0) {
        return Err(MqError::config(format!(
            "schedule requires 0 < beta_first < beta_last < 1, got {beta_first}, {beta_last}"
        )));
    }
    if timesteps < 2 {
        return Err(MqError::config("schedule needs at least 2 steps"));
    }
    let mut betas = Vec::with_capacity(timesteps);
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0f64;
    for i in 0..timesteps {
        let b = beta_first + (beta_last - beta_first) * i as f64 / (timesteps - 1) as f64;
        betas.push(b);
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    debug_assert!(betas.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(alpha_bar.windows(2).all(|w| w[0] > w[1]));
    Ok(NoiseSchedule { betas, alpha_bar })
}

pub fn schedule_from(cfg: &RunConfig) -> NoiseSchedule {
    make_schedule(
        cfg.schedule.timesteps,
        cfg.schedule.beta_first,
        cfg.schedule.beta_last,
    )
    .expect("validated schedule")
}

/// Forward noising: x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Tensor<T> {
    assert!(t < s.len(), "q_sample: t={t} out of range 0..{}", s.len());
    assert_eq!(x0.shape(), eps.shape(), "q_sample: shape mismatch");
    let ab = s.alpha_bar(t as isize);
    let a = T::from_f64(ab.sqrt());
    let b = T::from_f64((1.0 - ab).sqrt());
    Tensor::new(
        x0.shape(),
        x0.data()
            .iter()
            .zip(eps.data().iter())
            .map(|(&x, &e)| a * x + b * e)
            .collect(),
    )
}

// ── Training ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    Base,
    Adapter,
}

impl TrainPhase {
    pub fn tag(&self) -> &'static str {
        match self {
            TrainPhase::Base => "base",
            TrainPhase::Adapter => "adapter",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossLogEntry {
    pub phase: &'static str,
    pub step: usize,
    /// Mean loss over the steps since the previous entry.
    pub mean_loss: f64,
}

impl LossLogEntry {
    pub fn render(&self) -> String {
        format!(
            "phase={} step={} loss={:.6}",
            self.phase, self.step, self.mean_loss
        )
    }
}

/// Raster [0,1] → signed [-1,1] diffusion domain.
pub fn to_signed<T: Scalar>(image: &ImageSample<f32>) -> Tensor<T> {
    Tensor::new(
        image.raster().shape(),
        image
            .raster()
            .data()
            .iter()
            .map(|&v| T::from_f64(2.0 * v as f64 - 1.0))
            .collect(),
    )
}

/// One item's training loss on the tape: conditioning per phase, forward
/// noising at the given timestep, noise-prediction MSE. Shared by the
/// trainer and the full-pipeline gradient check.
#[allow(clippy::too_many_arguments)]
pub fn build_train_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    scene: &Scene,
    phase: TrainPhase,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Var {
    let x0 = to_signed::<T>(&scene.image);
    let x_t = q_sample(&x0, t, eps, schedule);
    let edit_prompt = null_text(store, &cfg.enc);
    let enhanced = match phase {
        TrainPhase::Base => None,
        TrainPhase::Adapter => {
            let img = ImageSample::new(from_f32(scene.image.raster())).expect("scene in range");
            let emb = encode_image(store, &cfg.enc, &img);
            let caption = encode_text(
                store,
                &cfg.enc,
                &scene.caption(cfg.enc.l_t).expect("caption fits"),
                PromptKind::QuantityCaption,
            );
            Some(model::enhanced_feature(
                tape, store, cfg, &emb, &caption, cfg.lambda,
            ))
        }
    };
    let beta = match phase {
        TrainPhase::Base => 0.0,
        TrainPhase::Adapter => cfg.beta,
    };
    let (eps_hat, _) =
        model::predict_noise(tape, store, cfg, &x_t, t, &edit_prompt, enhanced, beta);
    let target = tape.constant(eps);
    tape.mse_mean(eps_hat, target)
}

type ItemGrads<T> = Vec<(f64, Vec<(String, Vec<T>)>)>;

/// One optimizer step over a batch slice. Per-item gradients are computed
/// on worker threads and reduced in item order, so the result does not
/// depend on the worker count. Returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &RunConfig,
    scenes: &[Scene],
    phase: TrainPhase,
    step: usize,
    adam: &mut Adam<T>,
    schedule: &NoiseSchedule,
    threads: usize,
) -> Result<f64, MqError> {
    let batch = cfg.train.batch;
    let items: ItemGrads<T> = {
        let shared: &ParamStore<T> = store;
        par::map_indexed(batch, threads, |j| {
            let scene = &scenes[(step * batch + j) % scenes.len()];
            let mut rng = Rng::seeded(derive_seed(
                cfg.seed,
                &format!("{}/{step}/{j}", phase.tag()),
            ));
            let t = rng.range(0, cfg.schedule.timesteps);
            let mut noise = vec![T::ZERO; scene.image.raster().numel()];
            rng.fill_normal(&mut noise, 1.0);
            let eps = Tensor::new(scene.image.raster().shape(), noise);
            let mut tape = Tape::new();
            let loss = build_train_loss(&mut tape, shared, cfg, scene, phase, t, &eps, schedule);
            let grads = tape.backward(loss);
            (tape.scalar(loss).to_f64(), tape.named_grads(&grads))
        })
    };
    let mut mean_loss = 0.0;
    let scale = T::from_f64(1.0 / batch as f64);
    for (loss, grads) in items {
        if !loss.is_finite() {
            return Err(MqError::numeric(format!(
                "non-finite loss at {} step {step}",
                phase.tag()
            )));
        }
        mean_loss += loss / batch as f64;
        for (name, g) in grads {
            store.accumulate_grad(&name, &g, scale);
        }
    }
    store.assert_frozen_clean();
    adam.step(store);
    Ok(mean_loss)
}

/// Runs one phase for its configured number of steps, logging every
/// `log_every` steps.
pub fn run_phase<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &RunConfig,
    scenes: &[Scene],
    phase: TrainPhase,
    progress: &mut dyn FnMut(&LossLogEntry),
) -> Result<Vec<LossLogEntry>, MqError> {
    let steps = match phase {
        TrainPhase::Base => cfg.train.base_steps,
        TrainPhase::Adapter => cfg.train.steps,
    };
    let (lr, model_phase) = match phase {
        TrainPhase::Base => (cfg.train.base_lr, Phase::PretrainBase),
        TrainPhase::Adapter => (cfg.train.lr, Phase::Adapters),
    };
    model::set_phase(store, model_phase);
    let mut adam = Adam::new(AdamConfig {
        lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
    });
    let schedule = schedule_from(cfg);
    let threads = par::worker_count();
    let mut log = Vec::new();
    let mut window = 0.0;
    for step in 1..=steps {
        let loss = train_step(
            store,
            cfg,
            scenes,
            phase,
            step - 1,
            &mut adam,
            &schedule,
            threads,
        )?;
        window += loss;
        if step % cfg.train.log_every == 0 || step == steps {
            let denom = if step % cfg.train.log_every == 0 {
                cfg.train.log_every
            } else {
                step % cfg.train.log_every
            };
            let entry = LossLogEntry {
                phase: phase.tag(),
                step,
                mean_loss: window / denom as f64,
            };
            progress(&entry);
            log.push(entry);
            window = 0.0;
        }
    }
    model::set_phase(store, Phase::Frozen);
    Ok(log)
}

/// Full training regime: pretrain the bare backbone, freeze it, then train
/// the adapters.
pub fn train_full<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &RunConfig,
    scenes: &[Scene],
    progress: &mut dyn FnMut(&LossLogEntry),
) -> Result<Vec<LossLogEntry>, MqError> {
    let mut log = run_phase(store, cfg, scenes, TrainPhase::Base, progress)?;
    if model::adapters_present(store) {
        log.extend(run_phase(
            store,
            cfg,
            scenes,
            TrainPhase::Adapter,
            progress,
        )?);
    }
    Ok(log)
}

// ── Sampling ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum ImageInput {
    Raster(ImageSample<f32>),
    /// Precomputed image embedding (e.g. loaded from an MQEB file).
    Embedding(Tensor<f32>),
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub image: ImageInput,
    /// Quantity caption c_q.
    pub caption: TokenSequence,
    /// Edit instruction c_e; None means the null text.
    pub edit: Option<TokenSequence>,
    pub lambda: f64,
    pub beta: f64,
    /// Seed for the initial sampling noise.
    pub seed: u64,
    /// Sampler steps over the schedule.
    pub steps: usize,
    /// Optional Gaussian perturbation (σ, seed) of the image embedding.
    pub perturb: Option<(f64, u64)>,
}

fn image_embedding_of(
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    input: &ImageInput,
) -> Result<ImageEmbedding<f32>, MqError> {
    match input {
        ImageInput::Raster(img) => Ok(encode_image(store, &cfg.enc, img)),
        ImageInput::Embedding(t) => {
            if t.shape() != [cfg.enc.d_i] {
                return Err(MqError::config(format!(
                    "image embedding shape {:?} does not match configured ({},)",
                    t.shape(),
                    cfg.enc.d_i
                )));
            }
            Ok(ImageEmbedding { vector: t.clone() })
        }
    }
}

/// Enhanced-feature value for a request (compensation included unless β or
/// the module availability rules it out). Returns None when the sampler
/// can skip conditioning entirely (β = 0 or no adapters).
fn conditioning_value(
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    req: &EditRequest,
) -> Result<Option<Tensor<f32>>, MqError> {
    let qttn_available = cfg.qttn_enabled
        && !cfg.unet.injection.is_empty()
        && cfg
            .unet
            .injection
            .iter()
            .all(|k| store.contains(&format!("qttn.b{k}.wq.w")));
    if req.beta == 0.0 || !qttn_available {
        return Ok(None);
    }
    let mut emb = image_embedding_of(store, cfg, &req.image)?;
    if let Some((sigma, seed)) = req.perturb {
        emb = perturb_embedding(&emb, sigma, seed);
    }
    let caption = encode_text(store, &cfg.enc, &req.caption, PromptKind::QuantityCaption);
    let mut tape: Tape<f32> = Tape::new();
    let var = model::enhanced_feature(&mut tape, store, cfg, &emb, &caption, req.lambda);
    Ok(Some(tape.tensor(var)))
}

/// Deterministic edit/reconstruction sample. β = 0 runs the bare backbone
/// and is bitwise invariant to every adapter weight.
pub fn edit(
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    req: &EditRequest,
) -> Result<ImageSample<f32>, MqError> {
    if req.steps == 0 || req.steps > cfg.schedule.timesteps {
        return Err(MqError::config(format!(
            "sampler steps {} out of range 1..={}",
            req.steps, cfg.schedule.timesteps
        )));
    }
    if !req.lambda.is_finite() || !req.beta.is_finite() {
        return Err(MqError::config("lambda and beta must be finite"));
    }
    let schedule = schedule_from(cfg);
    let enhanced_value = conditioning_value(store, cfg, req)?;
    let edit_prompt: PromptEmbedding<f32> = match &req.edit {
        Some(seq) => encode_text(store, &cfg.enc, seq, PromptKind::EditInstruction),
        None => null_text(store, &cfg.enc),
    };

    let (h, w, c) = cfg.unet.image;
    let mut rng = Rng::seeded(req.seed);
    let mut x = vec![0.0f32; h * w * c];
    rng.fill_normal(&mut x, 1.0);

    let total = cfg.schedule.timesteps;
    let stride = total / req.steps;
    for i in (0..req.steps).rev() {
        let t = (i + 1) * stride - 1;
        let t_prev = t as isize - stride as isize;
        let x_t = Tensor::new(&[h, w, c], x.clone());
        let mut tape: Tape<f32> = Tape::new();
        let enhanced = enhanced_value.as_ref().map(|v| tape.constant(v));
        let (eps_var, _) = model::predict_noise(
            &mut tape,
            store,
            cfg,
            &x_t,
            t,
            &edit_prompt,
            enhanced,
            req.beta,
        );
        let eps_hat = tape.tensor(eps_var);
        if !eps_hat.is_finite() {
            return Err(MqError::numeric(format!(
                "non-finite noise prediction at t={t}"
            )));
        }
        let ab_t = schedule.alpha_bar(t as isize);
        let ab_prev = schedule.alpha_bar(t_prev);
        let (sa, sb) = (ab_t.sqrt() as f32, (1.0 - ab_t).sqrt() as f32);
        let (pa, pb) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
        for (xv, &e) in x.iter_mut().zip(eps_hat.data().iter()) {
            // clamping the implied clean image to its value range keeps
            // early steps from committing to out-of-gamut composites
            let x0_hat = ((*xv - sb * e) / sa).clamp(-1.0, 1.0);
            *xv = pa * x0_hat + pb * e;
        }
    }
    let raster: Vec<f32> = x
        .iter()
        .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect();
    ImageSample::new(Tensor::new(&[h, w, c], raster))
}
