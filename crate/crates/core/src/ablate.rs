//! Ablation runner: insertion-point sweep, module on/off, LayerNorm
//! placement, extraction on/off, λ×β scale grid, and embedding
//! perturbation.
//!
//! Variants share one pretrained backbone (the base depends only on the
//! backbone, corpus and schedule, never on adapter settings), then train
//! their own adapters. Checkpoints are cached in the work directory keyed
//! by the variant config hash, so reruns and other studies reuse them.
//! Evaluation reconstructs held-out scenes and scores the exact-count
//! match rate plus the reconstruction MSE.

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint_expecting, save_checkpoint};
use crate::config::RunConfig;
use crate::diffusion::{self, EditRequest, ImageInput, TrainPhase};
use crate::error::MqError;
use crate::fecom::LayerNormPlacement;
use crate::model::{self, Phase};
use crate::par;
use crate::synthdata::{count_objects, gen_corpus, gen_scene, Scene};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Insertion,
    Modules,
    Layernorm,
    Extraction,
    Scales,
    Perturb,
}

impl Study {
    pub fn parse(name: &str) -> Result<Self, MqError> {
        match name {
            "insertion" => Ok(Study::Insertion),
            "modules" => Ok(Study::Modules),
            "layernorm" => Ok(Study::Layernorm),
            "extraction" => Ok(Study::Extraction),
            "scales" => Ok(Study::Scales),
            "perturb" => Ok(Study::Perturb),
            other => Err(MqError::config(format!(
                "unknown study {other:?} (insertion|modules|layernorm|extraction|scales|perturb)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Study::Insertion => "insertion",
            Study::Modules => "modules",
            Study::Layernorm => "layernorm",
            Study::Extraction => "extraction",
            Study::Scales => "scales",
            Study::Perturb => "perturb",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub lambda: f64,
    pub beta: f64,
    pub injection: Vec<usize>,
    pub recon_mse: f64,
    pub count_match: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub study: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("study\tvariant\tlambda\tbeta\tinjection\trecon_mse\tcount_match\n");
        for r in &self.rows {
            let inj = if r.injection.is_empty() {
                "-".to_string()
            } else {
                r.injection
                    .iter()
                    .map(|k| format!("b{k}"))
                    .collect::<Vec<_>>()
                    .join("+")
            };
            out.push_str(&format!(
                "{}\t{}\t{:.3}\t{:.3}\t{}\t{:.6}\t{:.4}\n",
                self.study, r.variant, r.lambda, r.beta, inj, r.recon_mse, r.count_match
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self, MqError> {
        let mut rows = Vec::new();
        let mut study = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(MqError::format(format!(
                    "report line {}: bad field count",
                    i + 1
                )));
            }
            study = f[0].to_string();
            let injection = if f[4] == "-" {
                Vec::new()
            } else {
                f[4].split('+')
                    .map(|s| {
                        s.trim_start_matches('b')
                            .parse::<usize>()
                            .map_err(|_| MqError::format(format!("bad injection field {s:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| MqError::format(format!("bad number {s:?}")))
            };
            rows.push(AblationRow {
                variant: f[1].to_string(),
                lambda: num(f[2])?,
                beta: num(f[3])?,
                injection,
                recon_mse: num(f[5])?,
                count_match: num(f[6])?,
            });
        }
        Ok(AblationReport { study, rows })
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

// ── Evaluation ────────────────────────────────────────────────────────

fn eval_scene(cfg: &RunConfig, index: usize) -> Scene {
    let span = cfg.corpus.count_max - cfg.corpus.count_min + 1;
    let count = cfg.corpus.count_min + index % span;
    let class = (index / span) % cfg.corpus.classes;
    gen_scene(count, class, cfg.eval.seed + index as u64).expect("eval scene generates")
}

/// Reconstruction pass over the held-out scenes: per-scene MSE against the
/// original raster and the exact-count match rate.
pub fn evaluate(
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    lambda: f64,
    beta: f64,
    sigma: Option<f64>,
) -> Result<(f64, f64), MqError> {
    let n = cfg.eval.scenes;
    let threads = par::worker_count();
    let results: Vec<Result<(f64, bool), MqError>> = par::map_indexed(n, threads, |i| {
        let scene = eval_scene(cfg, i);
        let req = EditRequest {
            image: ImageInput::Raster(scene.image.clone()),
            caption: scene.caption(cfg.enc.l_t)?,
            edit: None,
            lambda,
            beta,
            seed: cfg.eval.z0_seed + i as u64,
            steps: cfg.schedule.sample_steps,
            perturb: sigma.map(|s| (s, cfg.eval.z0_seed ^ 0x5eed ^ i as u64)),
        };
        let out = diffusion::edit(store, cfg, &req)?;
        let mse: f64 = out
            .raster()
            .data()
            .iter()
            .zip(scene.image.raster().data().iter())
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            / out.raster().numel() as f64;
        let report = count_objects(&out, cfg.eval.threshold).matched_against(scene.count);
        Ok((mse, report.matched == Some(true)))
    });
    let mut mse_sum = 0.0;
    let mut matches = 0usize;
    for r in results {
        let (mse, matched) = r?;
        mse_sum += mse;
        if matched {
            matches += 1;
        }
    }
    Ok((mse_sum / n as f64, matches as f64 / n as f64))
}

// ── Variant construction ──────────────────────────────────────────────

/// Training identity of a config: evaluation-only fields (held-out scene
/// count, sampler steps, oracle threshold) are normalized away, so
/// checkpoints cache under a key that only changes when the trained
/// artifact would.
pub fn train_identity(cfg: &RunConfig) -> RunConfig {
    let mut id = cfg.clone();
    id.eval = crate::config::EvalSpec::default();
    id.schedule.sample_steps = 50;
    id
}

/// Base identity: the backbone pretraining is independent of every adapter
/// setting, so all variants of all studies share it.
pub fn base_config(cfg: &RunConfig) -> RunConfig {
    let mut base = train_identity(cfg);
    base.fecom_enabled = false;
    base.qttn_enabled = false;
    base.unet.injection.clear();
    base.layernorm = LayerNormPlacement::Canonical;
    base.extraction = true;
    base.lambda = 1.0;
    base.beta = 1.0;
    base.train.steps = 0;
    base
}

fn variant_list(cfg: &RunConfig, study: Study) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    match study {
        Study::Insertion => {
            for k in 1..=11 {
                let mut v = cfg.clone();
                v.unet.injection = vec![k];
                out.push((format!("inj_b{k}"), v));
            }
            let mut v = cfg.clone();
            v.unet.injection = vec![3, 4, 6];
            out.push(("inj_b3_b4_b6".to_string(), v));
        }
        Study::Modules => {
            out.push(("full".to_string(), cfg.clone()));
            let mut wo_fecom = cfg.clone();
            wo_fecom.fecom_enabled = false;
            out.push(("wo_fecom".to_string(), wo_fecom));
            let mut wo_qttn = cfg.clone();
            wo_qttn.qttn_enabled = false;
            wo_qttn.unet.injection.clear();
            out.push(("wo_qttn".to_string(), wo_qttn));
        }
        Study::Layernorm => {
            for (tag, placement) in [
                ("ln_canonical", LayerNormPlacement::Canonical),
                ("ln_mo", LayerNormPlacement::MovedAfterFc),
                ("ln_wo", LayerNormPlacement::Without),
            ] {
                let mut v = cfg.clone();
                v.layernorm = placement;
                out.push((tag.to_string(), v));
            }
        }
        Study::Extraction => {
            for (tag, on) in [("ext_on", true), ("ext_off", false)] {
                let mut v = cfg.clone();
                v.extraction = on;
                out.push((tag.to_string(), v));
            }
        }
        Study::Scales | Study::Perturb => {
            out.push(("full".to_string(), cfg.clone()));
        }
    }
    out
}

fn ckpt_path(workdir: &Path, tag: &str, hash: u64) -> PathBuf {
    workdir.join(format!("{tag}_{hash:016x}.mqck"))
}

/// Cache location of a variant checkpoint for this config.
pub fn variant_ckpt_path(workdir: &Path, tag: &str, cfg: &RunConfig) -> PathBuf {
    ckpt_path(workdir, tag, train_identity(cfg).hash())
}

/// Cache location of the shared pretrained backbone for this config.
pub fn base_ckpt_path(workdir: &Path, cfg: &RunConfig) -> PathBuf {
    ckpt_path(workdir, "base", base_config(cfg).hash())
}

/// Loads the cached checkpoint for `vcfg` or trains it: fresh adapter init
/// on top of the shared base weights, adapter phase only. The cache key is
/// the training identity of the variant config.
fn variant_store(
    vcfg: &RunConfig,
    scenes: &[Scene],
    base: &ParamStore<f32>,
    workdir: &Path,
    tag: &str,
    progress: &mut dyn FnMut(&str),
) -> Result<ParamStore<f32>, MqError> {
    let identity = train_identity(vcfg);
    let path = ckpt_path(workdir, tag, identity.hash());
    if path.exists() {
        if let Ok((store, _)) = load_checkpoint_expecting(&path, identity.hash()) {
            progress(&format!("variant {tag}: cached checkpoint reused"));
            return Ok(store);
        }
    }
    let mut store = model::init_model::<f32>(vcfg, vcfg.seed);
    for (name, p) in base.iter() {
        if store.contains(name) && store.get(name).shape() == p.value.shape() {
            store.param_mut(name).value = p.value.clone();
        }
    }
    if model::adapters_present(&store) && vcfg.qttn_enabled {
        progress(&format!(
            "variant {tag}: training adapters ({} steps)",
            vcfg.train.steps
        ));
        diffusion::run_phase(&mut store, vcfg, scenes, TrainPhase::Adapter, &mut |e| {
            progress(&format!("variant {tag}: {}", e.render()))
        })?;
    } else {
        progress(&format!(
            "variant {tag}: no trainable adapter path, skipping training"
        ));
    }
    model::set_phase(&mut store, Phase::Frozen);
    save_checkpoint(&path, &store, &identity)?;
    Ok(store)
}

/// Shared pretrained backbone, cached under the base config hash.
pub fn base_store(
    cfg: &RunConfig,
    scenes: &[Scene],
    workdir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ParamStore<f32>, MqError> {
    let bcfg = base_config(cfg);
    let path = ckpt_path(workdir, "base", bcfg.hash());
    if path.exists() {
        if let Ok((store, _)) = load_checkpoint_expecting(&path, bcfg.hash()) {
            progress("base: cached backbone reused");
            return Ok(store);
        }
    }
    progress(&format!(
        "base: pretraining backbone ({} steps)",
        bcfg.train.base_steps
    ));
    let mut store = model::init_model::<f32>(&bcfg, bcfg.seed);
    diffusion::run_phase(&mut store, &bcfg, scenes, TrainPhase::Base, &mut |e| {
        progress(&format!("base: {}", e.render()))
    })?;
    model::set_phase(&mut store, Phase::Frozen);
    save_checkpoint(&path, &store, &bcfg)?;
    Ok(store)
}

const SCALE_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
const PERTURB_SIGMAS: [f64; 3] = [0.0, 0.5, 1.0];

/// Runs one study end to end and returns its report.
pub fn run_study(
    cfg: &RunConfig,
    study: Study,
    workdir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport, MqError> {
    cfg.validate()?;
    std::fs::create_dir_all(workdir)?;
    let scenes = gen_corpus(&cfg.corpus)?;
    let base = base_store(cfg, &scenes, workdir, progress)?;
    let mut rows = Vec::new();
    for (tag, vcfg) in variant_list(cfg, study) {
        let store = variant_store(&vcfg, &scenes, &base, workdir, &tag, progress)?;
        match study {
            Study::Scales => {
                for &lambda in &SCALE_GRID {
                    for &beta in &SCALE_GRID {
                        progress(&format!("scales: evaluating (λ={lambda}, β={beta})"));
                        let (mse, rate) = evaluate(&store, &vcfg, lambda, beta, None)?;
                        rows.push(AblationRow {
                            variant: format!("l{lambda:.1}_b{beta:.1}"),
                            lambda,
                            beta,
                            injection: vcfg.unet.injection.clone(),
                            recon_mse: mse,
                            count_match: rate,
                        });
                    }
                }
            }
            Study::Perturb => {
                for &sigma in &PERTURB_SIGMAS {
                    progress(&format!("perturb: evaluating σ={sigma}"));
                    let (mse, rate) = evaluate(&store, &vcfg, vcfg.lambda, vcfg.beta, Some(sigma))?;
                    rows.push(AblationRow {
                        variant: format!("sigma_{sigma}"),
                        lambda: vcfg.lambda,
                        beta: vcfg.beta,
                        injection: vcfg.unet.injection.clone(),
                        recon_mse: mse,
                        count_match: rate,
                    });
                }
            }
            _ => {
                progress(&format!("{}: evaluating {tag}", study.name()));
                let beta = if vcfg.qttn_enabled { vcfg.beta } else { 0.0 };
                let (mse, rate) = evaluate(&store, &vcfg, vcfg.lambda, beta, None)?;
                rows.push(AblationRow {
                    variant: tag,
                    lambda: vcfg.lambda,
                    beta,
                    injection: vcfg.unet.injection.clone(),
                    recon_mse: mse,
                    count_match: rate,
                });
            }
        }
    }
    Ok(AblationReport {
        study: study.name().to_string(),
        rows,
    })
}
