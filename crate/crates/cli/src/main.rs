//! Command-line driver: data generation, training, editing, ablations,
//! gradient checks and checkpoint inspection.
//!
//! Exit codes: 0 on success, 1 for validation problems (bad configs,
//! files, arguments), 2 for numeric failures (non-finite losses, gradient
//! checks above threshold). `MQ_THREADS` caps worker parallelism.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use mqedit_core::ablate::{run_study, Study};
use mqedit_core::checkpoint::{describe_checkpoint, load_checkpoint, save_checkpoint};
use mqedit_core::config::{load_config, RunConfig};
use mqedit_core::diffusion::{run_phase, EditRequest, ImageInput, TrainPhase};
use mqedit_core::encoders::{load_embedding_file, LoadedEmbedding, TokenSequence};
use mqedit_core::error::MqError;
use mqedit_core::gradcheck::run_suite;
use mqedit_core::model::{init_model, set_phase, Phase};
use mqedit_core::synthdata::{
    count_objects, gen_corpus, load_corpus, read_raster, save_corpus, write_raster, Scene,
};

#[derive(Parser)]
#[command(
    name = "mqedit",
    about = "Quantity-consistent multi-object image editing, desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-object corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the backbone and train the adapters on a corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path; a loss log is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Train on one corpus image only (path or file name in the
        /// corpus directory), repeated across the batch.
        #[arg(long)]
        single_image: Option<PathBuf>,
    },
    /// Reconstruct or edit an image with a trained checkpoint.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input raster (.mqim) or precomputed image embedding (.mqeb).
        #[arg(long)]
        image: PathBuf,
        /// Quantity caption, e.g. "6 blob".
        #[arg(long)]
        cq: String,
        /// Edit instruction tokens (words or numeric ids); empty = null text.
        #[arg(long)]
        ce: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Seed for the initial sampling noise.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one ablation study and write its report.
    Ablate {
        /// insertion | modules | layernorm | extraction | scales | perturb
        #[arg(long)]
        study: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint cache directory (default: <out>.work).
        #[arg(long)]
        work: Option<PathBuf>,
    },
    /// Verify gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the tensor table of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli.command)));
    let code = match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .map(|s| s.as_str())
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            eprintln!("numeric failure: {msg}");
            2
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<(), MqError> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            single_image,
        } => cmd_train(&config, &data, &out, single_image.as_deref()),
        Command::Edit {
            ckpt,
            image,
            cq,
            ce,
            lambda,
            beta,
            seed,
            out,
        } => cmd_edit(&ckpt, &image, &cq, ce.as_deref(), lambda, beta, seed, &out),
        Command::Ablate {
            study,
            config,
            out,
            work,
        } => cmd_ablate(&study, &config, &out, work),
        Command::Gradcheck { config } => cmd_gradcheck(&config),
        Command::Inspect { ckpt } => cmd_inspect(&ckpt),
    }
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<(), MqError> {
    let cfg = load_config(config)?;
    let scenes = gen_corpus(&cfg.corpus)?;
    save_corpus(out, &scenes)?;
    println!(
        "wrote {} scenes (counts {}..={}, {} classes) to {}",
        scenes.len(),
        cfg.corpus.count_min,
        cfg.corpus.count_max,
        cfg.corpus.classes,
        out.display()
    );
    Ok(())
}

fn pick_single_image(
    scenes: Vec<Scene>,
    data: &Path,
    wanted: &Path,
) -> Result<Vec<Scene>, MqError> {
    let name = wanted
        .file_name()
        .ok_or_else(|| MqError::config("single-image path has no file name"))?;
    for (i, scene) in scenes.iter().enumerate() {
        if mqedit_core::synthdata::scene_filename(i) == name.to_string_lossy() {
            return Ok(vec![scene.clone()]);
        }
    }
    Err(MqError::config(format!(
        "single-image {} not found in corpus {}",
        wanted.display(),
        data.display()
    )))
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    single_image: Option<&Path>,
) -> Result<(), MqError> {
    let cfg = load_config(config)?;
    let scenes = load_corpus(data)?;
    if scenes.is_empty() {
        return Err(MqError::config("corpus is empty"));
    }
    // single-image mode personalizes the adapters on one image over the
    // corpus-pretrained (generic, frozen) backbone
    let adapter_scenes = match single_image {
        Some(image) => {
            println!("single-image adapter training on {}", image.display());
            pick_single_image(scenes.clone(), data, image)?
        }
        None => scenes.clone(),
    };
    let mut store = init_model::<f32>(&cfg, cfg.seed);
    let log_path = PathBuf::from(format!("{}.log", out.display()));
    let mut log_file = std::fs::File::create(&log_path)?;
    let mut progress = |entry: &mqedit_core::diffusion::LossLogEntry| {
        let line = entry.render();
        println!("{line}");
        writeln!(log_file, "{line}").expect("loss log writes");
    };
    let mut log = run_phase(&mut store, &cfg, &scenes, TrainPhase::Base, &mut progress)?;
    if mqedit_core::model::adapters_present(&store) {
        log.extend(run_phase(
            &mut store,
            &cfg,
            &adapter_scenes,
            TrainPhase::Adapter,
            &mut progress,
        )?);
    }
    set_phase(&mut store, Phase::Frozen);
    save_checkpoint(out, &store, &cfg)?;
    println!(
        "trained {} log entries; checkpoint {} loss-log {}",
        log.len(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn load_image_input(path: &Path, cfg: &RunConfig) -> Result<ImageInput, MqError> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        f.read_exact(&mut magic)
            .map_err(|_| MqError::format("image file too short".to_string()))?;
    }
    match &magic {
        b"MQIM" => Ok(ImageInput::Raster(read_raster(path)?)),
        b"MQEB" => match load_embedding_file(path, &cfg.enc)? {
            LoadedEmbedding::Image(t) => Ok(ImageInput::Embedding(t)),
            LoadedEmbedding::Text(_) => Err(MqError::config(
                "expected an image embedding, found a text embedding",
            )),
        },
        other => Err(MqError::format(format!(
            "unrecognized image magic {other:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_edit(
    ckpt: &Path,
    image: &Path,
    cq: &str,
    ce: Option<&str>,
    lambda: Option<f64>,
    beta: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<(), MqError> {
    let (store, cfg) = load_checkpoint(ckpt)?;
    let caption = TokenSequence::parse_words(cq, cfg.enc.l_t)?;
    let edit_tokens = match ce {
        None => None,
        Some(text) if text.trim().is_empty() => None,
        Some(text) => Some(TokenSequence::parse_words(text, cfg.enc.l_t)?),
    };
    let req = EditRequest {
        image: load_image_input(image, &cfg)?,
        caption: caption.clone(),
        edit: edit_tokens,
        lambda: lambda.unwrap_or(cfg.lambda),
        beta: beta.unwrap_or(cfg.beta),
        seed,
        steps: cfg.schedule.sample_steps,
        perturb: None,
    };
    let result = mqedit_core::diffusion::edit(&store, &cfg, &req)?;
    write_raster(out, &result)?;
    let expected = caption
        .ids()
        .iter()
        .find(|&&id| (1..=20).contains(&id))
        .map(|&id| id as usize);
    let mut report = count_objects(&result, cfg.eval.threshold);
    if let Some(n) = expected {
        report = report.matched_against(n);
    }
    println!(
        "wrote {}; detected={} masses={:?} expected={} matched={}",
        out.display(),
        report.detected,
        report.masses,
        expected
            .map(|n| n.to_string())
            .unwrap_or_else(|| "-".to_string()),
        report
            .matched
            .map(|m| m.to_string())
            .unwrap_or_else(|| "-".to_string()),
    );
    Ok(())
}

fn cmd_ablate(
    study: &str,
    config: &Path,
    out: &Path,
    work: Option<PathBuf>,
) -> Result<(), MqError> {
    let cfg = load_config(config)?;
    let study = Study::parse(study)?;
    let workdir = work.unwrap_or_else(|| PathBuf::from(format!("{}.work", out.display())));
    let report = run_study(&cfg, study, &workdir, &mut |msg| println!("{msg}"))?;
    std::fs::write(out, report.to_tsv())?;
    println!(
        "study {} rows {} report {}",
        report.study,
        report.rows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(config: &Path) -> Result<(), MqError> {
    let cfg = load_config(config)?;
    let outcome = run_suite(&cfg)?;
    for check in &outcome.checks {
        println!("{}", check.render());
    }
    if outcome.passed() {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(MqError::numeric(
            "gradient check exceeded its threshold".to_string(),
        ))
    }
}

fn cmd_inspect(ckpt: &Path) -> Result<(), MqError> {
    print!("{}", describe_checkpoint(ckpt)?);
    Ok(())
}
