//! Miniature diffusion U-Net of 11 transformer blocks: four downsampling,
//! one middle, six upsampling.
//!
//! The raster is patchified into tokens and re-tokenized between blocks by
//! 2×2 token merges (down) and splits (up); paired down/up blocks are
//! connected by additive skips. Every block is pre-norm: self-attention,
//! then cross-attention over the edit-prompt embedding, then a feed-forward
//! stack, each with a residual. A quantity-attention injection adds
//! β·V_new to the cross-attention branch output (before the residual) at
//! each configured insertion block, so β = 0 recovers the plain block
//! bitwise. Timestep conditioning is a sinusoidal embedding projected into
//! each block's width and added to all tokens.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoders::PromptEmbedding;
use crate::error::MqError;
use crate::num::Scalar;
use crate::qttn::{self, QttnDims};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{invert_perm, merge2x2_perm, ParamStore, Tensor};

/// Per-head width of block self-attention.
pub const HEAD_WIDTH: usize = 16;
/// Feed-forward expansion factor.
pub const FF_MULT: usize = 2;
/// Width of the timestep sinusoid.
pub const TIME_DIM: usize = 64;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockRole {
    Down,
    Middle,
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDesc {
    pub tokens: usize,
    pub width: usize,
    pub role: BlockRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// (H, W, C) of the raster the model diffuses over.
    pub image: (usize, usize, usize),
    /// Patch side for the token embedding.
    pub patch: usize,
    /// The 11 block descriptors, in execution order.
    pub blocks: Vec<BlockDesc>,
    /// (down block, up block) pairs joined by additive skips, 1-indexed.
    pub skips: Vec<(usize, usize)>,
    /// Insertion blocks for quantity attention, 1-indexed.
    pub injection: Vec<usize>,
}

impl UNetConfig {
    pub fn desk() -> Self {
        let d = |tokens, width| BlockDesc {
            tokens,
            width,
            role: BlockRole::Down,
        };
        let u = |tokens, width| BlockDesc {
            tokens,
            width,
            role: BlockRole::Up,
        };
        UNetConfig {
            image: (32, 32, 3),
            patch: 2,
            blocks: vec![
                d(256, 64),
                d(64, 128),
                d(16, 128),
                d(16, 128),
                BlockDesc {
                    tokens: 16,
                    width: 128,
                    role: BlockRole::Middle,
                },
                u(16, 128),
                u(16, 128),
                u(16, 128),
                u(64, 128),
                u(64, 128),
                u(256, 64),
            ],
            // no skip into the 64-token up blocks: spatial layout must
            // traverse the 16-token bottleneck where injections land,
            // while the (1, 11) pair still carries pixel detail
            skips: vec![(1, 11), (3, 7), (4, 6)],
            injection: vec![4],
        }
    }

    /// Reference geometry with a (1024, 1280) fourth block. Used for shape
    /// conformance only; never trained at this scale.
    pub fn paper_reference() -> Self {
        let d = |tokens, width| BlockDesc {
            tokens,
            width,
            role: BlockRole::Down,
        };
        let u = |tokens, width| BlockDesc {
            tokens,
            width,
            role: BlockRole::Up,
        };
        UNetConfig {
            image: (128, 128, 3),
            patch: 2,
            blocks: vec![
                d(4096, 320),
                d(1024, 640),
                d(1024, 1280),
                d(1024, 1280),
                BlockDesc {
                    tokens: 1024,
                    width: 1280,
                    role: BlockRole::Middle,
                },
                u(1024, 1280),
                u(1024, 1280),
                u(1024, 1280),
                u(1024, 640),
                u(4096, 640),
                u(4096, 320),
            ],
            skips: vec![(1, 11), (2, 9), (3, 7), (4, 6)],
            injection: vec![4],
        }
    }

    pub fn validate(&self) -> Result<(), MqError> {
        if self.blocks.len() != 11 {
            return Err(MqError::config(format!(
                "backbone: need 11 blocks, got {}",
                self.blocks.len()
            )));
        }
        let downs = self
            .blocks
            .iter()
            .filter(|b| b.role == BlockRole::Down)
            .count();
        let mids = self
            .blocks
            .iter()
            .filter(|b| b.role == BlockRole::Middle)
            .count();
        let ups = self
            .blocks
            .iter()
            .filter(|b| b.role == BlockRole::Up)
            .count();
        if downs != 4 || mids != 1 || ups != 6 {
            return Err(MqError::config(format!(
                "backbone: need 4 down / 1 middle / 6 up, got {downs}/{mids}/{ups}"
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let expected = match i {
                0..=3 => BlockRole::Down,
                4 => BlockRole::Middle,
                _ => BlockRole::Up,
            };
            if b.role != expected {
                return Err(MqError::config(format!(
                    "backbone: block {} role out of order",
                    i + 1
                )));
            }
            if b.width % HEAD_WIDTH != 0 || b.width == 0 {
                return Err(MqError::config(format!(
                    "backbone: block {} width {} not a multiple of {HEAD_WIDTH}",
                    i + 1,
                    b.width
                )));
            }
            let side = (b.tokens as f64).sqrt() as usize;
            if side * side != b.tokens {
                return Err(MqError::config(format!(
                    "backbone: block {} token count {} is not a square grid",
                    i + 1,
                    b.tokens
                )));
            }
        }
        let (h, w, c) = self.image;
        if !h.is_power_of_two() || !w.is_power_of_two() || c == 0 {
            return Err(MqError::config(
                "backbone: image extents must be powers of two",
            ));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(MqError::config("backbone: patch must divide the image"));
        }
        let base_tokens = (h / self.patch) * (w / self.patch);
        if self.blocks[0].tokens != base_tokens {
            return Err(MqError::config(format!(
                "backbone: first block needs {base_tokens} tokens for this image/patch"
            )));
        }
        if self.blocks[10].tokens != base_tokens {
            return Err(MqError::config(
                "backbone: last block must restore the base tokens",
            ));
        }
        for i in 0..10 {
            let (a, b) = (&self.blocks[i], &self.blocks[i + 1]);
            let ok = b.tokens == a.tokens || b.tokens * 4 == a.tokens || b.tokens == a.tokens * 4;
            if !ok {
                return Err(MqError::config(format!(
                    "backbone: no 2×2 resample maps {} tokens to {} (blocks {}→{})",
                    a.tokens,
                    b.tokens,
                    i + 1,
                    i + 2
                )));
            }
        }
        let mut used = std::collections::BTreeSet::new();
        for &(from, to) in &self.skips {
            if !(1..=4).contains(&from) || !(6..=11).contains(&to) {
                return Err(MqError::config(format!(
                    "backbone: skip ({from}, {to}) must pair a down block with an up block"
                )));
            }
            if !used.insert(from) || !used.insert(to) {
                return Err(MqError::config("backbone: duplicate skip endpoint"));
            }
            let (a, b) = (&self.blocks[from - 1], &self.blocks[to - 1]);
            if a.tokens != b.tokens || a.width != b.width {
                return Err(MqError::config(format!(
                    "backbone: skip ({from}, {to}) joins mismatched shapes"
                )));
            }
        }
        for &k in &self.injection {
            if !(1..=11).contains(&k) {
                return Err(MqError::config(format!(
                    "backbone: injection block {k} out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn block(&self, index1: usize) -> &BlockDesc {
        &self.blocks[index1 - 1]
    }
}

fn bname(block1: usize, field: &str) -> String {
    format!("unet.b{block1:02}.{field}")
}

/// Registers every backbone tensor under `unet.`.
pub fn init_unet<T: Scalar>(store: &mut ParamStore<T>, cfg: &UNetConfig, d_t: usize, seed: u64) {
    cfg.validate().expect("invalid backbone config");
    let linear = |store: &mut ParamStore<T>, name: String, fan_in: usize, fan_out: usize| {
        let mut rng = Rng::for_tag(seed, &name);
        let mut w = vec![T::ZERO; fan_in * fan_out];
        rng.fill_normal(&mut w, 1.0 / (fan_in as f64).sqrt());
        store.insert(
            &format!("{name}.w"),
            Tensor::new(&[fan_in, fan_out], w),
            true,
        );
        store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
    };
    let (_, _, c) = cfg.image;
    let patch_width = cfg.patch * cfg.patch * c;
    linear(store, "unet.in".into(), patch_width, cfg.blocks[0].width);
    // zero output head: the first prediction is exactly zero noise
    store.insert(
        "unet.out.w",
        Tensor::zeros(&[cfg.blocks[10].width, patch_width]),
        true,
    );
    store.insert("unet.out.b", Tensor::zeros(&[patch_width]), true);
    // residual-branch output projections start small to keep the stream
    // tame across the 11 blocks
    let damped = |store: &mut ParamStore<T>, name: String, fan_in: usize, fan_out: usize| {
        let mut rng = Rng::for_tag(seed, &name);
        let mut w = vec![T::ZERO; fan_in * fan_out];
        rng.fill_normal(&mut w, 0.4 / (fan_in as f64).sqrt());
        store.insert(
            &format!("{name}.w"),
            Tensor::new(&[fan_in, fan_out], w),
            true,
        );
        store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
    };
    for (i, b) in cfg.blocks.iter().enumerate() {
        let block1 = i + 1;
        let w = b.width;
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(
                &bname(block1, &format!("{ln}.gain")),
                Tensor::filled(&[w], T::ONE),
                true,
            );
            store.insert(
                &bname(block1, &format!("{ln}.bias")),
                Tensor::zeros(&[w]),
                true,
            );
        }
        linear(store, bname(block1, "wq"), w, w);
        linear(store, bname(block1, "wk"), w, w);
        linear(store, bname(block1, "wv"), w, w);
        damped(store, bname(block1, "wo"), w, w);
        linear(store, bname(block1, "cq"), w, w);
        linear(store, bname(block1, "ck"), d_t, w);
        linear(store, bname(block1, "cv"), d_t, w);
        damped(store, bname(block1, "co"), w, w);
        linear(store, bname(block1, "f1"), w, FF_MULT * w);
        damped(store, bname(block1, "f2"), FF_MULT * w, w);
        linear(store, bname(block1, "time"), TIME_DIM, w);
    }
    for i in 0..10 {
        let (a, b) = (&cfg.blocks[i], &cfg.blocks[i + 1]);
        if b.tokens == a.tokens / 4 {
            linear(
                store,
                format!("unet.bridge{:02}", i + 1),
                4 * a.width,
                b.width,
            );
        } else if b.tokens == a.tokens * 4 {
            linear(
                store,
                format!("unet.bridge{:02}", i + 1),
                a.width,
                4 * b.width,
            );
        } else if b.width != a.width {
            linear(store, format!("unet.bridge{:02}", i + 1), a.width, b.width);
        }
    }
}

/// Sinusoidal vector for a scalar position (timestep embedding).
pub fn sinusoid<T: Scalar>(pos: f64, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[d], |j| {
        let rate = (10_000f64).powf(-((j / 2 * 2) as f64) / d as f64);
        let angle = pos * rate;
        T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Fixed token-position table for a block.
pub fn position_table<T: Scalar>(tokens: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[tokens, width], |i| {
        let (pos, j) = (i / width, i % width);
        let rate = (10_000f64).powf(-((j / 2 * 2) as f64) / width as f64);
        let angle = pos as f64 * rate;
        T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Var {
    let d = tape.shape(q)[1] / heads;
    let qh = tape.split_heads(q, heads);
    let kh = tape.split_heads(k, heads);
    let vh = tape.split_heads(v, heads);
    let scores = tape.bmm_nt(qh, kh);
    let scores = tape.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
    let attn = tape.softmax_rows(scores);
    let out = tape.bmm(attn, vh);
    tape.merge_heads(out)
}

fn layer_norm_named<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block1: usize,
    ln: &str,
    x: Var,
) -> Var {
    let g = tape.param(store, &bname(block1, &format!("{ln}.gain")));
    let b = tape.param(store, &bname(block1, &format!("{ln}.bias")));
    tape.layer_norm(x, g, b, T::from_f64(LN_EPS))
}

fn affine_named<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Var {
    let w = tape.param(store, &format!("{name}.w"));
    let b = tape.param(store, &format!("{name}.b"));
    tape.affine(x, w, b)
}

/// Cross-attention branch output with the optional injection added before
/// the residual: co(attn(cq(z̃), ck(ctx), cv(ctx))) + β·V_new.
pub fn cross_branch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block1: usize,
    heads: usize,
    z_normed: Var,
    ctx: Var,
    inj: Option<(Var, f64)>,
) -> Var {
    let q = affine_named(tape, store, &bname(block1, "cq"), z_normed);
    let k = affine_named(tape, store, &bname(block1, "ck"), ctx);
    let v = affine_named(tape, store, &bname(block1, "cv"), ctx);
    let attn = multi_head_attention(tape, q, k, v, heads);
    let out = affine_named(tape, store, &bname(block1, "co"), attn);
    match inj {
        Some((value, beta)) if beta != 0.0 => {
            assert_eq!(
                tape.shape(value),
                tape.shape(out),
                "injection value shape must equal the block state shape"
            );
            tape.axpy(out, value, T::from_f64(beta))
        }
        _ => out,
    }
}

/// One transformer block: pre-norm self-attention, pre-norm
/// cross-attention (+ injection), pre-norm feed-forward, all residual.
/// Position and timestep terms enter the normed branch inputs only; the
/// residual stream stays clean so skips and the output head read
/// unpolluted features.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &UNetConfig,
    block1: usize,
    z: Var,
    ctx: Var,
    time_sin: Var,
    inj: Option<(Var, f64)>,
) -> Var {
    let desc = cfg.block(block1);
    assert_eq!(
        tape.shape(z),
        &[desc.tokens, desc.width],
        "block {block1}: input shape"
    );
    if let Some((value, _)) = inj {
        assert_eq!(
            tape.shape(value),
            &[desc.tokens, desc.width],
            "block {block1}: injection shape"
        );
    }
    let heads = desc.width / HEAD_WIDTH;
    let pos = tape.constant(&position_table::<T>(desc.tokens, desc.width));
    let tproj = affine_named(tape, store, &bname(block1, "time"), time_sin);
    let conditioned = |tape: &mut Tape<T>, normed: Var| {
        let with_pos = tape.add(normed, pos);
        tape.add_bias_row(with_pos, tproj)
    };

    let normed = layer_norm_named(tape, store, block1, "ln1", z);
    let h = conditioned(tape, normed);
    let q = affine_named(tape, store, &bname(block1, "wq"), h);
    let k = affine_named(tape, store, &bname(block1, "wk"), h);
    let v = affine_named(tape, store, &bname(block1, "wv"), h);
    let attn = multi_head_attention(tape, q, k, v, heads);
    let attn = affine_named(tape, store, &bname(block1, "wo"), attn);
    let z = tape.add(z, attn);

    let normed = layer_norm_named(tape, store, block1, "ln2", z);
    let h = conditioned(tape, normed);
    let cross = cross_branch(tape, store, block1, heads, h, ctx, inj);
    let z = tape.add(z, cross);

    let normed = layer_norm_named(tape, store, block1, "ln3", z);
    let h = tape.add_bias_row(normed, tproj);
    let h = affine_named(tape, store, &bname(block1, "f1"), h);
    let h = tape.silu(h);
    let h = affine_named(tape, store, &bname(block1, "f2"), h);
    tape.add(z, h)
}

/// Token resample between consecutive blocks.
fn bridge<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &UNetConfig,
    after_block1: usize,
    z: Var,
) -> Var {
    let a = cfg.block(after_block1);
    let b = cfg.block(after_block1 + 1);
    let name = format!("unet.bridge{after_block1:02}");
    if b.tokens == a.tokens / 4 {
        let g = (a.tokens as f64).sqrt() as usize;
        let perm = Arc::new(merge2x2_perm(g));
        let grouped = tape.permute_rows(z, perm);
        let merged = tape.reshape(grouped, &[a.tokens / 4, 4 * a.width]);
        affine_named(tape, store, &name, merged)
    } else if b.tokens == a.tokens * 4 {
        let expanded = affine_named(tape, store, &name, z);
        let split = tape.reshape(expanded, &[4 * a.tokens, b.width]);
        let g = (b.tokens as f64).sqrt() as usize;
        let perm = Arc::new(invert_perm(&merge2x2_perm(g)));
        tape.permute_rows(split, perm)
    } else if b.width != a.width {
        affine_named(tape, store, &name, z)
    } else {
        z
    }
}

/// Quantity-attention hook for `unet_forward`.
#[derive(Clone, Copy)]
pub struct InjectionHook {
    /// Enhanced image feature already on the tape, shape (D_i,).
    pub enhanced: Var,
    pub beta: f64,
    pub extraction_enabled: bool,
    /// Shared head count of the per-block instances.
    pub heads: usize,
    pub n_ctx: usize,
    pub d_i: usize,
}

/// Block inputs captured during one forward pass; index is 1-based.
pub struct UnetTrace<T> {
    pub block_inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> UnetTrace<T> {
    /// Input activation of block `index1` from this forward.
    pub fn block_input(&self, index1: usize) -> &Tensor<T> {
        assert!(
            (1..=self.block_inputs.len()).contains(&index1),
            "block index {index1} out of range"
        );
        &self.block_inputs[index1 - 1]
    }
}

/// Runs the 11 blocks with skips and injections; returns the predicted
/// noise (H, W, C) and the per-block input taps.
pub fn unet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &UNetConfig,
    x: Var,
    t: usize,
    ctx: &PromptEmbedding<T>,
    hook: Option<InjectionHook>,
) -> (Var, UnetTrace<T>) {
    let (h, w, c) = cfg.image;
    assert_eq!(tape.shape(x), &[h, w, c], "unet: input raster shape");
    let ctxv = tape.constant(&ctx.matrix);
    let tsin = tape.constant(&sinusoid::<T>(t as f64, TIME_DIM));

    // patchify: (H,W,C) → (H·W, C) → group patch pixels → (N, patch²·C)
    let flat = tape.reshape(x, &[h * w, c]);
    let perm = Arc::new(merge2x2_perm(h));
    let grouped = tape.permute_rows(flat, perm);
    let patches = tape.reshape(grouped, &[h * w / 4, 4 * c]);
    let mut z = affine_named(tape, store, "unet.in", patches);

    let mut taps: Vec<Tensor<T>> = Vec::with_capacity(11);
    let mut skip_store: Vec<Option<Var>> = vec![None; 12];
    for block1 in 1..=11 {
        if let Some(&(from, _)) = cfg.skips.iter().find(|&&(_, to)| to == block1) {
            if let Some(skip) = skip_store[from] {
                z = tape.add(z, skip);
            }
        }
        taps.push(tape.tensor(z));
        let inj = match &hook {
            Some(hk) if hk.beta != 0.0 && cfg.injection.contains(&block1) => {
                let desc = cfg.block(block1);
                let dims = QttnDims::for_block_width(hk.heads, hk.n_ctx, hk.d_i, desc.width)
                    .expect("validated injection width");
                // queries carry the same fixed position code the block's
                // own attention sees, so context attention can
                // differentiate by region from the first step
                let pos = tape.constant(&position_table::<T>(desc.tokens, desc.width));
                let z_pos = tape.add(z, pos);
                let trace = qttn::qttn_attend(
                    tape,
                    store,
                    &format!("qttn.b{block1}"),
                    &dims,
                    z_pos,
                    hk.enhanced,
                    hk.extraction_enabled,
                );
                Some((trace.injection, hk.beta))
            }
            _ => None,
        };
        z = block_forward(tape, store, cfg, block1, z, ctxv, tsin, inj);
        if cfg.skips.iter().any(|&(from, _)| from == block1) {
            skip_store[block1] = Some(z);
        }
        if block1 < 11 {
            z = bridge(tape, store, cfg, block1, z);
        }
    }

    // un-patchify
    let out = affine_named(tape, store, "unet.out", z);
    let split = tape.reshape(out, &[h * w, c]);
    let perm = Arc::new(invert_perm(&merge2x2_perm(h)));
    let unpatched = tape.permute_rows(split, perm);
    let eps = tape.reshape(unpatched, &[h, w, c]);
    (eps, UnetTrace { block_inputs: taps })
}
