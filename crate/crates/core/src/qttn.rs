//! Quantity attention: turns the enhanced image feature into an injection
//! value shaped like a U-Net block state.
//!
//! An extraction FC layer transforms the enhanced feature, key/value
//! projections resize it into `n_ctx` context tokens per head, and the block
//! state is projected into per-head queries. Cross-attention over the
//! context tokens followed by a head merge yields a value with exactly the
//! block-state shape. The value projection starts at zero so an untrained
//! module injects nothing.
//!
//! Each injected block gets its own parameter set sized to that block's
//! width (the head count is shared, the head width follows the block), so
//! any block of the backbone can serve as an insertion point.

use serde::{Deserialize, Serialize};

use crate::error::MqError;
use crate::num::Scalar;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QttnDims {
    pub heads: usize,
    /// Per-head key/value width; heads · head_dim must equal the width of
    /// the injected block state.
    pub head_dim: usize,
    /// Context tokens the enhanced feature is resized into.
    pub n_ctx: usize,
    /// Width of the enhanced feature.
    pub d_i: usize,
}

impl QttnDims {
    pub fn desk() -> Self {
        QttnDims {
            heads: 8,
            head_dim: 16,
            n_ctx: 4,
            d_i: 128,
        }
    }

    /// Reference dims: 20 heads of 64 against (1024, 1280) block states.
    pub fn paper_reference() -> Self {
        QttnDims {
            heads: 20,
            head_dim: 64,
            n_ctx: 4,
            d_i: 1280,
        }
    }

    /// Width of the block state this instance injects into.
    pub fn d_z(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Dims for an arbitrary block width with a shared head count.
    pub fn for_block_width(
        heads: usize,
        n_ctx: usize,
        d_i: usize,
        width: usize,
    ) -> Result<Self, MqError> {
        if width % heads != 0 {
            return Err(MqError::config(format!(
                "quantity attention: block width {width} not divisible by {heads} heads"
            )));
        }
        let dims = QttnDims {
            heads,
            head_dim: width / heads,
            n_ctx,
            d_i,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<(), MqError> {
        if self.heads == 0 || self.head_dim == 0 || self.n_ctx == 0 {
            return Err(MqError::config("quantity attention dims: zero extent"));
        }
        Ok(())
    }
}

fn name(prefix: &str, field: &str) -> String {
    format!("{prefix}.{field}")
}

/// Registers one instance under `prefix` (e.g. `qttn.b4`). The value
/// projection is zero so the initial injection value is exactly zero.
pub fn init_qttn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dims: &QttnDims, seed: u64) {
    dims.validate().expect("invalid quantity attention dims");
    let d_z = dims.d_z();
    let ctx_out = dims.n_ctx * dims.heads * dims.head_dim;
    // extraction starts as the identity map
    store.insert(&name(prefix, "extract.w"), Tensor::eye(dims.d_i), true);
    store.insert(&name(prefix, "extract.b"), Tensor::zeros(&[dims.d_i]), true);
    let mut rng = Rng::for_tag(seed, &name(prefix, "wk"));
    let mut kw = vec![T::ZERO; dims.d_i * ctx_out];
    rng.fill_normal(&mut kw, 1.0 / (dims.d_i as f64).sqrt());
    store.insert(
        &name(prefix, "wk.w"),
        Tensor::new(&[dims.d_i, ctx_out], kw),
        true,
    );
    store.insert(&name(prefix, "wk.b"), Tensor::zeros(&[ctx_out]), true);
    store.insert(
        &name(prefix, "wv.w"),
        Tensor::zeros(&[dims.d_i, ctx_out]),
        true,
    );
    store.insert(&name(prefix, "wv.b"), Tensor::zeros(&[ctx_out]), true);
    let mut rng = Rng::for_tag(seed, &name(prefix, "wq"));
    let mut qw = vec![T::ZERO; d_z * d_z];
    rng.fill_normal(&mut qw, 1.0 / (d_z as f64).sqrt());
    store.insert(&name(prefix, "wq.w"), Tensor::new(&[d_z, d_z], qw), true);
    store.insert(&name(prefix, "wq.b"), Tensor::zeros(&[d_z]), true);
}

/// Extraction FC over the enhanced feature; bypassed by the
/// "w/o Extraction" ablation without touching any other shape.
pub fn extract<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    dims: &QttnDims,
    enhanced: Var,
) -> Var {
    assert_eq!(
        tape.shape(enhanced),
        &[dims.d_i],
        "extract: enhanced feature shape"
    );
    let w = tape.param(store, &name(prefix, "extract.w"));
    let b = tape.param(store, &name(prefix, "extract.b"));
    tape.affine(enhanced, w, b)
}

/// Key/value projections of the (extracted) feature into
/// (heads, n_ctx, head_dim) context tensors.
pub fn project_context<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    dims: &QttnDims,
    feature: Var,
) -> (Var, Var) {
    assert_eq!(
        tape.shape(feature),
        &[dims.d_i],
        "project_context: feature width"
    );
    let kw = tape.param(store, &name(prefix, "wk.w"));
    let kb = tape.param(store, &name(prefix, "wk.b"));
    let k = tape.affine(feature, kw, kb);
    let k = tape.reshape(k, &[dims.n_ctx, dims.heads * dims.head_dim]);
    let keys = tape.split_heads(k, dims.heads);
    let vw = tape.param(store, &name(prefix, "wv.w"));
    let vb = tape.param(store, &name(prefix, "wv.b"));
    let v = tape.affine(feature, vw, vb);
    let v = tape.reshape(v, &[dims.n_ctx, dims.heads * dims.head_dim]);
    let values = tape.split_heads(v, dims.heads);
    (keys, values)
}

/// Taps of one attention pass.
pub struct QttnTrace {
    /// (heads, N_z, head_dim) query heads
    pub queries: Var,
    /// (heads, n_ctx, head_dim) keys
    pub keys: Var,
    /// (heads, n_ctx, head_dim) values
    pub values: Var,
    /// (heads, N_z, n_ctx) softmax rows
    pub attn: Var,
    /// (heads, N_z, head_dim) per-head attention output
    pub attn_out: Var,
    /// (N_z, D_z) injection value
    pub injection: Var,
}

/// Cross-attention of block-state queries against the context tokens of
/// the enhanced feature. The output shape equals the block-state shape.
pub fn qttn_attend<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    dims: &QttnDims,
    block_state: Var,
    enhanced: Var,
    extraction_enabled: bool,
) -> QttnTrace {
    let zs = tape.shape(block_state).to_vec();
    assert_eq!(zs.len(), 2, "qttn_attend: block state must be (N_z, D_z)");
    assert_eq!(
        zs[1],
        dims.d_z(),
        "qttn_attend: block width {} does not match heads·head_dim {}",
        zs[1],
        dims.d_z()
    );
    let feature = if extraction_enabled {
        extract(tape, store, prefix, dims, enhanced)
    } else {
        enhanced
    };
    let (keys, values) = project_context(tape, store, prefix, dims, feature);
    let qw = tape.param(store, &name(prefix, "wq.w"));
    let qb = tape.param(store, &name(prefix, "wq.b"));
    let q = tape.affine(block_state, qw, qb);
    let queries = tape.split_heads(q, dims.heads);
    let scores = tape.bmm_nt(queries, keys);
    let scores = tape.scale(scores, T::from_f64(1.0 / (dims.head_dim as f64).sqrt()));
    let attn = tape.softmax_rows(scores);
    let attn_out = tape.bmm(attn, values);
    let injection = tape.merge_heads(attn_out);
    QttnTrace {
        queries,
        keys,
        values,
        attn,
        attn_out,
        injection,
    }
}
