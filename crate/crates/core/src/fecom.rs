//! Feature compensation: cross-attention from image-embedding queries to
//! quantity-caption keys/values.
//!
//! The caption branch runs the prompt matrix through a shared FC layer and
//! projects it to per-head keys and values (the value width is half the key
//! width). The image branch expands the image embedding to twice its width,
//! reshapes it into `n_q` query tokens and applies a shared per-token query
//! projection. Scaled-dot-product attention produces the compensation
//! feature, which is normalized, passed through a final FC layer, scaled by
//! λ and added onto the image embedding to form the enhanced feature.
//!
//! The final FC layer starts at zero, so an untrained module leaves the
//! image embedding untouched in every LayerNorm placement.

use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEmbedding, PromptEmbedding};
use crate::error::MqError;
use crate::num::Scalar;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

/// Where the post-attention LayerNorm sits relative to the final FC layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerNormPlacement {
    /// flatten → LayerNorm → final FC
    #[serde(rename = "canonical")]
    Canonical,
    /// flatten → final FC → LayerNorm (the "m/o" ablation variant)
    #[serde(rename = "m/o")]
    MovedAfterFc,
    /// LayerNorm removed entirely (the "w/o" ablation variant)
    #[serde(rename = "w/o")]
    Without,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeComDims {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Query tokens the image embedding is resized into.
    pub n_q: usize,
    pub l_t: usize,
    pub d_t: usize,
    pub d_i: usize,
}

impl FeComDims {
    pub fn desk() -> Self {
        FeComDims {
            heads: 4,
            d_k: 16,
            d_v: 8,
            n_q: 4,
            l_t: 16,
            d_t: 64,
            d_i: 128,
        }
    }

    /// Reference dims: 77×2048 text, 1280 image, 10 heads of 64/32.
    pub fn paper_reference() -> Self {
        FeComDims {
            heads: 10,
            d_k: 64,
            d_v: 32,
            n_q: 4,
            l_t: 77,
            d_t: 2048,
            d_i: 1280,
        }
    }

    /// Width of one image query token after the expand + resize stage.
    pub fn token_width(&self) -> usize {
        2 * self.d_i / self.n_q
    }

    pub fn validate(&self) -> Result<(), MqError> {
        if self.heads * self.d_v * self.n_q != self.d_i {
            return Err(MqError::config(format!(
                "feature compensation dims: heads({})·d_v({})·n_q({}) must equal d_i({})",
                self.heads, self.d_v, self.n_q, self.d_i
            )));
        }
        if (2 * self.d_i) % self.n_q != 0 {
            return Err(MqError::config(format!(
                "feature compensation dims: 2·d_i({}) not divisible by n_q({})",
                2 * self.d_i,
                self.n_q
            )));
        }
        if self.d_k == 0 || self.heads == 0 || self.l_t == 0 {
            return Err(MqError::config("feature compensation dims: zero extent"));
        }
        Ok(())
    }
}

pub const PREFIX: &str = "fecom.";
pub const LN_EPS: f64 = 1e-5;

/// Registers the trainable tensors. The final FC is zero so the initial
/// compensation is exactly zero.
pub fn init_fecom<T: Scalar>(store: &mut ParamStore<T>, dims: &FeComDims, seed: u64) {
    dims.validate().expect("invalid feature compensation dims");
    let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
        let mut rng = Rng::for_tag(seed, &format!("{PREFIX}{name}"));
        let mut w = vec![T::ZERO; fan_in * fan_out];
        rng.fill_normal(&mut w, 1.0 / (fan_in as f64).sqrt());
        store.insert(
            &format!("{PREFIX}{name}.w"),
            Tensor::new(&[fan_in, fan_out], w),
            true,
        );
        store.insert(
            &format!("{PREFIX}{name}.b"),
            Tensor::zeros(&[fan_out]),
            true,
        );
    };
    linear("ft", dims.d_t, dims.d_t);
    linear("wk", dims.d_t, dims.heads * dims.d_k);
    linear("wv", dims.d_t, dims.heads * dims.d_v);
    linear("expand", dims.d_i, 2 * dims.d_i);
    linear("wq", dims.token_width(), dims.heads * dims.d_k);
    store.insert(
        &format!("{PREFIX}ln.gain"),
        Tensor::filled(&[dims.d_i], T::ONE),
        true,
    );
    store.insert(
        &format!("{PREFIX}ln.bias"),
        Tensor::zeros(&[dims.d_i]),
        true,
    );
    store.insert(
        &format!("{PREFIX}out.w"),
        Tensor::zeros(&[dims.d_i, dims.d_i]),
        true,
    );
    store.insert(&format!("{PREFIX}out.b"), Tensor::zeros(&[dims.d_i]), true);
}

/// Caption branch: shared FC, then key/value projections split into heads.
/// Returns (K_t, V_t) of shapes (h, L_t, d_k) and (h, L_t, d_v).
pub fn project_text<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    dims: &FeComDims,
    caption: Var,
) -> (Var, Var) {
    assert_eq!(
        tape.shape(caption),
        &[dims.l_t, dims.d_t],
        "project_text: caption shape"
    );
    let ftw = tape.param(store, "fecom.ft.w");
    let ftb = tape.param(store, "fecom.ft.b");
    let ft = tape.affine(caption, ftw, ftb);
    let wk = tape.param(store, "fecom.wk.w");
    let bk = tape.param(store, "fecom.wk.b");
    let k = tape.affine(ft, wk, bk);
    let kt = tape.split_heads(k, dims.heads);
    let wv = tape.param(store, "fecom.wv.w");
    let bv = tape.param(store, "fecom.wv.b");
    let v = tape.affine(ft, wv, bv);
    let vt = tape.split_heads(v, dims.heads);
    (kt, vt)
}

/// Stage taps of the image branch, for shape-conformance checks.
pub struct ImageProjection {
    /// (2·D_i,) after the expand FC
    pub expanded: Var,
    /// (n_q, 2·D_i/n_q) after the resize
    pub tokens: Var,
    /// (h, n_q, d_k) query heads
    pub queries: Var,
}

/// Image branch: expand FC, resize into query tokens, shared per-token
/// query projection, head split.
pub fn project_image<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    dims: &FeComDims,
    image_emb: Var,
) -> ImageProjection {
    assert_eq!(
        tape.shape(image_emb),
        &[dims.d_i],
        "project_image: embedding shape"
    );
    let ew = tape.param(store, "fecom.expand.w");
    let eb = tape.param(store, "fecom.expand.b");
    let expanded = tape.affine(image_emb, ew, eb);
    let tokens = tape.reshape(expanded, &[dims.n_q, dims.token_width()]);
    let qw = tape.param(store, "fecom.wq.w");
    let qb = tape.param(store, "fecom.wq.b");
    let q = tape.affine(tokens, qw, qb);
    let queries = tape.split_heads(q, dims.heads);
    ImageProjection {
        expanded,
        tokens,
        queries,
    }
}

/// Attention plus the post-attention stack, producing the compensation
/// feature (D_i,). Also returns the attention weights and the merged
/// attention output for tests and taps.
pub struct Compensation {
    /// (h, n_q, L_t) softmax rows
    pub attn: Var,
    /// (h, n_q, d_v) per-head attention output
    pub attn_out: Var,
    /// (n_q, h·d_v) merged heads
    pub merged: Var,
    /// (D_i,) compensation feature
    pub feature: Var,
}

pub fn compensate<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    dims: &FeComDims,
    queries: Var,
    keys: Var,
    values: Var,
    placement: LayerNormPlacement,
) -> Compensation {
    assert_eq!(
        tape.shape(queries)[0],
        dims.heads,
        "compensate: query heads"
    );
    assert_eq!(tape.shape(keys)[0], dims.heads, "compensate: key heads");
    let scores = tape.bmm_nt(queries, keys);
    let scores = tape.scale(scores, T::from_f64(1.0 / (dims.d_k as f64).sqrt()));
    let attn = tape.softmax_rows(scores);
    let attn_out = tape.bmm(attn, values);
    let merged = tape.merge_heads(attn_out);
    let flat = tape.reshape(merged, &[dims.d_i]);
    let ow = tape.param(store, "fecom.out.w");
    let ob = tape.param(store, "fecom.out.b");
    let feature = match placement {
        LayerNormPlacement::Canonical => {
            let g = tape.param(store, "fecom.ln.gain");
            let b = tape.param(store, "fecom.ln.bias");
            let normed = tape.layer_norm(flat, g, b, T::from_f64(LN_EPS));
            tape.affine(normed, ow, ob)
        }
        LayerNormPlacement::MovedAfterFc => {
            let fc = tape.affine(flat, ow, ob);
            let g = tape.param(store, "fecom.ln.gain");
            let b = tape.param(store, "fecom.ln.bias");
            tape.layer_norm(fc, g, b, T::from_f64(LN_EPS))
        }
        LayerNormPlacement::Without => tape.affine(flat, ow, ob),
    };
    Compensation {
        attn,
        attn_out,
        merged,
        feature,
    }
}

/// Enhanced feature: image embedding + λ·compensation. λ = 0 returns the
/// image-embedding node itself, so the output is bitwise the input and no
/// gradient path to the compensation exists.
pub fn enhance<T: Scalar>(
    tape: &mut Tape<T>,
    image_emb: Var,
    compensation: Var,
    lambda: f64,
) -> Var {
    if lambda == 0.0 {
        return image_emb;
    }
    tape.axpy(image_emb, compensation, T::from_f64(lambda))
}

/// Taps of a full forward pass.
pub struct FeComTrace {
    pub keys: Var,
    pub values: Var,
    pub image: ImageProjection,
    pub attention: Compensation,
    /// (D_i,) enhanced feature
    pub enhanced: Var,
}

/// Full forward from a precomputed image embedding and caption embedding.
/// Differentiable with respect to every registered tensor.
pub fn fecom_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    dims: &FeComDims,
    placement: LayerNormPlacement,
    image_emb: &ImageEmbedding<T>,
    caption: &PromptEmbedding<T>,
    lambda: f64,
) -> FeComTrace {
    let g = tape.constant(&image_emb.vector);
    let c = tape.constant(&caption.matrix);
    let (keys, values) = project_text(tape, store, dims, c);
    let image = project_image(tape, store, dims, g);
    let attention = compensate(tape, store, dims, image.queries, keys, values, placement);
    let enhanced = enhance(tape, g, attention.feature, lambda);
    FeComTrace {
        keys,
        values,
        image,
        attention,
        enhanced,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOpts};

    fn randemb(d: usize, seed: u64) -> ImageEmbedding<f64> {
        let mut rng = Rng::seeded(seed);
        let mut v = vec![0.0f64; d];
        rng.fill_normal(&mut v, 1.0);
        ImageEmbedding {
            vector: Tensor::new(&[d], v),
        }
    }

    fn randprompt(l: usize, d: usize, seed: u64) -> PromptEmbedding<f64> {
        let mut rng = Rng::seeded(seed);
        let mut v = vec![0.0f64; l * d];
        rng.fill_normal(&mut v, 1.0);
        PromptEmbedding {
            kind: crate::encoders::PromptKind::QuantityCaption,
            matrix: Tensor::new(&[l, d], v),
        }
    }

    fn desk_store(seed: u64) -> (ParamStore<f64>, FeComDims) {
        let dims = FeComDims::desk();
        let mut store = ParamStore::new();
        init_fecom(&mut store, &dims, seed);
        (store, dims)
    }

    #[test]
    fn paper_reference_text_projection_shapes() {
        let dims = FeComDims::paper_reference();
        let mut store = ParamStore::new();
        init_fecom(&mut store, &dims, 1);
        let mut tape: Tape<f64> = Tape::new();
        let c = randprompt(77, 2048, 2);
        let cv = tape.constant(&c.matrix);
        let (kt, vt) = project_text(&mut tape, &store, &dims, cv);
        assert_eq!(tape.shape(kt), &[10, 77, 64]);
        assert_eq!(tape.shape(vt), &[10, 77, 32]);
    }

    #[test]
    fn zero_caption_zero_bias_gives_zero_keys_values() {
        let (store, dims) = desk_store(3);
        let mut tape: Tape<f64> = Tape::new();
        let zero = tape.constant(&Tensor::zeros(&[dims.l_t, dims.d_t]));
        let (kt, vt) = project_text(&mut tape, &store, &dims, zero);
        assert!(tape.data(kt).iter().all(|&v| v == 0.0));
        assert!(tape.data(vt).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_projection_matches_affine_split_oracle() {
        let (store, dims) = desk_store(4);
        let c = randprompt(dims.l_t, dims.d_t, 5);
        let mut tape: Tape<f64> = Tape::new();
        let cv = tape.constant(&c.matrix);
        let (kt, _) = project_text(&mut tape, &store, &dims, cv);
        // independent composition on a second tape
        let mut oracle: Tape<f64> = Tape::new();
        let cv2 = oracle.constant(&c.matrix);
        let fw = oracle.constant(store.get("fecom.ft.w"));
        let fb = oracle.constant(store.get("fecom.ft.b"));
        let ft = oracle.affine(cv2, fw, fb);
        let kw = oracle.constant(store.get("fecom.wk.w"));
        let kb = oracle.constant(store.get("fecom.wk.b"));
        let k = oracle.affine(ft, kw, kb);
        let ks = oracle.split_heads(k, dims.heads);
        assert!(tape.tensor(kt).max_abs_diff(&oracle.tensor(ks)) <= 1e-12);
    }

    #[test]
    fn paper_reference_image_chain_shapes() {
        let dims = FeComDims::paper_reference();
        let mut store = ParamStore::new();
        init_fecom(&mut store, &dims, 6);
        let mut tape: Tape<f64> = Tape::new();
        let g = randemb(1280, 7);
        let gv = tape.constant(&g.vector);
        let proj = project_image(&mut tape, &store, &dims, gv);
        assert_eq!(tape.shape(proj.expanded), &[2560]);
        assert_eq!(tape.shape(proj.tokens), &[4, 640]);
        assert_eq!(tape.shape(proj.queries), &[10, 4, 64]);
    }

    #[test]
    fn desk_image_chain_shapes() {
        let (store, dims) = desk_store(8);
        let mut tape: Tape<f64> = Tape::new();
        let g = randemb(128, 9);
        let gv = tape.constant(&g.vector);
        let proj = project_image(&mut tape, &store, &dims, gv);
        assert_eq!(tape.shape(proj.expanded), &[256]);
        assert_eq!(tape.shape(proj.tokens), &[4, 64]);
        assert_eq!(tape.shape(proj.queries), &[4, 4, 16]);
    }

    #[test]
    fn zero_image_embedding_gives_zero_queries() {
        let (store, dims) = desk_store(10);
        let mut tape: Tape<f64> = Tape::new();
        let zero = tape.constant(&Tensor::zeros(&[dims.d_i]));
        let proj = project_image(&mut tape, &store, &dims, zero);
        assert!(tape.data(proj.queries).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_attention_under_zero_queries() {
        // Q = 0 → softmax uniform → per-head output is the column mean of
        // that head's value rows.
        let (store, dims) = desk_store(11);
        let c = randprompt(dims.l_t, dims.d_t, 12);
        let mut tape: Tape<f64> = Tape::new();
        let cv = tape.constant(&c.matrix);
        let (kt, vt) = project_text(&mut tape, &store, &dims, cv);
        let zq = tape.constant(&Tensor::zeros(&[dims.heads, dims.n_q, dims.d_k]));
        let comp = compensate(
            &mut tape,
            &store,
            &dims,
            zq,
            kt,
            vt,
            LayerNormPlacement::Canonical,
        );
        let v = tape.tensor(vt);
        let out = tape.tensor(comp.attn_out);
        for h in 0..dims.heads {
            for c_ in 0..dims.d_v {
                let mean: f64 = (0..dims.l_t)
                    .map(|r| v.data()[h * dims.l_t * dims.d_v + r * dims.d_v + c_])
                    .sum::<f64>()
                    / dims.l_t as f64;
                for q in 0..dims.n_q {
                    let got = out.data()[h * dims.n_q * dims.d_v + q * dims.d_v + c_];
                    assert!((got - mean).abs() < 1e-9, "{got} vs {mean}");
                }
            }
        }
    }

    #[test]
    fn single_context_token_dominates() {
        // one caption token → softmax degenerates → every query returns
        // that token's value vector
        let dims = FeComDims {
            l_t: 1,
            ..FeComDims::desk()
        };
        let mut store = ParamStore::new();
        init_fecom(&mut store, &dims, 13);
        let c = randprompt(1, dims.d_t, 14);
        let g = randemb(dims.d_i, 15);
        let mut tape: Tape<f64> = Tape::new();
        let cv = tape.constant(&c.matrix);
        let gv = tape.constant(&g.vector);
        let (kt, vt) = project_text(&mut tape, &store, &dims, cv);
        let proj = project_image(&mut tape, &store, &dims, gv);
        let comp = compensate(
            &mut tape,
            &store,
            &dims,
            proj.queries,
            kt,
            vt,
            LayerNormPlacement::Canonical,
        );
        let v = tape.tensor(vt);
        let out = tape.tensor(comp.attn_out);
        for h in 0..dims.heads {
            for q in 0..dims.n_q {
                for c_ in 0..dims.d_v {
                    let want = v.data()[h * dims.d_v + c_];
                    let got = out.data()[h * dims.n_q * dims.d_v + q * dims.d_v + c_];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn paper_reference_merged_shape_flattens_to_1280() {
        let dims = FeComDims::paper_reference();
        let mut store = ParamStore::new();
        init_fecom(&mut store, &dims, 16);
        let g = randemb(1280, 17);
        let c = randprompt(77, 2048, 18);
        let mut tape: Tape<f64> = Tape::new();
        let trace = fecom_forward(
            &mut tape,
            &store,
            &dims,
            LayerNormPlacement::Canonical,
            &g,
            &c,
            1.0,
        );
        assert_eq!(tape.shape(trace.attention.attn_out), &[10, 4, 32]);
        assert_eq!(tape.shape(trace.attention.merged), &[4, 320]);
        assert_eq!(tape.shape(trace.attention.feature), &[1280]);
        assert_eq!(tape.shape(trace.enhanced), &[1280]);
    }

    #[test]
    fn lambda_zero_is_bitwise_input_and_has_no_gradient() {
        let (mut store, dims) = desk_store(19);
        // give the final FC nonzero weights so the compensation is nonzero
        let mut rng = Rng::seeded(20);
        let mut w = vec![0.0f64; dims.d_i * dims.d_i];
        rng.fill_normal(&mut w, 0.1);
        store.param_mut("fecom.out.w").value = Tensor::new(&[dims.d_i, dims.d_i], w);
        let g = randemb(dims.d_i, 21);
        let c = randprompt(dims.l_t, dims.d_t, 22);
        let mut tape: Tape<f64> = Tape::new();
        let trace = fecom_forward(
            &mut tape,
            &store,
            &dims,
            LayerNormPlacement::Canonical,
            &g,
            &c,
            0.0,
        );
        assert!(tape.tensor(trace.enhanced).bitwise_eq(&g.vector));
        let loss = tape.half_sum_sq(trace.enhanced);
        let grads = tape.backward(loss);
        let named = tape.named_grads(&grads);
        assert!(
            named.iter().all(|(n, _)| !n.starts_with("fecom.")),
            "λ=0 must cut every gradient path into the module"
        );
    }

    #[test]
    fn enhance_lambda_one_with_zero_compensation_is_input() {
        let (store, dims) = desk_store(23);
        // default init zeroes the final FC, so the compensation is zero
        let g = randemb(dims.d_i, 24);
        let c = randprompt(dims.l_t, dims.d_t, 25);
        let mut tape: Tape<f64> = Tape::new();
        let trace = fecom_forward(
            &mut tape,
            &store,
            &dims,
            LayerNormPlacement::Canonical,
            &g,
            &c,
            1.0,
        );
        assert!(tape.data(trace.attention.feature).iter().all(|&v| v == 0.0));
        assert!(tape.tensor(trace.enhanced).max_abs_diff(&g.vector) == 0.0);
    }

    #[test]
    fn enhance_linearity_in_lambda() {
        // exact on power-of-two data
        let mut tape: Tape<f64> = Tape::new();
        let g = tape.constant(&Tensor::new(&[4], vec![8.0, 16.0, -4.0, 2.0]));
        let ic = tape.constant(&Tensor::new(&[4], vec![1.0, -2.0, 4.0, 0.5]));
        let both = enhance(&mut tape, g, ic, 0.5);
        let first = enhance(&mut tape, g, ic, 0.25);
        let second = enhance(&mut tape, first, ic, 0.25);
        assert!(tape.tensor(both).bitwise_eq(&tape.tensor(second)));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, dims) = desk_store(26);
        let g = randemb(dims.d_i, 27);
        let c = randprompt(dims.l_t, dims.d_t, 28);
        let mut tape: Tape<f64> = Tape::new();
        let trace = fecom_forward(
            &mut tape,
            &store,
            &dims,
            LayerNormPlacement::Canonical,
            &g,
            &c,
            1.0,
        );
        for row in tape.data(trace.attention.attn).chunks(dims.l_t) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        for placement in [
            LayerNormPlacement::Canonical,
            LayerNormPlacement::MovedAfterFc,
            LayerNormPlacement::Without,
        ] {
            let (mut store, dims) = desk_store(29);
            // non-degenerate final FC so its gradient is exercised
            let mut rng = Rng::seeded(30);
            let mut w = vec![0.0f64; dims.d_i * dims.d_i];
            rng.fill_normal(&mut w, 0.05);
            store.param_mut("fecom.out.w").value = Tensor::new(&[dims.d_i, dims.d_i], w);
            let g = randemb(dims.d_i, 31);
            let c = randprompt(dims.l_t, dims.d_t, 32);
            let build = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
                let trace = fecom_forward(tape, s, &dims, placement, &g, &c, 1.0);
                tape.half_sum_sq(trace.enhanced)
            };
            let report = grad_check(&store, &build, &GradCheckOpts::f64_default());
            let expected = match placement {
                LayerNormPlacement::Without => 12, // ln tensors unused
                _ => 14,
            };
            assert_eq!(report.entries.len(), expected, "{placement:?}");
            assert!(
                report.max_rel_err() <= 1e-4,
                "{placement:?}: {}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn compensation_shape_is_d_i_for_valid_configs() {
        for (heads, d_v, n_q) in [(4usize, 8usize, 4usize), (2, 16, 4), (8, 4, 4), (4, 4, 8)] {
            let d_i = heads * d_v * n_q;
            let dims = FeComDims {
                heads,
                d_k: 2 * d_v,
                d_v,
                n_q,
                l_t: 6,
                d_t: 32,
                d_i,
            };
            let mut store = ParamStore::new();
            init_fecom(&mut store, &dims, 33);
            let g = randemb(d_i, 34);
            let c = randprompt(6, 32, 35);
            let mut tape: Tape<f64> = Tape::new();
            let trace = fecom_forward(
                &mut tape,
                &store,
                &dims,
                LayerNormPlacement::Canonical,
                &g,
                &c,
                1.0,
            );
            assert_eq!(tape.shape(trace.attention.feature), &[d_i]);
        }
    }

    #[test]
    fn invalid_dims_rejected() {
        let bad = FeComDims {
            heads: 3,
            ..FeComDims::desk()
        };
        assert!(bad.validate().is_err());
    }
}
