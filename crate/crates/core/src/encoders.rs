//! Deterministic stand-in text and image encoders.
//!
//! The editing mechanism only depends on embedding shapes and on count/class
//! tokens being distinguishable, not on encoder internals, so both encoders
//! are small frozen stacks: the text side is an embedding table plus a fixed
//! sinusoidal position term, the image side a patch-average followed by a
//! frozen two-layer random projection. Externally produced embeddings can be
//! ingested through the `MQEB` file format for bridging experiments.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::MqError;
use crate::num::Scalar;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tensor};

pub const VOCAB_SIZE: usize = 256;
/// ids 1..=20 are count words ("one" .. "twenty").
pub const COUNT_TOKEN_BASE: u16 = 1;
pub const COUNT_TOKEN_MAX: u16 = 20;
/// ids 21..=120 are object classes.
pub const CLASS_TOKEN_BASE: u16 = 21;
pub const CLASS_TOKEN_MAX: u16 = 120;
pub const PAD_ID: u16 = 0;

const COUNT_WORDS: [&str; 20] = [
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

const CLASS_NAMES: [&str; 10] = [
    "blob", "disc", "dot", "spot", "ball", "pebble", "bead", "button", "coin", "chip",
];

pub fn count_token(count: usize) -> Result<u16, MqError> {
    if count >= 1 && count <= COUNT_TOKEN_MAX as usize {
        Ok(COUNT_TOKEN_BASE + (count as u16 - 1))
    } else {
        Err(MqError::config(format!("count {count} outside 1..=20")))
    }
}

pub fn class_token(class: usize) -> Result<u16, MqError> {
    if class <= (CLASS_TOKEN_MAX - CLASS_TOKEN_BASE) as usize {
        Ok(CLASS_TOKEN_BASE + class as u16)
    } else {
        Err(MqError::config(format!("class id {class} outside 0..=99")))
    }
}

pub fn class_name(class: usize) -> String {
    CLASS_NAMES
        .get(class)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class}"))
}

/// Resolves one caption word to a token id: count words, class names, plain
/// digits, or a raw numeric id.
pub fn word_to_token(word: &str) -> Result<u16, MqError> {
    if let Some(i) = COUNT_WORDS.iter().position(|w| *w == word) {
        return Ok(COUNT_TOKEN_BASE + i as u16);
    }
    if let Some(i) = CLASS_NAMES.iter().position(|w| *w == word) {
        return class_token(i);
    }
    if let Ok(n) = word.parse::<usize>() {
        if (1..=20).contains(&n) {
            return count_token(n);
        }
        if n < VOCAB_SIZE {
            return Ok(n as u16);
        }
    }
    Err(MqError::config(format!("unknown caption word {word:?}")))
}

// ── Domain types ──────────────────────────────────────────────────────

/// Token ids padded to exactly `l_t` with the pad id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u16>,
}

impl TokenSequence {
    pub fn new(ids: &[u16], l_t: usize) -> Result<Self, MqError> {
        if ids.len() > l_t {
            return Err(MqError::config(format!(
                "token sequence length {} exceeds L_t={l_t}",
                ids.len()
            )));
        }
        for &id in ids {
            if id as usize >= VOCAB_SIZE {
                return Err(MqError::config(format!(
                    "token id {id} outside vocabulary of {VOCAB_SIZE}"
                )));
            }
        }
        let mut padded = ids.to_vec();
        padded.resize(l_t, PAD_ID);
        Ok(TokenSequence { ids: padded })
    }

    pub fn all_pad(l_t: usize) -> Self {
        TokenSequence {
            ids: vec![PAD_ID; l_t],
        }
    }

    /// "<count> <class>" caption.
    pub fn caption(count: usize, class: usize, l_t: usize) -> Result<Self, MqError> {
        TokenSequence::new(&[count_token(count)?, class_token(class)?], l_t)
    }

    pub fn parse_words(text: &str, l_t: usize) -> Result<Self, MqError> {
        let ids: Result<Vec<u16>, MqError> = text.split_whitespace().map(word_to_token).collect();
        TokenSequence::new(&ids?, l_t)
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn is_all_pad(&self) -> bool {
        self.ids.iter().all(|&id| id == PAD_ID)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    QuantityCaption,
    EditInstruction,
    NullText,
}

/// L_t×D_t prompt matrix.
#[derive(Clone, Debug)]
pub struct PromptEmbedding<T> {
    pub kind: PromptKind,
    pub matrix: Tensor<T>,
}

/// D_i image feature vector.
#[derive(Clone, Debug)]
pub struct ImageEmbedding<T> {
    pub vector: Tensor<T>,
}

/// H×W×C raster with values in [0,1]; H and W are powers of two.
#[derive(Clone, Debug)]
pub struct ImageSample<T> {
    raster: Tensor<T>,
}

impl<T: Scalar> ImageSample<T> {
    pub fn new(raster: Tensor<T>) -> Result<Self, MqError> {
        let sh = raster.shape();
        if sh.len() != 3 {
            return Err(MqError::config(format!(
                "image sample must be H×W×C, got {sh:?}"
            )));
        }
        if !sh[0].is_power_of_two() || !sh[1].is_power_of_two() {
            return Err(MqError::config(format!(
                "image extents must be powers of two, got {sh:?}"
            )));
        }
        for &v in raster.data() {
            let f = v.to_f64();
            if !(0.0..=1.0).contains(&f) {
                return Err(MqError::config(format!(
                    "image sample value {f} outside [0,1]"
                )));
            }
        }
        Ok(ImageSample { raster })
    }

    pub fn raster(&self) -> &Tensor<T> {
        &self.raster
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let sh = self.raster.shape();
        (sh[0], sh[1], sh[2])
    }
}

// ── Encoder dims and parameters ───────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderDims {
    pub l_t: usize,
    pub d_t: usize,
    pub d_i: usize,
}

/// Patch side for the image patch-average stage.
pub const IMAGE_PATCH: usize = 2;
/// Hidden width of the frozen image projection stack.
pub const IMAGE_HIDDEN: usize = 256;

/// Registers the frozen text-encoder and image-encoder tensors.
pub fn init_encoders<T: Scalar>(
    store: &mut ParamStore<T>,
    dims: &EncoderDims,
    image_dims: (usize, usize, usize),
    seed: u64,
) {
    let mut rng = Rng::for_tag(seed, "enc_text.embed");
    let std = 1.0 / (dims.d_t as f64).sqrt();
    let mut table = vec![T::ZERO; VOCAB_SIZE * dims.d_t];
    rng.fill_normal(&mut table, std);
    store.insert(
        "enc_text.embed",
        Tensor::new(&[VOCAB_SIZE, dims.d_t], table),
        false,
    );

    let (h, w, c) = image_dims;
    let patch_feats = (h / IMAGE_PATCH) * (w / IMAGE_PATCH) * c;
    let mut rng = Rng::for_tag(seed, "enc_image.w1");
    let mut w1 = vec![T::ZERO; patch_feats * IMAGE_HIDDEN];
    rng.fill_normal(&mut w1, 1.0 / (patch_feats as f64).sqrt());
    store.insert(
        "enc_image.w1",
        Tensor::new(&[patch_feats, IMAGE_HIDDEN], w1),
        false,
    );
    let mut rng = Rng::for_tag(seed, "enc_image.b1");
    let mut b1 = vec![T::ZERO; IMAGE_HIDDEN];
    rng.fill_normal(&mut b1, 0.1);
    store.insert("enc_image.b1", Tensor::new(&[IMAGE_HIDDEN], b1), false);
    let mut rng = Rng::for_tag(seed, "enc_image.w2");
    let mut w2 = vec![T::ZERO; IMAGE_HIDDEN * dims.d_i];
    rng.fill_normal(&mut w2, 1.0 / (IMAGE_HIDDEN as f64).sqrt());
    store.insert(
        "enc_image.w2",
        Tensor::new(&[IMAGE_HIDDEN, dims.d_i], w2),
        false,
    );
    let mut rng = Rng::for_tag(seed, "enc_image.b2");
    let mut b2 = vec![T::ZERO; dims.d_i];
    rng.fill_normal(&mut b2, 0.1);
    store.insert("enc_image.b2", Tensor::new(&[dims.d_i], b2), false);
}

/// Fixed sinusoidal position term.
fn position_term<T: Scalar>(pos: usize, d: usize) -> Vec<T> {
    let mut row = vec![T::ZERO; d];
    for (j, slot) in row.iter_mut().enumerate() {
        let rate = (10_000f64).powf(-((j / 2 * 2) as f64) / d as f64);
        let angle = pos as f64 * rate;
        *slot = T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    row
}

/// Token lookup plus fixed sinusoidal position addition. Pad tokens map to
/// the table's null row, so the all-pad sequence is the null-text embedding.
pub fn encode_text<T: Scalar>(
    store: &ParamStore<T>,
    dims: &EncoderDims,
    seq: &TokenSequence,
    kind: PromptKind,
) -> PromptEmbedding<T> {
    let table = store.get("enc_text.embed");
    assert_eq!(seq.ids().len(), dims.l_t, "token sequence length != L_t");
    let mut data = vec![T::ZERO; dims.l_t * dims.d_t];
    for (pos, &id) in seq.ids().iter().enumerate() {
        let row = &table.data()[id as usize * dims.d_t..(id as usize + 1) * dims.d_t];
        let sin = position_term::<T>(pos, dims.d_t);
        for j in 0..dims.d_t {
            data[pos * dims.d_t + j] = row[j] + sin[j];
        }
    }
    PromptEmbedding {
        kind,
        matrix: Tensor::new(&[dims.l_t, dims.d_t], data),
    }
}

pub fn null_text<T: Scalar>(store: &ParamStore<T>, dims: &EncoderDims) -> PromptEmbedding<T> {
    encode_text(
        store,
        dims,
        &TokenSequence::all_pad(dims.l_t),
        PromptKind::NullText,
    )
}

/// Per-patch channel means of the raster, row-major over the patch grid.
pub fn patch_means<T: Scalar>(img: &ImageSample<T>) -> Vec<T> {
    let (h, w, c) = img.dims();
    let (gh, gw) = (h / IMAGE_PATCH, w / IMAGE_PATCH);
    let data = img.raster().data();
    let norm = T::from_f64(1.0 / (IMAGE_PATCH * IMAGE_PATCH) as f64);
    let mut out = vec![T::ZERO; gh * gw * c];
    for gi in 0..gh {
        for gj in 0..gw {
            for ch in 0..c {
                let mut acc = T::ZERO;
                for pi in 0..IMAGE_PATCH {
                    for pj in 0..IMAGE_PATCH {
                        let y = gi * IMAGE_PATCH + pi;
                        let x = gj * IMAGE_PATCH + pj;
                        acc = acc + data[(y * w + x) * c + ch];
                    }
                }
                out[(gi * gw + gj) * c + ch] = acc * norm;
            }
        }
    }
    out
}

/// Frozen patch-average + two-layer random projection to D_i.
pub fn encode_image<T: Scalar>(
    store: &ParamStore<T>,
    dims: &EncoderDims,
    img: &ImageSample<T>,
) -> ImageEmbedding<T> {
    let feats = patch_means(img);
    let w1 = store.get("enc_image.w1");
    let b1 = store.get("enc_image.b1");
    let w2 = store.get("enc_image.w2");
    let b2 = store.get("enc_image.b2");
    assert_eq!(
        feats.len(),
        w1.shape()[0],
        "image dims do not match encoder"
    );
    let hidden_w = w1.shape()[1];
    let mut hidden = vec![T::ZERO; hidden_w];
    for (j, slot) in hidden.iter_mut().enumerate() {
        let mut acc = b1.data()[j];
        for (i, &f) in feats.iter().enumerate() {
            acc = acc + f * w1.data()[i * hidden_w + j];
        }
        *slot = acc.tanh();
    }
    let mut out = vec![T::ZERO; dims.d_i];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut acc = b2.data()[j];
        for (i, &hv) in hidden.iter().enumerate() {
            acc = acc + hv * w2.data()[i * dims.d_i + j];
        }
        *slot = acc;
    }
    ImageEmbedding {
        vector: Tensor::new(&[dims.d_i], out),
    }
}

/// e + σ·g with seeded standard-normal g; σ = 0 returns e bitwise.
pub fn perturb_embedding<T: Scalar>(
    e: &ImageEmbedding<T>,
    sigma: f64,
    seed: u64,
) -> ImageEmbedding<T> {
    assert!(sigma >= 0.0, "perturb_embedding: sigma must be >= 0");
    if sigma == 0.0 {
        return e.clone();
    }
    let mut rng = Rng::seeded(seed);
    let data: Vec<T> = e
        .vector
        .data()
        .iter()
        .map(|&v| v + T::from_f64(sigma * rng.normal()))
        .collect();
    ImageEmbedding {
        vector: Tensor::new(e.vector.shape(), data),
    }
}

// ── Embedding file format ─────────────────────────────────────────────
//
// magic "MQEB", version u32 LE, kind u8 (0=text, 1=image), rank u8,
// extents u32 LE each, payload f32 LE row-major.

pub const EMBED_MAGIC: &[u8; 4] = b"MQEB";
pub const EMBED_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum LoadedEmbedding {
    Text(Tensor<f32>),
    Image(Tensor<f32>),
}

pub fn write_embedding_file(path: &Path, emb: &LoadedEmbedding) -> Result<(), MqError> {
    let (kind, tensor) = match emb {
        LoadedEmbedding::Text(t) => (0u8, t),
        LoadedEmbedding::Image(t) => (1u8, t),
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(EMBED_MAGIC);
    buf.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    buf.push(kind);
    buf.push(tensor.shape().len() as u8);
    for &e in tensor.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), MqError> {
    r.read_exact(buf)
        .map_err(|_| MqError::format(format!("truncated embedding file while reading {what}")))
}

/// Reads an embedding file and validates its shape against the configured
/// dims: text embeddings must be (L_t, D_t), image embeddings (D_i,).
pub fn load_embedding_file(path: &Path, dims: &EncoderDims) -> Result<LoadedEmbedding, MqError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact_or_format(&mut f, &mut magic, "magic")?;
    if &magic != EMBED_MAGIC {
        return Err(MqError::format(format!(
            "bad magic {magic:?}, expected {EMBED_MAGIC:?}"
        )));
    }
    let mut v4 = [0u8; 4];
    read_exact_or_format(&mut f, &mut v4, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != EMBED_VERSION {
        return Err(MqError::format(format!("unsupported version {version}")));
    }
    let mut kb = [0u8; 1];
    read_exact_or_format(&mut f, &mut kb, "kind")?;
    let mut rb = [0u8; 1];
    read_exact_or_format(&mut f, &mut rb, "rank")?;
    let rank = rb[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        read_exact_or_format(&mut f, &mut v4, "extent")?;
        shape.push(u32::from_le_bytes(v4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    read_exact_or_format(&mut f, &mut payload, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let tensor = Tensor::new(&shape, data);
    match kb[0] {
        0 => {
            if shape != [dims.l_t, dims.d_t] {
                return Err(MqError::format(format!(
                    "text embedding shape {shape:?} does not match configured ({}, {})",
                    dims.l_t, dims.d_t
                )));
            }
            Ok(LoadedEmbedding::Text(tensor))
        }
        1 => {
            if shape != [dims.d_i] {
                return Err(MqError::format(format!(
                    "image embedding shape {shape:?} does not match configured ({},)",
                    dims.d_i
                )));
            }
            Ok(LoadedEmbedding::Image(tensor))
        }
        k => Err(MqError::format(format!("unknown embedding kind {k}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> EncoderDims {
        EncoderDims {
            l_t: 16,
            d_t: 64,
            d_i: 128,
        }
    }

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        init_encoders(&mut s, &dims(), (32, 32, 3), 7);
        s
    }

    #[test]
    fn all_pad_sequence_is_stable_null_text() {
        let s = store();
        let a = null_text::<f32>(&s, &dims());
        let b = encode_text(
            &s,
            &dims(),
            &TokenSequence::all_pad(16),
            PromptKind::NullText,
        );
        assert!(a.matrix.bitwise_eq(&b.matrix));
        assert_eq!(a.matrix.shape(), &[16, 64]);
    }

    #[test]
    fn single_token_difference_is_local() {
        let s = store();
        let a = TokenSequence::new(&[3, 21, 5], 16).unwrap();
        let b = TokenSequence::new(&[3, 22, 5], 16).unwrap();
        let ea = encode_text(&s, &dims(), &a, PromptKind::QuantityCaption);
        let eb = encode_text(&s, &dims(), &b, PromptKind::QuantityCaption);
        for row in 0..16 {
            let ra = &ea.matrix.data()[row * 64..(row + 1) * 64];
            let rb = &eb.matrix.data()[row * 64..(row + 1) * 64];
            let same = ra.iter().zip(rb.iter()).all(|(x, y)| x == y);
            if row == 1 {
                assert!(!same, "differing token row must change");
            } else {
                assert!(same, "row {row} should be untouched");
            }
        }
    }

    #[test]
    fn encode_text_deterministic() {
        let s = store();
        let seq = TokenSequence::caption(6, 0, 16).unwrap();
        let a = encode_text(&s, &dims(), &seq, PromptKind::QuantityCaption);
        let b = encode_text(&s, &dims(), &seq, PromptKind::QuantityCaption);
        assert!(a.matrix.bitwise_eq(&b.matrix));
    }

    #[test]
    fn token_sequence_rejects_out_of_vocab() {
        assert!(TokenSequence::new(&[256u16], 16).is_err());
        assert!(TokenSequence::new(&[300u16], 16).is_err());
        assert!(TokenSequence::new(&[0, 1, 2], 2).is_err());
    }

    #[test]
    fn zero_raster_is_bias_only() {
        let s = store();
        let img = ImageSample::new(Tensor::zeros(&[32, 32, 3])).unwrap();
        let e = encode_image(&s, &dims(), &img);
        // expected: w2ᵀ·tanh(b1) + b2, the stack applied to the zero patch
        // vector
        let b1 = s.get("enc_image.b1");
        let w2 = s.get("enc_image.w2");
        let b2 = s.get("enc_image.b2");
        for j in 0..128 {
            let mut acc = b2.data()[j];
            for i in 0..IMAGE_HIDDEN {
                acc += b1.data()[i].tanh() * w2.data()[i * 128 + j];
            }
            assert!((acc - e.vector.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_images_identical_embeddings() {
        let s = store();
        let img =
            ImageSample::new(Tensor::from_fn(&[32, 32, 3], |i| ((i % 17) as f32) / 17.0)).unwrap();
        let a = encode_image(&s, &dims(), &img);
        let b = encode_image(&s, &dims(), &img.clone());
        assert!(a.vector.bitwise_eq(&b.vector));
    }

    #[test]
    fn blob_count_changes_the_embedding() {
        // generated fixtures with 3 vs 6 blobs must embed apart
        let s = store();
        let three = crate::synthdata::gen_scene(3, 0, 501).unwrap();
        let six = crate::synthdata::gen_scene(6, 0, 502).unwrap();
        let ea = encode_image(
            &s,
            &dims(),
            &ImageSample::new(three.image.raster().clone()).unwrap(),
        );
        let eb = encode_image(
            &s,
            &dims(),
            &ImageSample::new(six.image.raster().clone()).unwrap(),
        );
        let l2: f32 = ea
            .vector
            .data()
            .iter()
            .zip(eb.vector.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!(l2 > 0.0);
    }

    #[test]
    fn perturb_sigma_zero_is_bitwise_identity() {
        let s = store();
        let img = ImageSample::new(Tensor::zeros(&[32, 32, 3])).unwrap();
        let e = encode_image(&s, &dims(), &img);
        let p = perturb_embedding(&e, 0.0, 123);
        assert!(p.vector.bitwise_eq(&e.vector));
    }

    #[test]
    fn perturb_same_seed_identical() {
        let s = store();
        let img = ImageSample::new(Tensor::zeros(&[32, 32, 3])).unwrap();
        let e = encode_image(&s, &dims(), &img);
        let a = perturb_embedding(&e, 0.7, 99);
        let b = perturb_embedding(&e, 0.7, 99);
        assert!(a.vector.bitwise_eq(&b.vector));
        assert!(!a.vector.bitwise_eq(&e.vector));
    }

    #[test]
    fn perturb_noise_variance_near_one() {
        // statistical oracle: sample variance of (out − e)/σ over 10⁴
        // coordinates should be within 10% of 1
        let n = 10_000;
        let e = ImageEmbedding {
            vector: Tensor::<f64>::zeros(&[n]),
        };
        let sigma = 0.5;
        let p = perturb_embedding(&e, sigma, 4242);
        let zs: Vec<f64> = p.vector.data().iter().map(|v| v / sigma).collect();
        let mean: f64 = zs.iter().sum::<f64>() / n as f64;
        let var: f64 = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn embedding_file_round_trip_bitwise() {
        let dir = std::env::temp_dir().join("mqeb_test_rt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.mqeb");
        let t = Tensor::from_fn(&[128], |i| (i as f32 * 0.37).sin());
        write_embedding_file(&path, &LoadedEmbedding::Image(t.clone())).unwrap();
        match load_embedding_file(&path, &dims()).unwrap() {
            LoadedEmbedding::Image(got) => assert!(got.bitwise_eq(&t)),
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn embedding_file_bad_magic_rejected() {
        let dir = std::env::temp_dir().join("mqeb_test_magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.mqeb");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_embedding_file(&path, &dims()).unwrap_err();
        assert!(matches!(err, MqError::Format(_)), "{err}");
    }

    #[test]
    fn embedding_file_shape_must_match_config() {
        let dir = std::env::temp_dir().join("mqeb_test_shape");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("text.mqeb");
        // a (77, 2048) text matrix loads against matching dims but is a
        // shape error against the desk dims
        let t = Tensor::<f32>::zeros(&[77, 2048]);
        write_embedding_file(&path, &LoadedEmbedding::Text(t)).unwrap();
        let paper = EncoderDims {
            l_t: 77,
            d_t: 2048,
            d_i: 1280,
        };
        assert!(load_embedding_file(&path, &paper).is_ok());
        let err = load_embedding_file(&path, &dims()).unwrap_err();
        assert!(matches!(err, MqError::Format(_)), "{err}");
    }

    #[test]
    fn embedding_file_truncation_rejected() {
        let dir = std::env::temp_dir().join("mqeb_test_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.mqeb");
        let t = Tensor::from_fn(&[128], |i| i as f32);
        write_embedding_file(&path, &LoadedEmbedding::Image(t)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_embedding_file(&path, &dims()).unwrap_err();
        assert!(matches!(err, MqError::Format(_)), "{err}");
    }

    #[test]
    fn caption_parsing() {
        let seq = TokenSequence::parse_words("6 blob", 16).unwrap();
        assert_eq!(seq.ids()[0], 6);
        assert_eq!(seq.ids()[1], 21);
        let seq2 = TokenSequence::parse_words("six blob", 16).unwrap();
        assert_eq!(seq.ids(), seq2.ids());
        assert!(TokenSequence::parse_words("purple elephant", 16).is_err());
    }
}
