//! Conditioning machinery: the closed-vocabulary tokenizer and text
//! embedder, timestep-modulated pose layer norm (the PadaLN path),
//! cross-attention injection, the expert pose-encoder baseline, and
//! image-latent masking for multi-level control.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::latentspace::LatentVideo;
use crate::numerics;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// How pose information reaches the transformer. Exactly one mode per
/// model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Channel-concat pose latents into the vision latent stack.
    Uvt,
    /// Per-block cross-attention from hidden tokens to pose tokens.
    CrossAttention,
    /// Per-block pose-adaptive layer norm added to vision tokens.
    PadaLn,
    /// Separately initialized shallow conv encoder, features added to
    /// the noise latent before patchify.
    ExpertAdd,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 4] = [
        InjectionMode::Uvt,
        InjectionMode::CrossAttention,
        InjectionMode::PadaLn,
        InjectionMode::ExpertAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InjectionMode::Uvt => "uvt",
            InjectionMode::CrossAttention => "ca",
            InjectionMode::PadaLn => "padaln",
            InjectionMode::ExpertAdd => "expert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown injection mode {s:?}")))
    }
}

/// Closed token list: ids dense from 0, pad = 0, null sentinel = 1.
/// Serializes as the plain word list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        Vocabulary::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

pub const PAD_ID: usize = 0;
pub const NULL_ID: usize = 1;

impl Vocabulary {
    pub fn world() -> Self {
        Self::from_words(
            crate::synthworld::vocabulary_words()
                .into_iter()
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

/// Lowercase, whitespace split, map to ids, pad or truncate to
/// `max_len`. The vocabulary is closed, so unknown words are errors.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be >= 1".into()));
    }
    let mut ids = Vec::with_capacity(max_len);
    for word in text.split_whitespace() {
        if ids.len() == max_len {
            break;
        }
        let lower = word.to_lowercase();
        let id = vocab
            .id(&lower)
            .ok_or_else(|| Error::Invalid(format!("unknown word {lower:?}")))?;
        ids.push(id);
    }
    ids.resize(max_len, PAD_ID);
    Ok(ids)
}

/// A prompt made of `max_len` copies of the null sentinel, the
/// "no text" conditioning input.
pub fn null_ids(max_len: usize) -> Vec<usize> {
    vec![NULL_ID; max_len]
}

fn linear_rows(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut y = x.matmul(w)?;
    let cols = y.shape()[1];
    for r in 0..y.shape()[0] {
        for c in 0..cols {
            y.data_mut()[r * cols + c] += b.data()[c];
        }
    }
    Ok(y)
}

/// Lookup-table embedding plus learned per-slot positional embedding.
/// Uses `txt.embed` (V,d) and `txt.pos` (L_t,d).
pub fn embed_text(ids: &[usize], params: &ParamStore<f32>) -> Result<Tensor<f32>> {
    let table = params.get("txt.embed")?;
    let pos = params.get("txt.pos")?;
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if ids.len() > pos.shape()[0] {
        return Err(Error::Invalid(format!(
            "sequence length {} exceeds positional table {}",
            ids.len(),
            pos.shape()[0]
        )));
    }
    let mut out = Tensor::zeros(vec![ids.len(), d]);
    for (slot, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::Invalid(format!("token id {id} out of range {v}")));
        }
        for k in 0..d {
            out.data_mut()[slot * d + k] = table.data()[id * d + k] + pos.data()[slot * d + k];
        }
    }
    Ok(out)
}

/// Per-block scale/shift/gate derived from the timestep embedding.
#[derive(Debug, Clone)]
pub struct ModulationParams {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub delta: Tensor<f32>,
}

/// Pose-modulation MLP for one block: SiLU on the sinusoidal timestep
/// embedding, two linear layers, output split into (gamma, beta,
/// delta) of width d. Uses `padaln.{i}.{w1,b1,w2,b2}`; the final layer
/// is zero-initialized so all three start at exactly zero.
pub fn time_mlp(
    t_embed: &Tensor<f32>,
    params: &ParamStore<f32>,
    block_index: usize,
) -> Result<ModulationParams> {
    let p = |n: &str| params.get(&format!("padaln.{block_index}.{n}"));
    let w1 = p("w1")?;
    if t_embed.shape() != [w1.shape()[0]] && t_embed.shape() != [1, w1.shape()[0]] {
        return Err(Error::Shape(format!(
            "time embedding {:?} does not match MLP input width {}",
            t_embed.shape(),
            w1.shape()[0]
        )));
    }
    let x = numerics::silu(t_embed)
        .reshaped(vec![1, w1.shape()[0]])?;
    let h = numerics::silu(&linear_rows(&x, w1, p("b1")?)?);
    let out = linear_rows(&h, p("w2")?, p("b2")?)?;
    let triple = out.shape()[1];
    if triple % 3 != 0 {
        return Err(Error::Shape(format!("modulation width {triple} not divisible by 3")));
    }
    let d = triple / 3;
    let take = |k: usize| {
        Tensor::new(vec![d], out.data()[k * d..(k + 1) * d].to_vec()).unwrap()
    };
    Ok(ModulationParams {
        gamma: take(0),
        beta: take(1),
        delta: take(2),
    })
}

/// Pose-adaptive layer norm:
///   y_o1 = LN(y_g) * (1 + beta) + gamma     (broadcast over tokens)
///   y_o2 = y_o1 + delta (.) y_o1
/// The caller adds y_o1 to the vision hidden tokens and threads y_o2
/// as the next block's pose stream.
pub fn padaln_transform(
    y_g: &Tensor<f32>,
    m: &ModulationParams,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = y_g.shape();
    if s.len() != 2 || s[1] != m.beta.len() {
        return Err(Error::Shape(format!(
            "pose tokens {s:?} vs modulation width {}",
            m.beta.len()
        )));
    }
    let (l, d) = (s[0], s[1]);
    let normed = numerics::layer_norm(y_g, 1e-5f32)?;
    let mut y_o1 = Tensor::zeros(vec![l, d]);
    let mut y_o2 = Tensor::zeros(vec![l, d]);
    for t in 0..l {
        for k in 0..d {
            let o1 = normed.data()[t * d + k] * (1.0 + m.beta.data()[k]) + m.gamma.data()[k];
            y_o1.data_mut()[t * d + k] = o1;
            y_o2.data_mut()[t * d + k] = o1 + m.delta.data()[k] * o1;
        }
    }
    Ok((y_o1, y_o2))
}

fn split_rows_heads(x: &Tensor<f32>, heads: usize) -> Vec<Tensor<f32>> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            Tensor::from_fn(vec![l, dh], |i| {
                let (t, k) = (i / dh, i % dh);
                x.data()[t * d + h * dh + k]
            })
        })
        .collect()
}

/// Residual multi-head cross attention from hidden tokens to pose
/// tokens: hidden + W_O * attn(W_Q hidden, W_K pose, W_V pose). Uses
/// `ca.{i}.{wq,wk,wv,wo}`; W_O starts at zero so this is the identity
/// at initialization.
pub fn cross_attn_inject(
    hidden: &Tensor<f32>,
    pose: &Tensor<f32>,
    params: &ParamStore<f32>,
    block_index: usize,
    heads: usize,
) -> Result<Tensor<f32>> {
    let s = hidden.shape();
    if s != pose.shape() {
        return Err(Error::Shape(format!(
            "hidden {s:?} vs pose {:?}",
            pose.shape()
        )));
    }
    let (l, d) = (s[0], s[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Invalid(format!("{heads} heads do not divide width {d}")));
    }
    let p = |n: &str| params.get(&format!("ca.{block_index}.{n}"));
    let q = hidden.matmul(p("wq")?)?;
    let k = pose.matmul(p("wk")?)?;
    let v = pose.matmul(p("wv")?)?;
    let (qh, kh, vh) = (
        split_rows_heads(&q, heads),
        split_rows_heads(&k, heads),
        split_rows_heads(&v, heads),
    );
    let dh = d / heads;
    let mut merged = Tensor::zeros(vec![l, d]);
    for h in 0..heads {
        let o = numerics::attention(&qh[h], &kh[h], &vh[h])?;
        for t in 0..l {
            for kk in 0..dh {
                merged.data_mut()[t * d + h * dh + kk] = o.data()[t * dh + kk];
            }
        }
    }
    let out = merged.matmul(p("wo")?)?;
    hidden.zip_map(&out, |a, b| a + b)
}

/// Insert per-block pose-modulation MLP parameters (`padaln.` prefix).
pub fn init_padaln_params(
    params: &mut ParamStore<f32>,
    blocks: usize,
    d_t: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    let normal = Normal::new(0.0f64, (2.0 / d_t as f64).sqrt()).unwrap();
    for i in 0..blocks {
        params.insert(
            &format!("padaln.{i}.w1"),
            Tensor::from_fn(vec![d_t, d_t], |_| normal.sample(rng) as f32),
        );
        params.insert(&format!("padaln.{i}.b1"), Tensor::zeros(vec![d_t]));
        params.insert(&format!("padaln.{i}.w2"), Tensor::zeros(vec![d_t, 3 * d]));
        params.insert(&format!("padaln.{i}.b2"), Tensor::zeros(vec![3 * d]));
    }
}

/// Insert per-block cross-attention parameters (`ca.` prefix); W_O is
/// zero so injection starts as the identity.
pub fn init_ca_params(params: &mut ParamStore<f32>, blocks: usize, d: usize, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0f64, (1.0 / d as f64).sqrt()).unwrap();
    for i in 0..blocks {
        for n in ["wq", "wk", "wv"] {
            params.insert(
                &format!("ca.{i}.{n}"),
                Tensor::from_fn(vec![d, d], |_| normal.sample(rng) as f32),
            );
        }
        params.insert(&format!("ca.{i}.wo"), Tensor::zeros(vec![d, d]));
    }
}

/// Expert pose encoder: 3 conv layers (3 -> 16 -> 32 -> c_lat,
/// strides 2,2,1), all weights Gaussian(0, 0.02^2), biases zero.
#[derive(Clone)]
pub struct ExpertPoseEncoderParams {
    pub params: ParamStore<f32>,
    pub c_lat: usize,
}

/// Insert `expert.{i}.{w,b}` conv parameters into a store.
pub fn insert_expert_params(params: &mut ParamStore<f32>, c_lat: usize, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    for (i, (out_c, in_c)) in [(16usize, 3usize), (32, 16), (c_lat, 32)].iter().enumerate() {
        params.insert(
            &format!("expert.{i}.w"),
            Tensor::from_fn(vec![*out_c, *in_c, 3, 3], |_| normal.sample(rng) as f32),
        );
        params.insert(&format!("expert.{i}.b"), Tensor::zeros(vec![*out_c]));
    }
}

pub fn init_expert_encoder(c_lat: usize, seed: u64) -> ExpertPoseEncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4be);
    let mut params = ParamStore::new();
    insert_expert_params(&mut params, c_lat, &mut rng);
    ExpertPoseEncoderParams { params, c_lat }
}

/// Frame-wise shallow conv features at latent resolution; the
/// ExpertAdd baseline adds these to the noise latent before patchify.
pub fn expert_pose_encode(
    pose_frames: &Tensor<f32>,
    params: &ExpertPoseEncoderParams,
) -> Result<LatentVideo> {
    let s = pose_frames.shape();
    if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::Shape(format!(
            "expert encoder wants (F,3,H,W) with H,W divisible by 4, got {s:?}"
        )));
    }
    let mut g = Graph::new();
    let b = params.params.bind_frozen(&mut g);
    let x = g.input(pose_frames.clone());
    let h = g.conv2d(x, b.id("expert.0.w"), b.id("expert.0.b"), 2, 1);
    let h = g.silu(h);
    let h = g.conv2d(h, b.id("expert.1.w"), b.id("expert.1.b"), 2, 1);
    let h = g.silu(h);
    let z = g.conv2d(h, b.id("expert.2.w"), b.id("expert.2.b"), 1, 1);
    Ok(LatentVideo {
        data: g.value(z).clone(),
        kappa_applied: true,
    })
}

/// Max-pool a pixel mask down to the latent grid and zero the masked
/// cells of the image latent: out = latent (.) (1 - pooled_mask),
/// broadcast over channels.
pub fn apply_image_mask(image_latent: &LatentVideo, mask: &Tensor<f32>) -> Result<LatentVideo> {
    let s = image_latent.data.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("image latent must be rank 4, got {s:?}")));
    }
    let (frames, c, hl, wl) = (s[0], s[1], s[2], s[3]);
    let ms = mask.shape();
    if ms.len() != 2 || ms[0] != hl * 4 || ms[1] != wl * 4 {
        return Err(Error::Shape(format!(
            "mask {ms:?} does not match pixel grid {}x{}",
            hl * 4,
            wl * 4
        )));
    }
    let mut pooled = Tensor::zeros(vec![hl, wl]);
    for i in 0..hl {
        for j in 0..wl {
            let mut m = 0.0f32;
            for di in 0..4 {
                for dj in 0..4 {
                    m = m.max(mask.data()[(4 * i + di) * ms[1] + 4 * j + dj]);
                }
            }
            pooled.data_mut()[i * wl + j] = m;
        }
    }
    let mut out = image_latent.data.clone();
    for f in 0..frames {
        for ch in 0..c {
            for i in 0..hl {
                for j in 0..wl {
                    out.data_mut()[((f * c + ch) * hl + i) * wl + j] *=
                        1.0 - pooled.data()[i * wl + j];
                }
            }
        }
    }
    Ok(LatentVideo {
        data: out,
        kappa_applied: image_latent.kappa_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld;
    use rand::Rng;

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::world();
        assert_eq!(v.word(PAD_ID), Some("<pad>"));
        assert_eq!(v.word(NULL_ID), Some("<null>"));
        assert!(v.len() >= 20 && v.len() <= 40, "vocab size {}", v.len());
        for (i, w) in (0..v.len()).map(|i| (i, v.word(i).unwrap().to_string())) {
            assert_eq!(v.id(&w), Some(i));
        }
    }

    #[test]
    fn tokenize_rules() {
        let v = Vocabulary::world();
        assert_eq!(tokenize("", &v, 4).unwrap(), vec![PAD_ID; 4]);
        let ids = tokenize("a figure", &v, 4).unwrap();
        assert_eq!(
            ids,
            vec![v.id("a").unwrap(), v.id("figure").unwrap(), PAD_ID, PAD_ID]
        );
        assert!(tokenize("a zebra", &v, 4).is_err());
        assert!(tokenize("a", &v, 0).is_err());
        // every world prompt tokenizes cleanly
        for shape in synthworld::HeadShape::ALL {
            for body in synthworld::BodyColor::ALL {
                for bg in synthworld::BackgroundColor::ALL {
                    let prompt = synthworld::compose_prompt(&synthworld::AppearanceSpec {
                        head_shape: shape,
                        body_color: body,
                        background_color: bg,
                        limb_thickness: 2,
                    });
                    let ids = tokenize(&prompt, &v, 16).unwrap();
                    assert_eq!(ids.len(), 16);
                }
            }
        }
    }

    fn text_params(vocab: usize, l_t: usize, d: usize, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert(
            "txt.embed",
            Tensor::from_fn(vec![vocab, d], |_| rng.gen_range(-1.0..1.0)),
        );
        p.insert(
            "txt.pos",
            Tensor::from_fn(vec![l_t, d], |_| rng.gen_range(-1.0..1.0)),
        );
        p
    }

    #[test]
    fn embed_text_rows() {
        let p = text_params(10, 6, 8, 3);
        let a = embed_text(&[2, 3, 4, 0, 0, 0], &p).unwrap();
        assert_eq!(a.shape(), &[6, 8]);
        let b = embed_text(&[2, 3, 4, 0, 0, 0], &p).unwrap();
        assert_eq!(a, b);
        // swapping two distinct tokens changes exactly those rows'
        // lookup components
        let c = embed_text(&[4, 3, 2, 0, 0, 0], &p).unwrap();
        for row in 0..6 {
            let differs = a.data()[row * 8..(row + 1) * 8] != c.data()[row * 8..(row + 1) * 8];
            assert_eq!(differs, row == 0 || row == 2, "row {row}");
        }
        // the difference in a changed row is exactly the lookup delta
        let table = p.get("txt.embed").unwrap();
        for k in 0..8 {
            let want = table.data()[4 * 8 + k] - table.data()[2 * 8 + k];
            let got = c.data()[k] - a.data()[k];
            assert!((want - got).abs() < 1e-6);
        }
        assert!(embed_text(&[11, 0, 0, 0, 0, 0], &p).is_err());
        assert!(embed_text(&[0; 7], &p).is_err());
    }

    #[test]
    fn time_mlp_zero_init_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        init_padaln_params(&mut p, 2, 8, 12, &mut rng);
        for t in [0usize, 7, 123] {
            let te = numerics::time_embedding::<f32>(t, 8).unwrap();
            let m = time_mlp(&te, &p, 1).unwrap();
            assert_eq!(m.gamma.shape(), &[12]);
            assert_eq!(m.beta.shape(), &[12]);
            assert_eq!(m.delta.shape(), &[12]);
            assert!(m.gamma.data().iter().all(|&v| v == 0.0));
            assert!(m.beta.data().iter().all(|&v| v == 0.0));
            assert!(m.delta.data().iter().all(|&v| v == 0.0));
        }
        // width mismatch rejected
        let te = numerics::time_embedding::<f32>(3, 6).unwrap();
        assert!(time_mlp(&te, &p, 0).is_err());
    }

    #[test]
    fn padaln_worked_example() {
        let y_g = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = ModulationParams {
            gamma: Tensor::full(vec![3], 1.0),
            beta: Tensor::full(vec![3], 0.5),
            delta: Tensor::zeros(vec![3]),
        };
        let (y_o1, y_o2) = padaln_transform(&y_g, &m).unwrap();
        let want = [-0.837113f32, 1.0, 2.837113];
        for (got, want) in y_o1.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        assert_eq!(y_o1, y_o2); // delta = 0
    }

    #[test]
    fn padaln_degenerate_and_gate_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y_g = Tensor::from_fn(vec![5, 6], |_| rng.gen_range(-2.0..2.0));
        let zero = ModulationParams {
            gamma: Tensor::zeros(vec![6]),
            beta: Tensor::zeros(vec![6]),
            delta: Tensor::zeros(vec![6]),
        };
        let (y_o1, _) = padaln_transform(&y_g, &zero).unwrap();
        let ln = numerics::layer_norm(&y_g, 1e-5f32).unwrap();
        assert_eq!(y_o1, ln);
        // y_o2 = (1 + delta) (.) y_o1 for random delta
        let m = ModulationParams {
            gamma: Tensor::from_fn(vec![6], |_| rng.gen_range(-1.0..1.0)),
            beta: Tensor::from_fn(vec![6], |_| rng.gen_range(-1.0..1.0)),
            delta: Tensor::from_fn(vec![6], |_| rng.gen_range(-1.0..1.0)),
        };
        let (o1, o2) = padaln_transform(&y_g, &m).unwrap();
        for t in 0..5 {
            for k in 0..6 {
                let want = (1.0 + m.delta.data()[k]) * o1.data()[t * 6 + k];
                assert!((o2.data()[t * 6 + k] - want).abs() < 1e-6);
            }
        }
        // batch equals per-token application
        for t in 0..5 {
            let row = Tensor::new(vec![1, 6], y_g.data()[t * 6..(t + 1) * 6].to_vec()).unwrap();
            let (r1, r2) = padaln_transform(&row, &m).unwrap();
            assert_eq!(r1.data(), &o1.data()[t * 6..(t + 1) * 6]);
            assert_eq!(r2.data(), &o2.data()[t * 6..(t + 1) * 6]);
        }
    }

    #[test]
    fn cross_attention_identity_and_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 8;
        let mut p = ParamStore::new();
        init_ca_params(&mut p, 1, d, &mut rng);
        let hidden = Tensor::from_fn(vec![4, d], |_| rng.gen_range(-1.0..1.0));
        let pose = Tensor::from_fn(vec![4, d], |_| rng.gen_range(-1.0..1.0));
        // zero W_O -> exact identity
        let out = cross_attn_inject(&hidden, &pose, &p, 0, 2).unwrap();
        assert_eq!(out, hidden);
        // L = 1: softmax over one key is 1, so out = h + (pose Wv) Wo
        let mut p2 = ParamStore::new();
        init_ca_params(&mut p2, 1, d, &mut rng);
        let wo = Tensor::from_fn(vec![d, d], |_| rng.gen_range(-0.5..0.5));
        *p2.get_mut("ca.0.wo").unwrap() = wo.clone();
        let h1 = Tensor::from_fn(vec![1, d], |_| rng.gen_range(-1.0..1.0));
        let y1 = Tensor::from_fn(vec![1, d], |_| rng.gen_range(-1.0..1.0));
        let got = cross_attn_inject(&h1, &y1, &p2, 0, 2).unwrap();
        let want = h1
            .zip_map(
                &y1.matmul(p2.get("ca.0.wv").unwrap()).unwrap().matmul(&wo).unwrap(),
                |a, b| a + b,
            )
            .unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-5);
        }
        assert!(cross_attn_inject(&hidden, &pose, &p, 0, 3).is_err());
    }

    #[test]
    fn expert_encoder_shapes_and_init() {
        let e = init_expert_encoder(4, 7);
        let all: Vec<f32> = e
            .params
            .iter()
            .filter(|(n, _)| n.ends_with(".w"))
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        let std = Tensor::new(vec![all.len()], all).unwrap().std();
        assert!((0.015..=0.025).contains(&std), "init std {std}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = Tensor::from_fn(vec![5, 3, 32, 32], |_| rng.gen_range(0.0..1.0));
        let z = expert_pose_encode(&pose, &e).unwrap();
        assert_eq!(z.data.shape(), &[5, 4, 8, 8]);
        // zero frames: every frame slice equals the single-frame bias response
        let zero = Tensor::zeros(vec![3, 3, 32, 32]);
        let zz = expert_pose_encode(&zero, &e).unwrap();
        let one = expert_pose_encode(&Tensor::zeros(vec![1, 3, 32, 32]), &e).unwrap();
        let per = 4 * 8 * 8;
        for f in 0..3 {
            assert_eq!(&zz.data.data()[f * per..(f + 1) * per], one.data.data());
        }
        assert!(expert_pose_encode(&Tensor::zeros(vec![1, 3, 30, 32]), &e).is_err());
    }

    #[test]
    fn image_mask_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let latent = LatentVideo {
            data: Tensor::from_fn(vec![1, 4, 8, 8], |_| rng.gen_range(0.5..1.0)),
            kappa_applied: true,
        };
        let zeros = Tensor::zeros(vec![32, 32]);
        assert_eq!(apply_image_mask(&latent, &zeros).unwrap().data, latent.data);
        let ones = Tensor::full(vec![32, 32], 1.0);
        assert!(apply_image_mask(&latent, &ones)
            .unwrap()
            .data
            .data()
            .iter()
            .all(|&v| v == 0.0));
        // top half masked -> top-half latent zero, bottom untouched
        let top = Tensor::from_fn(vec![32, 32], |i| if i / 32 < 16 { 1.0 } else { 0.0 });
        let m = apply_image_mask(&latent, &top).unwrap();
        for ch in 0..4 {
            for i in 0..8 {
                for j in 0..8 {
                    let v = m.data.data()[(ch * 8 + i) * 8 + j];
                    if i < 4 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, latent.data.data()[(ch * 8 + i) * 8 + j]);
                    }
                }
            }
        }
        // idempotent
        let twice = apply_image_mask(&m, &top).unwrap();
        assert_eq!(twice.data, m.data);
        assert!(apply_image_mask(&latent, &Tensor::zeros(vec![16, 16])).is_err());
    }
}
