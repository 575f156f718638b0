//! Encoder-decoder recognizer.
//!
//! The encoder is a ViT-style stack over non-overlapping image patches. The
//! decoder has two streams: position queries that produce logits, and a
//! content stream holding token embeddings. Which content a query may see is
//! decided entirely by the attention masks, so one set of weights serves
//! every factorization order as well as autoregressive, parallel and cloze
//! decoding.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::imaging::GrayImage;
use crate::plm::{self, masks_from_permutation, Permutation};
use crate::shaping::{EOS, NUM_SPECIALS, PAD};
use crate::tensor::{AttnGroup, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("target length {len} exceeds {max} decoder positions")]
    LengthExceeded { len: usize, max: usize },
    #[error("image is {got_w}x{got_h}, model expects {want_w}x{want_h}")]
    ImageShape {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("unexpected parameter {0:?}")]
    UnexpectedParam(String),
}

/// Architecture hyperparameters. Defaults follow the published recipe:
/// width 256, 4 heads, 4 encoder and 2 decoder layers, 1024-wide MLP,
/// dropout 0.3, 3 permutations per example.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub permutations: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub max_label_len: usize,
    pub vocab_size: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            heads: 4,
            enc_layers: 4,
            dec_layers: 2,
            ff_dim: 1024,
            dropout: 0.3,
            permutations: 3,
            image_height: 32,
            image_width: 128,
            patch_height: 4,
            patch_width: 8,
            max_label_len: 25,
            vocab_size: NUM_SPECIALS,
        }
    }
}

impl RecognizerConfig {
    pub const KEYS: [&'static str; 13] = [
        "embed_dim",
        "heads",
        "enc_layers",
        "dec_layers",
        "ff_dim",
        "dropout",
        "permutations",
        "image_height",
        "image_width",
        "patch_height",
        "patch_width",
        "max_label_len",
        "vocab_size",
    ];

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_height == 0
            || self.patch_width == 0
            || !self.image_height.is_multiple_of(self.patch_height)
            || !self.image_width.is_multiple_of(self.patch_width)
            || self.image_height == 0
            || self.image_width == 0
        {
            return bad(format!(
                "image {}x{} is not tiled by {}x{} patches",
                self.image_height, self.image_width, self.patch_height, self.patch_width
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.permutations == 0 || self.ff_dim == 0 || self.max_label_len == 0 {
            return bad("permutations, ff_dim and max_label_len must be positive".into());
        }
        if self.vocab_size <= NUM_SPECIALS {
            return bad(format!("vocab_size {} has no glyph classes", self.vocab_size));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_height) * (self.image_width / self.patch_width)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_height * self.patch_width
    }

    /// Decoder slots: the label plus its EOS.
    pub fn max_positions(&self) -> usize {
        self.max_label_len + 1
    }

    /// Number of scalar parameters implied by this config.
    ///
    /// With `d` width, `f` MLP width, `V` classes, `P` patch pixels, `N`
    /// patches and `L = max_label_len + 1`:
    ///
    /// ```text
    /// encoder  = P*d + d + N*d + enc_layers * (4*(d*d + d) + 4*d + 2*d*f + f + d) + 2*d
    /// decoder  = V*d + L*d + dec_layers * (8*(d*d + d) + 8*d + 2*d*f + f + d) + 2*d
    /// head     = d*V + V
    /// ```
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let f = self.ff_dim;
        let v = self.vocab_size;
        let mlp = 2 * d * f + f + d;
        let attn = 4 * (d * d + d);
        let encoder = self.patch_dim() * d
            + d
            + self.num_patches() * d
            + self.enc_layers * (attn + 4 * d + mlp)
            + 2 * d;
        let decoder =
            v * d + self.max_positions() * d + self.dec_layers * (2 * attn + 8 * d + mlp) + 2 * d;
        encoder + decoder + d * v + v
    }

    /// `key = value` pairs in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("permutations", self.permutations.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("patch_height", self.patch_height.to_string()),
            ("patch_width", self.patch_width.to_string()),
            ("max_label_len", self.max_label_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ]
    }

    /// Set one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let bad = || ModelError::InvalidConfig(format!("bad value {value:?} for {key}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "embed_dim" => self.embed_dim = int()?,
            "heads" => self.heads = int()?,
            "enc_layers" => self.enc_layers = int()?,
            "dec_layers" => self.dec_layers = int()?,
            "ff_dim" => self.ff_dim = int()?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad())?,
            "permutations" => self.permutations = int()?,
            "image_height" => self.image_height = int()?,
            "image_width" => self.image_width = int()?,
            "patch_height" => self.patch_height = int()?,
            "patch_width" => self.patch_width = int()?,
            "max_label_len" => self.max_label_len = int()?,
            "vocab_size" => self.vocab_size = int()?,
            _ => return Err(ModelError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Dropout with its own random stream. `p == 0` disables it.
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn disabled() -> Self {
        Self::new(0.0, 0)
    }

    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        g.dropout(x, self.p, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    up: LinearIds,
    down: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayerIds {
    norm_attn: NormIds,
    attn: AttnIds,
    norm_mlp: NormIds,
    mlp: MlpIds,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayerIds {
    norm_query: NormIds,
    norm_content: NormIds,
    self_attn: AttnIds,
    norm_cross: NormIds,
    cross_attn: AttnIds,
    norm_mlp: NormIds,
    mlp: MlpIds,
}

#[derive(Debug, Clone)]
struct Layout {
    patch: LinearIds,
    enc_pos: ParamId,
    encoder: Vec<EncoderLayerIds>,
    enc_norm: NormIds,
    tok_emb: ParamId,
    pos_queries: ParamId,
    decoder: Vec<DecoderLayerIds>,
    dec_norm: NormIds,
    head: LinearIds,
}

enum Init {
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

/// Declares parameters in a fixed order, either creating them or looking
/// them up in an existing store.
struct Builder<'a> {
    store: &'a mut ParamStore,
    create: Option<ChaCha8Rng>,
    seen: usize,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, dims: &[usize], init: Init) -> Result<ParamId, ModelError> {
        self.seen += 1;
        match &mut self.create {
            Some(rng) => {
                let t = match init {
                    Init::Uniform(a) => Tensor::from_fn(dims, |_| rng.random_range(-a..=a)),
                    Init::Normal(s) => {
                        let n = Normal::new(0.0, s).expect("positive std");
                        Tensor::from_fn(dims, |_| n.sample(rng))
                    }
                    Init::Zeros => Tensor::zeros(dims),
                    Init::Ones => Tensor::from_fn(dims, |_| 1.0),
                };
                Ok(self.store.insert(name, t)?)
            }
            None => {
                let id = self
                    .store
                    .id(&name)
                    .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
                let got = self.store.get(id).dims();
                if got != dims {
                    return Err(ModelError::ParamShape {
                        name,
                        got: got.to_vec(),
                        want: dims.to_vec(),
                    });
                }
                Ok(id)
            }
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds, ModelError> {
        let a = 1.0 / (fan_in as f64).sqrt();
        Ok(LinearIds {
            w: self.tensor(format!("{name}.weight"), &[fan_in, fan_out], Init::Uniform(a))?,
            b: self.tensor(format!("{name}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<NormIds, ModelError> {
        Ok(NormIds {
            gamma: self.tensor(format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: self.tensor(format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<AttnIds, ModelError> {
        Ok(AttnIds {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.out"), d, d)?,
        })
    }

    fn mlp(&mut self, name: &str, d: usize, f: usize) -> Result<MlpIds, ModelError> {
        Ok(MlpIds {
            up: self.linear(&format!("{name}.up"), d, f)?,
            down: self.linear(&format!("{name}.down"), f, d)?,
        })
    }

    fn layout(&mut self, c: &RecognizerConfig) -> Result<Layout, ModelError> {
        let d = c.embed_dim;
        let patch = self.linear("enc.patch", c.patch_dim(), d)?;
        let enc_pos = self.tensor("enc.pos".into(), &[c.num_patches(), d], Init::Normal(0.02))?;
        let encoder = (0..c.enc_layers)
            .map(|i| {
                let p = format!("enc.layers.{i}");
                Ok(EncoderLayerIds {
                    norm_attn: self.norm(&format!("{p}.norm_attn"), d)?,
                    attn: self.attn(&format!("{p}.attn"), d)?,
                    norm_mlp: self.norm(&format!("{p}.norm_mlp"), d)?,
                    mlp: self.mlp(&format!("{p}.mlp"), d, c.ff_dim)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let enc_norm = self.norm("enc.norm", d)?;
        let tok_emb = self.tensor("dec.tok_emb".into(), &[c.vocab_size, d], Init::Normal(0.02))?;
        let pos_queries = self.tensor(
            "dec.pos_queries".into(),
            &[c.max_positions(), d],
            Init::Normal(0.02),
        )?;
        let decoder = (0..c.dec_layers)
            .map(|i| {
                let p = format!("dec.layers.{i}");
                Ok(DecoderLayerIds {
                    norm_query: self.norm(&format!("{p}.norm_query"), d)?,
                    norm_content: self.norm(&format!("{p}.norm_content"), d)?,
                    self_attn: self.attn(&format!("{p}.self_attn"), d)?,
                    norm_cross: self.norm(&format!("{p}.norm_cross"), d)?,
                    cross_attn: self.attn(&format!("{p}.cross_attn"), d)?,
                    norm_mlp: self.norm(&format!("{p}.norm_mlp"), d)?,
                    mlp: self.mlp(&format!("{p}.mlp"), d, c.ff_dim)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let dec_norm = self.norm("dec.norm", d)?;
        let head = self.linear("head", d, c.vocab_size)?;
        Ok(Layout {
            patch,
            enc_pos,
            encoder,
            enc_norm,
            tok_emb,
            pos_queries,
            decoder,
            dec_norm,
            head,
        })
    }
}

/// Encoder output for a batch of images, with cross-attention keys and
/// values precomputed per decoder layer.
pub struct Memory {
    pub tokens: Var,
    pub tokens_per_image: usize,
    pub images: usize,
    cross_kv: Vec<(Var, Var)>,
}

/// One decoder block of rows: `len` positions of sample `image`, with the
/// masks that say which content each query and content row may see.
#[derive(Debug, Clone)]
pub struct DecodeBlock {
    pub image: usize,
    pub len: usize,
    pub content_tokens: Vec<usize>,
    pub query_mask: Arc<Vec<f64>>,
    pub content_mask: Arc<Vec<f64>>,
}

impl DecodeBlock {
    /// Training block: teacher-forced content under permutation `perm`.
    pub fn for_permutation(image: usize, targets: &[usize], perm: &Permutation) -> Self {
        let masks = masks_from_permutation(perm);
        Self {
            image,
            len: targets.len(),
            content_tokens: targets.to_vec(),
            query_mask: masks.additive_query(),
            content_mask: masks.additive_content(),
        }
    }

    /// Block with the same boolean mask for both streams.
    pub fn with_mask(image: usize, content_tokens: Vec<usize>, allowed: &[bool]) -> Self {
        let mask = plm::additive(allowed);
        Self {
            image,
            len: content_tokens.len(),
            content_tokens,
            query_mask: mask.clone(),
            content_mask: mask,
        }
    }
}

/// Inference strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Greedy left-to-right, feeding predictions back.
    Autoregressive,
    /// One parallel pass with no context, then `refine` cloze passes.
    NonAutoregressive { refine: usize },
}

pub struct Recognizer {
    config: RecognizerConfig,
    params: ParamStore,
    layout: Layout,
}

impl Recognizer {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Builder {
            store: &mut params,
            create: Some(ChaCha8Rng::seed_from_u64(seed)),
            seen: 0,
        }
        .layout(&config)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Wrap existing weights, checking every name and shape.
    pub fn from_params(config: RecognizerConfig, mut params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let mut builder = Builder {
            store: &mut params,
            create: None,
            seen: 0,
        };
        let layout = builder.layout(&config)?;
        if builder.seen != params.len() {
            let expected = Recognizer::new(config.clone(), 0)?;
            let extra = params
                .iter()
                .find(|(_, name, _)| expected.params.id(name).is_none())
                .map(|(_, name, _)| name.to_string())
                .unwrap_or_default();
            return Err(ModelError::UnexpectedParam(extra));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, ids: LinearIds) -> Result<Var, ModelError> {
        let (w, b) = (g.param(ids.w), g.param(ids.b));
        Ok(g.linear(x, w, b)?)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, ids: NormIds) -> Result<Var, ModelError> {
        let (gamma, beta) = (g.param(ids.gamma), g.param(ids.beta));
        Ok(g.layernorm(x, gamma, beta)?)
    }

    fn mlp(&self, g: &mut Graph<'_>, x: Var, ids: MlpIds, drop: &mut Dropout) -> Result<Var, ModelError> {
        let h = self.linear(g, x, ids.up)?;
        let h = g.gelu(h);
        let h = drop.apply(g, h);
        self.linear(g, h, ids.down)
    }

    /// Flatten non-overlapping patches of each image into rows.
    pub fn patchify(&self, images: &[&GrayImage]) -> Result<Tensor, ModelError> {
        let c = &self.config;
        let (ph, pw) = (c.patch_height, c.patch_width);
        let (gh, gw) = (c.image_height / ph, c.image_width / pw);
        let mut data = Vec::with_capacity(images.len() * c.num_patches() * c.patch_dim());
        for img in images {
            if img.width() != c.image_width || img.height() != c.image_height {
                return Err(ModelError::ImageShape {
                    got_w: img.width(),
                    got_h: img.height(),
                    want_w: c.image_width,
                    want_h: c.image_height,
                });
            }
            for py in 0..gh {
                for px in 0..gw {
                    for y in 0..ph {
                        for x in 0..pw {
                            let v = img.get(px * pw + x, py * ph + y) as f64;
                            data.push(v / 127.5 - 1.0);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(
            vec![images.len() * c.num_patches(), c.patch_dim()],
            data,
        )?)
    }

    /// Encode a batch of images.
    pub fn encode_images(
        &self,
        g: &mut Graph<'_>,
        images: &[&GrayImage],
        drop: &mut Dropout,
    ) -> Result<Memory, ModelError> {
        let patches = self.patchify(images)?;
        let n = self.config.num_patches();
        let positions: Vec<usize> = (0..images.len()).flat_map(|_| 0..n).collect();
        self.encode_patches(g, patches, &positions, images.len(), drop)
    }

    /// Encode pre-flattened patches `[images * N, patch_dim]`, adding the
    /// positional embedding `positions[row]` to each row.
    pub fn encode_patches(
        &self,
        g: &mut Graph<'_>,
        patches: Tensor,
        positions: &[usize],
        images: usize,
        drop: &mut Dropout,
    ) -> Result<Memory, ModelError> {
        let n = self.config.num_patches();
        if patches.rows() != images * n || positions.len() != images * n {
            return Err(TensorError::ShapeMismatch {
                op: "encode_patches",
                detail: format!("{} rows for {images} images of {n} patches", patches.rows()),
            }
            .into());
        }
        let l = &self.layout;
        let x = g.constant(patches);
        let x = self.linear(g, x, l.patch)?;
        let pos_table = g.param(l.enc_pos);
        let pos = g.embedding(pos_table, positions)?;
        let x = g.add(x, pos)?;
        let mut x = drop.apply(g, x);

        let groups: Vec<AttnGroup> = (0..images)
            .map(|i| AttnGroup {
                q_start: i * n,
                q_len: n,
                kv_start: i * n,
                kv_len: n,
                mask: None,
            })
            .collect();
        for layer in &l.encoder {
            let h = self.norm(g, x, layer.norm_attn)?;
            let q = self.linear(g, h, layer.attn.q)?;
            let k = self.linear(g, h, layer.attn.k)?;
            let v = self.linear(g, h, layer.attn.v)?;
            let a = g.attention(q, k, v, self.config.heads, groups.clone())?;
            let a = self.linear(g, a, layer.attn.o)?;
            let a = drop.apply(g, a);
            x = g.add(x, a)?;
            let h = self.norm(g, x, layer.norm_mlp)?;
            let f = self.mlp(g, h, layer.mlp, drop)?;
            let f = drop.apply(g, f);
            x = g.add(x, f)?;
        }
        let tokens = self.norm(g, x, l.enc_norm)?;

        let mut cross_kv = Vec::with_capacity(l.decoder.len());
        for layer in &l.decoder {
            let k = self.linear(g, tokens, layer.cross_attn.k)?;
            let v = self.linear(g, tokens, layer.cross_attn.v)?;
            cross_kv.push((k, v));
        }
        Ok(Memory {
            tokens,
            tokens_per_image: n,
            images,
            cross_kv,
        })
    }

    /// Run the two-stream decoder over `blocks`, stacked row-wise.
    /// Returns logits `[sum of block lengths, vocab_size]`.
    pub fn decode_blocks(
        &self,
        g: &mut Graph<'_>,
        memory: &Memory,
        blocks: &[DecodeBlock],
        drop: &mut Dropout,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let l = &self.layout;
        let mut positions = Vec::new();
        let mut tokens = Vec::new();
        let mut self_groups = Vec::with_capacity(blocks.len());
        let mut content_groups = Vec::with_capacity(blocks.len());
        let mut cross_groups = Vec::with_capacity(blocks.len());
        for b in blocks {
            if b.len > c.max_positions() {
                return Err(ModelError::LengthExceeded {
                    len: b.len,
                    max: c.max_positions(),
                });
            }
            let ok = b.content_tokens.len() == b.len
                && b.query_mask.len() == b.len * b.len
                && b.content_mask.len() == b.len * b.len
                && b.image < memory.images;
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "decode",
                    detail: format!("inconsistent block of length {}", b.len),
                }
                .into());
            }
            let start = positions.len();
            positions.extend(0..b.len);
            tokens.extend_from_slice(&b.content_tokens);
            self_groups.push(AttnGroup {
                q_start: start,
                q_len: b.len,
                kv_start: start,
                kv_len: b.len,
                mask: Some(b.query_mask.clone()),
            });
            content_groups.push(AttnGroup {
                mask: Some(b.content_mask.clone()),
                ..self_groups.last().unwrap().clone()
            });
            cross_groups.push(AttnGroup {
                q_start: start,
                q_len: b.len,
                kv_start: b.image * memory.tokens_per_image,
                kv_len: memory.tokens_per_image,
                mask: None,
            });
        }

        let pos_table = g.param(l.pos_queries);
        let tok_table = g.param(l.tok_emb);
        let query = g.embedding(pos_table, &positions)?;
        let mut query = drop.apply(g, query);
        let content_pos = g.embedding(pos_table, &positions)?;
        let content_tok = g.embedding(tok_table, &tokens)?;
        let content = g.add(content_tok, content_pos)?;
        let mut content = drop.apply(g, content);

        let last = l.decoder.len().saturating_sub(1);
        for (i, layer) in l.decoder.iter().enumerate() {
            let query_norm = self.norm(g, query, layer.norm_query)?;
            let content_norm = self.norm(g, content, layer.norm_content)?;
            let kv = self.stream_kv(g, content_norm, layer)?;
            let cross = memory.cross_kv[i];
            let next_query = self.stream(
                g,
                (query, query_norm),
                kv,
                &self_groups,
                cross,
                &cross_groups,
                layer,
                drop,
            )?;
            if i < last {
                content = self.stream(
                    g,
                    (content, content_norm),
                    kv,
                    &content_groups,
                    cross,
                    &cross_groups,
                    layer,
                    drop,
                )?;
            }
            query = next_query;
        }
        let out = self.norm(g, query, l.dec_norm)?;
        self.linear(g, out, l.head)
    }

    fn stream_kv(
        &self,
        g: &mut Graph<'_>,
        content_norm: Var,
        layer: &DecoderLayerIds,
    ) -> Result<(Var, Var), ModelError> {
        let k = self.linear(g, content_norm, layer.self_attn.k)?;
        let v = self.linear(g, content_norm, layer.self_attn.v)?;
        Ok((k, v))
    }

    #[allow(clippy::too_many_arguments)]
    fn stream(
        &self,
        g: &mut Graph<'_>,
        (tgt, tgt_norm): (Var, Var),
        (k, v): (Var, Var),
        self_groups: &[AttnGroup],
        (mem_k, mem_v): (Var, Var),
        cross_groups: &[AttnGroup],
        layer: &DecoderLayerIds,
        drop: &mut Dropout,
    ) -> Result<Var, ModelError> {
        let heads = self.config.heads;
        let q = self.linear(g, tgt_norm, layer.self_attn.q)?;
        let a = g.attention(q, k, v, heads, self_groups.to_vec())?;
        let a = self.linear(g, a, layer.self_attn.o)?;
        let a = drop.apply(g, a);
        let tgt = g.add(tgt, a)?;

        let h = self.norm(g, tgt, layer.norm_cross)?;
        let q = self.linear(g, h, layer.cross_attn.q)?;
        let a = g.attention(q, mem_k, mem_v, heads, cross_groups.to_vec())?;
        let a = self.linear(g, a, layer.cross_attn.o)?;
        let a = drop.apply(g, a);
        let tgt = g.add(tgt, a)?;

        let h = self.norm(g, tgt, layer.norm_mlp)?;
        let f = self.mlp(g, h, layer.mlp, drop)?;
        let f = drop.apply(g, f);
        Ok(g.add(tgt, f)?)
    }

    /// Teacher-forced logits for one image under each permutation.
    pub fn decode_train(
        &self,
        g: &mut Graph<'_>,
        memory: &Memory,
        image: usize,
        targets: &[usize],
        perms: &[Permutation],
        drop: &mut Dropout,
    ) -> Result<Vec<Var>, ModelError> {
        let t = targets.len();
        if t > self.config.max_positions() {
            return Err(ModelError::LengthExceeded {
                len: t,
                max: self.config.max_positions(),
            });
        }
        let blocks: Vec<DecodeBlock> = perms
            .iter()
            .map(|p| DecodeBlock::for_permutation(image, targets, p))
            .collect();
        let logits = self.decode_blocks(g, memory, &blocks, drop)?;
        (0..perms.len())
            .map(|k| Ok(g.slice_rows(logits, k * t, t)?))
            .collect()
    }

    /// Label ids (without EOS) for image `image` of `memory`.
    pub fn decode_infer(
        &self,
        g: &mut Graph<'_>,
        memory: &Memory,
        image: usize,
        mode: DecodeMode,
    ) -> Result<Vec<usize>, ModelError> {
        let mut drop = Dropout::disabled();
        let max_pos = self.config.max_positions();
        match mode {
            DecodeMode::Autoregressive => {
                let mut out: Vec<usize> = Vec::new();
                for t in 0..max_pos {
                    let len = t + 1;
                    let mut content = out.clone();
                    content.push(PAD);
                    let causal = masks_from_permutation(&Permutation::identity(len));
                    let block = DecodeBlock::with_mask(image, content, causal.query_mask());
                    let logits = self.decode_blocks(g, memory, &[block], &mut drop)?;
                    let next = argmax(g.value(logits).row(t));
                    if next == EOS || t == self.config.max_label_len {
                        break;
                    }
                    out.push(next);
                }
                Ok(out)
            }
            DecodeMode::NonAutoregressive { refine } => {
                let none = vec![false; max_pos * max_pos];
                let block = DecodeBlock::with_mask(image, vec![PAD; max_pos], &none);
                let logits = self.decode_blocks(g, memory, &[block], &mut drop)?;
                let mut pred = argmax_rows(g.value(logits));
                for _ in 0..refine {
                    let visible = pred.iter().position(|&t| t == EOS).map_or(max_pos, |i| i + 1);
                    let mask = plm::cloze_mask(max_pos, visible);
                    let block = DecodeBlock::with_mask(image, pred.clone(), &mask);
                    let logits = self.decode_blocks(g, memory, &[block], &mut drop)?;
                    pred = argmax_rows(g.value(logits));
                }
                let end = pred
                    .iter()
                    .position(|&t| t == EOS)
                    .unwrap_or(self.config.max_label_len);
                pred.truncate(end);
                Ok(pred)
            }
        }
    }

    /// Encode and decode a single image.
    pub fn recognize(&self, image: &GrayImage, mode: DecodeMode) -> Result<Vec<usize>, ModelError> {
        let mut g = Graph::with_params(&self.params);
        let memory = self.encode_images(&mut g, &[image], &mut Dropout::disabled())?;
        self.decode_infer(&mut g, &memory, 0, mode)
    }

    /// Parameter tensors keyed by name, sorted.
    pub fn named_params(&self) -> BTreeMap<&str, &Tensor> {
        self.params.iter().map(|(_, n, t)| (n, t)).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|i| argmax(t.row(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> RecognizerConfig {
        RecognizerConfig {
            embed_dim: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            ff_dim: 16,
            dropout: 0.0,
            permutations: 3,
            image_height: 4,
            image_width: 8,
            patch_height: 2,
            patch_width: 4,
            max_label_len: 5,
            vocab_size: 9,
        }
    }

    fn image(seed: u64, w: usize, h: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random())
    }

    #[test]
    fn table_defaults() {
        let c = RecognizerConfig::default();
        assert_eq!(
            (c.embed_dim, c.heads, c.enc_layers, c.dec_layers, c.ff_dim, c.permutations),
            (256, 4, 4, 2, 1024, 3)
        );
        assert_eq!(c.dropout, 0.3);
        assert_eq!(c.num_patches(), 128);
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        let mut c = toy_config();
        c.image_width = 9;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        assert!(c.set("nope", "1").is_err());
        c.set("heads", "4").unwrap();
        assert_eq!(c.heads, 4);
    }

    #[test]
    fn parameter_count_matches_formula() {
        for c in [toy_config(), RecognizerConfig { vocab_size: 120, ..Default::default() }] {
            let m = Recognizer::new(c.clone(), 1).unwrap();
            assert_eq!(m.params().num_scalars(), c.parameter_count());
        }
    }

    #[test]
    fn default_geometry_memory_shape() {
        let c = RecognizerConfig {
            vocab_size: 20,
            ..Default::default()
        };
        let m = Recognizer::new(c, 3).unwrap();
        let img = GrayImage::new(128, 32, 0);
        let mut g = Graph::with_params(m.params());
        let mem = m.encode_images(&mut g, &[&img], &mut Dropout::disabled()).unwrap();
        assert_eq!(g.value(mem.tokens).dims(), &[128, 256]);
        assert!(g.value(mem.tokens).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let m = Recognizer::new(toy_config(), 0).unwrap();
        let img = GrayImage::new(7, 4, 0);
        let mut g = Graph::with_params(m.params());
        assert!(matches!(
            m.encode_images(&mut g, &[&img], &mut Dropout::disabled()),
            Err(ModelError::ImageShape { .. })
        ));
    }

    #[test]
    fn from_params_checks_names() {
        let m = Recognizer::new(toy_config(), 0).unwrap();
        let params = m.params().clone();
        assert!(Recognizer::from_params(toy_config(), params.clone()).is_ok());
        let mut wider = toy_config();
        wider.ff_dim = 32;
        assert!(matches!(
            Recognizer::from_params(wider, params.clone()),
            Err(ModelError::ParamShape { .. })
        ));
        let mut extra = params;
        extra.insert("stray", Tensor::zeros(&[1])).unwrap();
        assert_eq!(
            Recognizer::from_params(toy_config(), extra).err(),
            Some(ModelError::UnexpectedParam("stray".into()))
        );
    }

    #[test]
    fn decode_train_shapes_and_length_limit() {
        let c = toy_config();
        let m = Recognizer::new(c.clone(), 5).unwrap();
        let img = image(1, c.image_width, c.image_height);
        let mut g = Graph::with_params(m.params());
        let mut drop = Dropout::disabled();
        let mem = m.encode_images(&mut g, &[&img], &mut drop).unwrap();
        let targets = [4, 5, 6, EOS];
        let perms = plm::sample_permutations(4, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let sets = m.decode_train(&mut g, &mem, 0, &targets, &perms, &mut drop).unwrap();
        assert_eq!(sets.len(), 3);
        for s in sets {
            assert_eq!(g.value(s).dims(), &[4, c.vocab_size]);
        }
        let long = vec![4; c.max_positions() + 1];
        assert!(matches!(
            m.decode_train(&mut g, &mem, 0, &long, &[Permutation::identity(long.len())], &mut drop),
            Err(ModelError::LengthExceeded { .. })
        ));
    }

    #[test]
    fn nar_without_refinement_is_plain_parallel_pass() {
        let c = toy_config();
        let m = Recognizer::new(c.clone(), 11).unwrap();
        let img = image(4, c.image_width, c.image_height);
        let a = m.recognize(&img, DecodeMode::NonAutoregressive { refine: 0 }).unwrap();
        let mut g = Graph::with_params(m.params());
        let mem = m.encode_images(&mut g, &[&img], &mut Dropout::disabled()).unwrap();
        let n = c.max_positions();
        let block = DecodeBlock::with_mask(0, vec![PAD; n], &vec![false; n * n]);
        let logits = m.decode_blocks(&mut g, &mem, &[block], &mut Dropout::disabled()).unwrap();
        let mut plain = argmax_rows(g.value(logits));
        plain.truncate(plain.iter().position(|&t| t == EOS).unwrap_or(c.max_label_len));
        assert_eq!(a, plain);
    }

    #[test]
    fn inference_is_deterministic() {
        let c = toy_config();
        let m = Recognizer::new(c.clone(), 2).unwrap();
        let img = image(9, c.image_width, c.image_height);
        for mode in [
            DecodeMode::Autoregressive,
            DecodeMode::NonAutoregressive { refine: 2 },
        ] {
            assert_eq!(m.recognize(&img, mode).unwrap(), m.recognize(&img, mode).unwrap());
        }
    }
}
