//! Time-conditioned multi-view point map network.
//!
//! Each frame is tokenized into patch tokens, one camera token and register
//! tokens, and the backbone alternates frame-wise and global attention over
//! them. A per-frame copy of a target-time token runs alongside: it reads the
//! main tokens of every layer but is never read by them, so the backbone taps
//! do not depend on the target time and can be cached. The averaged time
//! token output `t̂_j` conditions a decoder that maps the taps of every frame
//! `i` to `P_i(t_j)`; one head decodes both the raw taps (`𝒫`) and the
//! decoded taps (`𝒬`).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vdpm_tensor::{Float, Tape, Tensor, Var};

use crate::dpm::{DpmSet, PointMap};
use crate::error::{Error, Result};
use crate::format;
use crate::geometry::{Rigid, Vec3};
use crate::scenegen::Snippet;

/// Translation (3), quaternion (4) and field of view (1).
pub const POSE_DIM: usize = 8;
const LN_EPS: f64 = 1e-6;
const QUAT_EPS: f64 = 1e-12;
const TOKEN_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Scale, shift and gate from projections of `t̂_j`.
    Adaln,
    /// `t̂_j` added to every token, plain pre-norm blocks.
    Addition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Transformer,
    /// No decoder blocks; a second head conditioned on `t̂_j` produces `𝒬`.
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub backbone_depth: usize,
    pub heads: usize,
    pub tap_layers: Vec<usize>,
    pub decoder_depth: usize,
    pub conditioning: Conditioning,
    pub decoder_kind: DecoderKind,
    pub register_tokens: usize,
    pub head_hidden_dim: usize,
    pub mlp_ratio: usize,
    pub time_frequencies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_width: 32,
            image_height: 32,
            channels: crate::scenegen::CHANNELS,
            patch_size: 8,
            embed_dim: 64,
            backbone_depth: 8,
            heads: 4,
            tap_layers: vec![1, 3, 5, 7],
            decoder_depth: 4,
            conditioning: Conditioning::Adaln,
            decoder_kind: DecoderKind::Transformer,
            register_tokens: 2,
            head_hidden_dim: 128,
            mlp_ratio: 4,
            time_frequencies: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let p = self.patch_size;
        if p == 0 || self.image_width % p != 0 || self.image_height % p != 0 {
            return fail(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_width, self.image_height
            ));
        }
        if self.image_width == 0 || self.image_height == 0 || self.channels == 0 {
            return fail("empty image".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.tap_layers.len() != 4 {
            return fail(format!("need 4 tap layers, got {}", self.tap_layers.len()));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("tap layers {:?} not strictly increasing", self.tap_layers));
        }
        if self.tap_layers[3] >= self.backbone_depth {
            return fail(format!(
                "tap layer {} outside a {}-layer backbone",
                self.tap_layers[3], self.backbone_depth
            ));
        }
        if self.decoder_kind == DecoderKind::Transformer && ![2, 4].contains(&self.decoder_depth) {
            return fail(format!("decoder_depth must be 2 or 4, got {}", self.decoder_depth));
        }
        if self.head_hidden_dim == 0 || self.mlp_ratio == 0 || self.time_frequencies == 0 {
            return fail("zero hidden size".into());
        }
        Ok(())
    }

    pub fn patches_x(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn patches_y(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_x() * self.patches_y()
    }

    /// Patches, camera token, registers and the time-token copy.
    pub fn tokens_per_frame(&self) -> usize {
        self.num_patches() + 1 + self.register_tokens + 1
    }

    fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// The four network designs compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Original,
    DecoderDepth2,
    Addition,
    HeadOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Original,
        Variant::DecoderDepth2,
        Variant::Addition,
        Variant::HeadOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Original => "Original",
            Variant::DecoderDepth2 => "Decoder depth 2",
            Variant::Addition => "Addition conditioning",
            Variant::HeadOnly => "Head-only conditioning",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::DecoderDepth2 => "decoder-depth2",
            Variant::Addition => "addition",
            Variant::HeadOnly => "head-only",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.conditioning = Conditioning::Adaln;
        c.decoder_kind = DecoderKind::Transformer;
        match self {
            Variant::Original => c.decoder_depth = 4,
            Variant::DecoderDepth2 => c.decoder_depth = 2,
            Variant::Addition => {
                c.decoder_depth = 4;
                c.conditioning = Conditioning::Addition;
            }
            Variant::HeadOnly => c.decoder_kind = DecoderKind::HeadOnly,
        }
        c
    }
}

#[derive(Debug, Clone)]
enum Init {
    Normal(f64),
    Zeros,
    Values(Vec<f64>),
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn push(out: &mut Vec<ParamDef>, name: impl Into<String>, shape: Vec<usize>, init: Init) {
    out.push(ParamDef {
        name: name.into(),
        shape,
        init,
    });
}

fn push_linear(out: &mut Vec<ParamDef>, name: &str, i: usize, o: usize, gain: f64) {
    push(out, format!("{name}.w"), vec![i, o], Init::Normal(gain / (i as f64).sqrt()));
    push(out, format!("{name}.b"), vec![o], Init::Zeros);
}

fn push_block(out: &mut Vec<ParamDef>, pre: &str, d: usize, mlp: usize, depth: usize) {
    let out_gain = 1.0 / (2.0 * depth as f64).sqrt();
    push_linear(out, &format!("{pre}.qkv"), d, 3 * d, 1.0);
    push_linear(out, &format!("{pre}.proj"), d, d, out_gain);
    push_linear(out, &format!("{pre}.fc1"), d, mlp, 1.0);
    push_linear(out, &format!("{pre}.fc2"), mlp, d, out_gain);
}

fn layout(cfg: &ModelConfig) -> Vec<ParamDef> {
    let d = cfg.embed_dim;
    let f2 = 2 * cfg.time_frequencies;
    let hh = cfg.head_hidden_dim;
    let mlp = cfg.mlp_ratio * d;
    let out = &mut Vec::new();
    push_linear(out, "patch", cfg.patch_features(), d, 1.0);
    push(out, "patch.pos", vec![cfg.num_patches(), d], Init::Normal(TOKEN_STD));
    push(out, "camera.token", vec![2, d], Init::Normal(TOKEN_STD));
    if cfg.register_tokens > 0 {
        push(
            out,
            "register.tokens",
            vec![2, cfg.register_tokens, d],
            Init::Normal(TOKEN_STD),
        );
    }
    push(out, "frame_time.w", vec![f2, d], Init::Normal(1.0 / (f2 as f64).sqrt()));
    push_linear(out, "time", f2, d, 1.0);
    push(out, "time.token", vec![d], Init::Normal(TOKEN_STD));
    for l in 0..cfg.backbone_depth {
        push_block(out, &format!("backbone.{l}"), d, mlp, cfg.backbone_depth);
    }

    push_linear(out, "camera_head.fc1", d, hh, 1.0);
    push(out, "camera_head.fc2.w", vec![hh, POSE_DIM], Init::Normal(0.1 / (hh as f64).sqrt()));
    push(
        out,
        "camera_head.fc2.b",
        vec![POSE_DIM],
        Init::Values(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5]),
    );

    let out_ch = cfg.patch_size * cfg.patch_size * 4;
    push_linear(out, "head.fc1", 4 * d, hh, 1.0);
    push_linear(out, "head.fc2", hh, out_ch, 1.0);

    match cfg.decoder_kind {
        DecoderKind::Transformer => {
            for b in 0..cfg.decoder_depth {
                let pre = format!("decoder.{b}");
                push_block(out, &pre, d, mlp, cfg.decoder_depth);
                if cfg.conditioning == Conditioning::Adaln {
                    push_linear(out, &format!("{pre}.mod"), d, 4 * d, 0.1);
                    push(out, format!("{pre}.gate.w"), vec![d, 2 * d], Init::Zeros);
                    push(out, format!("{pre}.gate.b"), vec![2 * d], Init::Zeros);
                }
            }
        }
        DecoderKind::HeadOnly => {
            push_linear(out, "qhead.fc1", 4 * d, hh, 1.0);
            push(out, "qhead.mod.w", vec![d, 2 * hh], Init::Zeros);
            push(out, "qhead.mod.b", vec![2 * hh], Init::Zeros);
            push_linear(out, "qhead.fc2", hh, out_ch, 1.0);
        }
    }
    std::mem::take(out)
}

/// Names and shapes of every parameter of a configuration, in creation order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|s| (s.name, s.shape)).collect()
}

/// Named parameter store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights<T: Float = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Weights<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    /// Random initialization; gate projections start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::new();
        for def in layout(cfg) {
            let n: usize = def.shape.iter().product();
            let data: Vec<T> = match &def.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Values(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, *std).expect("positive std");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            w.insert(def.name, Tensor::new(def.shape, data)?);
        }
        if cfg.decoder_kind == DecoderKind::HeadOnly {
            for name in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
                let t = w.map[&format!("head.{name}")].clone();
                w.insert(format!("qhead.{name}"), t);
            }
        }
        Ok(w)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> Weights<U> {
        Weights {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Adds Gaussian noise to every parameter whose name matches.
    pub fn perturb(&mut self, matches: impl Fn(&str) -> bool, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("positive std");
        for (name, t) in self.map.iter_mut() {
            if matches(name) {
                for v in t.data_mut() {
                    *v += T::from_f64(dist.sample(&mut rng));
                }
            }
        }
    }

    /// Checks names and shapes against a configuration.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = parameter_layout(cfg);
        for (name, shape) in &expected {
            match self.map.get(name) {
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.map.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
            return Err(Error::Contract(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters placed on a tape.
pub struct Params<'t, T: Float> {
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Float> Params<'t, T> {
    /// Differentiable parameters.
    pub fn leaves(tape: &'t Tape<T>, w: &Weights<T>) -> Self {
        let vars = w.iter().map(|(k, v)| (k.to_string(), tape.leaf(v.clone()))).collect();
        Self { tape, vars }
    }

    /// Frozen parameters for inference.
    pub fn constants(tape: &'t Tape<T>, w: &Weights<T>) -> Self {
        let vars = w.iter().map(|(k, v)| (k.to_string(), tape.constant(v.clone()))).collect();
        Self { tape, vars }
    }

    pub fn from_vars(tape: &'t Tape<T>, vars: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        Self {
            tape,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Images `[N, C, H, W]` and their timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T: Float = f32> {
    pub images: Tensor<T>,
    pub timestamps: Vec<f64>,
}

impl ModelInput<f32> {
    pub fn from_snippet(s: &Snippet) -> Result<Self> {
        let data: Vec<f32> = s.images.iter().flatten().copied().collect();
        let images = Tensor::new(
            [s.len(), crate::scenegen::CHANNELS, s.height, s.width],
            data,
        )?;
        Ok(Self {
            images,
            timestamps: s.timestamps.clone(),
        })
    }
}

impl<T: Float> ModelInput<T> {
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn cast<U: Float>(&self) -> ModelInput<U> {
        ModelInput {
            images: self.images.cast(),
            timestamps: self.timestamps.clone(),
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.frames();
        let want = [n, cfg.channels, cfg.image_height, cfg.image_width];
        if n == 0 {
            return Err(Error::Contract("model input has no frames".into()));
        }
        if self.images.shape() != want {
            return Err(Error::Contract(format!(
                "images {:?}, expected {want:?}",
                self.images.shape()
            )));
        }
        Ok(())
    }
}

/// Splits `[N, C, H, W]` into `[N, patches, C·P·P]`; patches in row-major
/// order, features ordered by channel, row, column.
pub fn patchify<T: Float>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::Contract(format!("patchify needs [N,C,H,W], got {:?}", images.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Contract(format!(
            "image {w}x{h} not divisible by patch size {patch}"
        )));
    }
    let (py, px) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..n {
        for gy in 0..py {
            for gx in 0..px {
                for ch in 0..c {
                    for y in 0..patch {
                        let row = ((f * c + ch) * h + gy * patch + y) * w + gx * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new([n, py * px, feat], out)?)
}

/// Timestamps mapped to `[0, 1]` over the snippet span (span 1 if degenerate).
pub fn normalized_times(timestamps: &[f64]) -> Vec<f64> {
    let lo = timestamps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = timestamps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    timestamps.iter().map(|t| (t - lo) / span).collect()
}

fn normalize_time(t: f64, timestamps: &[f64]) -> f64 {
    let lo = timestamps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = timestamps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    (t - lo) / span
}

/// `[sin(2^k π τ)]_k ++ [cos(2^k π τ)]_k`.
pub fn time_encoding(tau: f64, frequencies: usize) -> Vec<f64> {
    let w = |k: usize| (1u64 << k) as f64 * std::f64::consts::PI * tau;
    (0..frequencies)
        .map(|k| w(k).sin())
        .chain((0..frequencies).map(|k| w(k).cos()))
        .collect()
}

fn encoding_tensor<T: Float>(taus: &[f64], frequencies: usize) -> Tensor<T> {
    let data = taus
        .iter()
        .flat_map(|&t| time_encoding(t, frequencies))
        .map(T::from_f64)
        .collect();
    Tensor::new([taus.len(), 2 * frequencies], data).expect("encoding shape")
}

fn linear<'t, T: Float>(p: &Params<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.matmul(p.get(&format!("{name}.w"))?)?.add(p.get(&format!("{name}.b"))?)?)
}

fn ln<T: Float>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    Ok(x.layernorm_noaffine(T::from_f64(LN_EPS))?)
}

/// Target-time token `[D]` for time `t` within a snippet.
pub fn embed_time<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    t: f64,
    timestamps: &[f64],
) -> Result<Var<'t, T>> {
    let tau = normalize_time(t, timestamps);
    let enc = p.tape().constant(encoding_tensor(&[tau], cfg.time_frequencies));
    let tok = linear(p, "time", enc)?.add(p.get("time.token")?)?;
    Ok(tok.reshape(&[cfg.embed_dim])?)
}

/// Linear patch embedding plus positional embedding: `[N, patches, D]`.
pub fn embed_patches<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    images: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let patches = p.tape().constant(patchify(images, cfg.patch_size)?);
    Ok(linear(p, "patch", patches)?.add(p.get("patch.pos")?)?)
}

/// Entry 0 of a `[2, ..]` table for frame 0, entry 1 for the other frames.
fn first_frame_split<'t, T: Float>(table: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    let first = table.slice(0, 0, 1)?;
    if n == 1 {
        return Ok(first);
    }
    let rest = table.slice(0, 1, 2)?;
    let mut parts = vec![first];
    parts.extend(std::iter::repeat_n(rest, n - 1));
    Ok(table.tape().concat(&parts, 0)?)
}

/// Attention over `[.., N, T, D]`: within each frame, or across all frames.
fn mix<'t, T: Float>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    global: bool,
) -> Result<Var<'t, T>> {
    let s = q.shape();
    let r = s.len();
    let (n, t, d) = (s[r - 3], s[r - 2], s[r - 1]);
    let b: usize = s[..r - 3].iter().product();
    let shape = if global { [b, n * t, d] } else { [b * n, t, d] };
    let ks = k.shape();
    let kshape = if global {
        [b, n * ks[r - 2], d]
    } else {
        [b * n, ks[r - 2], d]
    };
    let out = q
        .reshape(&shape)?
        .attention(k.reshape(&kshape)?, v.reshape(&kshape)?, heads, None)?;
    Ok(out.reshape(&s)?)
}

struct Attended<'t, T: Float> {
    out: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
}

fn attn_sub<'t, T: Float>(
    p: &Params<'t, T>,
    pre: &str,
    h: Var<'t, T>,
    heads: usize,
    global: bool,
) -> Result<Attended<'t, T>> {
    let d = *h.shape().last().unwrap();
    let qkv = linear(p, &format!("{pre}.qkv"), h)?;
    let axis = h.shape().len() - 1;
    let q = qkv.slice(axis, 0, d)?;
    let k = qkv.slice(axis, d, 2 * d)?;
    let v = qkv.slice(axis, 2 * d, 3 * d)?;
    let a = mix(q, k, v, heads, global)?;
    Ok(Attended {
        out: linear(p, &format!("{pre}.proj"), a)?,
        k,
        v,
    })
}

fn mlp_sub<'t, T: Float>(p: &Params<'t, T>, pre: &str, h: Var<'t, T>) -> Result<Var<'t, T>> {
    let h = linear(p, &format!("{pre}.fc1"), h)?.gelu();
    linear(p, &format!("{pre}.fc2"), h)
}

/// Pre-norm attention + MLP block over `[.., N, T, D]`; also returns the
/// block's keys and values.
pub fn backbone_block<'t, T: Float>(
    p: &Params<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    heads: usize,
    global: bool,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let a = attn_sub(p, prefix, ln(x)?, heads, global)?;
    let x = x.add(a.out)?;
    let x = x.add(mlp_sub(p, prefix, ln(x)?)?)?;
    Ok((x, a.k, a.v))
}

/// Time-token copies `[N, 1, D]` through one backbone layer: they attend to
/// the layer's main keys/values and to themselves.
fn time_block<'t, T: Float>(
    p: &Params<'t, T>,
    pre: &str,
    tt: Var<'t, T>,
    k_main: Var<'t, T>,
    v_main: Var<'t, T>,
    heads: usize,
    global: bool,
) -> Result<Var<'t, T>> {
    let tape = p.tape();
    let s = k_main.shape();
    let (n, t, d) = (s[0], s[1], s[2]);
    let qkv = linear(p, &format!("{pre}.qkv"), ln(tt)?)?;
    let q = qkv.slice(2, 0, d)?;
    let k = qkv.slice(2, d, 2 * d)?;
    let v = qkv.slice(2, 2 * d, 3 * d)?;
    let a = if global {
        let keys = tape.concat(&[k_main.reshape(&[1, n * t, d])?, k.reshape(&[1, n, d])?], 1)?;
        let vals = tape.concat(&[v_main.reshape(&[1, n * t, d])?, v.reshape(&[1, n, d])?], 1)?;
        q.reshape(&[1, n, d])?
            .attention(keys, vals, heads, None)?
            .reshape(&[n, 1, d])?
    } else {
        let keys = tape.concat(&[k_main, k], 1)?;
        let vals = tape.concat(&[v_main, v], 1)?;
        q.attention(keys, vals, heads, None)?
    };
    let tt = tt.add(linear(p, &format!("{pre}.proj"), a)?)?;
    Ok(tt.add(mlp_sub(p, pre, ln(tt)?)?)?)
}

pub struct HeadOutput<'t, T: Float> {
    /// `[N, H, W, 3]`.
    pub points: Var<'t, T>,
    /// `[N, H, W]`, strictly above 1.
    pub conf: Var<'t, T>,
}

pub struct CameraOutput<'t, T: Float> {
    /// `[N, 3]`.
    pub translation: Var<'t, T>,
    /// `[N, 4]` unit quaternions `(w, x, y, z)`.
    pub quat: Var<'t, T>,
    /// `[N]` vertical field of view in radians.
    pub fov: Var<'t, T>,
}

/// Concatenates the 4 tap features per token, MLP to one patch of
/// `P·P·4` values, unfold to `[N, H, W, 4]`. With `cond`, the hidden layer is
/// adaLN-modulated by `t̂_j`.
pub fn pointmap_head<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    prefix: &str,
    taps: &[Var<'t, T>],
    cond: Option<Var<'t, T>>,
) -> Result<HeadOutput<'t, T>> {
    let tape = p.tape();
    if taps.len() != 4 {
        return Err(Error::Contract(format!("head needs 4 tap features, got {}", taps.len())));
    }
    let s = taps[0].shape();
    if s.len() != 3 || taps.iter().any(|t| t.shape() != s) {
        return Err(Error::Contract("tap features must share one [N, patches, D] shape".into()));
    }
    let n = s[0];
    let normed = taps.iter().map(|&t| ln(t)).collect::<Result<Vec<_>>>()?;
    let x = tape.concat(&normed, 2)?;
    let mut h = linear(p, &format!("{prefix}.fc1"), x)?;
    if let Some(t) = cond {
        let hh = cfg.head_hidden_dim;
        let m = linear(p, &format!("{prefix}.mod"), t.silu().reshape(&[1, cfg.embed_dim])?)?
            .reshape(&[2 * hh])?;
        let shift = m.slice(0, 0, hh)?;
        let scale = m.slice(0, hh, 2 * hh)?.add_scalar(T::one());
        h = ln(h)?.mul(scale)?.add(shift)?;
    }
    let o = linear(p, &format!("{prefix}.fc2"), h.gelu())?;
    let ps = cfg.patch_size;
    let (gy, gx) = (cfg.patches_y(), cfg.patches_x());
    let (hgt, wid) = (cfg.image_height, cfg.image_width);
    let o = o
        .reshape(&[n, gy, gx, ps, ps, 4])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, hgt, wid, 4])?;
    Ok(HeadOutput {
        points: o.slice(3, 0, 3)?,
        conf: o.slice(3, 3, 4)?.exp().add_scalar(T::one()).reshape(&[n, hgt, wid])?,
    })
}

/// Pose regression from camera tokens `[N, D]`.
pub fn camera_head<'t, T: Float>(p: &Params<'t, T>, c: Var<'t, T>) -> Result<CameraOutput<'t, T>> {
    let n = c.shape()[0];
    let h = linear(p, "camera_head.fc1", ln(c)?)?.gelu();
    let o = linear(p, "camera_head.fc2", h)?;
    Ok(CameraOutput {
        translation: o.slice(1, 0, 3)?,
        quat: o.slice(1, 3, 7)?.normalize_last(T::from_f64(QUAT_EPS))?,
        fov: o.slice(1, 7, 8)?.softplus().reshape(&[n])?,
    })
}

/// Everything the backbone produces that does not depend on the target time.
pub struct MainStream<'t, T: Float> {
    /// Patch-token features at the 4 tap layers, each `[N, patches, D]`.
    pub taps: Vec<Var<'t, T>>,
    /// Per-layer main-token keys and values, `[N, T, D]`.
    pub kv: Vec<(Var<'t, T>, Var<'t, T>)>,
    pub time_variant: HeadOutput<'t, T>,
    pub camera: CameraOutput<'t, T>,
}

pub fn main_stream<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    input: &ModelInput<T>,
) -> Result<MainStream<'t, T>> {
    input.check(cfg)?;
    let tape = p.tape();
    let n = input.frames();
    let (np, d) = (cfg.num_patches(), cfg.embed_dim);
    let patches = embed_patches(cfg, p, &input.images)?;
    let enc = tape.constant(encoding_tensor(
        &normalized_times(&input.timestamps),
        cfg.time_frequencies,
    ));
    let cams = first_frame_split(p.get("camera.token")?, n)?
        .add(enc.matmul(p.get("frame_time.w")?)?)?
        .reshape(&[n, 1, d])?;
    let mut parts = vec![patches, cams];
    if cfg.register_tokens > 0 {
        parts.push(first_frame_split(p.get("register.tokens")?, n)?);
    }
    let mut x = tape.concat(&parts, 1)?;
    let mut taps = Vec::with_capacity(4);
    let mut kv = Vec::with_capacity(cfg.backbone_depth);
    for l in 0..cfg.backbone_depth {
        let (nx, k, v) = backbone_block(p, &format!("backbone.{l}"), x, cfg.heads, l % 2 == 1)?;
        kv.push((k, v));
        if cfg.tap_layers.contains(&l) {
            taps.push(nx.slice(1, 0, np)?);
        }
        x = nx;
    }
    let c = x.slice(1, np, np + 1)?.reshape(&[n, d])?;
    Ok(MainStream {
        time_variant: pointmap_head(cfg, p, "head", &taps, None)?,
        camera: camera_head(p, c)?,
        taps,
        kv,
    })
}

/// `t̂_j`: the per-frame time-token copies run through the backbone and averaged.
pub fn time_stream<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    kv: &[(Var<'t, T>, Var<'t, T>)],
    timestamps: &[f64],
    j: usize,
) -> Result<Var<'t, T>> {
    let n = timestamps.len();
    let d = cfg.embed_dim;
    let tok = embed_time(cfg, p, timestamps[j], timestamps)?;
    let mut tt = p.tape().constant(Tensor::zeros([n, 1, d])).add(tok)?;
    for (l, &(k, v)) in kv.iter().enumerate() {
        tt = time_block(p, &format!("backbone.{l}"), tt, k, v, cfg.heads, l % 2 == 1)?;
    }
    Ok(tt.reshape(&[n, d])?.mean(0)?)
}

/// `x` with entry `j` along `axis` taken from `keep`.
fn restore<'t, T: Float>(x: Var<'t, T>, keep: Var<'t, T>, axis: usize, j: usize) -> Result<Var<'t, T>> {
    let n = x.shape()[axis];
    let mut parts = Vec::with_capacity(3);
    if j > 0 {
        parts.push(x.slice(axis, 0, j)?);
    }
    parts.push(keep.slice(axis, j, j + 1)?);
    if j + 1 < n {
        parts.push(x.slice(axis, j + 1, n)?);
    }
    Ok(x.tape().concat(&parts, axis)?)
}

fn adaln_block<'t, T: Float>(
    p: &Params<'t, T>,
    pre: &str,
    x: Var<'t, T>,
    s: Var<'t, T>,
    heads: usize,
    global: bool,
) -> Result<Var<'t, T>> {
    let d = *x.shape().last().unwrap();
    let m = linear(p, &format!("{pre}.mod"), s)?.reshape(&[4 * d])?;
    let g = linear(p, &format!("{pre}.gate"), s)?.reshape(&[2 * d])?;
    let (shift1, scale1) = (m.slice(0, 0, d)?, m.slice(0, d, 2 * d)?.add_scalar(T::one()));
    let (shift2, scale2) = (m.slice(0, 2 * d, 3 * d)?, m.slice(0, 3 * d, 4 * d)?.add_scalar(T::one()));
    let (gate1, gate2) = (g.slice(0, 0, d)?, g.slice(0, d, 2 * d)?);
    let h = ln(x)?.mul(scale1)?.add(shift1)?;
    let x = x.add(attn_sub(p, pre, h, heads, global)?.out.mul(gate1)?)?;
    let h = ln(x)?.mul(scale2)?.add(shift2)?;
    Ok(x.add(mlp_sub(p, pre, h)?.mul(gate2)?)?)
}

/// Maps the 4 tap features of every frame to time `t_j`; frame `j` passes
/// through unchanged.
pub fn time_decoder<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    taps: &[Var<'t, T>],
    t_hat: Var<'t, T>,
    j: usize,
) -> Result<Vec<Var<'t, T>>> {
    if cfg.decoder_kind != DecoderKind::Transformer {
        return Err(Error::Config("time decoder requires decoder_kind = transformer".into()));
    }
    let tape = p.tape();
    let s = taps[0].shape();
    let (n, np, d) = (s[0], s[1], s[2]);
    let levels = taps.len();
    let stacked = taps
        .iter()
        .map(|t| t.reshape(&[1, n, np, d]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let x0 = tape.concat(&stacked, 0)?;
    let mut x = x0;
    match cfg.conditioning {
        Conditioning::Adaln => {
            let s = t_hat.silu().reshape(&[1, d])?;
            for b in 0..cfg.decoder_depth {
                x = adaln_block(p, &format!("decoder.{b}"), x, s, cfg.heads, b % 2 == 1)?;
                x = restore(x, x0, 1, j)?;
            }
        }
        Conditioning::Addition => {
            x = restore(x.add(t_hat)?, x0, 1, j)?;
            for b in 0..cfg.decoder_depth {
                x = backbone_block(p, &format!("decoder.{b}"), x, cfg.heads, b % 2 == 1)?.0;
                x = restore(x, x0, 1, j)?;
            }
        }
    }
    (0..levels)
        .map(|l| Ok(x.slice(0, l, l + 1)?.reshape(&[n, np, d])?))
        .collect()
}

/// `𝒬` from the cached main stream and `t̂_j`; entry `j` is `𝒫[j]`.
fn time_invariant_head<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    taps: &[Var<'t, T>],
    time_variant: &HeadOutput<'t, T>,
    t_hat: Var<'t, T>,
    j: usize,
) -> Result<HeadOutput<'t, T>> {
    let q = match cfg.decoder_kind {
        DecoderKind::Transformer => {
            let dec = time_decoder(cfg, p, taps, t_hat, j)?;
            pointmap_head(cfg, p, "head", &dec, None)?
        }
        DecoderKind::HeadOnly => pointmap_head(cfg, p, "qhead", taps, Some(t_hat))?,
    };
    Ok(HeadOutput {
        points: restore(q.points, time_variant.points, 0, j)?,
        conf: restore(q.conf, time_variant.conf, 0, j)?,
    })
}

/// The full graph for one snippet and reference index `j`.
pub struct Forward<'t, T: Float> {
    pub main: MainStream<'t, T>,
    pub t_hat: Var<'t, T>,
    pub time_invariant: HeadOutput<'t, T>,
}

pub fn forward<'t, T: Float>(
    cfg: &ModelConfig,
    p: &Params<'t, T>,
    input: &ModelInput<T>,
    j: usize,
) -> Result<Forward<'t, T>> {
    check_reference(input.frames(), j)?;
    let main = main_stream(cfg, p, input)?;
    let t_hat = time_stream(cfg, p, &main.kv, &input.timestamps, j)?;
    let time_invariant = time_invariant_head(cfg, p, &main.taps, &main.time_variant, t_hat, j)?;
    Ok(Forward {
        main,
        t_hat,
        time_invariant,
    })
}

fn check_reference(n: usize, j: usize) -> Result<()> {
    if j >= n {
        return Err(Error::Contract(format!("reference index {j} for {n} frames")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPrediction {
    pub translation: Tensor<f32>,
    pub quat: Tensor<f32>,
    pub fov: Tensor<f32>,
}

impl CameraPrediction {
    /// Predicted poses, ordered as the input frames.
    pub fn poses(&self) -> Vec<Rigid> {
        let t = self.translation.data();
        let q = self.quat.data();
        (0..self.fov.len())
            .map(|i| {
                let qi = &q[4 * i..4 * i + 4];
                Rigid::new(
                    [qi[0] as f64, qi[1] as f64, qi[2] as f64, qi[3] as f64],
                    Vec3::new(t[3 * i] as f64, t[3 * i + 1] as f64, t[3 * i + 2] as f64),
                )
            })
            .collect()
    }

    pub fn fovs(&self) -> Vec<f64> {
        self.fov.data().iter().map(|&f| f as f64).collect()
    }
}

/// Network outputs for one snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub reference: usize,
    pub timestamps: Vec<f64>,
    pub p_points: Tensor<f32>,
    pub p_conf: Tensor<f32>,
    pub q_points: Tensor<f32>,
    pub q_conf: Tensor<f32>,
    pub camera: CameraPrediction,
}

fn to_maps(points: &Tensor<f32>, conf: &Tensor<f32>, time: impl Fn(usize) -> usize) -> Vec<PointMap> {
    let s = points.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    (0..n)
        .map(|i| {
            let mut m = PointMap::empty(w, h).with_indices(i, time(i));
            let pts = &points.data()[3 * hw * i..3 * hw * (i + 1)];
            for (k, p) in pts.chunks_exact(3).enumerate() {
                m.points[k] = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                m.valid[k] = true;
            }
            for (k, c) in conf.data()[hw * i..hw * (i + 1)].iter().enumerate() {
                m.confidence[k] = *c as f64;
            }
            m
        })
        .collect()
}

impl Prediction {
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    /// `𝒫`: `P_i(t_i)` for every frame.
    pub fn time_variant(&self) -> Vec<PointMap> {
        to_maps(&self.p_points, &self.p_conf, |i| i)
    }

    /// `𝒬`: `P_i(t_j)` for every frame.
    pub fn time_invariant(&self) -> Vec<PointMap> {
        let j = self.reference;
        to_maps(&self.q_points, &self.q_conf, |_| j)
    }

    pub fn dpm_set(&self) -> Result<DpmSet> {
        DpmSet::new(
            self.timestamps.clone(),
            self.reference,
            self.time_variant(),
            self.time_invariant(),
        )
    }
}

/// Main-stream values kept for decoding other target times.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCache {
    timestamps: Vec<f64>,
    taps: Vec<Tensor<f32>>,
    kv: Vec<(Tensor<f32>, Tensor<f32>)>,
    p_points: Tensor<f32>,
    p_conf: Tensor<f32>,
    camera: CameraPrediction,
}

impl DecodeCache {
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = Weights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<f32>) -> Result<Self> {
        config.validate()?;
        weights.check_layout(&config)?;
        Ok(Self { config, weights })
    }

    /// `𝒫`, `𝒬` (at reference time `t_j`) and cameras, plus the cache that
    /// [`Model::decode_at_time`] needs.
    pub fn full_forward(&self, input: &ModelInput, j: usize) -> Result<(Prediction, DecodeCache)> {
        check_reference(input.frames(), j)?;
        let tape = Tape::new();
        let p = Params::constants(&tape, &self.weights);
        let main = main_stream(&self.config, &p, input)?;
        let camera = CameraPrediction {
            translation: main.camera.translation.value(),
            quat: main.camera.quat.value(),
            fov: main.camera.fov.value(),
        };
        let t_hat = time_stream(&self.config, &p, &main.kv, &input.timestamps, j)?;
        let q = time_invariant_head(&self.config, &p, &main.taps, &main.time_variant, t_hat, j)?;
        let pred = Prediction {
            reference: j,
            timestamps: input.timestamps.clone(),
            p_points: main.time_variant.points.value(),
            p_conf: main.time_variant.conf.value(),
            q_points: q.points.value(),
            q_conf: q.conf.value(),
            camera: camera.clone(),
        };
        let cache = DecodeCache {
            timestamps: input.timestamps.clone(),
            taps: main.taps.iter().map(|t| t.value()).collect(),
            kv: main.kv.iter().map(|(k, v)| (k.value(), v.value())).collect(),
            p_points: pred.p_points.clone(),
            p_conf: pred.p_conf.clone(),
            camera,
        };
        Ok((pred, cache))
    }

    /// Re-decodes `𝒬` for reference index `j` without re-running the backbone.
    pub fn decode_at_time(&self, cache: &DecodeCache, j: usize) -> Result<Prediction> {
        check_reference(cache.frames(), j)?;
        let tape = Tape::new();
        let p = Params::constants(&tape, &self.weights);
        let taps: Vec<_> = cache.taps.iter().map(|t| tape.constant(t.clone())).collect();
        let kv: Vec<_> = cache
            .kv
            .iter()
            .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
            .collect();
        let tv = HeadOutput {
            points: tape.constant(cache.p_points.clone()),
            conf: tape.constant(cache.p_conf.clone()),
        };
        let t_hat = time_stream(&self.config, &p, &kv, &cache.timestamps, j)?;
        let q = time_invariant_head(&self.config, &p, &taps, &tv, t_hat, j)?;
        Ok(Prediction {
            reference: j,
            timestamps: cache.timestamps.clone(),
            p_points: cache.p_points.clone(),
            p_conf: cache.p_conf.clone(),
            q_points: q.points.value(),
            q_conf: q.conf.value(),
            camera: cache.camera.clone(),
        })
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            step,
        };
        let mut w = format::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header)?;
        w.u32(self.weights.len() as u32);
        for (name, t) in self.weights.iter() {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.rank() as u32);
            for &e in t.shape() {
                w.u64(e as u64);
            }
            w.f32s(t.data().iter().copied());
        }
        format::write(path, w)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = format::read_bytes(path)?;
        let (header, mut r): (CheckpointHeader, _) =
            format::decode(&data, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        header
            .config
            .validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let count = r.u32()? as usize;
        let mut weights = Weights::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.error("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| r.error("parameter extent overflow"))?;
            let values = r.f32s(n)?;
            weights.insert(name, Tensor::new(shape, values)?);
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes after parameters"));
        }
        weights
            .check_layout(&header.config)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Checkpoint {
            model: Model {
                config: header.config,
                weights,
            },
            step: header.step,
        })
    }

    /// Loads a checkpoint and fails unless its config equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
        let ck = Self::load(path)?;
        if &ck.model.config != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was written with a different model config ({})",
                path.display(),
                config_diff(&ck.model.config, expected).join(", ")
            )));
        }
        Ok(ck)
    }
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return vec![];
    };
    ma.iter()
        .filter(|(k, v)| mb.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: file {v}, expected {}", mb[k]))
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VDPM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
}

/// Holds the cache of the last forward pass.
pub struct Session<'m> {
    model: &'m Model,
    cache: Option<DecodeCache>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, cache: None }
    }

    pub fn full_forward(&mut self, input: &ModelInput, j: usize) -> Result<Prediction> {
        let (pred, cache) = self.model.full_forward(input, j)?;
        self.cache = Some(cache);
        Ok(pred)
    }

    pub fn decode_at_time(&self, j: usize) -> Result<Prediction> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::CacheMiss("decode_at_time before any full_forward".into()))?;
        self.model.decode_at_time(cache, j)
    }

    pub fn clear(&mut self) {
        self.cache = None;
    }
}
