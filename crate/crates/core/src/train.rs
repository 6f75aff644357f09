//! Variable-length snippet sampling, AdamW with warmup and cosine decay, and
//! the checkpointed training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vdpm_tensor::{Float, Tape, Tensor};

use crate::error::{Error, Result};
use crate::eval::epe;
use crate::format;
use crate::loss::{snippet_loss, LossConfig, SnippetTarget};
use crate::model::{forward, Model, ModelInput, Params, Weights};
use crate::par;
use crate::scenegen::{GeneratorConfig, Sequence, Snippet};

const BATCH_STREAM: u64 = 0x1_0000;
const VAL_STREAM: u64 = 0x4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub snippet_lengths: Vec<usize>,
    pub batch_size_by_length: BTreeMap<usize, usize>,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub dynamic_weight: f64,
    pub static_weight: f64,
    /// Temporal spacing between consecutive sampled frames, chosen uniformly.
    pub frame_strides: Vec<usize>,
    pub val_snippets: usize,
    pub val_length: usize,
    pub val_spacing: usize,
    /// Validation every this many steps (0: only at the start and end).
    pub eval_every: usize,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            snippet_lengths: vec![5, 9, 13, 19],
            batch_size_by_length: [(5, 4), (9, 2), (13, 2), (19, 1)].into_iter().collect(),
            base_lr: 1.5e-4,
            warmup_steps: 100,
            total_steps: 3000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
            seed: 0,
            dynamic_weight: 3.0,
            static_weight: 1.0,
            frame_strides: vec![1, 2],
            val_snippets: 32,
            val_length: 5,
            val_spacing: 2,
            eval_every: 250,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, gen: &GeneratorConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.snippet_lengths.is_empty() {
            return fail("snippet_lengths is empty".into());
        }
        for &l in &self.snippet_lengths {
            match self.batch_size_by_length.get(&l) {
                Some(&b) if b >= 1 => {}
                _ => return fail(format!("no batch size >= 1 for snippet length {l}")),
            }
            if l == 0 || l > gen.max_frames {
                return fail(format!("snippet length {l} outside 1..={}", gen.max_frames));
            }
        }
        if self.total_steps > 0 && self.total_steps <= self.warmup_steps {
            return fail(format!(
                "total_steps {} must exceed warmup_steps {}",
                self.total_steps, self.warmup_steps
            ));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return fail("base_lr must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps > 0".into());
        }
        if self.dynamic_weight < 0.0
            || self.static_weight < 0.0
            || !(self.dynamic_weight + self.static_weight > 0.0)
        {
            return fail("mixture weights must be >= 0 with a positive sum".into());
        }
        if self.frame_strides.is_empty() || self.frame_strides.contains(&0) {
            return fail("frame_strides must be nonempty and positive".into());
        }
        if self.val_length == 0 || self.val_spacing == 0 || (self.val_length - 1) * self.val_spacing >= gen.max_frames {
            return fail("validation snippets do not fit the sequence length".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One training example: a snippet, its reference index and normalized targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub snippet: Snippet,
    pub reference: usize,
    pub target: SnippetTarget,
}

impl Example {
    pub fn new(seq: &Sequence, frames: &[usize], reference: usize) -> Result<Self> {
        let snippet = seq.snippet(frames)?;
        let target = SnippetTarget::from_scene(&seq.scene, &snippet, reference)?;
        Ok(Self {
            snippet,
            reference,
            target,
        })
    }
}

fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM + step as u64);
    rng
}

/// Draws one batch: a snippet length, then that many examples with random
/// scenes, spacing, start frame and reference index.
pub fn sample_batch(rng: &mut ChaCha8Rng, cfg: &TrainConfig, gen: &GeneratorConfig) -> Result<Vec<Example>> {
    let len = cfg.snippet_lengths[rng.random_range(0..cfg.snippet_lengths.len())];
    let size = *cfg
        .batch_size_by_length
        .get(&len)
        .ok_or_else(|| Error::Config(format!("no batch size for length {len}")))?;
    let static_gen = gen.static_variant();
    let p_static = cfg.static_weight / (cfg.static_weight + cfg.dynamic_weight);
    let specs: Vec<(u64, bool, usize, usize, usize)> = (0..size)
        .map(|_| {
            let seed: u64 = rng.random();
            let is_static = rng.random_bool(p_static);
            let fits: Vec<usize> = cfg
                .frame_strides
                .iter()
                .copied()
                .filter(|&s| (len - 1) * s < gen.max_frames)
                .collect();
            let stride = if fits.is_empty() { 1 } else { fits[rng.random_range(0..fits.len())] };
            let span = (len - 1) * stride + 1;
            let start = rng.random_range(0..=gen.max_frames.saturating_sub(span));
            let reference = rng.random_range(0..len);
            (seed, is_static, stride, start, reference)
        })
        .collect();
    par::map(&specs, |_, &(seed, is_static, stride, start, reference)| {
        let g = if is_static { &static_gen } else { gen };
        let seq = Sequence::generate(seed, g)?;
        let frames: Vec<usize> = (0..len).map(|k| start + k * stride).collect();
        Example::new(&seq, &frames, reference)
    })
    .into_iter()
    .collect()
}

/// The fixed validation snippets: reference index cycles through the frames.
pub fn validation_set(cfg: &TrainConfig, gen: &GeneratorConfig) -> Result<Vec<Example>> {
    par::map_range(cfg.val_snippets, |k| {
        let (seq, snippet) =
            crate::eval::trial_snippet(gen, cfg.seed, VAL_STREAM, k, cfg.val_length, cfg.val_spacing)?;
        let reference = k % cfg.val_length;
        let target = SnippetTarget::from_scene(&seq.scene, &snippet, reference)?;
        Ok(Example {
            snippet,
            reference,
            target,
        })
    })
    .into_iter()
    .collect()
}

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

pub struct ExampleResult<T: Float> {
    pub loss: f64,
    pub map_loss: f64,
    pub pose_loss: f64,
    pub empty_maps: usize,
    pub grads: Grads<T>,
}

/// Loss and parameter gradients for one example.
pub fn example_gradients<T: Float>(
    model_cfg: &crate::model::ModelConfig,
    weights: &Weights<T>,
    ex: &Example,
    loss_cfg: &LossConfig,
) -> Result<ExampleResult<T>> {
    let tape = Tape::new();
    let p = Params::leaves(&tape, weights);
    let input = ModelInput::from_snippet(&ex.snippet)?.cast::<T>();
    let out = forward(model_cfg, &p, &input, ex.reference)?;
    let l = snippet_loss(&out, &ex.target, loss_cfg)?;
    let (loss, map_loss, pose_loss) = (l.total.item().as_f64(), l.maps.item().as_f64(), l.pose.item().as_f64());
    let ids: Vec<(String, usize)> = p.iter().map(|(n, v)| (n.to_string(), v.id())).collect();
    let mut g = tape.backward(l.total)?;
    let grads = ids
        .into_iter()
        .map(|(name, id)| {
            let t = g
                .take_id(id)
                .unwrap_or_else(|| Tensor::zeros(weights.get(&name).unwrap().shape().to_vec()));
            (name, t)
        })
        .collect();
    Ok(ExampleResult {
        loss,
        map_loss,
        pose_loss,
        empty_maps: l.empty_maps,
        grads,
    })
}

/// Per-example losses averaged over the batch, gradients likewise.
pub struct BatchResult<T: Float> {
    pub loss: f64,
    pub map_loss: f64,
    pub pose_loss: f64,
    pub empty_maps: usize,
    pub grads: Grads<T>,
}

pub fn batch_gradients<T: Float>(
    model_cfg: &crate::model::ModelConfig,
    weights: &Weights<T>,
    batch: &[Example],
    loss_cfg: &LossConfig,
) -> Result<BatchResult<T>> {
    if batch.is_empty() {
        return Err(Error::EmptySet("empty batch".into()));
    }
    let results = par::map(batch, |_, ex| example_gradients(model_cfg, weights, ex, loss_cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut grads: Grads<T> = BTreeMap::new();
    for r in &results {
        for (name, g) in &r.grads {
            match grads.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                None => {
                    grads.insert(name.clone(), g.clone());
                }
            }
        }
    }
    let s = T::from_f64(inv);
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    let avg = |f: fn(&ExampleResult<T>) -> f64| results.iter().map(f).sum::<f64>() * inv;
    Ok(BatchResult {
        loss: avg(|r| r.loss),
        map_loss: avg(|r| r.map_loss),
        pose_loss: avg(|r| r.pose_loss),
        empty_maps: results.iter().map(|r| r.empty_maps).sum(),
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// AdamW moments and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Float = f32> {
    pub params: AdamWParams,
    pub m: Grads<T>,
    pub v: Grads<T>,
    /// Applied updates.
    pub t: u64,
    /// Updates skipped because of non-finite gradients.
    pub skipped: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: AdamWParams) -> Self {
        Self {
            params,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            skipped: 0,
        }
    }
}

/// Decoupled weight decay applies to matrices (names ending in `.w`) only.
fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// One AdamW update with learning rate `lr`; returns false (and counts a
/// skip) when any gradient is non-finite.
pub fn adamw_step<T: Float>(weights: &mut Weights<T>, grads: &Grads<T>, lr: f64, opt: &mut AdamW<T>) -> Result<bool> {
    if grads.values().any(|g| !g.all_finite()) {
        opt.skipped += 1;
        return Ok(false);
    }
    for (name, g) in grads {
        let w = weights
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if w.shape() != g.shape() {
            return Err(Error::Contract(format!("gradient shape mismatch for {name}")));
        }
    }
    opt.t += 1;
    let AdamWParams {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = opt.params;
    let bc1 = 1.0 - beta1.powi(opt.t as i32);
    let bc2 = 1.0 - beta2.powi(opt.t as i32);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one, lr_t) = (T::one(), T::from_f64(lr));
    let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
    let eps_t = T::from_f64(eps);
    for (name, g) in grads {
        let w = weights.get_mut(name).unwrap();
        let m = opt.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = opt.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let decay = if decays(name) { T::from_f64(lr * weight_decay) } else { T::zero() };
        for (((wi, mi), vi), &gi) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let update = (*mi * inv_bc1) / ((*vi * inv_bc2).sqrt() + eps_t);
            *wi = *wi - decay * *wi - lr_t * update;
        }
    }
    Ok(true)
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter().map(|x| x.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

const OPT_MAGIC: &[u8; 4] = b"VDPO";
const OPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptHeader {
    params: AdamWParams,
    t: u64,
    skipped: u64,
    names: Vec<String>,
    sizes: Vec<usize>,
}

impl AdamW<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self.m.keys().cloned().collect();
        let header = OptHeader {
            params: self.params.clone(),
            t: self.t,
            skipped: self.skipped,
            sizes: names.iter().map(|n| self.m[n].len()).collect(),
            names,
        };
        let mut w = format::encode(OPT_MAGIC, OPT_VERSION, &header)?;
        for name in &header.names {
            w.f32s(self.m[name].data().iter().copied());
            w.f32s(self.v[name].data().iter().copied());
        }
        format::write(path, w)
    }

    /// Loads moments; shapes are taken from `weights`.
    pub fn load(path: &Path, weights: &Weights<f32>) -> Result<Self> {
        let data = format::read_bytes(path)?;
        let (h, mut r): (OptHeader, _) = format::decode(&data, path, OPT_MAGIC, OPT_VERSION)?;
        if h.names.len() != h.sizes.len() {
            return Err(r.error("name and size lists differ"));
        }
        let mut opt = AdamW::new(h.params);
        opt.t = h.t;
        opt.skipped = h.skipped;
        for (name, &size) in h.names.iter().zip(&h.sizes) {
            let shape = weights
                .get(name)
                .ok_or_else(|| r.error(format!("moments for unknown parameter {name}")))?
                .shape()
                .to_vec();
            if shape.iter().product::<usize>() != size {
                return Err(r.error(format!("moment size mismatch for {name}")));
            }
            opt.m.insert(name.clone(), Tensor::new(shape.clone(), r.f32s(size)?)?);
            opt.v.insert(name.clone(), Tensor::new(shape, r.f32s(size)?)?);
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes"));
        }
        Ok(opt)
    }
}

/// Mean loss and mean EPE over the distinct maps of the validation examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub epe: f64,
}

pub fn validate(model: &Model, val: &[Example], loss_cfg: &LossConfig) -> Result<Validation> {
    let per = par::map(val, |_, ex| -> Result<(f64, f64)> {
        let tape = Tape::new();
        let p = Params::constants(&tape, &model.weights);
        let input = ModelInput::from_snippet(&ex.snippet)?;
        let out = forward(&model.config, &p, &input, ex.reference)?;
        let loss = snippet_loss(&out, &ex.target, loss_cfg)?.total.item() as f64;
        let pred = {
            crate::model::Prediction {
                reference: ex.reference,
                timestamps: ex.snippet.timestamps.clone(),
                p_points: out.main.time_variant.points.value(),
                p_conf: out.main.time_variant.conf.value(),
                q_points: out.time_invariant.points.value(),
                q_conf: out.time_invariant.conf.value(),
                camera: crate::model::CameraPrediction {
                    translation: out.main.camera.translation.value(),
                    quat: out.main.camera.quat.value(),
                    fov: out.main.camera.fov.value(),
                },
            }
        };
        let (p_maps, q_maps) = (pred.time_variant(), pred.time_invariant());
        let mut errs = Vec::new();
        for (i, m) in p_maps.iter().enumerate() {
            errs.push(epe(m, &ex.target.time_variant[i])?);
        }
        for (i, m) in q_maps.iter().enumerate() {
            if i != ex.reference && ex.target.time_invariant[i].valid_count() > 0 {
                errs.push(epe(m, &ex.target.time_invariant[i])?);
            }
        }
        Ok((loss, errs.iter().sum::<f64>() / errs.len() as f64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = per.len().max(1) as f64;
    Ok(Validation {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        epe: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub map_loss: Option<f64>,
    pub pose_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: Option<f64>,
    pub skipped_steps: u64,
    pub val_loss: Option<f64>,
    pub val_epe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from the checkpoint in `out_dir` if one exists.
    pub resume: bool,
    /// Stop after this step even if `total_steps` is larger (for resume tests).
    pub stop_after: Option<usize>,
    /// Print one progress line per validation.
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            resume: false,
            stop_after: None,
            verbose: false,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.vdpm")
    }

    pub fn optimizer_path(&self) -> PathBuf {
        self.out_dir.join("optimizer.vdpo")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.jsonl")
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub steps_run: usize,
    pub skipped_steps: u64,
}

fn append_record(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Contract(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn save_state(model: &Model, opt: &AdamW<f32>, step: usize, o: &TrainOptions) -> Result<()> {
    model.save(&o.checkpoint_path(), step as u64)?;
    opt.save(&o.optimizer_path())
}

/// Runs `total_steps` of sample → forward → loss → backward → AdamW.
///
/// Step `s` uses the batch drawn from `(seed, s)`, so a resumed run replays
/// exactly the batches of an uninterrupted one.
pub fn train_loop(
    model: Model,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    gen: &GeneratorConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate(gen)?;
    loss_cfg.validate()?;
    gen.validate()?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let val = validation_set(cfg, gen)?;

    let (mut model, mut opt, start, mut records) = if opts.resume && opts.checkpoint_path().exists() {
        let ck = Model::load_expecting(&opts.checkpoint_path(), &model.config)?;
        let opt = AdamW::load(&opts.optimizer_path(), &ck.model.weights)?;
        let start = ck.step as usize;
        let records: Vec<MetricsRecord> = if opts.metrics_path().exists() {
            read_records(&opts.metrics_path())?
                .into_iter()
                .filter(|r| r.step <= start)
                .collect()
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?);
            text.push('\n');
        }
        fs::write(opts.metrics_path(), text).map_err(|e| Error::io(opts.metrics_path(), e))?;
        (ck.model, opt, start, records)
    } else {
        let _ = fs::remove_file(opts.metrics_path());
        let opt = AdamW::new(AdamWParams::from(cfg));
        let v = validate(&model, &val, loss_cfg)?;
        let rec = MetricsRecord {
            step: 0,
            loss: None,
            map_loss: None,
            pose_loss: None,
            lr: lr_at(cfg, 0),
            grad_norm: None,
            skipped_steps: 0,
            val_loss: Some(v.loss),
            val_epe: Some(v.epe),
        };
        append_record(&opts.metrics_path(), &rec)?;
        save_state(&model, &opt, 0, opts)?;
        (model, opt, 0, vec![rec])
    };

    let end = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    for step in start..end {
        let batch = sample_batch(&mut batch_rng(cfg.seed, step), cfg, gen)?;
        let mut b = batch_gradients(&model.config, &model.weights, &batch, loss_cfg)?;
        let norm = match cfg.max_grad_norm {
            Some(max) => clip_grad_norm(&mut b.grads, max),
            None => clip_grad_norm(&mut b.grads, f64::INFINITY),
        };
        let lr = lr_at(cfg, step);
        adamw_step(&mut model.weights, &b.grads, lr, &mut opt)?;
        let done = step + 1;
        let evaluate = done == cfg.total_steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let v = if evaluate { Some(validate(&model, &val, loss_cfg)?) } else { None };
        let rec = MetricsRecord {
            step: done,
            loss: Some(b.loss),
            map_loss: Some(b.map_loss),
            pose_loss: Some(b.pose_loss),
            lr,
            grad_norm: Some(norm),
            skipped_steps: opt.skipped,
            val_loss: v.map(|v| v.loss),
            val_epe: v.map(|v| v.epe),
        };
        if opts.verbose && evaluate {
            eprintln!(
                "step {done}: loss {:.4} val_loss {:.4} val_epe {:.4} lr {lr:.2e}",
                b.loss,
                rec.val_loss.unwrap(),
                rec.val_epe.unwrap()
            );
        }
        append_record(&opts.metrics_path(), &rec)?;
        records.push(rec);
        if done == end || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save_state(&model, &opt, done, opts)?;
        }
    }
    Ok(TrainReport {
        steps_run: end.saturating_sub(start),
        skipped_steps: opt.skipped,
        model,
        records,
    })
}
