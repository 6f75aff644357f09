//! Finite-difference checks of the network's building blocks and of the
//! whole forward pass, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vdpm_tensor::gradcheck::{check, check_selected, op_cases, GradcheckConfig, GradcheckReport};
use vdpm_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{
    backbone_block, camera_head, forward, time_decoder, Conditioning, DecoderKind, ModelConfig, ModelInput,
    Params, Weights,
};

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

impl CheckLine {
    fn from_report(name: impl Into<String>, r: &GradcheckReport) -> Self {
        Self {
            name: name.into(),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            rel_tol: r.rel_tol,
            passed: r.passed(),
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn named(w: &Weights<f64>, prefix: &str) -> Vec<String> {
    w.names().into_iter().filter(|n| n.starts_with(prefix)).collect()
}

/// Every tensor op on `trials` random instances each.
pub fn op_suite(trials: u64) -> Result<Vec<CheckLine>> {
    op_cases()
        .iter()
        .map(|c| {
            let r = (c.run)(trials).map_err(Error::from)?;
            Ok(CheckLine {
                name: format!("op {}", r.name),
                checked: r.trials as usize,
                max_rel_error: r.max_rel_error,
                rel_tol: r.rel_tol,
                passed: r.passed(),
            })
        })
        .collect()
}

fn backbone_check(cfg: &ModelConfig, seed: u64, global: bool) -> Result<CheckLine> {
    let w = Weights::<f64>::init(cfg, seed)?;
    let prefix = "backbone.0";
    let names = named(&w, &format!("{prefix}."));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let d = cfg.embed_dim;
    let mut inputs = vec![random(&mut rng, &[2, 3, d], 1.0)];
    inputs.extend(names.iter().map(|n| w.get(n).unwrap().clone()));
    let proj = random(&mut rng, &[2, 3, d], 1.0);
    let r = check(
        &inputs,
        |tape, vars| {
            let p = Params::from_vars(tape, names.iter().cloned().zip(vars[1..].iter().copied()));
            let (y, _, _) = backbone_block(&p, prefix, vars[0], cfg.heads, global).map_err(to_tensor)?;
            Ok(y.mul(tape.constant(proj.clone()))?.sum_all())
        },
        GradcheckConfig::default(),
    )
    .map_err(Error::from)?;
    let mode = if global { "global" } else { "frame" };
    Ok(CheckLine::from_report(format!("backbone block ({mode} attention)"), &r))
}

fn decoder_check(cfg: &ModelConfig, seed: u64, conditioning: Conditioning) -> Result<CheckLine> {
    let cfg = ModelConfig {
        conditioning,
        decoder_kind: DecoderKind::Transformer,
        ..cfg.clone()
    };
    let mut w = Weights::<f64>::init(&cfg, seed)?;
    w.perturb(|n| n.contains(".gate."), 0.5, seed + 1);
    let names = named(&w, "decoder.");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let d = cfg.embed_dim;
    let mut inputs: Vec<Tensor<f64>> = (0..4).map(|_| random(&mut rng, &[2, 4, d], 1.0)).collect();
    inputs.push(random(&mut rng, &[d], 1.0));
    inputs.extend(names.iter().map(|n| w.get(n).unwrap().clone()));
    let proj: Vec<Tensor<f64>> = (0..4).map(|_| random(&mut rng, &[2, 4, d], 0.1)).collect();
    let r = check(
        &inputs,
        |tape, vars| {
            let p = Params::from_vars(tape, names.iter().cloned().zip(vars[5..].iter().copied()));
            let out = time_decoder(&cfg, &p, &vars[..4], vars[4], 1).map_err(to_tensor)?;
            let mut loss = tape.scalar(0.0);
            for (o, r) in out.iter().zip(&proj) {
                loss = loss.add(o.mul(tape.constant(r.clone()))?.sum_all())?;
            }
            Ok(loss)
        },
        GradcheckConfig::default(),
    )
    .map_err(Error::from)?;
    let label = match conditioning {
        Conditioning::Adaln => "adaLN",
        Conditioning::Addition => "addition",
    };
    Ok(CheckLine::from_report(format!("decoder blocks ({label})"), &r))
}

fn camera_check(cfg: &ModelConfig, seed: u64) -> Result<CheckLine> {
    let w = Weights::<f64>::init(cfg, seed)?;
    let names = named(&w, "camera_head.");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut inputs = vec![random(&mut rng, &[3, cfg.embed_dim], 1.0)];
    inputs.extend(names.iter().map(|n| w.get(n).unwrap().clone()));
    let pt = random(&mut rng, &[3, 3], 1.0);
    let pq = random(&mut rng, &[3, 4], 1.0);
    let pf = random(&mut rng, &[3], 1.0);
    let r = check(
        &inputs,
        |tape, vars| {
            let p = Params::from_vars(tape, names.iter().cloned().zip(vars[1..].iter().copied()));
            let cam = camera_head(&p, vars[0]).map_err(to_tensor)?;
            let c = |t: &Tensor<f64>| tape.constant(t.clone());
            let t = cam.translation.mul(c(&pt))?.sum_all();
            let q = cam.quat.mul(c(&pq))?.sum_all();
            let f = cam.fov.reshape(&[3])?.mul(c(&pf))?.sum_all();
            t.add(q)?.add(f)
        },
        GradcheckConfig::default(),
    )
    .map_err(Error::from)?;
    Ok(CheckLine::from_report("camera head", &r))
}

/// Spot check of `elements` random parameter entries through the full
/// forward pass with gates perturbed away from zero. The loss sums many
/// outputs, so central differences carry about 1e-9 of rounding noise;
/// the denominator floor sits above it.
pub fn whole_model_check(cfg: &ModelConfig, kind: DecoderKind, seed: u64, elements: usize) -> Result<CheckLine> {
    let cfg = ModelConfig {
        decoder_kind: kind,
        ..cfg.clone()
    };
    let mut w = Weights::<f64>::init(&cfg, seed)?;
    w.perturb(|n| n.contains(".gate.") || n.starts_with("qhead.mod"), 0.5, seed + 1);
    let names = w.names();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| w.get(n).unwrap().clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let n = 2;
    let images = Tensor::from_fn([n, cfg.channels, cfg.image_height, cfg.image_width], |_| {
        rng.random_range(0.0..1.0)
    });
    let input = ModelInput {
        images,
        timestamps: vec![0.0, 0.4],
    };
    let (h, wd) = (cfg.image_height, cfg.image_width);
    let pp = random(&mut rng, &[n, h, wd, 3], 1.0);
    let qp = random(&mut rng, &[n, h, wd, 3], 1.0);
    let cp = random(&mut rng, &[n, h, wd], 0.1);
    let tp = random(&mut rng, &[n, 3], 1.0);
    let selection: Vec<(usize, usize)> = (0..elements)
        .map(|_| {
            let i = rng.random_range(0..inputs.len());
            (i, rng.random_range(0..inputs[i].len()))
        })
        .collect();
    let r = check_selected(
        &inputs,
        &selection,
        |tape, vars| {
            let p = Params::from_vars(tape, names.iter().cloned().zip(vars.iter().copied()));
            let f = forward(&cfg, &p, &input, 0).map_err(to_tensor)?;
            let c = |t: &Tensor<f64>| tape.constant(t.clone());
            let a = f.main.time_variant.points.mul(c(&pp))?.sum_all();
            let b = f.time_invariant.points.mul(c(&qp))?.sum_all();
            let d = f.time_invariant.conf.log().mul(c(&cp))?.sum_all();
            let e = f.main.camera.translation.mul(c(&tp))?.sum_all();
            let g = f.main.camera.fov.sum_all().add(f.main.camera.quat.slice(1, 0, 1)?.sum_all())?;
            a.add(b)?.add(d)?.add(e)?.add(g)
        },
        GradcheckConfig {
            rel_tol: 1e-3,
            floor: 1e-5,
            ..GradcheckConfig::default()
        },
    )
    .map_err(Error::from)?;
    let label = match kind {
        DecoderKind::Transformer => "transformer decoder",
        DecoderKind::HeadOnly => "head-only",
    };
    Ok(CheckLine::from_report(format!("whole model ({label})"), &r))
}

fn to_tensor(e: Error) -> vdpm_tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => vdpm_tensor::TensorError::InvalidShape {
            op: "model",
            shape: Vec::new(),
            reason: other.to_string(),
        },
    }
}

/// Blocks checked in full (tolerance 1e-4) and the whole model spot-checked
/// (tolerance 1e-3).
pub fn model_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<CheckLine>> {
    cfg.validate()?;
    Ok(vec![
        backbone_check(cfg, seed, false)?,
        backbone_check(cfg, seed + 10, true)?,
        decoder_check(cfg, seed + 20, Conditioning::Adaln)?,
        decoder_check(cfg, seed + 30, Conditioning::Addition)?,
        camera_check(cfg, seed + 40)?,
        whole_model_check(cfg, DecoderKind::Transformer, seed + 50, 20)?,
        whole_model_check(cfg, DecoderKind::HeadOnly, seed + 60, 20)?,
    ])
}

pub fn report_lines(lines: &[CheckLine]) -> String {
    lines
        .iter()
        .map(|l| {
            format!(
                "{} {}: max rel err {:.2e} (tol {:.0e}, {} checked)\n",
                if l.passed { "PASS" } else { "FAIL" },
                l.name,
                l.max_rel_error,
                l.rel_tol,
                l.checked
            )
        })
        .collect()
}
