//! Finite-difference verification of every layer and loss in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, UtteranceFeatures};
use crate::error::Result;
use crate::losses::{
    bce_bag_loss, combined_loss, contrastive_rep_loss_with, draw_negatives, ActiveLosses, LossInputs, Negatives, BCE_EPS,
};
use crate::model::{ConvLayerConfig, OutputGrads, Parameters, SpeechModel, SpeechModelConfig, VisionProjection};
use crate::numerics::{
    conv1d, conv1d_backward, cosine_distance, cosine_distance_backward, grad_check, grad_check_piecewise, linear, linear_backward,
    max_pool_over_time, max_pool_over_time_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax,
    softmax_backward, Conv1dSpec, GradCheckReport, Padding, Tensor,
};
use crate::tagger::{Tagger, TaggerConfig};
use crate::training::{batch_gradient, BatchData, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            base_seed: 0,
            epsilon: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub seeds: usize,
    /// One merged report per check, worst error over all seeds.
    pub checks: Vec<GradCheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Checks over tolerance, or with too few coordinates compared for the
    /// error to mean anything.
    pub fn failures(&self) -> Vec<&GradCheckReport> {
        self.checks
            .iter()
            .filter(|c| !c.passed(self.tolerance) || c.checked == 0 || c.skipped * 10 > c.checked + c.skipped)
            .collect()
    }

    pub fn check(&self, op: &str) -> Option<&GradCheckReport> {
        self.checks.iter().find(|c| c.op == op)
    }
}

type Check = fn(&mut ChaCha8Rng, f64) -> Result<Vec<GradCheckReport>>;

const CHECKS: &[Check] = &[
    check_linear,
    check_conv1d,
    check_activations,
    check_max_pool,
    check_cosine,
    check_bce,
    check_rep,
    check_speech_model,
    check_projection,
    check_tagger,
    check_combined,
];

/// Runs every check for `seeds` seeds and merges the reports by op name.
pub fn run_grad_suite(config: &GradSuiteConfig) -> Result<SuiteReport> {
    let mut checks: Vec<GradCheckReport> = Vec::new();
    for s in 0..config.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.base_seed, s as u64));
        for check in CHECKS {
            for r in check(&mut rng, config.epsilon)? {
                match checks.iter_mut().find(|c| c.op == r.op) {
                    Some(c) => c.merge(&r),
                    None => checks.push(r),
                }
            }
        }
    }
    Ok(SuiteReport {
        tolerance: config.tolerance,
        seeds: config.seeds,
        checks,
    })
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniforms(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Moves parameters off their initialization. Zero biases put padded frames
/// and dead layers exactly on the ReLU kink, where no gradient exists.
fn jitter<P: Parameters<f64>>(params: &mut P, rng: &mut ChaCha8Rng) {
    let flat: Vec<f64> = params
        .to_flat()
        .into_iter()
        .map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    params.load_flat(&flat);
}

fn weighted_sum(w: &[f64], y: &[f64]) -> f64 {
    w.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn check_linear(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let (i, o) = (rng.random_range(1..6), rng.random_range(1..6));
    let x = normals(rng, i, 1.0);
    let w = normals(rng, o * i, 0.5);
    let b = normals(rng, o, 0.5);
    let r = normals(rng, o, 1.0);
    let eval = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
        let y = linear(
            &Tensor::vector(x.to_vec()),
            &Tensor::matrix(o, i, w.to_vec()).unwrap(),
            &Tensor::vector(b.to_vec()),
        )
        .unwrap();
        weighted_sum(&r, y.data())
    };
    let (mut gw, mut gb) = (vec![0.0; o * i], vec![0.0; o]);
    let gx = linear_backward(
        &Tensor::vector(x.clone()),
        &Tensor::matrix(o, i, w.clone())?,
        &r,
        &mut gw,
        &mut gb,
    );
    Ok(vec![
        grad_check("linear/input", |p| eval(p, &w, &b), &x, gx.data(), eps),
        grad_check("linear/weight", |p| eval(&x, p, &b), &w, &gw, eps),
        grad_check("linear/bias", |p| eval(&x, &w, p), &b, &gb, eps),
    ])
}

fn check_conv1d(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (name, stride, padding) in [
        ("conv1d/same", 1, Padding::Same),
        ("conv1d/same-stride2", 2, Padding::Same),
        ("conv1d/valid-stride2", 2, Padding::Valid),
    ] {
        let (c_in, c_out, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let t = rng.random_range(k..k + 6);
        let spec = Conv1dSpec::new(stride, padding);
        let x = normals(rng, t * c_in, 1.0);
        let kern = normals(rng, c_out * k * c_in, 0.5);
        let b = normals(rng, c_out, 0.5);
        let out_len = conv1d(
            &Tensor::matrix(t, c_in, x.clone())?,
            &Tensor::new(vec![c_out, k, c_in], kern.clone())?,
            &Tensor::vector(b.clone()),
            spec,
        )?
        .len();
        let r = normals(rng, out_len, 1.0);
        let eval = |x: &[f64], kern: &[f64], b: &[f64]| -> f64 {
            let y = conv1d(
                &Tensor::matrix(t, c_in, x.to_vec()).unwrap(),
                &Tensor::new(vec![c_out, k, c_in], kern.to_vec()).unwrap(),
                &Tensor::vector(b.to_vec()),
                spec,
            )
            .unwrap();
            weighted_sum(&r, y.data())
        };
        let (mut gk, mut gb) = (vec![0.0; kern.len()], vec![0.0; c_out]);
        let gx = conv1d_backward(
            &Tensor::matrix(t, c_in, x.clone())?,
            &Tensor::new(vec![c_out, k, c_in], kern.clone())?,
            spec,
            &r,
            &mut gk,
            &mut gb,
            true,
        )?
        .expect("input gradient requested");
        out.push(grad_check(&format!("{name}/input"), |p| eval(p, &kern, &b), &x, gx.data(), eps));
        out.push(grad_check(&format!("{name}/kernels"), |p| eval(&x, p, &b), &kern, &gk, eps));
        out.push(grad_check(&format!("{name}/bias"), |p| eval(&x, &kern, p), &b, &gb, eps));
    }
    Ok(out)
}

fn check_activations(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let n = rng.random_range(1..8);
    let x = normals(rng, n, 2.0);
    let r = normals(rng, n, 1.0);
    let mut out = Vec::new();

    let y = relu(&Tensor::vector(x.clone()))?;
    let mut g = r.clone();
    relu_backward(y.data(), &mut g);
    let f = |p: &[f64]| {
        let y = relu(&Tensor::vector(p.to_vec())).unwrap();
        (weighted_sum(&r, y.data()), p.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
    };
    out.push(grad_check_piecewise("relu", f, &x, &g, eps));

    let y = sigmoid(&Tensor::vector(x.clone()))?;
    let mut g = r.clone();
    sigmoid_backward(y.data(), &mut g);
    let f = |p: &[f64]| weighted_sum(&r, sigmoid(&Tensor::vector(p.to_vec())).unwrap().data());
    out.push(grad_check("sigmoid", f, &x, &g, eps));

    let y = softmax(&Tensor::vector(x.clone()))?;
    let g = softmax_backward(y.data(), &r);
    let f = |p: &[f64]| weighted_sum(&r, softmax(&Tensor::vector(p.to_vec())).unwrap().data());
    out.push(grad_check("softmax", f, &x, &g, eps));
    Ok(out)
}

fn check_max_pool(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let (t, c) = (rng.random_range(1..7), rng.random_range(1..5));
    let x = normals(rng, t * c, 1.0);
    let r = normals(rng, c, 1.0);
    let (_, arg) = max_pool_over_time(&Tensor::matrix(t, c, x.clone())?)?;
    let g = max_pool_over_time_backward(&arg, t, &r);
    let f = |p: &[f64]| {
        let (y, arg) = max_pool_over_time(&Tensor::matrix(t, c, p.to_vec()).unwrap()).unwrap();
        (weighted_sum(&r, y.data()), arg)
    };
    Ok(vec![grad_check_piecewise("max_pool_over_time", f, &x, g.data(), eps)])
}

fn check_cosine(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let n = rng.random_range(2..7);
    let a = normals(rng, n, 1.0);
    let b = normals(rng, n, 1.0);
    let w = rng.random_range(0.5..2.0);
    let (ga, gb) = cosine_distance_backward(&a, &b, w)?;
    Ok(vec![
        grad_check("cosine_distance/a", |p| w * cosine_distance(p, &b).unwrap(), &a, &ga, eps),
        grad_check("cosine_distance/b", |p| w * cosine_distance(&a, p).unwrap(), &b, &gb, eps),
    ])
}

fn check_bce(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let n = rng.random_range(1..10);
    let y_hat = uniforms(rng, n, 0.05, 0.95);
    let soft = uniforms(rng, n, 0.0, 1.0);
    let hard: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let mut out = Vec::new();
    for (name, y) in [("loss_vis/bce-soft", &soft), ("loss_bow/bce-multihot", &hard)] {
        let (_, g) = bce_bag_loss(&y_hat, y)?;
        out.push(grad_check(name, |p| bce_bag_loss(p, y).unwrap().0, &y_hat, &g, eps));
    }
    Ok(out)
}

fn check_rep(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let n = rng.random_range(3..7);
    let d = rng.random_range(2..6);
    let n_neg = rng.random_range(1..n);
    let v: Vec<Vec<f64>> = (0..n).map(|_| normals(rng, d, 1.0)).collect();
    let s: Vec<Vec<f64>> = (0..n).map(|_| normals(rng, d, 1.0)).collect();
    let negs = draw_negatives(n, n_neg, rng)?;
    let margin = rng.random_range(0.1..1.0);
    let rep = contrastive_rep_loss_with(&v, &s, margin, &negs)?;
    let flat = |x: &[Vec<f64>]| x.concat();
    let unflat = |p: &[f64]| p.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>();
    let eval = |v: &[Vec<f64>], s: &[Vec<f64>]| {
        let loss = contrastive_rep_loss_with(v, s, margin, &negs).unwrap().loss;
        (loss, hinge_pattern(v, s, margin, &negs))
    };
    Ok(vec![
        grad_check_piecewise("loss_rep/image", |p| eval(&unflat(p), &s), &flat(&v), &flat(&rep.grad_v), eps),
        grad_check_piecewise("loss_rep/speech", |p| eval(&v, &unflat(p)), &flat(&s), &flat(&rep.grad_s), eps),
    ])
}

/// Which hinges are open, in the loss's own order.
fn hinge_pattern(v: &[Vec<f64>], s: &[Vec<f64>], margin: f64, negs: &Negatives) -> Vec<bool> {
    let d = |a: &[f64], b: &[f64]| cosine_distance(a, b).unwrap();
    let mut out = Vec::new();
    for i in 0..v.len() {
        let pos = d(&v[i], &s[i]);
        out.extend(negs.v[i].iter().map(|&j| margin + pos - d(&v[j], &s[i]) > 0.0));
        out.extend(negs.s[i].iter().map(|&j| margin + pos - d(&v[i], &s[j]) > 0.0));
    }
    out
}

/// A small model over short sequences, drawn per seed.
fn tiny_config(rng: &mut ChaCha8Rng, mask_padding: bool) -> SpeechModelConfig {
    SpeechModelConfig {
        d_feat: rng.random_range(2..4),
        t_max: rng.random_range(8..13),
        conv: vec![
            ConvLayerConfig {
                channels: rng.random_range(3..5),
                kernel: 3,
                stride: 1,
            },
            ConvLayerConfig {
                channels: rng.random_range(4..6),
                kernel: 3,
                stride: 2,
            },
        ],
        n_vis: rng.random_range(2..5),
        n_bow: rng.random_range(2..5),
        d_vis_hidden: rng.random_range(2..5),
        mask_padding,
        ..SpeechModelConfig::default()
    }
}

fn utterance(rng: &mut ChaCha8Rng, cfg: &SpeechModelConfig) -> UtteranceFeatures {
    let len = rng.random_range(cfg.t_max / 2..=cfg.t_max);
    let frames: Vec<f32> = normals(rng, len * cfg.d_feat, 1.0).into_iter().map(|x| x as f32).collect();
    UtteranceFeatures::from_frames(frames, cfg.d_feat, cfg.t_max, 0.01).0
}

fn check_speech_model(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (name, masked) in [("speech_model", false), ("speech_model/masked", true)] {
        let cfg = tiny_config(rng, masked);
        let mut model = SpeechModel::<f64>::init(&cfg, rng.random())?;
        jitter(&mut model, rng);
        let utt = utterance(rng, &cfg);
        let input = model.input_tensor(&utt)?;
        let (rv, rb, rs) = (
            normals(rng, cfg.n_vis, 1.0),
            normals(rng, cfg.n_bow, 1.0),
            normals(rng, cfg.embed_dim(), 1.0),
        );
        let objective = |m: &SpeechModel<f64>, x: Tensor<f64>| {
            let f = m.forward_frames(x, utt.length).unwrap();
            let value = weighted_sum(&rv, &f.y_vis) + weighted_sum(&rb, &f.y_bow) + weighted_sum(&rs, &f.embedding);
            (value, f.activation_pattern())
        };
        let fwd = model.forward_frames(input.clone(), utt.length)?;
        let mut grads = model.zeros_like();
        let gx = model
            .backward(
                &fwd,
                &OutputGrads {
                    y_vis: Some(&rv),
                    y_bow: Some(&rb),
                    embedding: Some(&rs),
                },
                &mut grads,
                true,
            )?
            .expect("input gradient requested");
        let point = model.to_flat();
        out.push(grad_check_piecewise(
            &format!("{name}/params"),
            |p| {
                let mut m = model.clone();
                m.load_flat(p);
                objective(&m, input.clone())
            },
            &point,
            &grads.to_flat(),
            eps,
        ));
        let (t, d) = (cfg.t_max, cfg.d_feat);
        out.push(grad_check_piecewise(
            &format!("{name}/input"),
            |p| objective(&model, Tensor::matrix(t, d, p.to_vec()).unwrap()),
            input.data(),
            gx.data(),
            eps,
        ));
    }
    Ok(out)
}

fn check_projection(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let cfg = tiny_config(rng, false);
    let mut proj = VisionProjection::<f64>::init(&cfg, rng.random())?;
    jitter(&mut proj, rng);
    let x: Vec<f64> = uniforms(rng, cfg.d_vis_hidden, 0.0, 2.0);
    let r = normals(rng, cfg.embed_dim(), 1.0);
    let fwd = proj.forward(&x)?;
    let mut grads = proj.zeros_like();
    proj.backward(&fwd, &r, &mut grads)?;
    Ok(vec![grad_check_piecewise(
        "vision_projection",
        |p| {
            let mut q = proj.clone();
            q.load_flat(p);
            let f = q.forward(&x).unwrap();
            (weighted_sum(&r, &f.v), f.activation_pattern())
        },
        &proj.to_flat(),
        &grads.to_flat(),
        eps,
    )])
}

fn check_tagger(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let d_img = rng.random_range(2..5);
    let n_tags = rng.random_range(2..5);
    let config = TaggerConfig {
        hidden: vec![rng.random_range(2..5); 2],
        n_vis: n_tags,
        seed: rng.random(),
        ..TaggerConfig::default()
    };
    let mut tagger = Tagger::init(&config, d_img, (0..n_tags).collect())?;
    jitter(&mut tagger, rng);
    let images: Vec<Vec<f64>> = (0..3).map(|_| normals(rng, d_img, 1.0)).collect();
    let targets: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let raw = uniforms(rng, n_tags, 0.0, 1.0);
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        })
        .collect();
    let batch: Vec<(&[f64], &[f64])> = images
        .iter()
        .zip(&targets)
        .map(|(x, t)| (x.as_slice(), t.as_slice()))
        .collect();
    let (_, grads) = tagger.loss_and_grad(&batch)?;
    Ok(vec![grad_check_piecewise(
        "tagger",
        |p| {
            let mut t = tagger.clone();
            t.load_flat(p);
            let pattern: Vec<Vec<bool>> = images.iter().map(|x| t.activation_pattern(x).unwrap()).collect();
            (t.loss_and_grad(&batch).unwrap().0, pattern)
        },
        &tagger.to_flat(),
        &grads.to_flat(),
        eps,
    )])
}

/// Whole-batch objective through both branches, for each task mix the trainer uses.
fn check_combined(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradCheckReport>> {
    let n = 4;
    // Cosine distance has no gradient at a zero vector, which small ReLU
    // networks produce now and then; such draws are replaced.
    let (cfg, params, utts, features) = loop {
        let cfg = tiny_config(rng, false);
        let mut params = Trainable {
            model: SpeechModel::<f64>::init(&cfg, rng.random())?,
            projection: VisionProjection::<f64>::init(&cfg, rng.random())?,
        };
        jitter(&mut params, rng);
        let utts: Vec<UtteranceFeatures> = (0..n).map(|_| utterance(rng, &cfg)).collect();
        let features: Vec<Vec<f64>> = (0..n).map(|_| uniforms(rng, cfg.d_vis_hidden, 0.1, 2.0)).collect();
        // With a single active unit the direction, and so every cosine, is
        // locally constant; require two.
        let spread = |x: &[f64]| x.iter().filter(|&&v| v > 1e-3).count() >= 2;
        // Inside the BCE clamp the loss is flat but the gradient passes
        // straight through, so saturated outputs are redrawn as well.
        let unclamped = |y: &[f64]| y.iter().all(|&p| (1e3 * BCE_EPS..=1.0 - 1e3 * BCE_EPS).contains(&p));
        let mut ok = true;
        for (u, x) in utts.iter().zip(&features) {
            let f = params.model.forward(u)?;
            ok &= spread(&f.embedding) && unclamped(&f.y_vis) && unclamped(&f.y_bow);
            ok &= spread(&params.projection.forward(x)?.v);
        }
        if ok {
            break (cfg, params, utts, features);
        }
    };
    let y_vis: Vec<Vec<f64>> = (0..n).map(|_| uniforms(rng, cfg.n_vis, 0.0, 1.0)).collect();
    let y_bow: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..cfg.n_bow).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect())
        .collect();
    let negs = draw_negatives(n, 2, rng)?;
    let margin = rng.random_range(0.2..1.0);
    let batch = BatchData {
        utterances: utts.iter().collect(),
        y_vis: y_vis.iter().map(|r| r.as_slice()).collect(),
        y_bow: y_bow.iter().map(|r| r.as_slice()).collect(),
        features: features.iter().map(|r| r.as_slice()).collect(),
    };
    let mixes = [
        ("loss_vis/model", ActiveLosses { vis: 1.0, bow: 0.0, rep: 0.0 }),
        ("loss_bow/model", ActiveLosses { vis: 0.0, bow: 1.0, rep: 0.0 }),
        ("loss_rep/model", ActiveLosses { vis: 0.0, bow: 0.0, rep: 1.0 }),
        ("combined", ActiveLosses { vis: 0.35, bow: 0.35, rep: 0.3 }),
    ];
    let mut out = Vec::new();
    for (name, active) in mixes {
        let negatives = (active.rep > 0.0).then_some(&negs);
        let (_, grads) = batch_gradient(&params, &batch, &active, negatives, margin)?;
        let objective = |p: &[f64]| {
            let mut q = params.clone();
            q.load_flat(p);
            total_loss(&q, &batch, &active, negatives, margin)
        };
        out.push(grad_check_piecewise(name, objective, &params.to_flat(), &grads.to_flat(), eps));
    }
    Ok(out)
}

/// Forward-only combined loss, independent of the gradient code path, with
/// the activation, pooling, clamp and hinge pattern it was computed on.
fn total_loss(
    params: &Trainable<f64>,
    batch: &BatchData<'_, f64>,
    active: &ActiveLosses,
    negatives: Option<&Negatives>,
    margin: f64,
) -> (f64, Vec<usize>) {
    let fwds: Vec<_> = batch
        .utterances
        .iter()
        .map(|u| params.model.forward(u).unwrap())
        .collect();
    let image: Vec<Vec<f64>> = batch
        .features
        .iter()
        .map(|x| params.projection.forward(x).unwrap().v)
        .collect();
    let rows = |r: &[&[f64]]| r.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    let mut pattern = Vec::new();
    for f in &fwds {
        pattern.extend(f.activation_pattern());
        let clamped = |y: &[f64]| y.iter().map(|&p| usize::from(!(BCE_EPS..=1.0 - BCE_EPS).contains(&p))).collect::<Vec<_>>();
        pattern.extend(clamped(&f.y_vis));
        pattern.extend(clamped(&f.y_bow));
    }
    for x in &batch.features {
        pattern.extend(params.projection.forward(x).unwrap().activation_pattern());
    }
    if let Some(negs) = negatives {
        let speech: Vec<Vec<f64>> = fwds.iter().map(|f| f.embedding.clone()).collect();
        pattern.extend(hinge_pattern(&image, &speech, margin, negs).into_iter().map(usize::from));
    }
    let loss = combined_loss(
        &LossInputs {
            y_vis_hat: &fwds.iter().map(|f| f.y_vis.clone()).collect::<Vec<_>>(),
            y_vis: &rows(&batch.y_vis),
            y_bow_hat: &fwds.iter().map(|f| f.y_bow.clone()).collect::<Vec<_>>(),
            y_bow: &rows(&batch.y_bow),
            speech: &fwds.iter().map(|f| f.embedding.clone()).collect::<Vec<_>>(),
            image: &image,
        },
        active,
        negatives,
        margin,
    )
    .unwrap()
    .breakdown
    .total;
    (loss, pattern)
}
