//! Bag-of-words cross entropy, the margin contrastive loss between speech
//! embeddings and projected image features, and their weighted combination.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_distance, cosine_distance_backward, Real};

/// Clamp applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_vis: f64,
    pub alpha_bow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_vis: 0.35,
            alpha_bow: 0.35,
        }
    }
}

impl LossWeights {
    pub fn rep(&self) -> f64 {
        1.0 - self.alpha_vis - self.alpha_bow
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| (0.0..=1.0).contains(&a);
        if !ok(self.alpha_vis) || !ok(self.alpha_bow) {
            return Err(Error::Config(format!(
                "loss weights must lie in [0, 1], got alpha_vis={} alpha_bow={}",
                self.alpha_vis, self.alpha_bow
            )));
        }
        if self.alpha_vis + self.alpha_bow > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "alpha_vis + alpha_bow = {} exceeds 1",
                self.alpha_vis + self.alpha_bow
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub margin: f64,
    pub n_neg: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { margin: 0.2, n_neg: 4 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.margin < 0.0 || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin {} must be finite and ≥ 0", self.margin)));
        }
        if self.n_neg == 0 {
            return Err(Error::Config("n_neg must be ≥ 1".into()));
        }
        if batch < self.n_neg + 1 {
            return Err(Error::Config(format!(
                "batch of {batch} cannot supply {} negatives per anchor",
                self.n_neg
            )));
        }
        Ok(())
    }
}

/// Source of a mini-batch: image-speech pairs or transcribed speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Visual,
    Text,
}

impl TaskTag {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Visual => "visual",
            TaskTag::Text => "text",
        }
    }
}

/// `-Σ_w [y log ŷ + (1 - y) log(1 - ŷ)]` with `ŷ` clamped to `[ε, 1 - ε]`,
/// and its gradient w.r.t. `ŷ`. The gradient is taken at the clamped value
/// even where the clamp is active, so saturated outputs still get pushed back.
pub fn bce_bag_loss<F: Real>(y_hat: &[F], y: &[F]) -> Result<(F, Vec<F>)> {
    if y_hat.len() != y.len() {
        return Err(Error::dim("bce_bag_loss", "target", y_hat.len(), y.len()));
    }
    let eps = F::of(BCE_EPS);
    let one = F::one();
    let mut loss = F::zero();
    let grad = y_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.max(eps).min(one - eps);
            loss -= t * p.ln() + (one - t) * (one - p).ln();
            -t / p + (one - t) / (one - p)
        })
        .collect();
    Ok((loss, grad))
}

/// Per-anchor negative indices for image (`v`) and speech (`s`) sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    pub v: Vec<Vec<usize>>,
    pub s: Vec<Vec<usize>>,
}

/// Draws `n_neg` other batch members per anchor, without replacement, first
/// the image side then the speech side, anchors in order.
pub fn draw_negatives<R: Rng + ?Sized>(batch: usize, n_neg: usize, rng: &mut R) -> Result<Negatives> {
    if n_neg == 0 || batch < n_neg + 1 {
        return Err(Error::Config(format!(
            "batch of {batch} cannot supply {n_neg} negatives per anchor"
        )));
    }
    let draw = |i: usize, rng: &mut R| -> Vec<usize> {
        sample(rng, batch - 1, n_neg)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .collect()
    };
    let mut negs = Negatives {
        v: Vec::with_capacity(batch),
        s: Vec::with_capacity(batch),
    };
    for i in 0..batch {
        let v = draw(i, rng);
        let s = draw(i, rng);
        negs.v.push(v);
        negs.s.push(s);
    }
    Ok(negs)
}

/// Contrastive loss and gradients w.r.t. every `v_i` and `s_i`.
#[derive(Debug, Clone)]
pub struct RepLoss<F> {
    pub loss: F,
    pub grad_v: Vec<Vec<F>>,
    pub grad_s: Vec<Vec<F>>,
}

/// Mean over anchors of the averaged hinges
/// `max(0, m + d(v_i, s_i) - d(v', s_i))` and `max(0, m + d(v_i, s_i) - d(v_i, s'))`
/// for the given negatives, `d` being cosine distance.
pub fn contrastive_rep_loss_with<F: Real>(v: &[Vec<F>], s: &[Vec<F>], margin: f64, negs: &Negatives) -> Result<RepLoss<F>> {
    let n = v.len();
    if s.len() != n {
        return Err(Error::dim("contrastive_rep_loss", "speech batch", n, s.len()));
    }
    if negs.v.len() != n || negs.s.len() != n {
        return Err(Error::dim("contrastive_rep_loss", "negatives", n, negs.v.len().min(negs.s.len())));
    }
    if n == 0 {
        return Err(Error::Degenerate {
            op: "contrastive_rep_loss",
            detail: "empty batch".into(),
        });
    }
    let m = F::of(margin);
    let scale = F::one() / F::of(n as f64);
    let zeros = |x: &[Vec<F>]| x.iter().map(|r| vec![F::zero(); r.len()]).collect::<Vec<_>>();
    let mut grad_v = zeros(v);
    let mut grad_s = zeros(s);
    let mut loss = F::zero();

    let acc = |dst: &mut Vec<F>, g: Vec<F>| {
        for (a, b) in dst.iter_mut().zip(g) {
            *a += b;
        }
    };
    for i in 0..n {
        let d_pos = cosine_distance(&v[i], &s[i])?;
        let mut pos_weight = F::zero();
        for (side, idx) in [(0, &negs.v[i]), (1, &negs.s[i])] {
            if idx.is_empty() {
                continue;
            }
            let w = scale / F::of(idx.len() as f64);
            for &j in idx {
                let d_neg = if side == 0 {
                    cosine_distance(&v[j], &s[i])?
                } else {
                    cosine_distance(&v[i], &s[j])?
                };
                let h = m + d_pos - d_neg;
                if h > F::zero() {
                    loss += w * h;
                    pos_weight += w;
                    if side == 0 {
                        let (gv, gs) = cosine_distance_backward(&v[j], &s[i], -w)?;
                        acc(&mut grad_v[j], gv);
                        acc(&mut grad_s[i], gs);
                    } else {
                        let (gv, gs) = cosine_distance_backward(&v[i], &s[j], -w)?;
                        acc(&mut grad_v[i], gv);
                        acc(&mut grad_s[j], gs);
                    }
                }
            }
        }
        if pos_weight > F::zero() {
            let (gv, gs) = cosine_distance_backward(&v[i], &s[i], pos_weight)?;
            acc(&mut grad_v[i], gv);
            acc(&mut grad_s[i], gs);
        }
    }
    Ok(RepLoss { loss, grad_v, grad_s })
}

/// Draws fresh negatives from `rng` and evaluates the contrastive loss.
pub fn contrastive_rep_loss<F: Real, R: Rng + ?Sized>(
    v: &[Vec<F>],
    s: &[Vec<F>],
    config: &ContrastiveConfig,
    rng: &mut R,
) -> Result<RepLoss<F>> {
    config.validate(v.len())?;
    let negs = draw_negatives(v.len(), config.n_neg, rng)?;
    contrastive_rep_loss_with(v, s, config.margin, &negs)
}

/// Model outputs and targets for one batch, aligned by position.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, F> {
    pub y_vis_hat: &'a [Vec<F>],
    pub y_vis: &'a [Vec<F>],
    pub y_bow_hat: &'a [Vec<F>],
    pub y_bow: &'a [Vec<F>],
    /// Speech embeddings `s`.
    pub speech: &'a [Vec<F>],
    /// Projected image features `v`.
    pub image: &'a [Vec<F>],
}

/// Which loss components apply to a batch, with their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveLosses {
    pub vis: f64,
    pub bow: f64,
    pub rep: f64,
}

impl ActiveLosses {
    /// Visual batches carry `ℓ_vis` and `ℓ_rep`; text batches carry `ℓ_bow`,
    /// plus the visual terms when `text_uses_visual` is set.
    pub fn for_batch(tag: TaskTag, w: &LossWeights, text_uses_visual: bool) -> Self {
        match tag {
            TaskTag::Visual => Self {
                vis: w.alpha_vis,
                bow: 0.0,
                rep: w.rep(),
            },
            TaskTag::Text if text_uses_visual => Self {
                vis: w.alpha_vis,
                bow: w.alpha_bow,
                rep: w.rep(),
            },
            TaskTag::Text => Self {
                vis: 0.0,
                bow: w.alpha_bow,
                rep: 0.0,
            },
        }
    }

    pub fn needs_image(&self) -> bool {
        self.vis > 0.0 || self.rep > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bow: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rep: Option<f64>,
}

/// Weighted loss and gradients for every model output it touched. Gradient
/// vectors are empty for components with zero weight.
#[derive(Debug, Clone)]
pub struct CombinedLoss<F> {
    pub breakdown: LossBreakdown,
    pub grad_y_vis: Vec<Vec<F>>,
    pub grad_y_bow: Vec<Vec<F>>,
    pub grad_speech: Vec<Vec<F>>,
    pub grad_image: Vec<Vec<F>>,
}

fn bag_mean<F: Real>(pred: &[Vec<F>], target: &[Vec<F>], weight: f64) -> Result<(f64, Vec<Vec<F>>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("combined_loss", "targets", pred.len(), target.len()));
    }
    let scale = F::of(weight / pred.len() as f64);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let (l, mut g) = bce_bag_loss(p, t)?;
        total += l.as_f64();
        for x in &mut g {
            *x *= scale;
        }
        grads.push(g);
    }
    Ok((total / pred.len() as f64, grads))
}

/// `vis·ℓ_vis + bow·ℓ_bow + rep·ℓ_rep` over one batch. Each component is a
/// mean over batch items; components with zero weight are not evaluated.
pub fn combined_loss<F: Real>(
    inputs: &LossInputs<'_, F>,
    active: &ActiveLosses,
    negatives: Option<&Negatives>,
    margin: f64,
) -> Result<CombinedLoss<F>> {
    let mut out = CombinedLoss {
        breakdown: LossBreakdown {
            total: 0.0,
            vis: None,
            bow: None,
            rep: None,
        },
        grad_y_vis: Vec::new(),
        grad_y_bow: Vec::new(),
        grad_speech: Vec::new(),
        grad_image: Vec::new(),
    };
    if active.vis > 0.0 {
        let (l, g) = bag_mean(inputs.y_vis_hat, inputs.y_vis, active.vis)?;
        out.breakdown.vis = Some(l);
        out.breakdown.total += active.vis * l;
        out.grad_y_vis = g;
    }
    if active.bow > 0.0 {
        let (l, g) = bag_mean(inputs.y_bow_hat, inputs.y_bow, active.bow)?;
        out.breakdown.bow = Some(l);
        out.breakdown.total += active.bow * l;
        out.grad_y_bow = g;
    }
    if active.rep > 0.0 {
        let negs = negatives.ok_or_else(|| Error::Config("representation loss needs negatives".into()))?;
        let r = contrastive_rep_loss_with(inputs.image, inputs.speech, margin, negs)?;
        let w = F::of(active.rep);
        let l = r.loss.as_f64();
        out.breakdown.rep = Some(l);
        out.breakdown.total += active.rep * l;
        out.grad_speech = r
            .grad_s
            .into_iter()
            .map(|g| g.into_iter().map(|x| x * w).collect())
            .collect();
        out.grad_image = r
            .grad_v
            .into_iter()
            .map(|g| g.into_iter().map(|x| x * w).collect())
            .collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_two_ln_two() {
        let (l, _) = bce_bag_loss(&[0.5f64, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_limit() {
        let y = [BCE_EPS, 1.0 - BCE_EPS, BCE_EPS, 1.0 - BCE_EPS];
        let (l, _): (f64, _) = bce_bag_loss(&y, &y).unwrap();
        let bound = 2.0 * 4.0 * BCE_EPS * (1.0 / BCE_EPS).ln();
        assert!(l >= 0.0 && l <= bound, "{l} > {bound}");
    }

    #[test]
    fn bce_length_mismatch() {
        assert!(bce_bag_loss(&[0.5f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn negatives_exclude_anchor_without_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let negs = draw_negatives(6, 3, &mut rng).unwrap();
        for i in 0..6 {
            for side in [&negs.v[i], &negs.s[i]] {
                assert_eq!(side.len(), 3);
                assert!(!side.contains(&i));
                let mut u = side.clone();
                u.sort_unstable();
                u.dedup();
                assert_eq!(u.len(), 3);
            }
        }
        assert!(draw_negatives(3, 3, &mut rng).is_err());
    }

    #[test]
    fn satisfied_margin_and_collapsed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let cfg = ContrastiveConfig { margin: 0.5, n_neg: 2 };
        let r = contrastive_rep_loss(&basis, &basis, &cfg, &mut rng).unwrap();
        assert!(r.loss.abs() < 1e-10);

        let same = vec![vec![0.3f64, -0.2, 0.9]; 4];
        let r = contrastive_rep_loss(&same, &same, &cfg, &mut rng).unwrap();
        assert!((r.loss - 2.0 * 0.5).abs() < 1e-10);
    }

    #[test]
    fn batch_too_small_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = vec![vec![1.0f64, 0.0]; 2];
        let cfg = ContrastiveConfig { margin: 0.1, n_neg: 2 };
        assert!(matches!(contrastive_rep_loss(&v, &v, &cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights { alpha_vis: 0.7, alpha_bow: 0.4 }.validate().is_err());
        assert!(LossWeights { alpha_vis: -0.1, alpha_bow: 0.4 }.validate().is_err());
        let w = LossWeights { alpha_vis: 0.35, alpha_bow: 0.35 };
        assert!(w.validate().is_ok());
        assert!((w.rep() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn text_batches_only_carry_bow_by_default() {
        let w = LossWeights::default();
        let a = ActiveLosses::for_batch(TaskTag::Text, &w, false);
        assert_eq!((a.vis, a.rep), (0.0, 0.0));
        assert!(ActiveLosses::for_batch(TaskTag::Text, &w, true).needs_image());
        assert_eq!(ActiveLosses::for_batch(TaskTag::Visual, &w, false).bow, 0.0);
    }
}
