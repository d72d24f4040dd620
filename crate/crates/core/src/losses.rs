//! Segmentation objectives: binary cross-entropy, soft Dice, generalized
//! Dice, and their weighted sums. Each loss has an analytic gradient with
//! respect to the predicted probabilities.

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets `y ∈ {0,1}` and probabilities `ŷ ∈ [0,1]`, laid out
/// `(class, voxel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    y: Array2<f64>,
    y_hat: Array2<f64>,
}

impl PredictionPair {
    pub fn new(y: Array2<f64>, y_hat: Array2<f64>) -> Result<Self> {
        if y.shape() != y_hat.shape() {
            return Err(Error::ShapeMismatch(format!("targets {:?} vs predictions {:?}", y.shape(), y_hat.shape())));
        }
        if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidLossConfig("targets must be 0 or 1".into()));
        }
        if y_hat.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidLossConfig("predictions must lie in [0, 1]".into()));
        }
        Ok(Self { y, y_hat })
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn y_hat(&self) -> &Array2<f64> {
        &self.y_hat
    }

    pub fn classes(&self) -> usize {
        self.y.nrows()
    }

    pub fn voxels(&self) -> usize {
        self.y.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossFamily {
    #[serde(rename = "bce_dice")]
    BceDice,
    #[serde(rename = "bce_gdl")]
    BceGdl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub family: LossFamily,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { family: LossFamily::BceDice, alpha: 0.5, beta: 0.5, epsilon: 1e-6, prob_clamp: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::InvalidLossConfig(format!(
                "need alpha, beta ≥ 0 with alpha + beta > 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidLossConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::InvalidLossConfig(format!("prob_clamp must lie in (0, 0.5), got {}", self.prob_clamp)));
        }
        Ok(())
    }

    /// Loss value for this config's family.
    pub fn value(&self, p: &PredictionPair) -> Result<f64> {
        match self.family {
            LossFamily::BceDice => combined_bce_dice(p, self),
            LossFamily::BceGdl => combined_bce_gdl(p, self),
        }
    }

    /// Loss value and its gradient with respect to `ŷ`.
    pub fn value_and_grad(&self, p: &PredictionPair) -> Result<(f64, Array2<f64>)> {
        self.validate()?;
        let (region, region_grad) = match self.family {
            LossFamily::BceDice => (dice_loss(p, self.epsilon), dice_loss_grad(p, self.epsilon)),
            LossFamily::BceGdl => (gdl(p, self.epsilon), gdl_grad(p, self.epsilon)),
        };
        let value = self.alpha * bce(p, self.prob_clamp) + self.beta * region;
        let grad = bce_grad(p, self.prob_clamp) * self.alpha + region_grad * self.beta;
        Ok((value, grad))
    }
}

/// Mean binary cross-entropy over all classes and voxels, with `ŷ` clamped to
/// `[clamp, 1 − clamp]`.
pub fn bce(p: &PredictionPair, clamp: f64) -> f64 {
    let n = p.y.len() as f64;
    let sum: f64 = Zip::from(&p.y).and(&p.y_hat).fold(0.0, |acc, &y, &yh| {
        let q = yh.clamp(clamp, 1.0 - clamp);
        acc - (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
    });
    sum / n
}

/// `∂bce/∂ŷ`; zero where the clamp is active.
pub fn bce_grad(p: &PredictionPair, clamp: f64) -> Array2<f64> {
    let n = p.y.len() as f64;
    Zip::from(&p.y).and(&p.y_hat).map_collect(|&y, &yh| {
        if yh < clamp || yh > 1.0 - clamp {
            0.0
        } else {
            -(y / yh - (1.0 - y) / (1.0 - yh)) / n
        }
    })
}

/// Per-class `(Σ yŷ, Σ y + Σ ŷ)`.
fn overlap_terms(p: &PredictionPair) -> Vec<(f64, f64)> {
    p.y.axis_iter(Axis(0))
        .zip(p.y_hat.axis_iter(Axis(0)))
        .map(|(y, yh)| {
            Zip::from(&y).and(&yh).fold((0.0, 0.0), |(i, s), &a, &b| (i + a * b, s + a + b))
        })
        .collect()
}

/// `1 − (2Σyŷ + ε)/(Σy + Σŷ + ε)` per class, averaged over classes.
pub fn dice_loss(p: &PredictionPair, eps: f64) -> f64 {
    let terms = overlap_terms(p);
    let c = terms.len() as f64;
    terms.iter().map(|(i, s)| 1.0 - (2.0 * i + eps) / (s + eps)).sum::<f64>() / c
}

pub fn dice_loss_grad(p: &PredictionPair, eps: f64) -> Array2<f64> {
    let terms = overlap_terms(p);
    let c = terms.len() as f64;
    let mut g = Array2::zeros(p.y.raw_dim());
    for (k, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        let (inter, sum) = terms[k];
        let den = sum + eps;
        let num = 2.0 * inter + eps;
        Zip::from(&mut row).and(p.y.row(k)).for_each(|g, &y| {
            *g = -(2.0 * y * den - num) / (den * den) / c;
        });
    }
    g
}

/// `w_c = 1/(Σ_i y_ci)²`. Classes without positives take the largest finite
/// weight present, or 1 when every class is empty.
pub fn gdl_class_weights(y: &Array2<f64>) -> Vec<f64> {
    let raw: Vec<Option<f64>> = y
        .axis_iter(Axis(0))
        .map(|row| {
            let s: f64 = row.sum();
            (s > 0.0).then(|| 1.0 / (s * s))
        })
        .collect();
    let cap = raw.iter().flatten().copied().fold(None, |m: Option<f64>, w| Some(m.map_or(w, |m| m.max(w))));
    let cap = cap.unwrap_or(1.0);
    raw.into_iter().map(|w| w.unwrap_or(cap)).collect()
}

/// Generalized Dice loss with inverse-squared-volume class weights.
pub fn gdl(p: &PredictionPair, eps: f64) -> f64 {
    let w = gdl_class_weights(&p.y);
    let terms = overlap_terms(p);
    let num: f64 = w.iter().zip(&terms).map(|(w, (i, _))| w * i).sum::<f64>() * 2.0 + eps;
    let den: f64 = w.iter().zip(&terms).map(|(w, (_, s))| w * s).sum::<f64>() + eps;
    1.0 - num / den
}

pub fn gdl_grad(p: &PredictionPair, eps: f64) -> Array2<f64> {
    let w = gdl_class_weights(&p.y);
    let terms = overlap_terms(p);
    let num: f64 = w.iter().zip(&terms).map(|(w, (i, _))| w * i).sum::<f64>() * 2.0 + eps;
    let den: f64 = w.iter().zip(&terms).map(|(w, (_, s))| w * s).sum::<f64>() + eps;
    let mut g = Array2::zeros(p.y.raw_dim());
    for (k, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        let wk = w[k];
        Zip::from(&mut row).and(p.y.row(k)).for_each(|g, &y| {
            *g = -(2.0 * wk * y * den - num * wk) / (den * den);
        });
    }
    g
}

fn require_family(cfg: &LossConfig, family: LossFamily) -> Result<()> {
    cfg.validate()?;
    if cfg.family != family {
        return Err(Error::InvalidLossConfig(format!("expected family {family:?}, got {:?}", cfg.family)));
    }
    Ok(())
}

/// `α·bce + β·dice_loss`.
pub fn combined_bce_dice(p: &PredictionPair, cfg: &LossConfig) -> Result<f64> {
    require_family(cfg, LossFamily::BceDice)?;
    Ok(cfg.alpha * bce(p, cfg.prob_clamp) + cfg.beta * dice_loss(p, cfg.epsilon))
}

/// `α·bce + β·gdl`.
pub fn combined_bce_gdl(p: &PredictionPair, cfg: &LossConfig) -> Result<f64> {
    require_family(cfg, LossFamily::BceGdl)?;
    Ok(cfg.alpha * bce(p, cfg.prob_clamp) + cfg.beta * gdl(p, cfg.epsilon))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss of sigmoid(`logits`) against `targets` (both `(class, voxel)`) and
/// its gradient with respect to the logits.
pub fn loss_and_logit_grad(cfg: &LossConfig, logits: &Array2<f32>, targets: &Array2<f64>) -> Result<(f64, Array2<f32>)> {
    let probs = logits.mapv(|z| sigmoid(z as f64));
    let pair = PredictionPair::new(targets.clone(), probs)?;
    let (value, grad) = cfg.value_and_grad(&pair)?;
    let dz = Zip::from(&grad).and(pair.y_hat()).map_collect(|&g, &q| (g * q * (1.0 - q)) as f32);
    Ok((value, dz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair(y: Array2<f64>, yh: Array2<f64>) -> PredictionPair {
        PredictionPair::new(y, yh).unwrap()
    }

    #[test]
    fn bce_examples() {
        let ones = Array2::ones((1, 4));
        assert!(bce(&pair(ones.clone(), ones.clone()), 1e-7) < 1e-6);
        let p = pair(array![[1.0, 0.0]], array![[0.5, 0.5]]);
        assert!((bce(&p, 1e-7) - std::f64::consts::LN_2).abs() < 1e-12);
        let p = pair(array![[1.0]], array![[0.0]]);
        assert!((bce(&p, 1e-7) - (-(1e-7f64).ln())).abs() < 1e-9);
        assert!((bce(&p, 1e-7) - 16.118).abs() < 1e-3);
    }

    #[test]
    fn dice_examples() {
        let y = array![[1.0, 0.0, 1.0, 0.0]];
        assert_eq!(dice_loss(&pair(y.clone(), y.clone()), 1e-6), 0.0);
        let p = pair(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        let eps = 1e-6;
        assert!((dice_loss(&p, eps) - (1.0 - eps / (2.0 + eps))).abs() < 1e-15);
        let z = Array2::zeros((2, 3));
        assert_eq!(dice_loss(&pair(z.clone(), z), 1e-6), 0.0);
    }

    #[test]
    fn gdl_examples() {
        let y = array![[1.0, 1.0, 0.0, 0.0]];
        assert_eq!(gdl(&pair(y.clone(), y.clone()), 1e-6), 0.0);
        let y = array![[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
        assert_eq!(gdl_class_weights(&y), vec![1.0, 1.0 / 16.0]);
        let y = array![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]];
        assert_eq!(gdl_class_weights(&y), vec![1.0, 0.25, 1.0]);
        let v = gdl(&pair(y, Array2::from_elem((3, 2), 0.3)), 1e-6);
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        assert_eq!(gdl_class_weights(&Array2::zeros((2, 2))), vec![1.0, 1.0]);
    }

    #[test]
    fn combined_degenerate_weights() {
        let y = array![[1.0, 0.0, 1.0]];
        let p = pair(y, array![[0.7, 0.2, 0.4]]);
        let bce_only = LossConfig { alpha: 1.0, beta: 0.0, ..Default::default() };
        assert_eq!(combined_bce_dice(&p, &bce_only).unwrap(), bce(&p, 1e-7));
        let dice_only = LossConfig { alpha: 0.0, beta: 1.0, ..Default::default() };
        assert_eq!(combined_bce_dice(&p, &dice_only).unwrap(), dice_loss(&p, 1e-6));
        let gdl_bce = LossConfig { family: LossFamily::BceGdl, beta: 0.0, alpha: 1.0, ..Default::default() };
        assert_eq!(combined_bce_gdl(&p, &gdl_bce).unwrap(), bce(&p, 1e-7));
        assert!(combined_bce_gdl(&p, &bce_only).is_err());
    }

    #[test]
    fn perfect_prediction_gdl_combined_is_zero() {
        let y = array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let cfg = LossConfig { family: LossFamily::BceGdl, ..Default::default() };
        assert!(combined_bce_gdl(&pair(y.clone(), y), &cfg).unwrap() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { alpha: 0.0, beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { prob_clamp: 0.5, ..Default::default() }.validate().is_err());
        assert!(PredictionPair::new(array![[0.5]], array![[0.5]]).is_err());
        assert!(PredictionPair::new(array![[1.0]], array![[1.5]]).is_err());
        assert!(matches!(PredictionPair::new(array![[1.0]], array![[0.5, 0.5]]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn logit_gradient_matches_chain_rule() {
        let cfg = LossConfig::default();
        let logits = array![[0.3f32, -1.2, 2.0], [0.0, 0.5, -0.7]];
        let y = array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
        let (_, g) = loss_and_logit_grad(&cfg, &logits, &y).unwrap();
        let h = 1e-3f64;
        for k in 0..2 {
            for i in 0..3 {
                let eval = |d: f64| {
                    let p = logits.mapv(|z| z as f64);
                    let mut p = p;
                    p[[k, i]] += d;
                    let pr = PredictionPair::new(y.clone(), p.mapv(sigmoid)).unwrap();
                    cfg.value(&pr).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[[k, i]] as f64).abs() < 1e-5, "{fd} vs {}", g[[k, i]]);
            }
        }
    }
}
