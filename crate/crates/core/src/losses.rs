//! Conditional-GAN objective: discriminator cross-entropy, generator
//! adversarial term, L1 term and their λ-weighted combination.
//!
//! Expectations are realised as uniform means over every patch cell of every
//! sample in the batch.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Scores are clamped into `[SCORE_EPS, 1 − SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialForm {
    /// `mean(−log D(fake))`
    #[default]
    NonSaturating,
    /// `mean(log(1 − D(fake)))`, the literal min-max generator term.
    Saturating,
}

/// Loss components of one step. `d_loss` is `None` when adversarial training
/// is switched off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub d_loss: Option<f64>,
    pub g_adv_loss: f64,
    pub g_l1_loss: f64,
    pub g_total: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.d_loss.is_none_or(f64::is_finite)
            && self.g_adv_loss.is_finite()
            && self.g_l1_loss.is_finite()
            && self.g_total.is_finite()
    }
}

fn clamp_score(s: f64, eps: f64) -> f64 {
    s.clamp(eps, 1.0 - eps)
}

pub(crate) fn bce_mean_value(scores: &[f64], real: bool, eps: f64) -> f64 {
    let mut clamped = 0usize;
    let total: f64 = scores
        .iter()
        .map(|&s| {
            let c = clamp_score(s, eps);
            if c != s {
                clamped += 1;
            }
            if real {
                -c.ln()
            } else {
                -(1.0 - c).ln()
            }
        })
        .sum();
    if clamped > 0 {
        log::debug!("clamped {clamped} of {} discriminator scores", scores.len());
    }
    total / scores.len() as f64
}

fn check_scores(op: &'static str, s: &Tensor) -> Result<()> {
    if let Some(bad) = s.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("{op}: score {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `mean(−[log D(real) + log(1 − D(fake))])` over all patch cells.
pub fn discriminator_loss(score_real: &Tensor, score_fake: &Tensor) -> Result<f64> {
    score_real.expect_same_shape(score_fake, "discriminator_loss")?;
    check_scores("discriminator_loss", score_real)?;
    check_scores("discriminator_loss", score_fake)?;
    Ok(bce_mean_value(score_real.data(), true, SCORE_EPS)
        + bce_mean_value(score_fake.data(), false, SCORE_EPS))
}

pub fn generator_adversarial_loss(score_fake: &Tensor, form: AdversarialForm) -> Result<f64> {
    check_scores("generator_adversarial_loss", score_fake)?;
    Ok(match form {
        AdversarialForm::NonSaturating => bce_mean_value(score_fake.data(), true, SCORE_EPS),
        AdversarialForm::Saturating => -bce_mean_value(score_fake.data(), false, SCORE_EPS),
    })
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target, "l1_loss")?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn combined_generator_loss(
    score_fake: &Tensor,
    pred: &Tensor,
    target: &Tensor,
    lambda: f64,
    form: AdversarialForm,
) -> Result<LossBundle> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let g_adv_loss = generator_adversarial_loss(score_fake, form)?;
    let g_l1_loss = l1_loss(pred, target)?;
    Ok(LossBundle {
        d_loss: None,
        g_adv_loss,
        g_l1_loss,
        g_total: g_adv_loss + lambda * g_l1_loss,
        lambda,
    })
}

/// Graph form of the discriminator loss on one sample's score maps.
pub fn discriminator_loss_var(g: &mut Graph, score_real: Var, score_fake: Var) -> Result<Var> {
    let r = g.bce_mean(score_real, true, SCORE_EPS);
    let f = g.bce_mean(score_fake, false, SCORE_EPS);
    g.add(r, f)
}

pub fn generator_adversarial_loss_var(g: &mut Graph, score_fake: Var, form: AdversarialForm) -> Var {
    match form {
        AdversarialForm::NonSaturating => g.bce_mean(score_fake, true, SCORE_EPS),
        AdversarialForm::Saturating => {
            let l = g.bce_mean(score_fake, false, SCORE_EPS);
            g.scale(l, -1.0)
        }
    }
}

pub fn l1_loss_var(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f64) -> Tensor {
        Tensor::full(&[1, 3, 3], v)
    }

    #[test]
    fn discriminator_examples() {
        let l = discriminator_loss(&map(0.5), &map(0.5)).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let perfect = discriminator_loss(&map(1.0), &map(0.0)).unwrap();
        assert!(perfect > 0.0 && perfect < 2.1e-7);
        let l = discriminator_loss(&map(0.8), &map(0.3)).unwrap();
        assert!((l - 0.579_818_495).abs() < 1e-8);
        assert!((l + 0.8f64.ln() + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn generator_examples() {
        let ns = generator_adversarial_loss(&map(0.5), AdversarialForm::NonSaturating).unwrap();
        let sat = generator_adversarial_loss(&map(0.5), AdversarialForm::Saturating).unwrap();
        assert!((ns - 2f64.ln()).abs() < 1e-12);
        assert!((sat + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.5);
        assert_eq!(l1_loss(&b, &a).unwrap(), 0.5);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!(l1_loss(&a, &map(0.0)).is_err());
    }

    #[test]
    fn combined_example() {
        let pred = Tensor::full(&[4], 0.1);
        let target = Tensor::zeros(&[4]);
        let b = combined_generator_loss(&map(0.5), &pred, &target, 100.0, AdversarialForm::NonSaturating)
            .unwrap();
        assert!((b.g_total - (2f64.ln() + 10.0)).abs() < 1e-9);
        assert!((b.g_total - (b.g_adv_loss + b.lambda * b.g_l1_loss)).abs() < 1e-12);
        let same = combined_generator_loss(&map(0.5), &pred, &pred, 100.0, AdversarialForm::NonSaturating)
            .unwrap();
        assert_eq!(same.g_total, same.g_adv_loss);
        let tiny = combined_generator_loss(&map(0.5), &pred, &target, 1e-12, AdversarialForm::NonSaturating)
            .unwrap();
        assert!((tiny.g_total - tiny.g_adv_loss).abs() < 1e-12);
        assert!(combined_generator_loss(&map(0.5), &pred, &target, 0.0, AdversarialForm::NonSaturating).is_err());
    }

    #[test]
    fn out_of_range_scores_rejected() {
        assert!(discriminator_loss(&map(1.5), &map(0.5)).is_err());
    }
}
