//! Soft labels and the student-side losses: temperature-scaled KD,
//! cross-entropy and soft dice, each with its gradient w.r.t. the logits.

use serde::{Deserialize, Serialize};

use crate::balance::validate_one_hot;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Scalar, Tensor};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel<S = f32> {
    pub probs: Tensor<S>,
    pub temperature: f64,
}

pub fn make_soft_label<S: Scalar>(logits: &Tensor<S>, temperature: f64) -> Result<SoftLabel<S>> {
    logits.chw()?;
    Ok(SoftLabel {
        probs: softmax(logits, temperature)?,
        temperature,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_kd: 0.1,
            lambda_dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_ce, self.lambda_kd, self.lambda_dice];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::param("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

fn pixels<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    let (c, h, w) = t.chw()?;
    Ok((c, h * w))
}

/// Per-pixel `-sum_i q_i log p_i` averaged over pixels, where
/// `p = softmax(logits / temperature)`.
fn soft_cross_entropy<S: Scalar>(q: &Tensor<S>, logits: &Tensor<S>, temperature: f64) -> Result<(f64, Tensor<S>)> {
    q.same_shape(logits)?;
    let (c, n) = pixels(logits)?;
    let p = softmax(logits, temperature)?;
    let (qd, pd) = (q.data(), p.data());
    let mut total = 0.0f64;
    for i in 0..n {
        for k in 0..c {
            let qi = qd[k * n + i].as_f64();
            if qi != 0.0 {
                total -= qi * pd[k * n + i].as_f64().max(LOG_FLOOR).ln();
            }
        }
    }
    // d/dz of the mean CE is (p - q) / (T N), assuming q sums to one.
    let k = 1.0 / (temperature * n as f64);
    let grad = p.zip_map(q, |pi, qi| S::of((pi.as_f64() - qi.as_f64()) * k))?;
    Ok((total / n as f64, grad))
}

pub fn mean_entropy<S: Scalar>(probs: &Tensor<S>) -> Result<f64> {
    let (_, n) = pixels(probs)?;
    let h: f64 = probs
        .data()
        .iter()
        .map(|v| v.as_f64())
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.max(LOG_FLOOR).ln())
        .sum();
    Ok(h / n as f64)
}

/// `(T^2 / N) sum_pixels CE(q, softmax(s / T))` and its gradient w.r.t. `s`.
pub fn kd_loss_grad<S: Scalar>(
    soft: &SoftLabel<S>,
    student_logits: &Tensor<S>,
    temperature: f64,
) -> Result<(f64, Tensor<S>)> {
    if (soft.temperature - temperature).abs() > 1e-12 * temperature.abs().max(1.0) {
        return Err(Error::param(format!(
            "soft label made at T={}, loss asked for T={temperature}",
            soft.temperature
        )));
    }
    let (ce, grad) = soft_cross_entropy(&soft.probs, student_logits, temperature)?;
    let t2 = temperature * temperature;
    Ok((t2 * ce, grad.scale(S::of(t2))))
}

pub fn kd_loss<S: Scalar>(soft: &SoftLabel<S>, student_logits: &Tensor<S>, temperature: f64) -> Result<f64> {
    kd_loss_grad(soft, student_logits, temperature).map(|(v, _)| v)
}

pub fn ce_loss_grad<S: Scalar>(onehot: &Tensor<S>, student_logits: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    validate_one_hot(onehot)?;
    soft_cross_entropy(onehot, student_logits, 1.0)
}

pub fn ce_loss<S: Scalar>(onehot: &Tensor<S>, student_logits: &Tensor<S>) -> Result<f64> {
    ce_loss_grad(onehot, student_logits).map(|(v, _)| v)
}

/// Per-class sums `(sum p g, sum p, sum g)` in f64.
fn dice_sums<S: Scalar>(target: &Tensor<S>, probs: &Tensor<S>) -> Result<Vec<(f64, f64, f64)>> {
    target.same_shape(probs)?;
    let (c, n) = pixels(probs)?;
    Ok((0..c)
        .map(|k| {
            let (p, g) = (&probs.data()[k * n..(k + 1) * n], &target.data()[k * n..(k + 1) * n]);
            p.iter().zip(g).fold((0.0, 0.0, 0.0), |(i, sp, sg), (&a, &b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                (i + a * b, sp + a, sg + b)
            })
        })
        .collect())
}

/// `1 - mean_c (2 sum p g + s) / (sum p + sum g + s)` with `s = 1`.
pub fn dice_loss<S: Scalar>(target_probs: &Tensor<S>, student_probs: &Tensor<S>) -> Result<f64> {
    let sums = dice_sums(target_probs, student_probs)?;
    let mean = sums
        .iter()
        .map(|&(i, p, g)| (2.0 * i + DICE_SMOOTH) / (p + g + DICE_SMOOTH))
        .sum::<f64>()
        / sums.len() as f64;
    Ok(1.0 - mean)
}

/// Dice loss of `softmax(student_logits)` and its gradient w.r.t. the logits.
pub fn dice_loss_grad<S: Scalar>(target_probs: &Tensor<S>, student_logits: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    let probs = softmax(student_logits, 1.0)?;
    let sums = dice_sums(target_probs, &probs)?;
    let (c, n) = pixels(&probs)?;
    let loss = dice_loss(target_probs, &probs)?;
    // dL/dp for every element, then through the per-pixel softmax Jacobian.
    let mut dp = vec![0.0f64; c * n];
    for (k, &(i, p, g)) in sums.iter().enumerate() {
        let den = p + g + DICE_SMOOTH;
        let num = 2.0 * i + DICE_SMOOTH;
        for j in 0..n {
            let gk = target_probs.data()[k * n + j].as_f64();
            dp[k * n + j] = -(2.0 * gk * den - num) / (den * den) / c as f64;
        }
    }
    let pd = probs.data();
    let mut grad = vec![S::zero(); c * n];
    for j in 0..n {
        let dot: f64 = (0..c).map(|k| pd[k * n + j].as_f64() * dp[k * n + j]).sum();
        for k in 0..c {
            grad[k * n + j] = S::of(pd[k * n + j].as_f64() * (dp[k * n + j] - dot));
        }
    }
    Ok((loss, Tensor::new(probs.shape(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Generated,
}

/// Training target as stored on disk.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a, S = f32> {
    Onehot(&'a Tensor<S>),
    Logits(&'a Tensor<S>),
}

/// Individual terms; `None` means the term was not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: Option<f64>,
    pub kd: Option<f64>,
    pub dice: Option<f64>,
}

/// Eq. 5 for generated samples, Eq. 6 for original ones. Terms with zero
/// weight are skipped entirely.
pub fn student_loss_grad<S: Scalar>(
    source: Source,
    target: Target<'_, S>,
    student_logits: &Tensor<S>,
    weights: &LossWeights,
    temperature: f64,
) -> Result<(LossBreakdown, Tensor<S>)> {
    weights.validate()?;
    let mut out = LossBreakdown::default();
    let mut grad = Tensor::zeros(student_logits.shape());
    let mut add = |grad: &mut Tensor<S>, w: f64, (v, g): (f64, Tensor<S>)| -> Result<f64> {
        out.total += w * v;
        grad.add_assign(&g.scale(S::of(w)))?;
        Ok(v)
    };
    match (source, target) {
        (Source::Original, Target::Onehot(onehot)) => {
            if weights.lambda_ce > 0.0 {
                out.ce = Some(add(&mut grad, weights.lambda_ce, ce_loss_grad(onehot, student_logits)?)?);
            }
            if weights.lambda_dice > 0.0 {
                validate_one_hot(onehot)?;
                out.dice = Some(add(&mut grad, weights.lambda_dice, dice_loss_grad(onehot, student_logits)?)?);
            }
        }
        (Source::Generated, Target::Logits(logits)) => {
            if weights.lambda_kd > 0.0 {
                let soft = make_soft_label(logits, temperature)?;
                out.kd = Some(add(&mut grad, weights.lambda_kd, kd_loss_grad(&soft, student_logits, temperature)?)?);
            }
            if weights.lambda_dice > 0.0 {
                let target = make_soft_label(logits, 1.0)?;
                out.dice = Some(add(
                    &mut grad,
                    weights.lambda_dice,
                    dice_loss_grad(&target.probs, student_logits)?,
                )?);
            }
        }
        (s, _) => {
            return Err(Error::invalid(format!("wrong target kind for {s:?} sample")));
        }
    }
    Ok((out, grad))
}

pub fn student_loss<S: Scalar>(
    source: Source,
    target: Target<'_, S>,
    student_logits: &Tensor<S>,
    weights: &LossWeights,
    temperature: f64,
) -> Result<LossBreakdown> {
    student_loss_grad(source, target, student_logits, weights, temperature).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, one_hot};
    use crate::Rng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn soft_label_examples() {
        let u = make_soft_label(&Tensor::<f64>::zeros(&[4, 2, 2]), 3.0).unwrap();
        assert!(u.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = make_soft_label(&t64(&[2, 1, 1], &[2.0, 0.0]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.probs.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.probs.data()[0] - 0.7311).abs() < 1e-4);
        let flat = make_soft_label(&t64(&[3, 1, 1], &[5.0, -2.0, 1.0]), 1e6).unwrap();
        assert!(flat.probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-4));
        assert!(make_soft_label(&t64(&[2, 1, 1], &[0.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn kd_examples() {
        let soft = make_soft_label(&t64(&[2, 1, 1], &[0.0, 0.0]), 2.0).unwrap();
        let v = kd_loss(&soft, &t64(&[2, 1, 1], &[0.0, 0.0]), 2.0).unwrap();
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-12);

        let mut rng = Rng::new(4);
        let logits: Tensor<f64> = gaussian(&mut rng, &[3, 2, 2]);
        let q = make_soft_label(&logits, 2.0).unwrap();
        let own = kd_loss(&q, &logits, 2.0).unwrap();
        assert!((own - 4.0 * mean_entropy(&q.probs).unwrap()).abs() < 1e-12);
        assert!(kd_loss(&q, &logits, 1.0).is_err());
    }

    #[test]
    fn kd_at_unit_temperature_is_ce() {
        let mut rng = Rng::new(9);
        let logits: Tensor<f64> = gaussian(&mut rng, &[3, 2, 2]);
        let mask = vec![0, 2, 1, 1];
        let oh = one_hot::<f64>(&mask, 3, 2, 2).unwrap();
        let soft = SoftLabel { probs: oh.clone(), temperature: 1.0 };
        let a = kd_loss(&soft, &logits, 1.0).unwrap();
        let b = ce_loss(&oh, &logits).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        let oh = one_hot::<f64>(&[0, 1, 2, 3], 4, 2, 2).unwrap();
        let v = ce_loss(&oh, &Tensor::zeros(&[4, 2, 2])).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let confident = oh.scale(20.0);
        assert!(ce_loss(&oh, &confident).unwrap() < 1e-6);
        let not_onehot = Tensor::<f64>::full(&[2, 1, 1], 0.5);
        assert!(matches!(ce_loss(&not_onehot, &not_onehot), Err(Error::Validation(_))));

        // definitional recomputation
        let mut rng = Rng::new(2);
        let logits: Tensor<f64> = gaussian(&mut rng, &[2, 2, 2]);
        let mask = [1usize, 0, 0, 1];
        let oh = one_hot::<f64>(&mask, 2, 2, 2).unwrap();
        let mut want = 0.0;
        for (p, &k) in mask.iter().enumerate() {
            let z = [logits.data()[p], logits.data()[4 + p]];
            want += -(z[k].exp() / (z[0].exp() + z[1].exp())).ln();
        }
        assert!((ce_loss(&oh, &logits).unwrap() - want / 4.0).abs() < 1e-7);
    }

    #[test]
    fn dice_examples() {
        let oh = one_hot::<f64>(&[0, 1, 1, 0], 2, 2, 2).unwrap();
        assert!(dice_loss(&oh, &oh).unwrap().abs() < 1e-15);

        // prediction all class 1, target all class 0, four pixels
        let g = one_hot::<f64>(&[0; 4], 2, 2, 2).unwrap();
        let p = one_hot::<f64>(&[1; 4], 2, 2, 2).unwrap();
        let per_class = 1.0 / (4.0 + 1.0);
        let want = 1.0 - (per_class + per_class) / 2.0;
        assert!((dice_loss(&g, &p).unwrap() - want).abs() < 1e-15);

        // uniform prediction, C=2, hand oracle: class 0 present on 3 px
        let g = one_hot::<f64>(&[0, 0, 0, 1], 2, 2, 2).unwrap();
        let u = Tensor::<f64>::full(&[2, 2, 2], 0.5);
        let d0 = (2.0 * 1.5 + 1.0) / (2.0 + 3.0 + 1.0);
        let d1 = (2.0 * 0.5 + 1.0) / (2.0 + 1.0 + 1.0);
        assert!((dice_loss(&g, &u).unwrap() - (1.0 - (d0 + d1) / 2.0)).abs() < 1e-15);
        assert!(dice_loss(&g, &Tensor::zeros(&[3, 2, 2])).is_err());
    }

    fn fd_check(f: impl Fn(&Tensor<f64>) -> f64, grad: &Tensor<f64>, at: &Tensor<f64>) {
        let h = 1e-5;
        for i in 0..at.len() {
            let mut a = at.clone();
            a.data_mut()[i] += h;
            let up = f(&a);
            a.data_mut()[i] -= 2.0 * h;
            let dn = f(&a);
            let fd = (up - dn) / (2.0 * h);
            let g = grad.data()[i];
            assert!((fd - g).abs() <= 1e-6 + 1e-5 * fd.abs(), "i={i} fd={fd} g={g}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(31);
        let z: Tensor<f64> = gaussian(&mut rng, &[3, 2, 3]);
        let teacher: Tensor<f64> = gaussian(&mut rng, &[3, 2, 3]);
        let oh = one_hot::<f64>(&[0, 1, 2, 2, 1, 0], 3, 2, 3).unwrap();

        let soft = make_soft_label(&teacher, 2.0).unwrap();
        let (_, g) = kd_loss_grad(&soft, &z, 2.0).unwrap();
        fd_check(|x| kd_loss(&soft, x, 2.0).unwrap(), &g, &z);

        let (_, g) = ce_loss_grad(&oh, &z).unwrap();
        fd_check(|x| ce_loss(&oh, x).unwrap(), &g, &z);

        let (_, g) = dice_loss_grad(&soft.probs, &z).unwrap();
        fd_check(|x| dice_loss(&soft.probs, &softmax(x, 1.0).unwrap()).unwrap(), &g, &z);

        let w = LossWeights::default();
        for (src, tgt) in [(Source::Original, Target::Onehot(&oh)), (Source::Generated, Target::Logits(&teacher))] {
            let (_, g) = student_loss_grad(src, tgt, &z, &w, 2.0).unwrap();
            fd_check(|x| student_loss(src, tgt, x, &w, 2.0).unwrap().total, &g, &z);
        }
    }

    #[test]
    fn student_loss_composition() {
        let mut rng = Rng::new(8);
        let z: Tensor<f64> = gaussian(&mut rng, &[3, 2, 2]);
        let teacher: Tensor<f64> = gaussian(&mut rng, &[3, 2, 2]);
        let oh = one_hot::<f64>(&[0, 1, 2, 0], 3, 2, 2).unwrap();
        let w = LossWeights::default();
        assert_eq!((w.lambda_ce, w.lambda_kd, w.lambda_dice), (1.0, 0.1, 0.5));

        let no_dice = LossWeights { lambda_dice: 0.0, ..w };
        let l = student_loss(Source::Original, Target::Onehot(&oh), &z, &no_dice, 2.0).unwrap();
        assert_eq!(l.total, ce_loss(&oh, &z).unwrap());
        assert_eq!((l.kd, l.dice), (None, None));

        let no_kd = LossWeights { lambda_kd: 0.0, ..w };
        let l = student_loss(Source::Generated, Target::Logits(&teacher), &z, &no_kd, 2.0).unwrap();
        let target = softmax(&teacher, 1.0).unwrap();
        let want = 0.5 * dice_loss(&target, &softmax(&z, 1.0).unwrap()).unwrap();
        assert!((l.total - want).abs() < 1e-15);
        assert_eq!(l.kd, None);

        assert!(matches!(
            student_loss(Source::Generated, Target::Onehot(&oh), &z, &w, 2.0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            student_loss(Source::Original, Target::Logits(&teacher), &z, &w, 2.0),
            Err(Error::Validation(_))
        ));
        let zero = LossWeights { lambda_ce: 0.0, lambda_kd: 0.0, lambda_dice: 0.0 };
        assert!(student_loss(Source::Original, Target::Onehot(&oh), &z, &zero, 2.0).is_err());
    }
}
