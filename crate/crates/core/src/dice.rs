//! Dice coefficient, the smoothed log-Dice loss and its gradient.
//!
//! For soft predictions the set sizes are `|P| = Σp`, `|T| = Σt` and the
//! intersection is `|P∩T| = Σ p·t`. Sums are accumulated in `f64`.

use crate::error::{Error, Result};
use crate::nn::Real;

/// Threshold at or above which a soft prediction counts as positive.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// A prediction and a binary target of equal length.
#[derive(Debug, Clone, Copy)]
pub struct MaskPair<'a, T> {
    prediction: &'a [T],
    target: &'a [T],
}

impl<'a, T: Real> MaskPair<'a, T> {
    pub fn new(prediction: &'a [T], target: &'a [T]) -> Result<Self> {
        if prediction.len() != target.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, target {}",
                prediction.len(),
                target.len()
            )));
        }
        if let Some(v) = target.iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::precondition(format!(
                "target value {v} is not binary"
            )));
        }
        Ok(Self { prediction, target })
    }

    pub fn prediction(&self) -> &[T] {
        self.prediction
    }

    pub fn target(&self) -> &[T] {
        self.target
    }

    fn require_soft(&self) -> Result<()> {
        match self
            .prediction
            .iter()
            .find(|&&p| !(p >= T::zero() && p <= T::one()))
        {
            Some(p) => Err(Error::precondition(format!(
                "prediction value {p} outside [0, 1]"
            ))),
            None => Ok(()),
        }
    }

    /// (|P|, |T|, |P∩T|)
    fn sums(&self) -> (f64, f64, f64) {
        let mut sp = 0.0;
        let mut st = 0.0;
        let mut si = 0.0;
        for (&p, &t) in self.prediction.iter().zip(self.target) {
            let (p, t) = (p.as_f64(), t.as_f64());
            sp += p;
            st += t;
            si += p * t;
        }
        (sp, st, si)
    }
}

/// `2|P∩T| / (|P| + |T|)` for a binary prediction; 1.0 when both masks are empty.
pub fn dice<T: Real>(pair: &MaskPair<'_, T>) -> Result<f64> {
    if let Some(v) = pair
        .prediction
        .iter()
        .find(|&&p| p != T::zero() && p != T::one())
    {
        return Err(Error::precondition(format!(
            "dice needs a binary prediction, found {v}"
        )));
    }
    let (sp, st, si) = pair.sums();
    if sp + st == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * si / (sp + st))
}

/// Dice of soft predictions after thresholding at [`BINARIZE_THRESHOLD`] (inclusive).
pub fn dice_thresholded<T: Real>(prediction: &[T], target: &[T]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::shape("prediction and target lengths differ"));
    }
    let mut sp = 0u64;
    let mut st = 0u64;
    let mut si = 0u64;
    for (&p, &t) in prediction.iter().zip(target) {
        let pb = p.as_f64() >= BINARIZE_THRESHOLD;
        let tb = t == T::one();
        sp += pb as u64;
        st += tb as u64;
        si += (pb && tb) as u64;
    }
    if sp + st == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * si as f64 / (sp + st) as f64)
}

/// `log(|P| + |T| + 1) − log(2|P∩T| + 1)`.
pub fn soft_dice_loss<T: Real>(pair: &MaskPair<'_, T>) -> Result<f64> {
    pair.require_soft()?;
    let (sp, st, si) = pair.sums();
    Ok((sp + st + 1.0).ln() - (2.0 * si + 1.0).ln())
}

/// `∂loss/∂p_i = 1/(|P| + |T| + 1) − 2 t_i / (2|P∩T| + 1)`.
pub fn soft_dice_loss_grad<T: Real>(pair: &MaskPair<'_, T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); pair.prediction.len()];
    soft_dice_loss_grad_into(pair, T::one(), &mut out)?;
    Ok(out)
}

/// Writes `scale · ∂loss/∂p` into `out` and returns the loss.
pub fn soft_dice_loss_grad_into<T: Real>(
    pair: &MaskPair<'_, T>,
    scale: T,
    out: &mut [T],
) -> Result<f64> {
    pair.require_soft()?;
    if out.len() != pair.prediction.len() {
        return Err(Error::shape("gradient buffer length differs from mask"));
    }
    let (sp, st, si) = pair.sums();
    let a = 1.0 / (sp + st + 1.0);
    let b = 2.0 / (2.0 * si + 1.0);
    let s = scale.as_f64();
    for (o, &t) in out.iter_mut().zip(pair.target) {
        *o = T::of_f64(s * (a - b * t.as_f64()));
    }
    Ok((sp + st + 1.0).ln() - (2.0 * si + 1.0).ln())
}
