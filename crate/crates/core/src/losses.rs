//! Segmentation objective: unweighted sum of binary cross-entropy and a
//! smoothed soft Dice loss.
//!
//! Tensor forms operate on `(B, 1, H, W)` logits and `{0, 1}` targets of
//! the same shape and are differentiable with respect to the logits. BCE is
//! the mean over every pixel of the batch; Dice is computed per sample and
//! averaged.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::domain::{LogitMap, Mask, ProbabilityMap};
use crate::error::{Error, Result};
use crate::nn::sigmoid;

/// Probability clamp inside the logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Logit bound equivalent to clamping probabilities to `[eps, 1 - eps]`.
pub fn logit_bound() -> f64 {
    ((1.0 - PROB_EPS) / PROB_EPS).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

/// Differentiable loss terms of one batch.
#[derive(Clone, Debug)]
pub struct LossTensors {
    pub total: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
}

impl LossTensors {
    pub fn value(&self) -> Result<LossValue> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValue {
            total: f(&self.total)?,
            bce: f(&self.bce)?,
            dice: f(&self.dice)?,
        })
    }
}

fn check_dims(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("loss target", pred.dims(), target.dims()));
    }
    Ok(())
}

/// Mean of `-[m log p + (1 - m) log(1 - p)]`, `p = sigmoid(clamp(x))`,
/// evaluated as `relu(x) - x m + log(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_dims(logits, target)?;
    let target = target.to_dtype(logits.dtype())?;
    let l = logit_bound();
    let x = logits.clamp(-l, l)?;
    let soft = ((x.abs()?.neg()?.exp()? + 1.0)?.log()? + x.relu()?)?;
    Ok((soft - (&x * &target)?)?.mean_all()?)
}

/// `1 - (2 TP + 1) / (2 TP + FP + FN + 1)` on probabilities, per sample,
/// averaged over the batch. `2 TP + FP + FN = sum(p) + sum(m)`.
pub fn soft_dice(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_dims(probs, target)?;
    let b = probs.dim(0)?;
    let p = probs.reshape((b, ()))?;
    let m = target.to_dtype(probs.dtype())?.reshape((b, ()))?;
    let tp = (&p * &m)?.sum(D::Minus1)?;
    let fp = (&p * (1.0 - &m)?)?.sum(D::Minus1)?;
    let fn_ = ((1.0 - &p)? * &m)?.sum(D::Minus1)?;
    let num = ((&tp * 2.0)? + 1.0)?;
    let den = ((((&tp * 2.0)? + fp)? + fn_)? + 1.0)?;
    Ok((1.0 - (num / den)?)?.mean_all()?)
}

pub fn dice_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    soft_dice(&sigmoid(logits)?, target)
}

/// `bce + dice`, no weighting.
pub fn seg_loss_tensors(logits: &Tensor, target: &Tensor) -> Result<LossTensors> {
    let bce = bce_with_logits(logits, target)?;
    let dice = dice_with_logits(logits, target)?;
    Ok(LossTensors {
        total: (&bce + &dice)?,
        bce,
        dice,
    })
}

fn map_tensors(pred: &LogitMap, target: &Mask) -> Result<(Tensor, Tensor)> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "loss target",
            &[pred.height(), pred.width()],
            &[target.height(), target.width()],
        ));
    }
    let dev = Device::Cpu;
    let p = pred.to_tensor(DType::F64, &dev)?;
    let m = target.to_tensor(DType::F64, &dev)?;
    Ok((p, m))
}

fn scalar(t: Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

pub fn bce_loss(pred: &LogitMap, target: &Mask) -> Result<f64> {
    let (p, m) = map_tensors(pred, target)?;
    scalar(bce_with_logits(&p, &m)?)
}

pub fn dice_loss(pred: &LogitMap, target: &Mask) -> Result<f64> {
    let (p, m) = map_tensors(pred, target)?;
    scalar(dice_with_logits(&p, &m)?)
}

/// Dice loss of an explicit probability map; exactly 0 when `p == M`.
pub fn dice_loss_probs(pred: &ProbabilityMap, target: &Mask) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "loss target",
            &[pred.height(), pred.width()],
            &[target.height(), target.width()],
        ));
    }
    let dev = Device::Cpu;
    let (h, w) = pred.dims();
    let p = Tensor::from_slice(pred.values(), (1, 1, h, w), &dev)?;
    let m = target.to_tensor(DType::F64, &dev)?;
    scalar(soft_dice(&p, &m)?)
}

pub fn seg_loss(pred: &LogitMap, target: &Mask) -> Result<LossValue> {
    let (p, m) = map_tensors(pred, target)?;
    seg_loss_tensors(&p, &m)?.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn logits(h: usize, w: usize, v: Vec<f64>) -> LogitMap {
        LogitMap::new(h, w, v).unwrap()
    }

    #[test]
    fn zero_logits_give_ln2() {
        let m = Mask::from_fn(3, 5, |y, x| (x + y) % 3 == 0);
        assert!((bce_loss(&logits(3, 5, vec![0.0; 15]), &m).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn half_ones_hand_case() {
        let m = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let l = seg_loss(&logits(2, 2, vec![0.0; 4]), &m).unwrap();
        assert!((l.bce - LN2).abs() < 1e-12);
        assert!((l.dice - 0.4).abs() < 1e-12);
        assert!((l.total - (LN2 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn exact_probabilities_give_zero_dice() {
        let m = Mask::from_fn(4, 4, |y, x| y < x);
        assert_eq!(dice_loss_probs(&m.to_probability(), &m).unwrap(), 0.0);
        let empty = Mask::zeros(4, 4);
        assert_eq!(dice_loss_probs(&empty.to_probability(), &empty).unwrap(), 0.0);
    }

    #[test]
    fn confident_correct_prediction_is_bounded_by_clamp() {
        let m = Mask::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let big = logits(1, 4, vec![50.0, -50.0, 50.0, -50.0]);
        let bce = bce_loss(&big, &m).unwrap();
        assert!(bce <= -(1.0 - PROB_EPS).ln() + 1e-15, "{bce}");
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let err = bce_loss(&logits(2, 2, vec![0.0; 4]), &Mask::zeros(2, 3));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn losses_are_in_range(v in proptest::collection::vec(-30.0f64..30.0, 16), bits in proptest::collection::vec(any::<bool>(), 16)) {
            let m = Mask::new(4, 4, bits.iter().map(|&b| b as u8).collect()).unwrap();
            let l = seg_loss(&logits(4, 4, v), &m).unwrap();
            prop_assert!(l.bce >= 0.0);
            prop_assert!((0.0..=1.0).contains(&l.dice));
            prop_assert!((l.total - l.bce - l.dice).abs() < 1e-15);
        }

        #[test]
        fn dice_is_permutation_invariant(v in proptest::collection::vec(-5.0f64..5.0, 16), bits in proptest::collection::vec(any::<bool>(), 16), rot in 0usize..16) {
            let m = Mask::new(4, 4, bits.iter().map(|&b| b as u8).collect()).unwrap();
            let mut v2 = v.clone();
            let mut b2 = m.pixels().to_vec();
            v2.rotate_left(rot);
            b2.rotate_left(rot);
            let a = dice_loss(&logits(4, 4, v), &m).unwrap();
            let b = dice_loss(&logits(4, 4, v2), &Mask::new(4, 4, b2).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_at_zero_is_sigmoid_minus_target() {
        let x = candle_core::Var::zeros((1, 1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let m = Tensor::new(&[[[[1.0f64, 0.0]]]], &Device::Cpu).unwrap();
        let loss = bce_with_logits(x.as_tensor(), &m).unwrap();
        let g = loss.backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((g[0] - (-0.25)).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15, "{g:?}");
    }
}
