use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-5;

/// `BCE(p, t) + DiceLoss(p, t)` on probabilities `[B, ...]`.
///
/// BCE is the mean over every pixel. The Dice term is
/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)` per sample, averaged over
/// the batch. Probabilities are clamped to `[1e-7, 1 - 1e-7]`; clamped
/// pixels pass no gradient through the log terms.
pub fn bce_dice_loss<T: Float>(g: &Graph<'_, T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let pv = g.value(pred);
    if pv.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "loss: prediction {:?} and target {:?} differ",
            pv.shape(),
            target.shape()
        )));
    }
    let b = pv.shape().first().copied().unwrap_or(1).max(1);
    let n = pv.numel();
    let per = n / b;
    let (lo, hi) = (T::c(PROB_CLAMP), T::one() - T::c(PROB_CLAMP));
    let eps = T::c(DICE_EPS);
    let t = target.data();
    let p = pv.data();

    let mut bce = T::zero();
    let mut inter = vec![T::zero(); b];
    let mut sums = vec![T::zero(); b];
    for s in 0..b {
        for i in s * per..(s + 1) * per {
            let q = p[i].max(lo).min(hi);
            bce = bce - (t[i] * q.ln() + (T::one() - t[i]) * (T::one() - q).ln());
            inter[s] = inter[s] + q * t[i];
            sums[s] = sums[s] + q + t[i];
        }
    }
    let nn = T::c(n as f64);
    let bb = T::c(b as f64);
    let bce = bce / nn;
    let dice: T = (0..b).map(|s| T::one() - (T::c(2.0) * inter[s] + eps) / (sums[s] + eps)).sum::<T>() / bb;

    let target = target.clone();
    g.custom("bce_dice_loss", Tensor::scalar(bce + dice), &[pred], move |go, sink| {
        let go = go[0];
        let t = target.data();
        let p = pv.data();
        sink.with(pred, |dp| {
            for s in 0..b {
                let (num, den) = (T::c(2.0) * inter[s] + eps, sums[s] + eps);
                for i in s * per..(s + 1) * per {
                    if p[i] < lo || p[i] > hi {
                        continue;
                    }
                    let q = p[i];
                    let d_bce = (q - t[i]) / (q * (T::one() - q)) / nn;
                    let d_dice = -(T::c(2.0) * t[i] * den - num) / (den * den) / bb;
                    dp[i] = dp[i] + go * (d_bce + d_dice);
                }
            }
        });
    })
}
