use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// Binarization threshold applied to predicted probabilities.
pub const THRESHOLD: f64 = 0.5;

/// Pixel confusion counts. Dataset-level metrics sum counts first
/// (micro-average) and derive ratios from the totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// `num / den`, with an empty denominator meaning both sides agree on
/// "nothing here", scored 1.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Foreground IoU `tp / (tp + fp + fn)`.
    pub fn miou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// Mean of foreground and background IoU.
    pub fn miou_two_class(&self) -> f64 {
        let bg = ratio(self.tn, self.tn + self.fp + self.fn_);
        0.5 * (self.miou() + bg)
    }

    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn acc(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn spe(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn sen(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Adds one pixel.
    #[inline]
    pub fn record(&mut self, pred: bool, target: bool) {
        match (pred, target) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

impl Add for Metrics {
    type Output = Metrics;
    fn add(self, o: Metrics) -> Metrics {
        Metrics { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for Metrics {
    fn add_assign(&mut self, o: Metrics) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Metrics {
    fn sum<I: Iterator<Item = Metrics>>(iter: I) -> Metrics {
        iter.fold(Metrics::default(), Add::add)
    }
}

/// `MIOU=91.57 DSC=95.60 Acc=.. Spe=.. Sen=..`, percentages.
impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MIOU={:.2} DSC={:.2} Acc={:.2} Spe={:.2} Sen={:.2}",
            100.0 * self.miou(),
            100.0 * self.dsc(),
            100.0 * self.acc(),
            100.0 * self.spe(),
            100.0 * self.sen()
        )
    }
}

/// Confusion counts of thresholded `pred` against a binary `target`.
pub fn compute_metrics<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Metrics> {
    if pred.numel() != target.numel() {
        return Err(Error::Dimension(format!(
            "metrics: prediction {:?} and target {:?} differ in size",
            pred.shape(),
            target.shape()
        )));
    }
    let th = T::c(THRESHOLD);
    let mut m = Metrics::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let t = if t == T::one() {
            true
        } else if t == T::zero() {
            false
        } else {
            return Err(Error::Data(format!("metrics: target value {} is not binary", t)));
        };
        m.record(p >= th, t);
    }
    Ok(m)
}
