//! Scan plans: how a 2D patch grid becomes a set of 1D sequences and back.
//!
//! A plan is described along three axes: *sampling* (global, or atrous with
//! step `S`, which splits the grid into `S²` interleaved sub-images),
//! *mode* (only row/column raster traversal is provided), and *direction*
//! (start corner and initial orientation). The grid is padded at the bottom
//! and right so both extents are multiples of `S`; padding slots are zero in
//! the sequences and dropped when scattering back.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{config_err, dim_err, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

/// Start corner and initial orientation of a raster traversal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    TopLeftHorizontal,
    TopLeftVertical,
    TopRightHorizontal,
    TopRightVertical,
    BottomLeftHorizontal,
    BottomLeftVertical,
    BottomRightHorizontal,
    BottomRightVertical,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::TopLeftHorizontal,
        Direction::TopLeftVertical,
        Direction::TopRightHorizontal,
        Direction::TopRightVertical,
        Direction::BottomLeftHorizontal,
        Direction::BottomLeftVertical,
        Direction::BottomRightHorizontal,
        Direction::BottomRightVertical,
    ];

    /// The four directions of the cross ("across") scan.
    pub const ACROSS: [Direction; 4] = [
        Direction::TopLeftHorizontal,
        Direction::TopLeftVertical,
        Direction::BottomRightHorizontal,
        Direction::BottomRightVertical,
    ];

    /// Visit order of a `rows x cols` grid as (row, col) pairs.
    pub fn order(self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        use Direction::*;
        let (from_bottom, from_right, vertical) = match self {
            TopLeftHorizontal => (false, false, false),
            TopLeftVertical => (false, false, true),
            TopRightHorizontal => (false, true, false),
            TopRightVertical => (false, true, true),
            BottomLeftHorizontal => (true, false, false),
            BottomLeftVertical => (true, false, true),
            BottomRightHorizontal => (true, true, false),
            BottomRightVertical => (true, true, true),
        };
        let row = |i: usize| if from_bottom { rows - 1 - i } else { i };
        let col = |j: usize| if from_right { cols - 1 - j } else { j };
        let mut out = Vec::with_capacity(rows * cols);
        if vertical {
            for j in 0..cols {
                for i in 0..rows {
                    out.push((row(i), col(j)));
                }
            }
        } else {
            for i in 0..rows {
                for j in 0..cols {
                    out.push((row(i), col(j)));
                }
            }
        }
        out
    }

    pub fn short_name(self) -> &'static str {
        use Direction::*;
        match self {
            TopLeftHorizontal => "tl-h",
            TopLeftVertical => "tl-v",
            TopRightHorizontal => "tr-h",
            TopRightVertical => "tr-v",
            BottomLeftHorizontal => "bl-h",
            BottomLeftVertical => "bl-v",
            BottomRightHorizontal => "br-h",
            BottomRightVertical => "br-v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sampling {
    Global,
    Atrous { step: usize },
}

impl Sampling {
    pub fn step(self) -> usize {
        match self {
            Sampling::Global => 1,
            Sampling::Atrous { step } => step,
        }
    }
}

/// Declarative scan description. Only raster ("vallian") traversal exists.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScanSpec {
    pub sampling: Sampling,
    pub directions: Vec<Direction>,
    /// One direction per sub-image, replacing `directions` for a single
    /// mixed-direction plan (efficient scan).
    pub per_subimage_directions: Option<Vec<Direction>>,
}

impl ScanSpec {
    pub fn atrous(step: usize) -> Self {
        ScanSpec {
            sampling: Sampling::Atrous { step },
            directions: vec![Direction::TopLeftHorizontal],
            per_subimage_directions: None,
        }
    }

    pub fn across(step: usize) -> Self {
        ScanSpec {
            sampling: Sampling::Atrous { step },
            directions: Direction::ACROSS.to_vec(),
            per_subimage_directions: None,
        }
    }

    pub fn efficient() -> Self {
        use Direction::*;
        ScanSpec {
            sampling: Sampling::Atrous { step: 2 },
            directions: vec![TopLeftHorizontal],
            per_subimage_directions: Some(vec![
                TopLeftHorizontal,
                TopLeftHorizontal,
                TopLeftVertical,
                TopLeftVertical,
            ]),
        }
    }

    pub fn step(&self) -> usize {
        self.sampling.step()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.step();
        if s == 0 {
            return Err(config_err!("atrous step must be >= 1"));
        }
        if self.directions.is_empty() || self.directions.len() > 8 {
            return Err(config_err!("scan needs 1..=8 directions, got {}", self.directions.len()));
        }
        let mut uniq = self.directions.clone();
        uniq.sort_by_key(|d| *d as u8);
        uniq.dedup();
        if uniq.len() != self.directions.len() {
            return Err(config_err!("scan directions must be distinct"));
        }
        if let Some(per) = &self.per_subimage_directions {
            if per.len() != s * s {
                return Err(config_err!(
                    "per-sub-image directions need {} entries for step {}, got {}",
                    s * s,
                    s,
                    per.len()
                ));
            }
        }
        Ok(())
    }

    /// Plans for this spec on an `h x w` grid: one per direction, or a
    /// single mixed plan when per-sub-image directions are given.
    pub fn plans(&self, h: usize, w: usize) -> Result<Vec<Arc<ScanPlan>>> {
        self.validate()?;
        let s = self.step();
        match &self.per_subimage_directions {
            Some(per) => Ok(vec![cached(h, w, s, per.clone())?]),
            None => self.directions.iter().map(|&d| cached(h, w, s, vec![d; s * s])).collect(),
        }
    }

    /// Number of independently parameterized sequences per image.
    pub fn sequences_per_image(&self) -> usize {
        let s2 = self.step() * self.step();
        match self.per_subimage_directions {
            Some(_) => s2,
            None => self.directions.len() * s2,
        }
    }
}

/// Minimal bottom/right padding making both extents divisible by `step`.
pub fn compute_padding(h: usize, w: usize, step: usize) -> (usize, usize) {
    ((step - h % step) % step, (step - w % step) % step)
}

/// A precomputed bijection between the padded patch grid and `S²`
/// sub-sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPlan {
    pub h: usize,
    pub w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub step: usize,
    /// Direction used inside each sub-image, row-major by `(r mod S, c mod S)`.
    pub directions: Vec<Direction>,
    /// For each sub-sequence, padded-grid flat indices in visit order.
    pub forward: Vec<Vec<usize>>,
    /// For each padded-grid flat index, its (sub-sequence, position).
    pub inverse: Vec<(usize, usize)>,
}

impl ScanPlan {
    /// Atrous plan with top-left horizontal raster inside every sub-image.
    pub fn atrous(h: usize, w: usize, step: usize) -> Result<Self> {
        Self::with_directions(h, w, step, &vec![Direction::TopLeftHorizontal; step * step])
    }

    pub fn global(h: usize, w: usize) -> Result<Self> {
        Self::atrous(h, w, 1)
    }

    /// Padded patch `(r, c)` goes to sub-image `(r mod S, c mod S)` at local
    /// position `(r div S, c div S)`; each sub-image is traversed in its own
    /// direction.
    pub fn with_directions(h: usize, w: usize, step: usize, directions: &[Direction]) -> Result<Self> {
        if h == 0 || w == 0 || step == 0 {
            return Err(dim_err!("scan plan needs positive extents and step, got {}x{} step {}", h, w, step));
        }
        if directions.len() != step * step {
            return Err(dim_err!("{} directions for {} sub-images", directions.len(), step * step));
        }
        let (pad_h, pad_w) = compute_padding(h, w, step);
        let (ph, pw) = (h + pad_h, w + pad_w);
        let (sub_h, sub_w) = (ph / step, pw / step);
        let mut forward = Vec::with_capacity(step * step);
        let mut inverse = vec![(0, 0); ph * pw];
        for (k, dir) in directions.iter().enumerate() {
            let (dr, dc) = (k / step, k % step);
            let seq: Vec<usize> = dir
                .order(sub_h, sub_w)
                .into_iter()
                .map(|(i, j)| (i * step + dr) * pw + j * step + dc)
                .collect();
            for (pos, &idx) in seq.iter().enumerate() {
                inverse[idx] = (k, pos);
            }
            forward.push(seq);
        }
        Ok(ScanPlan { h, w, pad_h, pad_w, step, directions: directions.to_vec(), forward, inverse })
    }

    /// The four cross-scan plans on the full grid.
    pub fn across(h: usize, w: usize) -> Result<[ScanPlan; 4]> {
        Self::across_atrous(h, w, 1)
    }

    /// Cross-scan directions applied inside every atrous sub-image.
    pub fn across_atrous(h: usize, w: usize, step: usize) -> Result<[ScanPlan; 4]> {
        let mk = |d: Direction| Self::with_directions(h, w, step, &vec![d; step * step]);
        Ok([
            mk(Direction::ACROSS[0])?,
            mk(Direction::ACROSS[1])?,
            mk(Direction::ACROSS[2])?,
            mk(Direction::ACROSS[3])?,
        ])
    }

    /// Step-2 sampling; the top two sub-images are scanned horizontally and
    /// the bottom two vertically.
    pub fn efficient(h: usize, w: usize) -> Result<Self> {
        let dirs = ScanSpec::efficient().per_subimage_directions.unwrap();
        Self::with_directions(h, w, 2, &dirs)
    }

    pub fn num_sequences(&self) -> usize {
        self.step * self.step
    }

    pub fn seq_len(&self) -> usize {
        (self.h + self.pad_h) * (self.w + self.pad_w) / (self.step * self.step)
    }

    pub fn padded_width(&self) -> usize {
        self.w + self.pad_w
    }

    pub fn padded_len(&self) -> usize {
        (self.h + self.pad_h) * (self.w + self.pad_w)
    }

    /// Unpadded raster index for a padded-grid index, `None` for padding.
    pub fn source(&self, padded: usize) -> Option<usize> {
        let pw = self.padded_width();
        let (r, c) = (padded / pw, padded % pw);
        (r < self.h && c < self.w).then_some(r * self.w + c)
    }

    pub fn is_padding(&self, padded: usize) -> bool {
        self.source(padded).is_none()
    }

    /// Sub-sequences as rows of padded-grid indices, `-1` for padding.
    pub fn rows_with_padding_marked(&self) -> Vec<Vec<i64>> {
        self.forward
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|&i| if self.is_padding(i) { -1 } else { i as i64 })
                    .collect()
            })
            .collect()
    }

    /// Row index into the stacked `[B*K, L, ..]` layout.
    fn stacked_row(&self, order: StackOrder, batch: usize, b: usize, k: usize, pos: usize) -> usize {
        let kk = self.num_sequences();
        let seq = match order {
            StackOrder::BatchMajor => b * kk + k,
            StackOrder::SequenceMajor => k * batch + b,
        };
        seq * self.seq_len() + pos
    }

    fn gather_index(&self, batch: usize, order: StackOrder) -> Vec<Option<usize>> {
        let (kk, l, hw) = (self.num_sequences(), self.seq_len(), self.h * self.w);
        let mut idx = vec![None; batch * kk * l];
        for b in 0..batch {
            for (k, seq) in self.forward.iter().enumerate() {
                for (pos, &p) in seq.iter().enumerate() {
                    idx[self.stacked_row(order, batch, b, k, pos)] = self.source(p).map(|s| b * hw + s);
                }
            }
        }
        idx
    }

    fn scatter_index(&self, batch: usize, order: StackOrder) -> Vec<Option<usize>> {
        let (hw, pw) = (self.h * self.w, self.padded_width());
        let mut idx = Vec::with_capacity(batch * hw);
        for b in 0..batch {
            for r in 0..self.h {
                for c in 0..self.w {
                    let (k, pos) = self.inverse[r * pw + c];
                    idx.push(Some(self.stacked_row(order, batch, b, k, pos)));
                }
            }
        }
        idx
    }

    /// Sub-image label of every stacked sequence.
    pub fn sequence_labels(&self, batch: usize, order: StackOrder) -> Vec<usize> {
        let kk = self.num_sequences();
        (0..batch * kk)
            .map(|n| match order {
                StackOrder::BatchMajor => n % kk,
                StackOrder::SequenceMajor => n / batch,
            })
            .collect()
    }

    /// Gathers `[B, C, H, W]` into stacked sub-sequences `[B*S², L, C]`,
    /// zero at padding slots, sub-sequences of one image contiguous.
    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[2] != self.h || s[3] != self.w {
            return Err(dim_err!("apply_plan: input {:?} does not match a {}x{} plan", s, self.h, self.w));
        }
        let (b, c) = (s[0], s[1]);
        let seq = image_to_sequence(x);
        let idx = self.gather_index(b, StackOrder::BatchMajor);
        let mut out = vec![T::zero(); idx.len() * c];
        for (r, src) in idx.iter().enumerate() {
            if let Some(src) = src {
                out[r * c..(r + 1) * c].copy_from_slice(&seq.data()[src * c..(src + 1) * c]);
            }
        }
        Tensor::new(&[b * self.num_sequences(), self.seq_len(), c], out)
    }

    /// Exact inverse of [`apply`](Self::apply): scatters stacked
    /// sub-sequences back to `[B, C, H, W]` and drops padding.
    pub fn invert<T: Float>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let s = y.shape();
        let kk = self.num_sequences();
        if s.len() != 3 || s[1] != self.seq_len() || s[0] % kk != 0 {
            return Err(dim_err!(
                "invert_plan: sequences {:?} do not match {} sub-sequences of length {}",
                s,
                kk,
                self.seq_len()
            ));
        }
        let (b, c) = (s[0] / kk, s[2]);
        let idx = self.scatter_index(b, StackOrder::BatchMajor);
        let mut seq = vec![T::zero(); idx.len() * c];
        for (r, src) in idx.iter().enumerate() {
            let src = src.expect("scatter index covers every cell");
            seq[r * c..(r + 1) * c].copy_from_slice(&y.data()[src * c..(src + 1) * c]);
        }
        let seq = Tensor::new(&[b, self.h * self.w, c], seq)?;
        sequence_to_image(&seq, self.h, self.w)
    }

    /// Differentiable gather from raster sequences `[B, H*W, C]` to stacked
    /// sub-sequences `[B*S², L, C]`.
    pub fn gather<T: Float>(&self, g: &Graph<'_, T>, x: Var, order: StackOrder) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.h * self.w {
            return Err(dim_err!("scan gather: input {:?} does not match a {}x{} plan", s, self.h, self.w));
        }
        let (b, c) = (s[0], s[2]);
        let idx = Rc::new(self.gather_index(b, order));
        g.gather_rows(x, c, idx, &[b * self.num_sequences(), self.seq_len(), c])
    }

    /// Differentiable inverse of [`gather`](Self::gather).
    pub fn scatter<T: Float>(&self, g: &Graph<'_, T>, y: Var, order: StackOrder) -> Result<Var> {
        let s = g.shape(y);
        let kk = self.num_sequences();
        if s.len() != 3 || s[1] != self.seq_len() || s[0] % kk != 0 {
            return Err(dim_err!("scan scatter: sequences {:?} do not match plan", s));
        }
        let (b, c) = (s[0] / kk, s[2]);
        let idx = Rc::new(self.scatter_index(b, order));
        g.gather_rows(y, c, idx, &[b, self.h * self.w, c])
    }
}

/// How stacked sub-sequences are ordered along the leading axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StackOrder {
    /// `b * K + k`: all sub-sequences of one image are contiguous.
    #[default]
    BatchMajor,
    /// `k * B + b`
    SequenceMajor,
}

impl fmt::Display for ScanPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.rows_with_padding_marked() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// `[B, C, H, W] -> [B, H*W, C]` (row-major raster of channel vectors).
pub fn image_to_sequence<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * hw + p) * c + ci] = x.data()[(bi * c + ci) * hw + p];
            }
        }
    }
    Tensor::from_parts(vec![b, hw, c], out)
}

/// `[B, H*W, C] -> [B, C, H, W]`.
pub fn sequence_to_image<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(dim_err!("sequence {:?} is not a {}x{} raster", s, h, w));
    }
    let (b, hw, c) = (s[0], s[1], s[2]);
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for p in 0..hw {
            for ci in 0..c {
                out[(bi * c + ci) * hw + p] = x.data()[(bi * hw + p) * c + ci];
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

type CacheKey = (usize, usize, usize, Vec<Direction>);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<ScanPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<ScanPlan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Shared, immutable plan for `(h, w, step, directions)`, built on first use.
pub fn cached(h: usize, w: usize, step: usize, directions: Vec<Direction>) -> Result<Arc<ScanPlan>> {
    let key = (h, w, step, directions);
    if let Some(p) = cache().lock().unwrap().get(&key) {
        return Ok(Arc::clone(p));
    }
    let plan = Arc::new(ScanPlan::with_directions(h, w, step, &key.3)?);
    let mut guard = cache().lock().unwrap();
    Ok(Arc::clone(guard.entry(key).or_insert(plan)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_examples() {
        assert_eq!(compute_padding(8, 8, 2), (0, 0));
        assert_eq!(compute_padding(7, 7, 2), (1, 1));
        assert_eq!(compute_padding(5, 7, 3), (1, 2));
    }

    #[test]
    fn step_one_is_identity_raster() {
        let p = ScanPlan::atrous(4, 4, 1).unwrap();
        assert_eq!(p.forward, vec![(0..16).collect::<Vec<_>>()]);
    }

    #[test]
    fn spec_rejects_bad_direction_sets() {
        let mut s = ScanSpec::atrous(2);
        s.directions.clear();
        assert!(s.validate().is_err());
        let mut s = ScanSpec::atrous(2);
        s.directions = vec![Direction::TopLeftHorizontal; 2];
        assert!(s.validate().is_err());
        let mut s = ScanSpec::efficient();
        s.per_subimage_directions.as_mut().unwrap().pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn cache_returns_shared_plan() {
        let a = cached(5, 6, 2, vec![Direction::TopLeftHorizontal; 4]).unwrap();
        let b = cached(5, 6, 2, vec![Direction::TopLeftHorizontal; 4]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn extent_mismatch_is_dimension_error() {
        let p = ScanPlan::atrous(4, 4, 2).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 5]);
        assert!(matches!(p.apply(&x), Err(crate::Error::Dimension(_))));
        let y = Tensor::<f64>::zeros(&[4, 3, 1]);
        assert!(matches!(p.invert(&y), Err(crate::Error::Dimension(_))));
    }
}
