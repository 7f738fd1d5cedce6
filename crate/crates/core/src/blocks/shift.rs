use crate::error::{config_err, Result};
use crate::numerics::{Float, Graph, Var};

/// Circular left rotation of the last axis by `by` channels.
pub fn rotate_channels<T: Float>(g: &Graph<'_, T>, x: Var, by: usize) -> Result<Var> {
    let s = g.shape(x);
    let axis = s.len() - 1;
    let c = s[axis];
    let by = by % c;
    if by == 0 {
        return Ok(x);
    }
    let head = g.narrow(x, axis, 0, by)?;
    let tail = g.narrow(x, axis, by, c - by)?;
    g.concat(&[tail, head], axis)
}

fn eighth(c: usize) -> Result<usize> {
    if c == 0 || c % 8 != 0 {
        return Err(config_err!("shift round needs channels divisible by 8, got {}", c));
    }
    Ok(c / 8)
}

/// Regroups eight channel segments `Y1..Y8` into `[Y2,Y3],[Y4,Y5],[Y6,Y7],[Y8,Y1]`,
/// i.e. a left rotation of the channel (last) axis by `C/8`.
pub fn shift_round<T: Float>(g: &Graph<'_, T>, x: Var) -> Result<Var> {
    let c = *g.shape(x).last().unwrap_or(&0);
    rotate_channels(g, x, eighth(c)?)
}

/// Inverse of [`shift_round`]: right rotation by `C/8`.
pub fn shift_round_back<T: Float>(g: &Graph<'_, T>, x: Var) -> Result<Var> {
    let c = *g.shape(x).last().unwrap_or(&0);
    let e = eighth(c)?;
    rotate_channels(g, x, c - e)
}
