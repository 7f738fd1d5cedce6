//! Elementwise arithmetic, activations, and same-rank broadcasting.

use crate::error::{dim_err, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a, b));
    }
    Ok(())
}

pub fn sigmoid<T: Float>(x: T) -> T {
    let e = (-x.abs()).fast_exp();
    let r = T::one() / (T::one() + e);
    if x >= T::zero() {
        r
    } else {
        e * r
    }
}

pub fn softplus<T: Float>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::c(20.0) {
        x
    } else {
        x.fast_exp().ln_1p()
    }
}

fn gelu<T: Float>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Gelu,
    Relu,
    Exp,
    Log,
    Softplus,
    Neg,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Neg => "neg",
        }
    }

    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Neg => -x,
        }
    }

    /// Whether the derivative needs the forward output.
    fn keeps_output(self) -> bool {
        matches!(self, Unary::Sigmoid | Unary::Exp)
    }

    fn map_slice<T: Float>(self, x: &[T]) -> Vec<T> {
        fn go<T: Float>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
            x.iter().map(|&v| f(v)).collect()
        }
        match self {
            Unary::Sigmoid => go(x, sigmoid),
            Unary::Silu => go(x, |v| v * sigmoid(v)),
            Unary::Gelu => go(x, gelu),
            Unary::Relu => go(x, |v| v.max(T::zero())),
            Unary::Exp => go(x, |v| v.exp()),
            Unary::Log => go(x, |v| v.ln()),
            Unary::Softplus => go(x, softplus),
            Unary::Neg => go(x, |v| -v),
        }
    }

    /// `dx += g * f'(x)`; `y` is the forward output when `keeps_output`.
    fn accumulate_grad<T: Float>(self, g: &[T], x: &[T], y: &[T], dx: &mut [T]) {
        fn go<T: Float>(g: &[T], x: &[T], dx: &mut [T], f: impl Fn(T) -> T) {
            for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                *d = *d + gi * f(xi);
            }
        }
        match self {
            Unary::Sigmoid | Unary::Exp => {
                let sig = self == Unary::Sigmoid;
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gi * if sig { yi * (T::one() - yi) } else { yi };
                }
            }
            Unary::Silu => go(g, x, dx, |v| {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            }),
            Unary::Gelu => go(g, x, dx, gelu_grad),
            Unary::Relu => go(g, x, dx, |v| if v > T::zero() { T::one() } else { T::zero() }),
            Unary::Log => go(g, x, dx, |v| T::one() / v),
            Unary::Softplus => go(g, x, dx, sigmoid),
            Unary::Neg => go(g, x, dx, |_| -T::one()),
        }
    }
}

/// Maps an index into `out_shape` to the offset of the broadcast operand.
/// `small` has the same rank, each extent either equal or 1.
fn broadcast_offsets(out_shape: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let n: usize = out_shape.iter().product();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

fn check_broadcast(big: &[usize], small: &[usize], op: &str) -> Result<()> {
    if big.len() != small.len()
        || big.iter().zip(small).any(|(&b, &s)| s != b && s != 1)
    {
        return Err(dim_err!("{op}: shape {:?} does not broadcast onto {:?}", small, big));
    }
    Ok(())
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn unary(&self, op: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), op.map_slice(xv.data()));
        let yv = op.keeps_output().then(|| out.clone());
        self.custom(op.name(), out, &[x], move |g, sink| {
            sink.with(x, |dx| {
                let y = yv.as_ref().map(|t| t.data()).unwrap_or(&[]);
                op.accumulate_grad(g, xv.data(), y, dx);
            });
        })
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn silu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }
    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }
    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.custom("add", out, &[a, b], move |g, sink| {
            sink.add(a, g);
            sink.add(b, g);
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "sub")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.custom("sub", out, &[a, b], move |g, sink| {
            sink.add(a, g);
            sink.with(b, |db| {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d = *d - *gi;
                }
            });
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.custom("mul", out, &[a, b], move |g, sink| {
            sink.with(a, |da| {
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * bv.data()[i];
                }
            });
            sink.with(b, |db| {
                for i in 0..g.len() {
                    db[i] = db[i] + g[i] * av.data()[i];
                }
            });
        })
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.map(|v| v * c);
        self.custom("scale", out, &[x], move |g, sink| {
            sink.with(x, |dx| {
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * c;
                }
            });
        })
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.map(|v| v + c);
        self.custom("add_scalar", out, &[x], move |g, sink| sink.add(x, g))
    }

    /// Same-rank broadcasting multiply: `s` has extents equal to `x` or 1.
    pub fn mul_bcast(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        check_broadcast(xv.shape(), sv.shape(), "mul_bcast")?;
        let offs = broadcast_offsets(xv.shape(), sv.shape());
        let data = xv.data().iter().zip(&offs).map(|(v, &o)| *v * sv.data()[o]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.custom("mul_bcast", out, &[x, s], move |g, sink| {
            sink.with(x, |dx| {
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * sv.data()[offs[i]];
                }
            });
            sink.with(s, |ds| {
                for i in 0..g.len() {
                    ds[offs[i]] = ds[offs[i]] + g[i] * xv.data()[i];
                }
            });
        })
    }

    /// Same-rank broadcasting add.
    pub fn add_bcast(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        check_broadcast(xv.shape(), sv.shape(), "add_bcast")?;
        let offs = broadcast_offsets(xv.shape(), sv.shape());
        let data = xv.data().iter().zip(&offs).map(|(v, &o)| *v + sv.data()[o]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.custom("add_bcast", out, &[x, s], move |g, sink| {
            sink.add(x, g);
            sink.with(s, |ds| {
                for i in 0..g.len() {
                    ds[offs[i]] = ds[offs[i]] + g[i];
                }
            });
        })
    }

    /// Multiplies every element by a one-element tensor (e.g. a learnable
    /// residual factor).
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != 1 {
            return Err(dim_err!("mul_scalar_var: scale must have one element, got {:?}", sv.shape()));
        }
        let c = sv.data()[0];
        let out = xv.map(|v| v * c);
        self.custom("mul_scalar_var", out, &[x, s], move |g, sink| {
            sink.with(x, |dx| {
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * c;
                }
            });
            sink.with(s, |ds| {
                let mut acc = T::zero();
                for i in 0..g.len() {
                    acc = acc + g[i] * xv.data()[i];
                }
                ds[0] = ds[0] + acc;
            });
        })
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum());
        self.custom("sum_all", out, &[x], move |g, sink| {
            let g0 = g[0];
            sink.with(x, |dx| dx.iter_mut().for_each(|d| *d = *d + g0));
        })
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = T::c(self.value(x).numel() as f64);
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / n)
    }
}
