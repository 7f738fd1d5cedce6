mod conv;
mod elementwise;
mod linear;
mod norm;
mod pool;
mod shape;

pub use conv::Conv2dOpts;
pub use elementwise::{sigmoid, softplus, Unary};
pub use norm::{BN_MOMENTUM, NORM_EPS};
