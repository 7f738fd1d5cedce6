//! ASP-VMUNet assembly: six-stage encoder (a CNN stage, then ASP stages),
//! mirrored decoder, shared SAB/CAB skip attention, sigmoid head; parameter
//! and FLOP accounting; checkpoints.

mod accounting;
mod checkpoint;
mod config;

pub use accounting::{accounting_report, count_flops, FlopBreakdown};
pub use checkpoint::{ArrayKind, Checkpoint, NamedArray, RngState, CHECKPOINT_VERSION};
pub use config::NetworkConfig;

use crate::attention::{Cab, Sab};
use crate::blocks::AspBlock;
use crate::error::{dim_err, Result};
use crate::numerics::ops::NORM_EPS;
use crate::numerics::{
    BufferId, Conv2dOpts, Float, Graph, Init, Mode, ParamId, ParamStore, Scope, Tensor, Var,
};

#[derive(Clone, Debug)]
struct ConvBnGelu {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl ConvBnGelu {
    fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, cin: usize, cout: usize, init: &mut Init) -> Result<Self> {
        Ok(ConvBnGelu {
            w: store.register(scope.name("conv.weight"), init.fan_in(&[cout, cin, 3, 3], cin * 9))?,
            b: store.register(scope.name("conv.bias"), init.fan_in(&[cout], cin * 9))?,
            gamma: store.register(scope.name("bn.weight"), Tensor::ones(&[cout]))?,
            beta: store.register(scope.name("bn.bias"), Tensor::zeros(&[cout]))?,
            mean: store.register_buffer(scope.name("bn.running_mean"), Tensor::zeros(&[cout]))?,
            var: store.register_buffer(scope.name("bn.running_var"), Tensor::ones(&[cout]))?,
        })
    }

    fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let y = g.conv2d(x, g.param(self.w), Some(g.param(self.b)), Conv2dOpts::same(3))?;
        let y = g.batch_norm2d(y, g.param(self.gamma), g.param(self.beta), self.mean, self.var, T::c(NORM_EPS))?;
        g.gelu(y)
    }
}

/// 1x1 convolution.
#[derive(Clone, Debug)]
struct Pointwise {
    w: ParamId,
    b: ParamId,
}

impl Pointwise {
    fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, cin: usize, cout: usize, init: &mut Init) -> Result<Self> {
        Ok(Pointwise {
            w: store.register(scope.name("weight"), init.fan_in(&[cout, cin, 1, 1], cin))?,
            b: store.register(scope.name("bias"), init.fan_in(&[cout], cin))?,
        })
    }

    fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.conv2d(x, g.param(self.w), Some(g.param(self.b)), Conv2dOpts::default())
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Cnn(Vec<ConvBnGelu>),
    Asp(Vec<AspBlock>),
}

impl Stage {
    fn forward<T: Float>(&self, g: &Graph<'_, T>, mut x: Var) -> Result<Var> {
        match self {
            Stage::Cnn(layers) => {
                for l in layers {
                    x = l.forward(g, x)?;
                }
            }
            Stage::Asp(blocks) => {
                for b in blocks {
                    x = b.forward(g, x)?;
                }
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Arch {
    encoder: Vec<Stage>,
    /// `down[k]` maps stage `k` to stage `k + 1`.
    down: Vec<Pointwise>,
    sab: Sab,
    cab: Cab,
    /// `decoder[k]` runs at stage `k` width.
    decoder: Vec<Stage>,
    /// `up[k]` maps stage `k + 1` to stage `k`.
    up: Vec<Pointwise>,
    head: Pointwise,
}

/// A built network together with its parameter store.
#[derive(Clone, Debug)]
pub struct Network<T: Float> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

impl<T: Float> Network<T> {
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let ch = &cfg.stage_channels;
        let enc = Scope::new("enc");
        let dec = Scope::new("dec");

        let mut encoder = Vec::with_capacity(6);
        let stem = (0..cfg.encoder_depths[0])
            .map(|i| {
                let cin = if i == 0 { cfg.in_channels } else { ch[0] };
                ConvBnGelu::new(&mut store, &enc.child("stage1").child(format!("block{}", i)), cin, ch[0], &mut init)
            })
            .collect::<Result<_>>()?;
        encoder.push(Stage::Cnn(stem));
        let mut down = Vec::with_capacity(5);
        for k in 1..6 {
            let sc = enc.child(format!("stage{}", k + 1));
            down.push(Pointwise::new(&mut store, &sc.child("down"), ch[k - 1], ch[k], &mut init)?);
            let blocks = (0..cfg.encoder_depths[k])
                .map(|i| AspBlock::new(&mut store, &sc.child(format!("block{}", i)), cfg.block(k), &mut init))
                .collect::<Result<_>>()?;
            encoder.push(Stage::Asp(blocks));
        }

        let sab = Sab::new(&mut store, &Scope::new("skip.sab"), &mut init)?;
        let cab = Cab::new(&mut store, &Scope::new("skip.cab"), &ch[..5], &mut init)?;

        let mut decoder = Vec::with_capacity(6);
        let mut up = Vec::with_capacity(5);
        decoder.push(Stage::Cnn(vec![ConvBnGelu::new(
            &mut store,
            &dec.child("stage1").child("block0"),
            ch[0],
            ch[0],
            &mut init,
        )?]));
        for k in 1..6 {
            let sc = dec.child(format!("stage{}", k + 1));
            decoder.push(Stage::Asp(vec![AspBlock::new(&mut store, &sc.child("block0"), cfg.block(k), &mut init)?]));
            up.push(Pointwise::new(&mut store, &sc.child("up"), ch[k], ch[k - 1], &mut init)?);
        }
        let head = Pointwise::new(&mut store, &Scope::new("head"), ch[0], 1, &mut init)?;
        Ok(Network { cfg: cfg.clone(), store, arch: Arch { encoder, down, sab, cab, decoder, up, head } })
    }

    /// Exact number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    fn check_input(&self, s: &[usize]) -> Result<()> {
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(dim_err!(
                "network input must be [B, {}, H, W] with H, W multiples of 32, got {:?}",
                self.cfg.in_channels,
                s
            ));
        }
        Ok(())
    }

    /// Encoder stage outputs, stage 1 first.
    pub fn encode(&self, g: &Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.check_input(&g.shape(x))?;
        let a = &self.arch;
        let mut feats = Vec::with_capacity(6);
        let mut h = a.encoder[0].forward(g, x)?;
        feats.push(h);
        for k in 1..6 {
            h = g.max_pool2x2(h)?;
            h = a.down[k - 1].forward(g, h)?;
            h = a.encoder[k].forward(g, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Skip features after shared SAB then CAB.
    pub fn skips(&self, g: &Graph<'_, T>, feats: &[Var]) -> Result<Vec<Var>> {
        let sab = feats[..5].iter().map(|&f| self.arch.sab.forward(g, f)).collect::<Result<Vec<_>>>()?;
        self.arch.cab.forward(g, &sab)
    }

    /// Probabilities `[B, 1, H, W]`.
    pub fn forward(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let a = &self.arch;
        let feats = self.encode(g, x)?;
        let skips = self.skips(g, &feats)?;
        let mut h = a.decoder[5].forward(g, feats[5])?;
        for k in (0..5).rev() {
            h = g.upsample_bilinear2x(h)?;
            h = a.up[k].forward(g, h)?;
            h = g.add(h, skips[k])?;
            h = a.decoder[k].forward(g, h)?;
        }
        let logits = a.head.forward(g, h)?;
        g.sigmoid(logits)
    }

    /// Inference-mode forward on a plain tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new(&self.store, Mode::Eval);
        let xv = g.constant(x.clone());
        let y = self.forward(&g, xv)?;
        Ok((*g.value(y)).clone())
    }

    pub fn sab_weight(&self) -> ParamId {
        self.arch.sab.weight()
    }
}
