use std::fmt::Write;

use super::{Network, NetworkConfig};
use crate::blocks::{BlockConfig, PvmKind};
use crate::numerics::Float;
use crate::scan::{compute_padding, ScanSpec};
use crate::ssm::MambaConfig;

/// Multiply-accumulate estimate, by component.
///
/// Covered: every convolution (`H*W*Cout*Cin/groups*k*k`), every linear
/// layer (`tokens*din*dout`), and the Mamba cores (projections, causal conv,
/// selective-parameter projections, and three multiplies per state element
/// in the scan), once per image token and scanned plan. Not covered:
/// normalizations, activations, pooling, resampling, elementwise products.
///
/// Zero padding added by atrous sampling when a grid extent is not a
/// multiple of the step is extra work on top; it is kept out of the parts
/// and reported in `padding`.
#[derive(Clone, Debug, Default)]
pub struct FlopBreakdown {
    pub parts: Vec<(String, u64)>,
    pub padding: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.parts.iter().map(|(_, v)| v).sum()
    }

    fn push(&mut self, name: impl Into<String>, v: u64) {
        self.parts.push((name.into(), v));
    }
}

fn conv(h: usize, w: usize, cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    (h * w * cout * (cin / groups) * k * k) as u64
}

/// (image-token MACs, padding-token MACs) of one core.
fn mamba_macs(spec: &ScanSpec, d: usize, h: usize, w: usize) -> (u64, u64) {
    let s = spec.step();
    let (ph, pw) = compute_padding(h, w, s);
    let pad_tokens = (h + ph) * (w + pw) - h * w;
    let plans = match spec.per_subimage_directions {
        Some(_) => 1,
        None => spec.directions.len(),
    };
    let per = plans * MambaConfig::new(d).macs_per_token();
    ((per * h * w) as u64, (per * pad_tokens) as u64)
}

/// (MACs, padding MACs) of one ASP block.
fn block_macs(b: &BlockConfig, h: usize, w: usize) -> (u64, u64) {
    let c = b.channels;
    let hw = h * w;
    let spec = b.scan_spec();
    let hid = |r: usize| (c / r).max(4);
    let mut total = 0;
    let mut padding = 0;
    for kind in [PvmKind::Plain, b.second_kind()] {
        let cores = match kind {
            PvmKind::ShiftNoncircular => vec![(3, c / 4), (2, c / 8)],
            _ => vec![(4, c / 4)],
        };
        for (n, d) in cores {
            let (m, p) = mamba_macs(&spec, d, h, w);
            total += n * m;
            padding += n * p;
        }
        total += (hw * c * c) as u64;
        if b.flags.cnn {
            total += conv(h, w, c, c, 3, c) + conv(h, w, c, c, 1, 1);
        }
        if b.flags.se {
            total += (2 * c * hid(b.se_reduction)) as u64;
        }
        if b.flags.sk {
            total += (3 * c * hid(b.sk_reduction)) as u64;
        }
    }
    (total, padding)
}

/// MAC estimate for one image of the configured size.
pub fn count_flops(cfg: &NetworkConfig) -> FlopBreakdown {
    let ch = &cfg.stage_channels;
    let size = |k: usize| (cfg.height >> k, cfg.width >> k);
    let mut out = FlopBreakdown::default();
    let (h0, w0) = size(0);
    let mut stem = conv(h0, w0, cfg.in_channels, ch[0], 3, 1);
    stem += (cfg.encoder_depths[0] as u64 - 1) * conv(h0, w0, ch[0], ch[0], 3, 1);
    out.push("enc.stage1", stem);
    for k in 1..6 {
        let (h, w) = size(k);
        out.push(format!("enc.stage{}.down", k + 1), conv(h, w, ch[k - 1], ch[k], 1, 1));
        let (m, p) = block_macs(&cfg.block(k), h, w);
        let n = cfg.encoder_depths[k] as u64;
        out.push(format!("enc.stage{}", k + 1), n * m);
        out.padding += n * p;
    }
    let mut skip = 0;
    for k in 0..5 {
        let (h, w) = size(k);
        skip += conv(h, w, 2, 1, 7, 1) + (ch[k] * ch[k]) as u64;
    }
    skip += 3 * ch[..5].iter().sum::<usize>() as u64;
    out.push("skip", skip);
    for k in (1..6).rev() {
        let (h, w) = size(k);
        let (m, p) = block_macs(&cfg.block(k), h, w);
        out.push(format!("dec.stage{}", k + 1), m);
        out.padding += p;
        let (hu, wu) = size(k - 1);
        out.push(format!("dec.stage{}.up", k + 1), conv(hu, wu, ch[k], ch[k - 1], 1, 1));
    }
    out.push("dec.stage1", conv(h0, w0, ch[0], ch[0], 3, 1));
    out.push("head", conv(h0, w0, ch[0], 1, 1, 1));
    out
}

fn is_bundle(name: &str) -> bool {
    ["mamba.x_proj", "mamba.dt_proj", "mamba.A_log", "mamba.D"].iter().any(|p| name.contains(p))
}

/// Human-readable parameter and FLOP accounting for a built network.
pub fn accounting_report<T: Float>(net: &Network<T>) -> String {
    let cfg = &net.cfg;
    let store = &net.store;
    let sum = |pred: &dyn Fn(&str) -> bool| -> usize {
        store.params().iter().filter(|p| pred(&p.name)).map(|p| p.value.numel()).sum()
    };
    let total = net.count_parameters();
    let mut r = String::new();
    let _ = writeln!(r, "network: {} (stages {:?}, depths {:?})", cfg.variant, cfg.stage_channels, cfg.encoder_depths);
    let _ = writeln!(r, "scan: {:?}, atrous step {}, flags {}", cfg.scan, cfg.atrous_step, cfg.flags.label());
    let _ = writeln!(r, "parameters: {} ({:.3}M)", total, total as f64 / 1e6);
    let reference = match cfg.variant.as_str() {
        "base" => Some(4.69e6),
        "tiny" => Some(0.29e6),
        _ => None,
    };
    if let Some(rf) = reference {
        let _ = writeln!(r, "reference size: {:.2}M, ratio {:.3}", rf / 1e6, total as f64 / rf);
    }
    let _ = writeln!(r, "\n{:<28}{:>12}", "component", "params");
    let mut rows: Vec<(String, usize)> = Vec::new();
    rows.push(("enc.stage1 (cnn)".into(), store.count_prefix("enc.stage1.")));
    for k in 2..=6 {
        rows.push((format!("enc.stage{k}.down"), store.count_prefix(&format!("enc.stage{k}.down."))));
        let blocks = store.count_prefix(&format!("enc.stage{k}.")) - store.count_prefix(&format!("enc.stage{k}.down."));
        rows.push((format!("enc.stage{k} (asp x{})", cfg.encoder_depths[k - 1]), blocks));
    }
    rows.push(("skip.sab".into(), store.count_prefix("skip.sab.")));
    rows.push(("skip.cab".into(), store.count_prefix("skip.cab.")));
    for k in (2..=6).rev() {
        let up = store.count_prefix(&format!("dec.stage{k}.up."));
        rows.push((format!("dec.stage{k} (asp)"), store.count_prefix(&format!("dec.stage{k}.")) - up));
        rows.push((format!("dec.stage{k}.up"), up));
    }
    rows.push(("dec.stage1 (cnn)".into(), store.count_prefix("dec.stage1.")));
    rows.push(("head".into(), store.count_prefix("head.")));
    for (name, n) in &rows {
        let _ = writeln!(r, "{:<28}{:>12}", name, n);
    }
    debug_assert_eq!(rows.iter().map(|(_, n)| n).sum::<usize>(), total);

    let bundles = sum(&|n| is_bundle(n));
    let shared = sum(&|n| n.contains(".mamba.") && !is_bundle(n)) + sum(&|n| n.contains(".edge_mamba.") && !is_bundle(n));
    let tails = sum(&|n| n.contains(".pvm.") && !n.contains("mamba."));
    let cnn = sum(&|n| n.contains(".cnn."));
    let se = sum(&|n| n.contains(".se."));
    let sk = sum(&|n| n.contains(".sk."));
    let k = cfg.block(1).scan_spec().sequences_per_image();
    let _ = writeln!(r, "\nby kind across all ASP blocks:");
    let _ = writeln!(r, "{:<28}{:>12}", "mamba shared weights", shared);
    let _ = writeln!(r, "{:<28}{:>12}", format!("mamba per-sequence x{k}"), bundles);
    let _ = writeln!(r, "{:<28}{:>12}", "pvm norms/theta/proj", tails);
    let _ = writeln!(r, "{:<28}{:>12}", "cnn branches", cnn);
    let _ = writeln!(r, "{:<28}{:>12}", "se blocks", se);
    let _ = writeln!(r, "{:<28}{:>12}", "sk blocks", sk);
    let other = total - bundles - shared - tails - cnn - se - sk;
    let _ = writeln!(r, "{:<28}{:>12}", "resampling/stem/skip/head", other);

    let flops = count_flops(cfg);
    let _ = writeln!(
        r,
        "\nMAC estimate at {}x{}: {} ({:.3} G), plus {} on atrous padding tokens",
        cfg.height,
        cfg.width,
        flops.total(),
        flops.total() as f64 / 1e9,
        flops.padding
    );
    let _ = writeln!(
        r,
        "\nnotes:\n\
         - each scanned sequence (sub-image x direction) owns its selective-parameter bundle \
         (x_proj, dt_proj, A_log, D); in_proj, conv1d and out_proj are shared, so size grows with \
         the number of sequences while per-token cost does not\n\
         - resampling (maxpool + 1x1 conv down, bilinear + 1x1 conv up), the decoder's stage-6 ASP block, \
         SE/SK hidden width max(C/4, 4) and the skip attention layout are reconstructions; they account \
         for the gap to the reference size\n\
         - the MAC estimate covers convolutions, linear layers and Mamba cores per image token; padding tokens are listed separately; it omits \
         norms, activations, pooling and resampling"
    );
    r
}
