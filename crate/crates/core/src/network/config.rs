use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BlockFlags, ScanKind};
use crate::error::{config_err, Result};

/// Whole-network description. Serializes to the `[network]` table of a run
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: String,
    pub stage_channels: Vec<usize>,
    pub encoder_depths: Vec<usize>,
    pub atrous_step: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub scan: ScanKind,
    pub theta_init: f64,
    pub se_reduction: usize,
    pub sk_reduction: usize,
    pub seed: u64,
    pub flags: BlockFlags,
}

impl NetworkConfig {
    pub fn base() -> Self {
        NetworkConfig {
            variant: "base".into(),
            stage_channels: vec![32, 64, 96, 128, 256, 384],
            encoder_depths: vec![1, 1, 1, 1, 3, 1],
            atrous_step: 2,
            height: 256,
            width: 256,
            in_channels: 3,
            scan: ScanKind::Vallian,
            theta_init: 1.0,
            se_reduction: 4,
            sk_reduction: 4,
            seed: 0,
            flags: BlockFlags::default(),
        }
    }

    pub fn tiny() -> Self {
        NetworkConfig {
            variant: "tiny".into(),
            stage_channels: vec![8, 16, 24, 32, 48, 64],
            height: 64,
            width: 64,
            ..Self::base()
        }
    }

    /// Smallest useful network, for end-to-end gradient checks.
    pub fn micro() -> Self {
        NetworkConfig {
            variant: "micro".into(),
            stage_channels: vec![8; 6],
            encoder_depths: vec![1; 6],
            height: 32,
            width: 32,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(config_err!("unknown network variant `{}` (expected base, tiny or micro)", other)),
        }
    }

    pub fn with_step(mut self, s: usize) -> Self {
        self.atrous_step = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 6 {
            return Err(config_err!("stage_channels: expected 6 entries, got {}", self.stage_channels.len()));
        }
        if self.encoder_depths.len() != 6 {
            return Err(config_err!("encoder_depths: expected 6 entries, got {}", self.encoder_depths.len()));
        }
        if self.stage_channels[0] == 0 {
            return Err(config_err!("stage_channels[0]: must be positive"));
        }
        for (k, &c) in self.stage_channels.iter().enumerate().skip(1) {
            if c == 0 || c % 8 != 0 {
                return Err(config_err!("stage_channels[{}]: {} is not a positive multiple of 8", k, c));
            }
        }
        if let Some(k) = self.encoder_depths.iter().position(|&d| d == 0) {
            return Err(config_err!("encoder_depths[{}]: must be >= 1", k));
        }
        if self.height == 0 || self.height % 32 != 0 {
            return Err(config_err!("height: {} is not a positive multiple of 32", self.height));
        }
        if self.width == 0 || self.width % 32 != 0 {
            return Err(config_err!("width: {} is not a positive multiple of 32", self.width));
        }
        if self.in_channels == 0 {
            return Err(config_err!("in_channels: must be positive"));
        }
        if self.atrous_step == 0 {
            return Err(config_err!("atrous_step: must be >= 1"));
        }
        self.block(1).validate()
    }

    /// ASP block configuration at 0-based stage `k` (1..=5).
    pub fn block(&self, k: usize) -> BlockConfig {
        BlockConfig {
            channels: self.stage_channels[k],
            atrous_step: self.atrous_step,
            theta_init: self.theta_init,
            flags: self.flags,
            scan: self.scan,
            se_reduction: self.se_reduction,
            sk_reduction: self.sk_reduction,
            ..BlockConfig::new(self.stage_channels[k])
        }
    }

    /// Field-by-field differences against `other`, one `name: a != b` line
    /// per differing field.
    pub fn diff(&self, other: &NetworkConfig) -> Vec<String> {
        let (a, b) = (to_table(self), to_table(other));
        let mut out = Vec::new();
        diff_tables("", &a, &b, &mut out);
        out
    }
}

fn to_table(cfg: &NetworkConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("network config serializes to a table")
}

fn diff_tables(prefix: &str, a: &toml::Table, b: &toml::Table, out: &mut Vec<String>) {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        let name = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
        match (a.get(k), b.get(k)) {
            (Some(toml::Value::Table(x)), Some(toml::Value::Table(y))) => diff_tables(&name, x, y, out),
            (x, y) if x != y => out.push(format!(
                "{}: {} != {}",
                name,
                x.map_or("<missing>".to_string(), |v| v.to_string()),
                y.map_or("<missing>".to_string(), |v| v.to_string())
            )),
            _ => {}
        }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::base()
    }
}
