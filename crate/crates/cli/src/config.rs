use std::path::{Path, PathBuf};

use aspvmunet::network::NetworkConfig;
use aspvmunet::pipeline::{Normalization, TrainConfig};
use aspvmunet::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `images/` and `masks/`.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("run") }
    }
}

/// Everything a training run needs. The `[network]` table is laid over the
/// preset named by `network.variant` (default `tiny`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Filled in from the training data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    #[cfg(test)]
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e| Error::Config(format!("{}", e)))?;
        Self::from_table(table)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Usage(format!("cannot read config {}: {}", p.display(), e)))?;
                text.parse::<Table>().map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            set_path(&mut table, key, parse_value(raw))?;
        }
        Self::from_table(table)
    }

    fn from_table(mut table: Table) -> Result<Self> {
        check_keys("", &table, &schema())?;
        let variant = match table.get("network").and_then(|n| n.get("variant")) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(format!("network.variant: expected a string, got {}", v))),
            None => "tiny".to_string(),
        };
        let mut net = Table::try_from(NetworkConfig::preset(&variant)?).expect("network config serializes");
        if let Some(Value::Table(user)) = table.remove("network") {
            merge(&mut net, user);
        }
        table.insert("network".into(), Value::Table(net));
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Every accepted key, with optional fields present.
fn schema() -> Table {
    let full = RunConfig {
        network: NetworkConfig::tiny(),
        train: TrainConfig::default(),
        data: DataConfig { train: Some("".into()), eval: Some("".into()) },
        output: OutputConfig::default(),
        normalization: Some(Normalization::default()),
    };
    Table::try_from(&full).expect("run config serializes")
}

fn check_keys(prefix: &str, given: &Table, known: &Table) -> Result<()> {
    for (k, v) in given {
        let name = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
        match known.get(k) {
            None => {
                let best = known
                    .keys()
                    .map(|c| (strsim::levenshtein(k, c), c))
                    .filter(|(d, _)| *d <= 3)
                    .min();
                let hint = match best {
                    Some((_, c)) if prefix.is_empty() => format!("; did you mean `{}`?", c),
                    Some((_, c)) => format!("; did you mean `{}.{}`?", prefix, c),
                    None => String::new(),
                };
                return Err(Error::Config(format!("unknown key `{}`{}", name, hint)));
            }
            Some(Value::Table(inner)) => {
                if let Value::Table(sub) = v {
                    check_keys(&name, sub, inner)?;
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {}", raw)
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("malformed override `--{}`", key)));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match slot {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `--{}`: `{}` is not a section", key, p))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--section.key value` and `--section.key=value` pairs out of the
/// argument list.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.'))) {
            Some(kv) => match kv.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| Error::Usage(format!("override `{}` needs a value", a)))?;
                    overrides.push((kv.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}
