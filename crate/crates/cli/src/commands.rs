use std::io::Write;
use std::path::Path;
use std::time::Instant;

use aspvmunet::network::{accounting_report, Checkpoint, Network};
use aspvmunet::pipeline::{
    append_log, evaluate, load_dataset, save_dataset, synth_dataset, Normalization, SynthStyle, Trainer,
};
use aspvmunet::blocks::BlockFlags;
use aspvmunet::scan::ScanPlan;
use aspvmunet::verify::{Check, Suite, Summary};
use aspvmunet::{Error, Result};
use serde::Deserialize;

use crate::config::RunConfig;
use crate::Method;

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

#[derive(Deserialize)]
struct StoredNorm {
    normalization: Option<Normalization>,
}

fn stored_normalization(ck: &Checkpoint) -> Option<Normalization> {
    toml::from_str::<StoredNorm>(&ck.config_text).ok().and_then(|s| s.normalization)
}

/// Keeps the header and the first `epochs` rows.
fn truncate_log(path: &Path, epochs: usize) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io(path)(e)),
    };
    let kept: String = text.lines().take(epochs + 1).map(|l| format!("{}\n", l)).collect();
    std::fs::write(path, kept).map_err(io(path))
}

pub fn train(config: Option<&Path>, overrides: &[(String, String)], resume: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config, overrides)?;
    let train_dir = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Error::Usage("no training data: set data.train in the config or pass --data.train DIR".into()))?;
    let (h, w) = (cfg.network.height, cfg.network.width);
    let data = load_dataset(&train_dir, h, w)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no samples in {}", train_dir.display())));
    }
    let eval = cfg.data.eval.as_ref().map(|d| load_dataset(d, h, w)).transpose()?;
    let ck = resume.map(Checkpoint::load).transpose()?;
    if cfg.normalization.is_none() {
        cfg.normalization = Some(ck.as_ref().and_then(stored_normalization).unwrap_or_else(|| Normalization::from_samples(&data)));
    }
    let norm = cfg.normalization.unwrap();

    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let text = cfg.to_toml();
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, &text).map_err(io(&cfg_path))?;
    let log_path = dir.join("log.csv");
    let ck_path = dir.join("checkpoint.bin");

    let mut net = Network::<f32>::build(&cfg.network)?;
    let mut trainer = match &ck {
        Some(ck) => {
            let t = Trainer::resume(&mut net, ck, cfg.train.clone(), norm, data.len())?;
            truncate_log(&log_path, t.epoch)?;
            t
        }
        None => {
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(io(&log_path))?;
            }
            Trainer::new(&mut net, cfg.train.clone(), norm)?
        }
    };
    eprintln!(
        "training {} ({} parameters) on {} samples, {} epochs",
        cfg.network.variant,
        trainer.net.count_parameters(),
        data.len(),
        cfg.train.epochs
    );
    while trainer.epoch < trainer.cfg.epochs {
        let t0 = Instant::now();
        let row = trainer.run_epoch(&data, eval.as_deref())?;
        append_log(&log_path, &row)?;
        trainer.checkpoint(text.clone(), data.len()).save(&ck_path)?;
        eprintln!(
            "epoch {:>3}/{} lr {:.3e} loss {:.4} {} ({:.1}s)",
            row.epoch,
            cfg.train.epochs,
            row.lr,
            row.loss,
            row.metrics,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("run written to {}", dir.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, data_dir: &Path, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Usage("--batch-size must be >= 1".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.restore::<f32>()?;
    let norm = stored_normalization(&ck).unwrap_or_else(|| {
        log::warn!("checkpoint stores no normalization; using raw pixel values");
        Normalization::default()
    });
    let data = load_dataset(data_dir, net.cfg.height, net.cfg.width)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no samples in {}", data_dir.display())));
    }
    let m = evaluate(&net, &data, &norm, batch_size)?;
    println!("{}", m);
    Ok(())
}

/// Runs the named suites (all when empty) and prints a summary table.
/// Returns whether every check passed.
pub fn verify(names: &[String]) -> Result<bool> {
    let suites: Vec<Suite> = if names.is_empty() {
        Suite::ALL.to_vec()
    } else {
        names.iter().map(|n| n.parse()).collect::<Result<_>>()?
    };
    let mut checks: Vec<Check> = Vec::new();
    for s in suites {
        eprintln!("running {} ...", s.name());
        checks.extend(s.run()?);
    }
    println!("{}", Summary(&checks));
    Ok(checks.iter().all(|c| c.passed))
}

pub fn emit_scan_order(h: usize, w: usize, step: usize, method: Method, out: Option<&Path>) -> Result<()> {
    let plans = match method {
        Method::Atrous => vec![ScanPlan::atrous(h, w, step)?],
        Method::Vallian => vec![ScanPlan::global(h, w)?],
        Method::Across => ScanPlan::across_atrous(h, w, step)?.to_vec(),
        Method::Efficient => {
            if step != 2 {
                return Err(Error::Usage(format!("efficient scan uses step 2, got --step {}", step)));
            }
            vec![ScanPlan::efficient(h, w)?]
        }
    };
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(io(p))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let name = out.map_or("stdout".to_string(), |p| p.display().to_string());
    let csv_err = |e: csv::Error| Error::Data(format!("cannot write {}: {}", name, e));
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    for plan in &plans {
        for row in plan.rows_with_padding_marked() {
            wr.write_record(row.iter().map(|i| i.to_string())).map_err(csv_err)?;
        }
    }
    wr.flush().map_err(|e| Error::Data(format!("cannot write {}: {}", name, e)))
}

pub fn synth_data(n: usize, h: usize, w: usize, seed: u64, style: SynthStyle, out: &Path) -> Result<()> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Usage("--n, --height and --width must be positive".into()));
    }
    save_dataset(out, &synth_dataset(n, h, w, seed, style))?;
    println!("wrote {} samples to {}", n, out.display());
    Ok(())
}

pub fn accounting(config: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let net = Network::<f32>::build(&cfg.network)?;
    println!("{}", accounting_report(&net));
    Ok(())
}

pub fn ablation(config: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    println!("{:<22} {:>12}", "components", "parameters");
    for flags in BlockFlags::ablation_rows() {
        let mut nc = cfg.network.clone();
        nc.flags = flags;
        let n = Network::<f32>::build(&nc)?.count_parameters();
        println!("{:<22} {:>12}", flags.label(), n);
    }
    Ok(())
}
