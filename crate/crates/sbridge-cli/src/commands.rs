use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use sbridge::autodiff::DivergenceMode;
use sbridge::data::TargetSpec;
use sbridge::eval::{self, NllEstimator, NllReport};
use sbridge::nets::PolicyNetwork;
use sbridge::sampling::{self, SamplerConfig};
use sbridge::training::{self, TrainEvent, TrainMode};

use crate::checkpoint::{Checkpoint, OptBlob};
use crate::config::RunConfig;

/// Which likelihood estimators `eval` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EstimatorChoice {
    Flow,
    Fbsde,
    Both,
}

fn csv_writer(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn write_rows(path: &Path, header: &str, rows: &Array2<f64>) -> Result<()> {
    let mut w = csv_writer(path, header)?;
    for row in rows.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let outdir = config.resolved_output_dir();
    std::fs::create_dir_all(&outdir)
        .with_context(|| format!("creating output dir {}", outdir.display()))?;
    std::fs::write(
        outdir.join("config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;

    let sde = config.sde()?;
    let prior = config.prior();
    let train = config.train_config();
    let net = config.network.clone();
    let mut z = PolicyNetwork::init(net.clone(), 0, sbridge::rng::derive_seed(config.seed, 0xA, 0), true);
    let mut zhat = PolicyNetwork::init(net, 1, sbridge::rng::derive_seed(config.seed, 0xA, 1), true);

    if train.warm_start {
        let history = training::run_warm_start(&train, &sde, &mut zhat, &config.dataset)?;
        let mut w = csv_writer(&outdir.join("warm_start_loss.csv"), "iteration,loss")?;
        for (it, loss) in history.iter().enumerate() {
            writeln!(w, "{it},{loss}")?;
        }
        w.flush()?;
        if let (Some(first), Some(last)) = (history.first(), history.last()) {
            println!("warm start: regression loss {first} -> {last}");
        }
    }

    let mut loss_csv = csv_writer(
        &outdir.join("loss.csv"),
        "iteration,total,prior,kinetic_forward,kinetic_backward,divergence,cross",
    )?;
    let period = config.checkpoint_every;
    let mut hook_err: Option<anyhow::Error> = None;
    let mut last_saved = None;
    {
        let mut hook = |ev: &TrainEvent| {
            if hook_err.is_some() {
                return;
            }
            let r = ev.report;
            let mut step = || -> Result<()> {
                writeln!(
                    loss_csv,
                    "{},{},{},{},{},{},{}",
                    ev.iteration,
                    r.total,
                    r.terms.prior,
                    r.terms.kinetic_forward,
                    r.terms.kinetic_backward,
                    r.terms.divergence,
                    r.terms.cross
                )?;
                if (ev.iteration + 1) % period == 0 {
                    let ckpt = Checkpoint {
                        config: config.clone(),
                        iteration: (ev.iteration + 1) as u64,
                        z: ev.z.to_flat(),
                        zhat: ev.zhat.to_flat(),
                        z_ema: ev.z_ema.to_vec(),
                        zhat_ema: ev.zhat_ema.to_vec(),
                        opt_z: OptBlob::of(ev.opt_z),
                        opt_zhat: OptBlob::of(ev.opt_zhat),
                    };
                    ckpt.save(&outdir.join(format!("ckpt_{}.bin", ev.iteration + 1)))?;
                    last_saved = Some(ev.iteration + 1);
                }
                if (ev.iteration + 1) % 100 == 0 {
                    println!("iter {:>6}  loss {:.6}", ev.iteration + 1, r.total);
                }
                Ok(())
            };
            if let Err(e) = step() {
                hook_err = Some(e);
            }
        };
        let outcome = match train.mode {
            TrainMode::Joint => training::train_joint(
                &train, &sde, &mut z, &mut zhat, &config.dataset, &prior, Some(&mut hook),
            )?,
            TrainMode::Alternate => training::train_alternate(
                &train, &sde, &mut z, &mut zhat, &config.dataset, &prior, Some(&mut hook),
            )?,
        };
        drop(hook);
        loss_csv.flush()?;
        let total_iters = outcome.history.len();
        if last_saved != Some(total_iters) {
            let ckpt = Checkpoint {
                config: config.clone(),
                iteration: total_iters as u64,
                z: z.to_flat(),
                zhat: zhat.to_flat(),
                z_ema: outcome.z_ema.clone(),
                zhat_ema: outcome.zhat_ema.clone(),
                opt_z: OptBlob::of(&outcome.opt_z),
                opt_zhat: OptBlob::of(&outcome.opt_zhat),
            };
            ckpt.save(&outdir.join(format!("ckpt_{total_iters}.bin")))?;
        }

        let z_ema = sbridge::training::TrainOutcome::ema_network(&outcome.z_ema, &z);
        let x0 = config.dataset.sample(2000, sbridge::rng::derive_seed(config.seed, 0x4B, 0));
        let kl = eval::kl_to_prior(&sde, &z_ema, &x0, &prior, config.seed)?;
        println!("kl_to_prior(learned forward policy) = {kl}");
    }
    if let Some(e) = hook_err {
        return Err(e);
    }
    println!("artifacts in {}", outdir.display());
    Ok(())
}

pub fn cmd_sample(
    ckpt_path: &Path,
    n: usize,
    corrector: Option<usize>,
    snr: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let sde = ckpt.config.sde()?;
    let prior = ckpt.config.prior();
    let (z, zhat) = ckpt.ema_networks();
    let mut sampler: SamplerConfig = ckpt.config.sampler;
    if let Some(c) = corrector {
        sampler.corrector_steps = c;
    }
    if let Some(r) = snr {
        sampler.snr = r;
    }
    if let Some(s) = seed {
        sampler.seed = s;
    }
    let d = ckpt.config.dataset.dim();
    let samples = if n == 0 {
        Array2::zeros((0, d))
    } else {
        sampling::sample(&sde, &z, &zhat, &prior, n, &sampler)?
    };
    let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    let path = out.unwrap_or_else(|| sibling(ckpt_path, "samples.csv"));
    write_rows(&path, &header.join(","), &samples)?;
    println!("{n} samples -> {}", path.display());
    Ok(())
}

fn sibling(ckpt_path: &Path, name: &str) -> PathBuf {
    ckpt_path.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

/// Built-in dataset names plus `config`, which evaluates against the
/// checkpoint's own training target.
fn resolve_dataset(name: &str, ckpt: &Checkpoint) -> Result<TargetSpec> {
    match name {
        "config" => Ok(ckpt.config.dataset.clone()),
        "gmm" => Ok(TargetSpec::Gmm(sbridge::data::GmmSpec::toy_circle())),
        "checkerboard" => Ok(TargetSpec::Checkerboard(
            sbridge::data::CheckerboardSpec::toy(),
        )),
        other => anyhow::bail!(
            "unknown dataset {other:?}; expected \"gmm\", \"checkerboard\", or \"config\""
        ),
    }
}

pub fn cmd_eval(
    ckpt_path: &Path,
    dataset: &str,
    estimator: EstimatorChoice,
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let sde = ckpt.config.sde()?;
    let prior = ckpt.config.prior();
    let (z, zhat) = ckpt.ema_networks();
    let target = resolve_dataset(dataset, &ckpt)?;
    let x0 = target.sample(n.max(1), seed);

    let mut reports: Vec<NllReport> = Vec::new();
    if matches!(estimator, EstimatorChoice::Flow | EstimatorChoice::Both) {
        reports.push(eval::nll_flow(&sde, &z, &zhat, &x0, &prior, eval::FLOW_NLL_STEPS)?);
    }
    if matches!(estimator, EstimatorChoice::Fbsde | EstimatorChoice::Both) {
        reports.push(eval::nll_fbsde(
            &sde,
            &z,
            &zhat,
            &x0,
            1,
            &prior,
            DivergenceMode::Exact,
            seed,
        )?);
    }
    let kl = eval::kl_to_prior(&sde, &z, &x0, &prior, seed)?;

    let path = out.unwrap_or_else(|| sibling(ckpt_path, "eval.csv"));
    let mut w = csv_writer(&path, "estimator,nats,bits_per_dim,std_error,kl_to_prior")?;
    for r in &reports {
        let name = match r.estimator {
            NllEstimator::FlowOde => "flow",
            NllEstimator::FbsdePath => "fbsde",
        };
        writeln!(w, "{name},{},{},{},{kl}", r.nats, r.bits_per_dim, r.std_error)?;
        println!(
            "{name}: nll {:.4} nats ({:.4} bits/dim), se {:.4}",
            r.nats, r.bits_per_dim, r.std_error
        );
    }
    w.flush()?;
    println!("kl_to_prior {kl:.6}");
    println!("report -> {}", path.display());
    Ok(())
}

pub fn cmd_export_field(
    ckpt_path: &Path,
    grid: usize,
    extent: f64,
    times: &[f64],
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (z, zhat) = ckpt.ema_networks();
    let field = eval::export_field(&z, &zhat, grid, extent, times)?;
    let path = out.unwrap_or_else(|| sibling(ckpt_path, "field.csv"));
    let mut w = csv_writer(&path, "t,x1,x2,Z1,Z2,Zhat1,Zhat2")?;
    for r in &field.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.t, r.x1, r.x2, r.z1, r.z2, r.zhat1, r.zhat2
        )?;
    }
    w.flush()?;
    println!("{} field rows -> {}", field.rows.len(), path.display());
    Ok(())
}
