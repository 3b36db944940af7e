mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use dlfm::baselines::ExactGp;
use dlfm::checkpoint::{Checkpoint, ModelState};
use dlfm::data::{self, CsvSchema, DatasetSplit, MetricsReport, SplitLabel, SplitManifest, Standardizer, ToyConfig};
use dlfm::numerics::{Matrix, RngKey, RngStream};
use dlfm::rff::{FeatureKind, ForwardMode, RffConfig, RffModel};
use dlfm::training::{train_from, TraceEntry, TrainState, Trainable, TrainingSet};
use dlfm::vip::{VipConfig, VipModel};

use config::{DataSource, ModelKind, RunConfig};

#[derive(Parser)]
#[command(name = "dlfm", version, about = "Deep latent force models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-stage toy dataset.
    GenToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy")]
        out: PathBuf,
        #[arg(long)]
        noise_var: Option<f64>,
        #[arg(long)]
        n_points: Option<usize>,
    },
    /// Train a model described by a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        /// Continue from this checkpoint up to the configured iteration count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write predictive means and standard deviations for a CSV of inputs.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Score a checkpoint (or a predictions file) against a CSV of targets.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Split manifest; metrics are reported per partition.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenToy {
            seed,
            out,
            noise_var,
            n_points,
        } => cmd_gen_toy(seed, &out, noise_var, n_points),
        Command::Train {
            config,
            seed,
            out,
            model,
            resume,
        } => cmd_train(&config, seed, out, model, resume.as_deref()),
        Command::Predict {
            checkpoint,
            data,
            out,
            seed,
            samples,
        } => cmd_predict(&checkpoint, &data, &out, seed, samples),
        Command::Eval {
            checkpoint,
            predictions,
            data,
            manifest,
            out,
            seed,
            samples,
        } => cmd_eval(checkpoint.as_deref(), predictions.as_deref(), &data, manifest.as_deref(), &out, seed, samples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<dlfm::Error>().is_some_and(|d| d.is_numerical()));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

const TOY_STREAM: u64 = 0;

fn toy_data(cfg: &ToyConfig, seed: u64) -> Result<data::ToyData> {
    Ok(data::gen_toy(cfg, &mut RngStream::new(seed, TOY_STREAM))?)
}

fn cmd_gen_toy(seed: u64, out: &Path, noise_var: Option<f64>, n_points: Option<usize>) -> Result<()> {
    let mut cfg = ToyConfig::default();
    if let Some(v) = noise_var {
        cfg.noise_variance = v;
    }
    if let Some(n) = n_points {
        cfg.n_points = n;
    }
    let toy = toy_data(&cfg, seed)?;
    create_dir(out)?;
    data::write_csv(&out.join("data.csv"), &toy.split)?;
    write_json(&out.join("split.json"), &toy.split.manifest())?;
    println!(
        "wrote {} points (noise variance {}, gamma1 {}, gamma2 {}) to {}",
        toy.split.rows(),
        cfg.noise_variance,
        cfg.gamma1,
        cfg.gamma2,
        out.display()
    );
    for label in [SplitLabel::Train, SplitLabel::ImputeTest, SplitLabel::ExtrapTest] {
        println!("  {}: {}", label.name(), toy.split.count(label));
    }
    Ok(())
}

fn load_run_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    let mut split = match &cfg.data {
        DataSource::Toy { toy } => toy_data(toy, cfg.seed)?.split,
        DataSource::Csv {
            path,
            inputs,
            outputs,
            manifest,
        } => {
            let schema = CsvSchema {
                inputs: inputs.clone(),
                outputs: outputs.clone(),
            };
            let mut d = data::load_csv(path, &schema)?;
            if let Some(m) = manifest {
                d.apply_manifest(&read_manifest(m)?)?;
            }
            d
        }
    };
    if let Some(p) = &cfg.split {
        split = data::make_split(&split, p)?;
    }
    Ok(split)
}

fn fit_standardizer(cfg: &RunConfig, split: &DatasetSplit) -> Standardizer {
    let fitted = Standardizer::fit(split);
    let mut s = Standardizer::identity(split.x.cols(), split.outputs());
    if cfg.standardize_x {
        s.x_mean = fitted.x_mean;
        s.x_std = fitted.x_std;
    }
    if cfg.standardize_y {
        s.y_mean = fitted.y_mean;
        s.y_std = fitted.y_std;
    }
    s
}

fn build_model(cfg: &RunConfig, train: &TrainingSet) -> Result<ModelState> {
    let a = &cfg.architecture;
    let (p, d) = (train.x.cols(), train.y.cols());
    Ok(match cfg.model {
        ModelKind::DlfmRff | ModelKind::DgpRff => {
            let kind = if cfg.model == ModelKind::DlfmRff { FeatureKind::Ode1 } else { FeatureKind::Eq };
            let mut rc = RffConfig::new(kind, p, d, a.hidden_dims.clone());
            rc.n_rf = a.n_rf;
            rc.n_forces = a.n_latents;
            rc.concat_hidden = a.concat_hidden;
            rc.frequency_mode = a.frequency_mode;
            rc.n_mc = a.n_mc;
            rc.init = cfg.rff_init.clone();
            let m = RffModel::new(&rc, cfg.seed)?;
            if kind == FeatureKind::Ode1 {
                ModelState::DlfmRff(m)
            } else {
                ModelState::DgpRff(m)
            }
        }
        ModelKind::DlfmVip => {
            let mut vc = VipConfig::new(p, d, a.hidden_dims.clone());
            vc.n_latents = a.n_latents;
            vc.n_inducing = a.n_inducing;
            vc.n_basis = a.n_basis;
            vc.n_samples = a.n_mc;
            vc.lengthscale = cfg.vip_init.lengthscale;
            vc.decay = cfg.vip_init.decay;
            vc.variance = cfg.vip_init.variance;
            vc.likelihood_var = cfg.vip_init.likelihood_var;
            vc.chol_diag = cfg.vip_init.chol_diag;
            if a.fixed_grid {
                let bounds = (0..p)
                    .map(|k| {
                        let col = train.x.col_to_vec(k);
                        (col.iter().cloned().fold(f64::INFINITY, f64::min), col.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                    })
                    .collect();
                vc.fixed_grid = Some(bounds);
            }
            ModelState::DlfmVip(VipModel::new(&vc, &train.x, cfg.seed)?)
        }
        ModelKind::ExactGp => {
            let g = &cfg.gp_init;
            let gps = (0..d)
                .map(|k| {
                    let rows: Vec<usize> = (0..train.x.rows()).filter(|&i| train.mask.as_ref().is_none_or(|m| m[i * d + k])).collect();
                    let y: Vec<f64> = rows.iter().map(|&i| train.y[(i, k)]).collect();
                    ExactGp::new(train.x.select_rows(&rows), y, g.variance, g.lengthscale, g.noise)
                })
                .collect::<dlfm::Result<Vec<_>>>()?;
            ModelState::ExactGp(gps)
        }
    })
}

fn write_trace(path: &Path, trace: &[TraceEntry], start: usize) -> Result<()> {
    let mut rows: Vec<TraceEntry> = Vec::new();
    if start > 0 && path.exists() {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        for rec in r.deserialize() {
            let e: TraceEntry = rec.with_context(|| format!("parsing {}", path.display()))?;
            if e.iteration < start {
                rows.push(e);
            }
        }
    }
    rows.extend_from_slice(trace);
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for e in &rows {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_training<M: Trainable>(
    model: &mut M,
    train: &TrainingSet,
    cfg: &RunConfig,
    state: Option<TrainState>,
    wrap: fn(M) -> ModelState,
    standardizer: &Standardizer,
    ckpt_dir: &Path,
) -> Result<(Vec<TraceEntry>, TrainState)> {
    let mut tc = cfg.train_config();
    let start = state.as_ref().map_or(0, |s| s.iteration);
    tc.iterations = tc.iterations.saturating_sub(start);
    let every = cfg.checkpoint_every;
    let mut observer = |m: &M, s: &TrainState, _: &TraceEntry| -> dlfm::Result<()> {
        if let Some(k) = every {
            if s.iteration % k == 0 {
                let ck = Checkpoint::new(wrap(m.clone()), Some(s.clone()), standardizer.clone());
                ck.save(&ckpt_dir.join(format!("iter_{}.json", s.iteration)))?;
            }
        }
        Ok(())
    };
    Ok(train_from(model, train, &tc, state, &mut observer)?)
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, model: Option<ModelKind>, resume: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(m) = model {
        cfg.model = m;
    }
    cfg.validate()?;
    let split = load_run_data(&cfg)?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let standardizer = match &resumed {
        Some(ck) => ck.standardizer.clone(),
        None => fit_standardizer(&cfg, &split),
    };
    let train = standardizer.transform(&split).training_set()?;
    let out = cfg.out_dir.clone();
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let (state, train_state) = match resumed {
        Some(ck) => {
            if ck.model.kind() != model_name(cfg.model) {
                bail!(dlfm::Error::Checkpoint(format!("checkpoint holds a {} model, config asks for {}", ck.model.kind(), model_name(cfg.model))));
            }
            (ck.model, ck.train_state)
        }
        None => (build_model(&cfg, &train)?, None),
    };
    let start = train_state.as_ref().map_or(0, |s| s.iteration);
    let (final_model, trace, final_state) = match state {
        ModelState::DlfmRff(mut m) => {
            let (t, s) = run_training(&mut m, &train, &cfg, train_state, ModelState::DlfmRff, &standardizer, &ckpt_dir)?;
            (ModelState::DlfmRff(m), t, Some(s))
        }
        ModelState::DgpRff(mut m) => {
            let (t, s) = run_training(&mut m, &train, &cfg, train_state, ModelState::DgpRff, &standardizer, &ckpt_dir)?;
            (ModelState::DgpRff(m), t, Some(s))
        }
        ModelState::DlfmVip(mut m) => {
            let (t, s) = run_training(&mut m, &train, &cfg, train_state, ModelState::DlfmVip, &standardizer, &ckpt_dir)?;
            (ModelState::DlfmVip(m), t, Some(s))
        }
        ModelState::ExactGp(mut gps) => {
            let tc = cfg.train_config();
            let t0 = Instant::now();
            let mut total = vec![0.0; tc.iterations];
            for gp in &mut gps {
                for (acc, v) in total.iter_mut().zip(gp.fit(tc.iterations, tc.learning_rate)?) {
                    *acc -= v;
                }
            }
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            let trace = total
                .into_iter()
                .enumerate()
                .map(|(i, v)| TraceEntry {
                    iteration: i,
                    negative_elbo: v,
                    wall_time_ms: ms,
                })
                .collect();
            (ModelState::ExactGp(gps), trace, None)
        }
    };
    write_trace(&out.join("trace.csv"), &trace, start)?;
    let ck = Checkpoint::new(final_model, final_state, standardizer);
    ck.save(&out.join("checkpoint.json"))?;
    write_json(&out.join("split.json"), &split.manifest())?;
    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        model: model_name(cfg.model).to_string(),
        checkpoint_version: dlfm::checkpoint::CHECKPOINT_VERSION,
        resumed_from: resume.map(|p| p.display().to_string()),
        start_iteration: start,
        iterations: trace.len(),
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        final_negative_elbo: trace.last().map(|e| e.negative_elbo),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "trained {} for {} iterations; final negative ELBO {}",
        manifest.model,
        manifest.iterations,
        manifest.final_negative_elbo.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn model_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::DlfmRff => "dlfm-rff",
        ModelKind::DlfmVip => "dlfm-vip",
        ModelKind::DgpRff => "dgp-rff",
        ModelKind::ExactGp => "exact-gp",
    }
}

#[derive(Serialize)]
struct RunManifest {
    config_hash: String,
    seed: u64,
    model: String,
    checkpoint_version: u32,
    resumed_from: Option<String>,
    start_iteration: usize,
    iterations: usize,
    wall_time_ms: f64,
    final_negative_elbo: Option<f64>,
}

/// Predictive moments in original units.
fn predict_checkpoint(ck: &Checkpoint, x: &Matrix, seed: u64, samples: usize) -> Result<(Matrix, Matrix)> {
    let s = &ck.standardizer;
    if x.cols() != s.x_mean.len() {
        bail!(dlfm::Error::Shape(format!("checkpoint expects {} inputs, data has {}", s.x_mean.len(), x.cols())));
    }
    let xs = s.transform_x(x);
    let key = RngKey::new(seed, u64::MAX);
    let (mean, var) = match &ck.model {
        ModelState::DlfmRff(m) | ModelState::DgpRff(m) => {
            let p = m.predict(&xs, samples, ForwardMode::TestSampleWeights, key)?;
            (p.mean, p.var)
        }
        ModelState::DlfmVip(m) => {
            let p = m.predict(&xs, samples, key)?;
            (p.mean, p.var)
        }
        ModelState::ExactGp(gps) => {
            let d = gps.len();
            let mut mean = Matrix::zeros(x.rows(), d);
            let mut var = Matrix::zeros(x.rows(), d);
            for (k, gp) in gps.iter().enumerate() {
                let (m, v) = gp.predict(&xs)?;
                for i in 0..x.rows() {
                    mean[(i, k)] = m[i];
                    var[(i, k)] = v[i];
                }
            }
            (mean, var)
        }
    };
    Ok(s.inverse_moments(&mean, &var))
}

fn load_inputs(path: &Path, p: usize, d: usize) -> Result<DatasetSplit> {
    let schema = CsvSchema::default_for(p, d);
    Ok(data::load_csv(path, &schema)?)
}

fn cmd_predict(checkpoint: &Path, data_path: &Path, out: &Path, seed: u64, samples: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (p, d) = (ck.standardizer.x_mean.len(), ck.standardizer.y_mean.len());
    let inputs = load_inputs(data_path, p, 0)?;
    let (mean, var) = predict_checkpoint(&ck, &inputs.x, seed, samples)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    let header: Vec<String> = (0..p)
        .map(|i| format!("x_{i}"))
        .chain((0..d).map(|k| format!("mean_{k}")))
        .chain((0..d).map(|k| format!("std_{k}")))
        .collect();
    w.write_record(&header)?;
    for i in 0..inputs.rows() {
        let rec: Vec<String> = inputs
            .x
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .chain((0..d).map(|k| mean[(i, k)].to_string()))
            .chain((0..d).map(|k| var[(i, k)].sqrt().to_string()))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("wrote {} predictions to {}", inputs.rows(), out.display());
    Ok(())
}

fn read_predictions(path: &Path, n: usize, d: usize) -> Result<(Matrix, Matrix)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| anyhow!("{}: missing column {name}", path.display()));
    let mean_cols: Vec<usize> = (0..d).map(|k| col(&format!("mean_{k}"))).collect::<Result<_>>()?;
    let std_cols: Vec<usize> = (0..d).map(|k| col(&format!("std_{k}"))).collect::<Result<_>>()?;
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for k in 0..d {
            mean.push(rec[mean_cols[k]].parse::<f64>()?);
            let s: f64 = rec[std_cols[k]].parse()?;
            var.push(s * s);
        }
    }
    if mean.len() != n * d {
        bail!(dlfm::Error::Shape(format!("{} has {} rows, data has {n}", path.display(), mean.len() / d.max(1))));
    }
    Ok((Matrix::from_vec(n, d, mean)?, Matrix::from_vec(n, d, var)?))
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    data_path: &Path,
    manifest: Option<&Path>,
    out: &Path,
    seed: u64,
    samples: usize,
) -> Result<()> {
    let header_cols = {
        let mut r = csv::Reader::from_path(data_path).with_context(|| format!("reading {}", data_path.display()))?;
        r.headers()?.iter().map(str::to_string).collect::<Vec<_>>()
    };
    let p = header_cols.iter().filter(|h| h.starts_with("x_")).count();
    let d = header_cols.iter().filter(|h| h.starts_with("y_")).count();
    let mut truth = load_inputs(data_path, p, d)?;
    if let Some(m) = manifest {
        truth.apply_manifest(&read_manifest(m)?)?;
    }
    let (mean, var) = match (checkpoint, predictions) {
        (_, Some(pred)) => read_predictions(pred, truth.rows(), d)?,
        (Some(ck), None) => {
            let ck = Checkpoint::load(ck)?;
            if ck.standardizer.y_mean.len() != d {
                bail!(dlfm::Error::Shape(format!("checkpoint has {} outputs, data {d}", ck.standardizer.y_mean.len())));
            }
            predict_checkpoint(&ck, &truth.x, seed, samples)?
        }
        (None, None) => bail!(dlfm::Error::Config("eval needs --checkpoint or --predictions".into())),
    };
    let mut blocks: BTreeMap<String, MetricsReport> = BTreeMap::new();
    if manifest.is_some() {
        for label in SplitLabel::ALL {
            let mask = truth.entry_mask(label);
            if mask.iter().any(|&b| b) {
                blocks.insert(label.name().to_string(), data::metrics(&mean, &var, &truth.y, Some(&mask))?);
            }
        }
    } else {
        blocks.insert("all".into(), data::metrics(&mean, &var, &truth.y, Some(&truth.observed))?);
    }
    write_json(out, &blocks)?;
    for (name, r) in &blocks {
        println!(
            "{name}: rmse {:.6} nmse {:.6} mnll {:.6} ({} entries)",
            r.aggregate.rmse, r.aggregate.nmse, r.aggregate.mnll, r.aggregate.count
        );
    }
    Ok(())
}
