//! Subcommand implementations. Every command writes `effective_config.json`
//! to the output directory before doing any work.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use subnet_core::data::{fit_normalizer, generate_synthetic, Dataset, SyntheticSystem, TruthTrace};
use subnet_core::eval::{
    evaluate, reconstruct_oracle, run_experiment, smoothness_probe, sweep_cell, write_tidy_csv, EvalReport,
    ExperimentBase, SampledSystem, Splits, StateBox, TidyRow,
};
use subnet_core::model::{ModelDims, SubnetModel};
use subnet_core::ode::SolverConfig;
use subnet_core::training::{suggest_tau, train};

use crate::config::{Command, DataSource, RunConfig};

/// Runs `cfg` with `threads` workers for the commands that fan out.
pub fn run(cfg: &RunConfig, threads: usize) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("effective_config.json"), cfg.to_json()?)?;
    match cfg.command {
        Command::Generate => generate(cfg),
        Command::Train => train_cmd(cfg),
        Command::Eval => eval_cmd(cfg),
        Command::SweepTau => sweep_tau(cfg, threads),
        Command::ProbeSmoothness => probe(cfg),
        Command::Reconstruct => reconstruct(cfg),
        Command::Ensemble => ensemble(cfg, threads),
    }
}

fn load(src: &DataSource) -> Result<(Dataset, Option<TruthTrace>)> {
    match src {
        DataSource::Csv(c) => Ok((
            Dataset::load_csv(&c.path, c.n_u, c.n_y, c.dt).with_context(|| format!("loading {}", c.path.display()))?,
            None,
        )),
        DataSource::Synthetic(s) => {
            let (ds, truth) = generate_synthetic(s)?;
            Ok((ds, Some(truth)))
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?)
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let g = cfg.generate.as_ref().expect("validated");
    let (ds, truth) = generate_synthetic(g)?;
    ds.save_csv(cfg.output_dir.join("dataset.csv"))?;
    truth.save_csv(&ds, cfg.output_dir.join("truth.csv"))?;
    println!("wrote {} samples to {}", ds.len(), cfg.output_dir.display());
    Ok(())
}

fn experiment_base(cfg: &RunConfig) -> Result<ExperimentBase> {
    let m = cfg.model_section()?;
    let solver = cfg.solver.clone().unwrap_or_default();
    Ok(ExperimentBase {
        n_x: m.n_x,
        n_a: m.n_a,
        n_b: m.n_b,
        arch: m.architecture(),
        method: solver.method,
        substeps: solver.substeps,
        train: cfg.train_config(),
    })
}

/// Configured `tau`, or the output-based estimate on the training data.
fn resolve_tau(cfg: &RunConfig, train_ds: &Dataset) -> Result<f64> {
    match cfg.solver.as_ref().and_then(|s| s.tau) {
        Some(tau) => Ok(tau),
        None => Ok(1.0 / suggest_tau(train_ds, None)?),
    }
}

fn write_metrics(path: &Path, reports: &[(&str, &EvalReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["split", "rmse", "nrmse", "rms_x", "rms_f", "n_samples"])?;
    for (split, r) in reports {
        w.write_record([
            split.to_string(),
            r.rmse.to_string(),
            r.nrmse.to_string(),
            r.rms_x.to_string(),
            r.rms_f.to_string(),
            r.n_samples.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let (train_ds, _) = load(cfg.train_source()?)?;
    let (val_ds, _) = load(cfg.val_source()?)?;
    let test = cfg.data.as_ref().and_then(|d| d.test.as_ref()).map(load).transpose()?;
    let base = experiment_base(cfg)?;
    let tau = resolve_tau(cfg, &train_ds)?;
    let dims = ModelDims {
        n_x: base.n_x,
        n_u: train_ds.n_u(),
        n_y: train_ds.n_y(),
        n_a: base.n_a,
        n_b: base.n_b,
    };
    let solver = SolverConfig::new(base.method, base.substeps, tau, train_ds.dt)?;
    let norm = fit_normalizer(&train_ds)?;
    let m0 = SubnetModel::new(dims, &base.arch, solver, norm, base.train.mode, cfg.seed())?;
    let (model, history) = train(&m0, &train_ds, &val_ds, &base.train)?;
    model.save(cfg.output_dir.join("model.json"))?;
    history.save_csv(cfg.output_dir.join("history.csv"))?;

    let val_report = evaluate(&model, &val_ds)?;
    let test_report = test.map(|(ds, _)| evaluate(&model, &ds)).transpose()?;
    let mut reports = vec![("val", &val_report)];
    if let Some(r) = &test_report {
        reports.push(("test", r));
        r.write_trace_csv(fs::File::create(cfg.output_dir.join("test_trace.csv"))?)?;
    }
    write_metrics(&cfg.output_dir.join("metrics.csv"), &reports)?;
    println!(
        "trained {} updates ({:?}), best validation RMSE {} at update {}, tau {tau}",
        history.records.last().map_or(0, |r| r.update),
        history.stop_reason,
        history.best_val_rmse,
        history.best_update
    );
    if let Some(r) = &test_report {
        println!("test RMSE {} NRMSE {}", r.rmse, r.nrmse);
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let path = &cfg.eval.as_ref().expect("validated").model;
    let model = SubnetModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (ds, _) = load(cfg.test_source()?)?;
    let report = evaluate(&model, &ds)?;
    write_metrics(&cfg.output_dir.join("metrics.csv"), &[("test", &report)])?;
    report.write_trace_csv(fs::File::create(cfg.output_dir.join("test_trace.csv"))?)?;
    println!("test RMSE {} NRMSE {}", report.rmse, report.nrmse);
    Ok(())
}

fn sweep_tau(cfg: &RunConfig, threads: usize) -> Result<()> {
    let (train_ds, _) = load(cfg.train_source()?)?;
    let (val_ds, _) = load(cfg.val_source()?)?;
    let (test_ds, _) = load(cfg.test_source()?)?;
    let base = experiment_base(cfg)?;
    let sweep = cfg.sweep.as_ref().expect("validated");
    let splits = Splits {
        train: &train_ds,
        val: &val_ds,
        test: &test_ds,
    };
    let cells: Vec<(f64, u64)> = sweep
        .grid
        .iter()
        .flat_map(|&g| sweep.seeds.iter().map(move |&s| (g, s)))
        .collect();
    let rows: Vec<TidyRow> = pool(threads)?.install(|| {
        cells
            .par_iter()
            .flat_map_iter(|&(g, s)| sweep_cell(&base, splits, g, s))
            .collect()
    });
    write_tidy_csv(&rows, fs::File::create(cfg.output_dir.join("sweep.csv"))?)?;
    let failed = rows.iter().filter(|r| r.value.is_nan()).count() / subnet_core::eval::SWEEP_METRICS.len();
    println!("{} runs, {failed} failed", cells.len());
    Ok(())
}

fn probe(cfg: &RunConfig) -> Result<()> {
    let (ds, _) = load(cfg.train_source()?)?;
    let p = cfg.probe.as_ref().expect("validated");
    let model = match &p.model {
        Some(path) => SubnetModel::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let base = experiment_base(cfg)?;
            let dims = ModelDims {
                n_x: base.n_x,
                n_u: ds.n_u(),
                n_y: ds.n_y(),
                n_a: base.n_a,
                n_b: base.n_b,
            };
            let solver = SolverConfig::new(base.method, base.substeps, resolve_tau(cfg, &ds)?, ds.dt)?;
            SubnetModel::new(dims, &base.arch, solver, fit_normalizer(&ds)?, base.train.mode, cfg.seed())?
        }
    };
    let est = smoothness_probe(&model, &ds, &p.t_values, p.n_probes, p.eps, cfg.seed(), None)?;
    let mut w = csv_writer(&cfg.output_dir.join("probe.csv"))?;
    w.write_record(["T", "lipschitz", "probes_used", "probes_skipped"])?;
    for e in &est {
        w.write_record([e.t.to_string(), e.lipschitz.to_string(), e.probes_used.to_string(), e.probes_skipped.to_string()])?;
        println!("T={} L={} ({} probes, {} skipped)", e.t, e.lipschitz, e.probes_used, e.probes_skipped);
    }
    w.flush()?;
    Ok(())
}

fn column_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn reconstruct(cfg: &RunConfig) -> Result<()> {
    let DataSource::Synthetic(scfg) = cfg.test_source()? else {
        bail!("`reconstruct` needs synthetic test data");
    };
    let r = cfg.reconstruct.as_ref().expect("validated");
    let (ds, truth) = generate_synthetic(scfg)?;
    let sys = SyntheticSystem::new(scfg.system, &scfg.params)?;
    let dynamics = SampledSystem {
        system: &sys,
        dt: scfg.dt,
        substeps: scfg.truth_substeps,
    };
    let model = r.model.as_ref().map(SubnetModel::load).transpose()?;
    let first = r.z.max(model.as_ref().map_or(0, |m| m.dims().lag()));
    let indices: Vec<usize> = match &r.indices {
        Some(ix) => ix.clone(),
        None => (first..ds.len()).collect(),
    };
    if let Some(bad) = indices.iter().find(|&&n| n < first || n >= ds.len()) {
        bail!("reconstruction index {bad} outside [{first}, {})", ds.len());
    }
    let (centers, scales): (Vec<f64>, Vec<f64>) =
        (0..sys.n_x()).map(|j| column_stats(&truth.states.column(j).to_vec())).unzip();
    let search = StateBox::around(&centers, &scales);

    let n_x = sys.n_x();
    let mut w = csv_writer(&cfg.output_dir.join("reconstruct.csv"))?;
    let mut header = vec!["n".to_string()];
    header.extend((0..n_x).map(|j| format!("x{j}")));
    header.extend((0..n_x).map(|j| format!("x_hat{j}")));
    header.extend(["error".into(), "converged_starts".into()]);
    if let Some(m) = &model {
        header.extend((0..m.dims().n_x).map(|j| format!("encoder{j}")));
    }
    w.write_record(&header)?;
    let mut errors = Vec::new();
    for &n in &indices {
        let rec = reconstruct_oracle(&dynamics, &ds.u, &ds.y, n, r.z, &search)?;
        let truth_n = truth.states.row(n).to_vec();
        let err = rec.state.iter().zip(&truth_n).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        errors.push(err);
        let mut row: Vec<String> = vec![n.to_string()];
        row.extend(truth_n.iter().map(f64::to_string));
        row.extend(rec.state.iter().map(f64::to_string));
        row.extend([err.to_string(), rec.converged_starts.to_string()]);
        if let Some(m) = &model {
            row.extend(m.estimate_state(&ds, n)?.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64).sqrt();
    println!("reconstructed {} states, RMS error {rms}", errors.len());
    Ok(())
}

fn ensemble(cfg: &RunConfig, threads: usize) -> Result<()> {
    let (train_ds, _) = load(cfg.train_source()?)?;
    let (val_ds, _) = load(cfg.val_source()?)?;
    let (test_ds, _) = load(cfg.test_source()?)?;
    let base = experiment_base(cfg)?;
    let tau = resolve_tau(cfg, &train_ds)?;
    let seeds = &cfg.ensemble.as_ref().expect("validated").seeds;
    let splits = Splits {
        train: &train_ds,
        val: &val_ds,
        test: &test_ds,
    };
    let outcomes: Vec<_> =
        pool(threads)?.install(|| seeds.par_iter().map(|&s| run_experiment(&base, splits, tau, s)).collect());

    let mut w = csv_writer(&cfg.output_dir.join("ensemble.csv"))?;
    w.write_record(["seed", "best_val_rmse", "test_rmse", "test_nrmse"])?;
    let mut best: Option<(f64, usize)> = None;
    let mut ok = Vec::new();
    for (i, (seed, out)) in seeds.iter().zip(&outcomes).enumerate() {
        match out {
            Ok(o) => {
                w.write_record([
                    seed.to_string(),
                    o.history.best_val_rmse.to_string(),
                    o.report.rmse.to_string(),
                    o.report.nrmse.to_string(),
                ])?;
                ok.push(o.report.rmse);
                if best.is_none_or(|(b, _)| o.report.rmse < b) {
                    best = Some((o.report.rmse, i));
                }
            }
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                w.write_record([seed.to_string(), "NaN".into(), "NaN".into(), "NaN".into()])?;
            }
        }
    }
    w.flush()?;
    let Some((best_rmse, best_i)) = best else {
        bail!("every ensemble member failed");
    };
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    if let Ok(o) = &outcomes[best_i] {
        o.model.save(cfg.output_dir.join("model.json"))?;
    }
    let mut m = csv_writer(&cfg.output_dir.join("metrics.csv"))?;
    m.write_record(["statistic", "test_rmse"])?;
    m.write_record(["best".to_string(), best_rmse.to_string()])?;
    m.write_record(["mean".to_string(), mean.to_string()])?;
    m.write_record(["members".to_string(), ok.len().to_string()])?;
    m.flush()?;
    println!("test RMSE best {best_rmse} (mean {mean}) over {} members", ok.len());
    Ok(())
}
