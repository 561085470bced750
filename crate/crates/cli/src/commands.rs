use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use agile_core::active::{active_loop, LoopResult, OracleLabeler, Strategy};
use agile_core::bench::{
    aggregate, compute_metrics, curves_csv, load_run_results, metrics_csv, save_run_results,
    write_curves_csv, write_metrics_csv, write_sweep_csv, Bench, BenchConfig, Budget, Method, MetaTaskSource,
    MethodConfig, RunMetrics, RunResult, TaskRun, RUNS_FILE,
};
use agile_core::meta::{meta_train, MetaState, FINAL_CHECKPOINT};
use agile_core::model::{Classifier, ParamSet};
use agile_core::tasks::{load_dataset, AugmentationConfig, TaskDataset};
use anyhow::Context;

use crate::config::resolve;
use crate::{usage, Cli, Command, Failure, Global, Source, StrategyArg, Table, ThetaArgs};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    match cli.command {
        Command::Export {
            run,
            format,
            table,
            output,
        } => export(&run, &format, table, output.as_deref()),
        Command::MetaTrain { source, resume } => {
            let config = resolve(&g)?;
            let dir = run_dir(&g, "meta-train", &config)?;
            meta_train_cmd(&config, &dir, source, resume.as_deref())
        }
        Command::Adapt { theta, samples } => {
            let budget = parse_budget(&samples)?;
            let config = single_run(resolve(&g)?);
            let dir = run_dir(&g, "adapt", &config)?;
            adapt(config, &dir, &theta, budget)
        }
        Command::Active {
            theta,
            budget,
            strategy,
        } => {
            let budget = parse_budget(&budget)?;
            let config = single_run(resolve(&g)?);
            let dir = run_dir(&g, "active", &config)?;
            active(config, &dir, &theta, budget, strategy)
        }
        Command::Bench { methods } => {
            let mut config = resolve(&g)?;
            if let Some(list) = methods {
                let wanted = parse_methods(&list)?;
                config.methods.retain(|m| wanted.contains(&m.method));
                let missing: Vec<_> = wanted.iter().filter(|w| !config.methods.iter().any(|m| m.method == **w)).collect();
                if !missing.is_empty() {
                    return Err(usage(format!("methods not in the configured grid: {missing:?}")));
                }
            }
            let dir = run_dir(&g, "bench", &config)?;
            bench(config, &dir)
        }
        Command::Sweep { method, sizes } => {
            let method = parse_methods(&method)?
                .into_iter()
                .next()
                .ok_or_else(|| usage("no method given"))?;
            let sizes = sizes
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(parse_budget)
                .collect::<Result<Vec<_>, _>>()?;
            let config = resolve(&g)?;
            let dir = run_dir(&g, "sweep", &config)?;
            sweep(config, &dir, method, &sizes)
        }
        Command::Serve { theta, addr, tasks_dir } => {
            let config = single_run(resolve(&g)?);
            let dir = run_dir(&g, "serve", &config)?;
            serve(config, &dir, &theta, addr, tasks_dir.as_deref())
        }
    }
}

fn parse_budget(s: &str) -> Result<Budget, Failure> {
    s.parse().map_err(|e: String| usage(e))
}

fn parse_methods(list: &str) -> Result<Vec<Method>, Failure> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|name| {
            serde_json::from_value(serde_json::Value::String(name.trim().to_string())).map_err(|_| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                usage(format!("unknown method {name:?}; expected one of {}", known.join(", ")))
            })
        })
        .collect()
}

/// Commands that work on one seed at a time.
fn single_run(config: BenchConfig) -> BenchConfig {
    BenchConfig { runs: 1, ..config }
}

fn run_dir(g: &Global, command: &str, config: &BenchConfig) -> Result<PathBuf, Failure> {
    let id = g.run_id.clone().unwrap_or_else(|| {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        format!("{command}-seed{}-{now}", config.seed)
    });
    let dir = g.out_dir.join(id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).map_err(anyhow::Error::from)?)
        .with_context(|| format!("writing {}", path.display()))?;
    log::info!("writing results to {}", dir.display());
    Ok(dir)
}

fn meta_train_cmd(config: &BenchConfig, dir: &Path, source: Source, resume: Option<&Path>) -> Result<(), Failure> {
    let learner = Classifier::new(config.model.clone())?.with_dropout_rate(0.0)?;
    let world = agile_core::bench::World::build(&config.world, config.seed)?;
    let mut meta = config.meta.clone();
    if source == Source::Base {
        meta.augmentation = AugmentationConfig::none();
    }
    let state = match resume {
        Some(ckpt) => {
            let template = MetaState::new(&learner, config.seed)?.params;
            MetaState::load(ckpt, &template)?
        }
        None => MetaState::new(&learner, config.seed)?,
    };
    let start = Instant::now();
    let out_dir = dir.join("checkpoints");
    let outcome = meta_train(&learner, &world.meta_tasks, &meta, state, Some(&out_dir))?;
    let last = outcome.log.last();
    println!(
        "meta-trained {} iterations in {:.1}s; final meta-loss {}; checkpoint {}",
        outcome.state.iteration,
        start.elapsed().as_secs_f64(),
        last.map(|r| format!("{:.4}", r.meta_loss)).unwrap_or_else(|| "n/a".into()),
        out_dir.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

/// θ from `--theta`, or meta-trained into the run directory.
fn theta_for(bench: &mut Bench, args: &ThetaArgs, source: MetaTaskSource, seed: u64) -> Result<ParamSet, Failure> {
    match &args.theta {
        Some(dir) => {
            let template = MetaState::new(bench.learner(), seed)?.params;
            let theta = MetaState::load(dir, &template)?.params;
            bench.set_theta(source, seed, theta.clone());
            Ok(theta)
        }
        None => Ok(bench.theta(source, seed)?),
    }
}

fn write_outputs(dir: &Path, results: &mut [RunResult]) -> Result<(), Failure> {
    // Relative to the run directory, so that runs.json does not depend on where the run lives.
    for r in results.iter_mut() {
        r.artifacts = vec![PathBuf::from("metrics.csv"), PathBuf::from("curves.csv")];
    }
    save_run_results(&dir.join(RUNS_FILE), results)?;
    write_metrics_csv(&dir.join("metrics.csv"), results)?;
    write_curves_csv(&dir.join("curves.csv"), results)?;
    Ok(())
}

fn report(r: &RunResult) {
    let acc = r.aggregate.as_ref().map(|a| &a.accuracy);
    let failed = r.runs.iter().filter(|t| t.error.is_some()).count();
    match acc {
        Some(a) => println!(
            "{:<14} n={:<6} accuracy {:.3} ± {:.3} over {} runs{}",
            r.config.method.name(),
            r.config.n_train.to_string(),
            a.mean,
            a.std,
            a.runs,
            if failed > 0 { format!(" ({failed} failed)") } else { String::new() }
        ),
        None => println!("{:<14} all {} runs failed", r.config.method.name(), r.runs.len()),
    }
}

fn adapt(config: BenchConfig, dir: &Path, args: &ThetaArgs, budget: Budget) -> Result<(), Failure> {
    let seed = config.seed;
    let mut bench = Bench::new(config, Some(dir.join("checkpoints")))?;
    theta_for(&mut bench, args, MetaTaskSource::Augmented, seed)?;
    let mc = MethodConfig::table(Method::AgilePhase1, seed).with_budget(budget);
    let mut results = vec![bench.run_method(&mc)?];
    report(&results[0]);
    write_outputs(dir, &mut results)
}

fn active(config: BenchConfig, dir: &Path, args: &ThetaArgs, budget: Budget, strategy: StrategyArg) -> Result<(), Failure> {
    let seed = config.seed;
    let mut bench = Bench::new(config.clone(), Some(dir.join("checkpoints")))?;
    let theta = theta_for(&mut bench, args, MetaTaskSource::Augmented, seed)?;
    let tasks = bench.world(seed)?.real_tasks.clone();
    let start = Instant::now();
    let mut runs = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let n = budget.resolve(task.len(), task.train_pool().len())?;
        let active = agile_core::active::ActiveConfig {
            budget: n,
            inner_lr: config.meta.inner_lr,
            calibration: config.calibration,
            strategy: match strategy {
                StrategyArg::Entropy => Strategy::Entropy,
                StrategyArg::Random => Strategy::Random,
            },
            ..config.active.clone()
        };
        let active_seed = seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        let result = active_loop(
            bench.learner().clone(),
            &theta,
            Arc::new(task.clone()),
            active,
            active_seed,
            &mut OracleLabeler,
            None,
        )?;
        let LoopResult::Finished(outcome) = result else {
            return Err(Failure::Runtime(anyhow::anyhow!("oracle labeling stopped early")));
        };
        let log = dir.join(format!("query_log_{}.csv", task.task_id()));
        outcome.pool.write_query_log(&log)?;
        let metrics = compute_metrics(&outcome.evaluation.predictions, &outcome.evaluation.labels)?;
        println!("{:<12} {} labels, accuracy {:.3}", task.task_id(), n, metrics.accuracy);
        runs.push(TaskRun {
            seed,
            task_id: task.task_id().to_string(),
            samples: n,
            metrics: Some(metrics),
            curve: Vec::new(),
            error: None,
        });
    }
    let ok: Vec<RunMetrics> = runs.iter().filter_map(|r| r.metrics.clone()).collect();
    let mut results = vec![RunResult {
        config: MethodConfig::table(Method::AgilePhase2, seed).with_budget(budget),
        aggregate: Some(aggregate(&ok)?),
        runs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        artifacts: Vec::new(),
    }];
    report(&results[0]);
    write_outputs(dir, &mut results)
}

fn bench(config: BenchConfig, dir: &Path) -> Result<(), Failure> {
    let methods = config.methods.clone();
    let mut bench = Bench::new(config, Some(dir.join("checkpoints")))?;
    let mut results = Vec::new();
    for mc in &methods {
        log::info!("running {}", mc.method);
        let r = bench.run_method(mc)?;
        report(&r);
        results.push(r);
        // Keep what finished on disk even if a later method fails.
        write_outputs(dir, &mut results)?;
    }
    Ok(())
}

fn sweep(config: BenchConfig, dir: &Path, method: Method, sizes: &[Budget]) -> Result<(), Failure> {
    let seed = config.seed;
    let mut bench = Bench::new(config, Some(dir.join("checkpoints")))?;
    let rows = bench.sweep_training_size(method, sizes, seed)?;
    for row in &rows {
        report(&row.result);
    }
    write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    let mut results: Vec<RunResult> = rows.into_iter().map(|r| r.result).collect();
    write_outputs(dir, &mut results)
}

fn export(run: &Path, format: &str, table: Table, output: Option<&Path>) -> Result<(), Failure> {
    if format != "csv" {
        return Err(usage(format!("unsupported export format {format:?}; only csv is available")));
    }
    let runs_file = run.join(RUNS_FILE);
    if !runs_file.exists() {
        return Err(usage(format!("no results at {}", runs_file.display())));
    }
    let results = load_run_results(&runs_file)?;
    let write = |out: Box<dyn std::io::Write>| match table {
        Table::Metrics => metrics_csv(out, &results),
        Table::Curves => curves_csv(out, &results),
    };
    match output {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write(Box::new(file))?;
        }
        None => write(Box::new(std::io::stdout().lock()))?,
    }
    Ok(())
}

fn serve(
    config: BenchConfig,
    dir: &Path,
    args: &ThetaArgs,
    addr: std::net::SocketAddr,
    tasks_dir: Option<&Path>,
) -> Result<(), Failure> {
    let seed = config.seed;
    let mut bench = Bench::new(config.clone(), Some(dir.join("checkpoints")))?;
    let theta = theta_for(&mut bench, args, MetaTaskSource::Augmented, seed)?;
    let tasks: Vec<TaskDataset> = match tasks_dir {
        Some(d) => load_dataset(d)?,
        None => bench.world(seed)?.real_tasks.clone(),
    };
    let active = agile_core::active::ActiveConfig {
        inner_lr: config.meta.inner_lr,
        calibration: config.calibration,
        ..config.active.clone()
    };
    for t in &tasks {
        println!("task {} ({} train samples)", t.task_id(), t.train_pool().len());
    }
    let state = agile_service::AppState::new(agile_service::ServiceConfig {
        learner: bench.learner().clone(),
        theta,
        tasks,
        active,
        snapshot_dir: Some(dir.join("sessions")),
    });
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime
        .block_on(agile_service::serve(addr, state))
        .with_context(|| format!("serving on {addr}"))?;
    Ok(())
}
