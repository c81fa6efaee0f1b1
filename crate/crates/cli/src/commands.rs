use std::fs;
use std::io;
use std::path::PathBuf;
use std::time::Instant;

use actkd::data::{make_synthetic, write_tsv};
use actkd::engine::{self, EngineError, EventSink, RandomScope};
use actkd::ksm::ActionMode;
use actkd::losses::Weights;
use actkd::models::{evaluate, Encoder};
use actkd::persist::{
    extract_metric, load_encoder, load_ksm, read_log, save_encoder, save_ksm, write_metric_csv,
    JsonlSink, RunManifest,
};
use actkd::tensor::Rng;
use anyhow::{bail, Context, Result};
use serde_json::json;

use crate::workspace::{ensure_config, run_dir, write_json, Distillation, Workspace};
use crate::{Baseline, Command, ConfigArgs, ConfigError, Mode, RandomArgs};

pub(crate) fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData { config, data_seed } => make_data(config, data_seed),
        Command::TrainTeacher { config } => train_teacher(config),
        Command::TrainKsm { config, teacher } => train_ksm(config, teacher),
        Command::Distill {
            config,
            teacher,
            ksm,
            mode,
        } => distill(config, teacher, ksm, mode),
        Command::Evaluate {
            config,
            model,
            split,
        } => {
            let ws = Workspace::load(ensure_config(&config)?)?;
            let model: Encoder<f64> = load_encoder(&model)?;
            let m = evaluate(
                &model,
                ws.split(split)?,
                ws.cfg.student_train.eval_batch_size,
            )?;
            println!("{}", serde_json::to_string(&m)?);
            Ok(())
        }
        Command::Baseline { kind } => match kind {
            Baseline::Fixed {
                config,
                teacher,
                weights,
            } => baseline_fixed(config, teacher, weights),
            Baseline::RandomAll(args) => baseline_random(args, RandomScope::All),
            Baseline::RandomOne(args) => baseline_random(args, RandomScope::One),
        },
        Command::Sweep {
            config,
            teacher,
            threads,
        } => sweep(config, teacher, threads),
        Command::PlotExtract { log, metric, out } => plot_extract(log, metric, out),
    }
}

fn mode_name(mode: ActionMode) -> &'static str {
    match mode {
        ActionMode::Soft => "soft",
        ActionMode::Hard => "hard",
    }
}

fn metrics_log(dir: &std::path::Path) -> Result<JsonlSink> {
    Ok(JsonlSink::create(&dir.join("metrics.jsonl"))?)
}

fn finish(mut manifest: RunManifest, started: Instant, dir: &std::path::Path) -> Result<()> {
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.save(&dir.join("manifest.json"))?;
    Ok(())
}

/// `--seed` picks the generator seed here, since no training happens.
fn make_data(mut args: ConfigArgs, data_seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    if let Some(seed) = data_seed.or(args.seed.take()) {
        args.overrides.push(format!("data.seed={seed}"));
    }
    let cfg = ensure_config(&args)?;
    let d = &cfg.data;
    let splits = make_synthetic(&d.synthetic, d.seed)?;
    fs::create_dir_all(&d.dir).with_context(|| format!("creating {}", d.dir.display()))?;
    let mut manifest = RunManifest::new("make-data", "data", &cfg);
    manifest.seed = d.seed;
    for (name, rows) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        let path = d.split_path(name);
        write_tsv(&path, &d.schema, rows)?;
        manifest.add_artifact(name, &path);
    }
    manifest.result = json!({
        "train": splits.train.len(),
        "dev": splits.dev.len(),
        "test": splits.test.len(),
        "vocab_size": splits.vocab.len(),
        "bayes_accuracy": d.synthetic.bayes_accuracy(),
    });
    println!(
        "wrote {} train, {} dev and {} test examples to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        d.dir.display()
    );
    finish(manifest, started, &d.dir)
}

fn train_teacher(args: ConfigArgs) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::load(ensure_config(&args)?)?;
    let cfg = &ws.cfg;
    let dir = run_dir(cfg, "teacher")?;
    let mut sink = metrics_log(&dir)?;
    let mut model = Encoder::<f64>::new(
        ws.teacher_config(),
        &mut Rng::new(cfg.seed).fork("teacher_init"),
    )?;
    let report = engine::train_teacher(
        &mut model,
        &ws.train,
        &ws.dev,
        &cfg.teacher_train,
        cfg.seed,
        &mut sink,
    )?;
    let test = ws
        .test
        .as_ref()
        .map(|t| evaluate(&model, t, cfg.teacher_train.eval_batch_size))
        .transpose()?;
    let ckpt = dir.join("teacher.ckpt");
    save_encoder(&ckpt, &model, json!({"run": "teacher", "seed": cfg.seed}))?;
    let mut manifest = ws.manifest("train-teacher", "teacher")?;
    manifest.add_artifact("checkpoint", &ckpt);
    manifest.add_artifact("metrics", sink.path());
    manifest.steps = report.steps;
    manifest.result = json!({"dev": report.dev, "test": test, "trajectory": report.trajectory});
    println!(
        "teacher dev accuracy {:.4} -> {}",
        report.dev.accuracy,
        ckpt.display()
    );
    finish(manifest, started, &dir)
}

fn train_ksm(args: ConfigArgs, teacher: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let d = Distillation::prepare(ensure_config(&args)?, teacher)?;
    let cfg = &d.ws.cfg;
    let dir = run_dir(cfg, "ksm")?;
    let mut sink = metrics_log(&dir)?;
    let report = engine::train_ksm(&d.setup(), &cfg.ksm, &mut sink)?;
    let ckpt = dir.join("ksm.ckpt");
    save_ksm(
        &ckpt,
        &report.nets,
        &cfg.ksm,
        json!({"run": "ksm", "seed": cfg.seed, "best_episode": report.best_episode}),
    )?;
    let mut manifest = d.manifest("train-ksm", "ksm")?;
    manifest.add_artifact("checkpoint", &ckpt);
    manifest.add_artifact("metrics", sink.path());
    manifest.steps = report.episodes.iter().map(|e| e.steps).sum();
    manifest.result = json!({
        "best_episode": report.best_episode,
        "initial": report.initial,
        "episodes": report.episodes,
    });
    let best = &report.episodes[report.best_episode - 1];
    println!(
        "KSM trained for {} episodes, best episode {} (dev accuracy {:.4}) -> {}",
        report.episodes.len(),
        report.best_episode,
        best.dev.accuracy,
        ckpt.display()
    );
    finish(manifest, started, &dir)
}

fn distill(
    args: ConfigArgs,
    teacher: Option<PathBuf>,
    ksm: Option<PathBuf>,
    mode: Option<Mode>,
) -> Result<()> {
    let started = Instant::now();
    let d = Distillation::prepare(ensure_config(&args)?, teacher)?;
    let cfg = &d.ws.cfg;
    let ksm_path = ksm.unwrap_or_else(|| cfg.out_dir.join("ksm").join("ksm.ckpt"));
    let (nets, trained_with) = load_ksm::<f64>(&ksm_path).with_context(|| {
        format!(
            "loading KSM {} (run `train-ksm` first?)",
            ksm_path.display()
        )
    })?;
    let setup = d.setup();
    if nets.shape.batch_size != setup.schedule.batch_size
        || nets.shape.cls_size != setup.student_init.config().hidden_size
    {
        bail!(ConfigError(format!(
            "KSM expects batches of {} with width {}; the student uses {} and {}",
            nets.shape.batch_size,
            nets.shape.cls_size,
            setup.schedule.batch_size,
            setup.student_init.config().hidden_size
        )));
    }
    let mode = mode
        .map(ActionMode::from)
        .unwrap_or(trained_with.action_mode);
    let dir = run_dir(cfg, &format!("distill-{}", mode_name(mode)))?;
    let mut sink = metrics_log(&dir)?;
    let out = engine::distill(&setup, &nets, &trained_with, mode, &mut sink)?;
    let ckpt = dir.join("student.ckpt");
    save_encoder(
        &ckpt,
        &out.student,
        json!({"run": out.run.run_id, "seed": cfg.seed}),
    )?;
    let mut manifest = d.manifest("distill", &out.run.run_id)?;
    manifest.add_input("ksm", &ksm_path)?;
    manifest.add_artifact("checkpoint", &ckpt);
    manifest.add_artifact("metrics", sink.path());
    manifest.steps = out.run.steps;
    manifest.result = serde_json::to_value(&out.run)?;
    println!(
        "distilled student ({} actions) dev accuracy {:.4} -> {}",
        mode_name(mode),
        out.run.dev.accuracy,
        ckpt.display()
    );
    finish(manifest, started, &dir)
}

fn parse_weights(text: &str) -> Result<Weights> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ConfigError(format!("--weights `{text}`: {e}")))?;
    values.try_into().map_err(|v: Vec<f64>| {
        ConfigError(format!("--weights needs 4 values, got {}", v.len())).into()
    })
}

fn baseline_fixed(
    args: ConfigArgs,
    teacher: Option<PathBuf>,
    weights: Option<String>,
) -> Result<()> {
    let started = Instant::now();
    let d = Distillation::prepare(ensure_config(&args)?, teacher)?;
    let cfg = &d.ws.cfg;
    let weights = match weights {
        Some(w) => parse_weights(&w)?,
        None => cfg.baseline.fixed_weights,
    };
    let dir = run_dir(cfg, "baseline-fixed")?;
    let mut sink = metrics_log(&dir)?;
    let out = engine::run_fixed(&d.setup(), weights, &mut sink)?;
    let ckpt = dir.join("student.ckpt");
    save_encoder(
        &ckpt,
        &out.student,
        json!({"run": out.run.run_id, "seed": cfg.seed}),
    )?;
    let mut manifest = d.manifest("baseline fixed", &out.run.run_id)?;
    manifest.add_artifact("checkpoint", &ckpt);
    manifest.add_artifact("metrics", sink.path());
    manifest.steps = out.run.steps;
    manifest.result = serde_json::to_value(&out.run)?;
    println!(
        "fixed weights {weights:?}: dev accuracy {:.4}",
        out.run.dev.accuracy
    );
    finish(manifest, started, &dir)
}

fn baseline_random(args: RandomArgs, scope: RandomScope) -> Result<()> {
    let started = Instant::now();
    let d = Distillation::prepare(ensure_config(&args.config)?, args.teacher)?;
    let cfg = &d.ws.cfg;
    let trials = args.trials.unwrap_or(cfg.baseline.trials);
    let mode = ActionMode::from(args.mode);
    let name = match (scope, mode) {
        (RandomScope::All, ActionMode::Soft) => "random-all",
        (RandomScope::One, ActionMode::Soft) => "random-one",
        (RandomScope::All, ActionMode::Hard) => "random-all-hard",
        (RandomScope::One, ActionMode::Hard) => "random-one-hard",
    };
    let dir = run_dir(cfg, &format!("baseline-{name}"))?;
    let mut sink = metrics_log(&dir)?;
    let report = engine::run_random(&d.setup(), scope, mode, trials, &mut sink)?;
    let elapsed = started.elapsed().as_secs_f64() / trials as f64;
    for run in &report.runs {
        let run_dir = dir.join("runs").join(&run.run_id);
        fs::create_dir_all(&run_dir)?;
        let mut manifest = d.manifest(&format!("baseline {name}"), &run.run_id)?;
        manifest.add_artifact("metrics", sink.path());
        manifest.steps = run.steps;
        manifest.wall_clock_secs = elapsed;
        manifest.result = serde_json::to_value(run)?;
        manifest.save(&run_dir.join("manifest.json"))?;
    }
    let (best, worst) = (&report.runs[report.best], &report.runs[report.worst]);
    let summary = json!({
        "trials": trials,
        "mode": mode_name(mode),
        "best": {"run": best.run_id, "dev": best.dev},
        "worst": {"run": worst.run_id, "dev": worst.dev},
        "gap": report.gap(),
        "mean_accuracy": report.mean_accuracy(),
        "dev_accuracy": report.runs.iter().map(|r| r.dev.accuracy).collect::<Vec<_>>(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{name}: {trials} trials, best {:.4}, worst {:.4}, gap {:.4}, mean {:.4}",
        best.dev.accuracy,
        worst.dev.accuracy,
        report.gap(),
        report.mean_accuracy()
    );
    Ok(())
}

fn sweep(args: ConfigArgs, teacher: Option<PathBuf>, threads: Option<usize>) -> Result<()> {
    let started = Instant::now();
    let d = Distillation::prepare(ensure_config(&args)?, teacher)?;
    let cfg = &d.ws.cfg;
    let points = cfg.sweep.grid.points(&cfg.ksm)?;
    let dir = run_dir(cfg, "sweep")?;
    let point_dir = |i: usize| dir.join(format!("point-{i}"));
    let sinks = |i: usize| -> engine::Result<Box<dyn EventSink + Send>> {
        let sink = JsonlSink::create(&point_dir(i).join("metrics.jsonl"))
            .map_err(|e| EngineError::Sink(e.to_string()))?;
        Ok(Box::new(sink))
    };
    let report = engine::sweep(
        &d.setup(),
        &points,
        threads.unwrap_or(cfg.sweep.threads),
        &sinks,
    )?;
    for p in &report.points {
        let mut manifest = d.manifest("sweep", &p.run.run_id)?;
        manifest.config.ksm = p.ksm.clone();
        manifest.add_artifact("metrics", &point_dir(p.index).join("metrics.jsonl"));
        manifest.steps = p.run.steps;
        manifest.result = serde_json::to_value(p)?;
        manifest.wall_clock_secs = started.elapsed().as_secs_f64();
        manifest.save(&point_dir(p.index).join("manifest.json"))?;
    }
    write_json(&dir.join("summary.json"), &report)?;
    let best = report.best();
    println!(
        "sweep of {} points: best point {} (lambda {}, phase size {}, alpha {}) dev accuracy {:.4}",
        report.points.len(),
        best.index,
        best.ksm.lambda,
        best.ksm.phase_size,
        best.ksm.alpha,
        best.run.dev.accuracy
    );
    Ok(())
}

fn plot_extract(log: PathBuf, metric: String, out: Option<PathBuf>) -> Result<()> {
    let events = read_log(&log)?;
    let rows = extract_metric(&events, &metric);
    if rows.is_empty() {
        bail!("no event in {} carries `{metric}`", log.display());
    }
    match out {
        Some(path) => {
            let f =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_metric_csv(f, &metric, &rows)?;
        }
        None => write_metric_csv(io::stdout().lock(), &metric, &rows)?,
    }
    Ok(())
}
