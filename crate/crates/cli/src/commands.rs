use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use proxysteer::align_train::{load_examples, run_training, AblationFlag, TrainingExample};
use proxysteer::dataaug::{augment, load_sources, AugmentOp, GenClient, HttpGenClient, MockClient};
use proxysteer::evalkit::{
    evaluate_run, load_predictions, load_specs, HallucinationScorer, Prediction, RemoteScorer,
};
use proxysteer::micro_lm::MicroLM;
use proxysteer::providers::{LogitProvider, ProviderSpec};
use proxysteer::steer::{
    decode_batch, decode_unsteered, read_trace, replay_steps, write_trace, GenerationTrace,
    SamplingPolicy, TraceHeader, TRACE_SCHEMA,
};
use proxysteer::synth::{run_experiment, PlantedFactTask};
use proxysteer::vocab::build_shared_map;

use crate::config::{ClientKind, RunConfig, SNAPSHOT};
use crate::{AugmentArgs, Cli, CliError, Command, DecodeArgs, EvalArgs, InspectArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.run_dir {
        cfg.run_dir = Some(dir);
    }
    match cli.command {
        Command::Augment(a) => augment_cmd(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Decode(a) => decode_cmd(cfg, a),
        Command::Eval(a) => eval_cmd(cfg, a),
        Command::InspectTrace(a) => inspect_cmd(a),
        Command::Synth(a) => {
            cfg.synth.experiment |= a.experiment;
            synth_cmd(cfg)
        }
    }
}

fn need<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("missing {flag}")))
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Creates the run directory and writes the resolved config into it.
fn start_run(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir(command);
    let text = cfg.to_toml()?;
    fs::create_dir_all(&dir).with_context(|| format!("cli: cannot create {}", dir.display()))?;
    fs::write(dir.join(SNAPSHOT), text)
        .with_context(|| format!("cli: cannot write snapshot in {}", dir.display()))?;
    log::info!("{command}: run directory {}", dir.display());
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn augment_cmd(mut cfg: RunConfig, a: AugmentArgs) -> Result<(), CliError> {
    let sec = &mut cfg.augment;
    sec.input = a.input.or(sec.input.take());
    sec.output = a.out.or(sec.output.take());
    sec.external = a.external.or(sec.external.take());
    sec.client = a.client.unwrap_or(sec.client);
    if let Some(ops) = a.ops {
        sec.options.ops = ops
            .iter()
            .map(|o| o.parse::<AugmentOp>())
            .collect::<Result<_, _>>()
            .map_err(config_err)?;
    }
    if let Some(r) = a.split_ratio {
        sec.options.split_ratio = r;
    }
    if let Some(c) = a.concurrency {
        sec.options.concurrency = c;
    }
    sec.options.seed = cfg.seed;
    let input = need(sec.input.clone(), "--in")?;
    let dir = start_run(&cfg, "augment")?;
    let sec = &cfg.augment;
    let output = sec
        .output
        .clone()
        .unwrap_or_else(|| dir.join("dataset.jsonl"));

    let sources = load_sources(&input).context("dataaug")?;
    let external = match &sec.external {
        Some(p) => read_lines(p).context("dataaug")?,
        None => Vec::new(),
    };
    let client: Box<dyn GenClient> = match sec.client {
        ClientKind::Mock => Box::new(MockClient::new(cfg.seed)),
        ClientKind::Http => Box::new(HttpGenClient::new(sec.http.clone())),
    };
    let out = augment(&sources, &external, client.as_ref(), &sec.options).context("dataaug")?;
    proxysteer::align_train::save_examples(&output, &out.dataset).context("dataaug")?;
    write_json(&dir.join("manifest.json"), &out.manifest).context("dataaug")?;
    println!(
        "{} examples ({} train, {} val, {} skipped) -> {}",
        out.dataset.len(),
        out.manifest.train,
        out.manifest.val,
        out.manifest.skipped.len(),
        output.display()
    );
    Ok(())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line.trim().to_string());
        }
    }
    Ok(out)
}

/// Points every training seed at the global seed.
fn seed_training(run: &mut proxysteer::align_train::TrainRunConfig, seed: u64) {
    run.hdp.sgd.seed = seed;
    run.hdp.adapter.seed = seed;
    run.refine.sgd.seed = seed;
    run.refine.adapter.seed = seed;
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let sec = &mut cfg.train;
    sec.data = a.data.or(sec.data.take());
    sec.base = a.base.or(sec.base.take());
    let run = &mut sec.run;
    if let Some(k) = a.k {
        run.refine.iterations = k;
    }
    if let Some(e) = a.epochs {
        run.refine.sgd.epochs = e;
    }
    if let Some(lr) = a.lr {
        run.refine.sgd.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        run.refine.sgd.batch_size = b;
        run.hdp.sgd.batch_size = b;
    }
    if let Some(e) = a.hdp_epochs {
        run.hdp.sgd.epochs = e;
    }
    if let Some(lr) = a.hdp_lr {
        run.hdp.sgd.learning_rate = lr;
    }
    if let Some(flags) = a.ablation {
        run.ablation = flags
            .iter()
            .map(|f| f.parse::<AblationFlag>())
            .collect::<Result<_, _>>()
            .map_err(config_err)?;
    }
    seed_training(run, cfg.seed);
    proxysteer::align_train::ablation_config(&run.ablation).map_err(config_err)?;
    let data_path = need(sec.data.clone(), "--data")?;
    let base_path = need(sec.base.clone(), "--base")?;
    let dir = start_run(&cfg, "train")?;

    let data = load_examples(&data_path).context("align_train")?;
    let base = MicroLM::load(&base_path).context("micro_lm")?;
    let out = run_training(&base, &data, &cfg.train.run, Some(&dir)).context("align_train")?;
    println!("variant {}", out.wiring.variant);
    if let Some(em) = out.initial_em {
        println!("initial EM {em:.4}");
    }
    for r in &out.reports {
        println!(
            "round {} selected {} EM {:.4}",
            r.iteration, r.selected, r.selected_em
        );
    }
    println!("fap {}", out.fap.content_hash());
    println!("hdp {}", out.hdp.content_hash());
    Ok(())
}

fn parse_spec(s: &str) -> Result<ProviderSpec, CliError> {
    ProviderSpec::parse(s).map_err(config_err)
}

fn decode_cmd(mut cfg: RunConfig, a: DecodeArgs) -> Result<(), CliError> {
    let sec = &mut cfg.decode;
    sec.prompt = a.prompt.or(sec.prompt.take());
    sec.prompt_file = a.prompt_file.or(sec.prompt_file.take());
    sec.data = a.data.or(sec.data.take());
    if let Some(s) = a.target {
        sec.target = Some(parse_spec(&s)?);
    }
    if let Some(s) = a.fap {
        sec.fap = Some(parse_spec(&s)?);
    }
    if let Some(s) = a.hdp {
        sec.hdp = Some(parse_spec(&s)?);
    }
    sec.trace_out = a.trace_out.or(sec.trace_out.take());
    if let Some(t) = a.threads {
        sec.threads = t;
    }
    let d = &mut sec.decoding;
    if let Some(l) = a.lambda {
        d.lambda = l;
    }
    if let Some(p) = a.policy {
        d.policy = p.parse::<SamplingPolicy>().map_err(config_err)?;
    }
    if let Some(m) = a.max_new_tokens {
        d.max_new_tokens = m;
    }
    d.seed = cfg.seed;
    d.record_trace = sec.trace_out.is_some();
    d.validate().map_err(config_err)?;

    let target_spec = need(sec.target.clone(), "--target")?;
    let proxies = match (&sec.fap, &sec.hdp) {
        (Some(f), Some(h)) => Some((f.clone(), h.clone())),
        (None, None) => None,
        _ => {
            return Err(CliError::Config(
                "--fap and --hdp must be given together".into(),
            ))
        }
    };
    let sources = [
        sec.prompt.is_some(),
        sec.prompt_file.is_some(),
        sec.data.is_some(),
    ];
    if sources.iter().filter(|s| **s).count() != 1 {
        return Err(CliError::Config(
            "give exactly one of --prompt, --prompt-file, --data".into(),
        ));
    }
    let dir = start_run(&cfg, "decode")?;
    let sec = &cfg.decode;

    let prompts: Vec<(String, String)> = if let Some(p) = &sec.prompt {
        vec![("0".into(), p.clone())]
    } else if let Some(path) = &sec.prompt_file {
        let lines = read_lines(path).context("steer")?;
        lines
            .into_iter()
            .enumerate()
            .map(|(i, p)| (i.to_string(), p))
            .collect()
    } else {
        let data: Vec<TrainingExample> =
            load_examples(sec.data.as_deref().expect("checked above")).context("steer")?;
        data.into_iter().map(|e| (e.id, e.question)).collect()
    };

    let target = target_spec.open(&sec.remote).context("providers")?;
    let texts: Vec<String> = prompts.iter().map(|(_, p)| p.clone()).collect();
    let (traces, infos) = match &proxies {
        Some((f, h)) => {
            if f == h {
                log::warn!(
                    "steering is identically zero: --fap and --hdp name the same provider ({f})"
                );
            }
            let fap = f.open(&sec.remote).context("providers")?;
            let hdp = h.open(&sec.remote).context("providers")?;
            let map = build_shared_map(fap.vocabulary(), target.vocabulary()).context("vocab")?;
            log::info!(
                "shared vocabulary: {} of {} target tokens",
                map.len(),
                target.vocabulary().len()
            );
            let traces = decode_batch(
                target.as_ref(),
                fap.as_ref(),
                hdp.as_ref(),
                &map,
                &texts,
                &sec.decoding,
                sec.threads,
            );
            (
                traces,
                (Some(fap.describe()), Some(hdp.describe()), Some(map)),
            )
        }
        None => {
            log::info!("no proxies given; decoding the target unsteered");
            let traces = texts
                .iter()
                .map(|p| decode_unsteered(target.as_ref(), p, &sec.decoding))
                .collect();
            (traces, (None, None, None))
        }
    };
    let traces: Vec<GenerationTrace> = traces
        .into_iter()
        .collect::<Result<_, _>>()
        .context("steer")?;

    let pred_path = dir.join("predictions.jsonl");
    let mut preds = BufWriter::new(fs::File::create(&pred_path).context("steer")?);
    for ((id, _), trace) in prompts.iter().zip(&traces) {
        let p = Prediction {
            id: id.clone(),
            prediction: trace.text.clone(),
        };
        serde_json::to_writer(&mut preds, &p).context("steer")?;
        preds.write_all(b"\n").context("steer")?;
    }
    preds.flush().context("steer")?;

    if let Some(out) = &sec.trace_out {
        let several = traces.len() > 1;
        if several {
            fs::create_dir_all(out).context("steer")?;
        }
        for ((id, prompt), trace) in prompts.iter().zip(&traces) {
            let header = TraceHeader {
                schema: TRACE_SCHEMA.into(),
                prompt: prompt.clone(),
                lambda: sec.decoding.lambda,
                policy: sec.decoding.policy,
                seed: sec.decoding.seed,
                target: Some(target.describe()),
                fap: infos.0.clone(),
                hdp: infos.1.clone(),
                shared_map: infos.2.clone(),
            };
            let path = if several {
                out.join(format!("trace_{id}.jsonl"))
            } else {
                out.clone()
            };
            let mut w = BufWriter::new(
                fs::File::create(&path)
                    .with_context(|| format!("steer: cannot create {}", path.display()))?,
            );
            write_trace(&mut w, &header, trace).context("steer")?;
            w.flush().context("steer")?;
        }
    }
    if let [trace] = traces.as_slice() {
        println!("{}", trace.text);
    } else {
        println!("{} generations -> {}", traces.len(), pred_path.display());
    }
    Ok(())
}

fn eval_cmd(mut cfg: RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let sec = &mut cfg.eval;
    sec.pred = a.pred.or(sec.pred.take());
    sec.data = a.data.or(sec.data.take());
    sec.specs = a.specs.or(sec.specs.take());
    sec.scorer_url = a.scorer_url.or(sec.scorer_url.take());
    if let Some(l) = a.label {
        sec.label = l;
    }
    let pred_path = need(sec.pred.clone(), "--pred")?;
    let data_path = need(sec.data.clone(), "--data")?;
    let dir = start_run(&cfg, "eval")?;
    let sec = &cfg.eval;

    let preds = load_predictions(&pred_path).context("evalkit")?;
    let data = load_examples(&data_path).context("evalkit")?;
    let specs = match &sec.specs {
        Some(p) => load_specs(p).context("evalkit")?,
        None => Default::default(),
    };
    let remote = sec.scorer_url.as_ref().map(|url| {
        RemoteScorer::new(
            url.clone(),
            Duration::from_millis(sec.scorer_timeout_ms),
            Default::default(),
        )
    });
    let scorers: Vec<&dyn HallucinationScorer> = remote
        .iter()
        .map(|s| s as &dyn HallucinationScorer)
        .collect();
    let mut report = evaluate_run(&preds, &data, &specs, &scorers).context("evalkit")?;
    report.metadata.insert("label".into(), sec.label.clone());
    report
        .metadata
        .insert("predictions".into(), pred_path.display().to_string());
    report
        .metadata
        .insert("dataset".into(), data_path.display().to_string());
    write_json(&dir.join("report.json"), &report).context("evalkit")?;
    let table = report.render_table();
    fs::write(dir.join("report.txt"), &table).context("evalkit")?;
    print!("{table}");
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<(), CliError> {
    let file = fs::File::open(&a.trace)
        .with_context(|| format!("steer: cannot open {}", a.trace.display()))?;
    let (header, steps, summary) = read_trace(BufReader::new(file)).context("steer")?;
    println!("schema   {}", header.schema);
    println!("prompt   {:?}", header.prompt);
    println!(
        "lambda   {}  policy {}  seed {}",
        header.lambda, header.policy, header.seed
    );
    for (role, info) in [
        ("target", &header.target),
        ("fap", &header.fap),
        ("hdp", &header.hdp),
    ] {
        if let Some(i) = info {
            println!(
                "{role:<8} {} {} (vocab {}, {})",
                i.kind, i.label, i.vocab_size, i.vocab_hash
            );
        }
    }
    println!(
        "output   {:?} ({} steps, {:?})",
        summary.text, summary.steps, summary.stop_reason
    );
    if a.steps {
        for s in &steps {
            let g_norm = s.g_hat.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            println!(
                "step {:>3}  {:<16} p={:.6}  |g_hat|={:.4}",
                s.step, s.token_text, s.probability, g_norm
            );
        }
    }
    if a.replay {
        let map = header.shared_map.as_ref().ok_or_else(|| {
            anyhow::anyhow!("steer: trace has no shared vocabulary map to replay with")
        })?;
        let bad = replay_steps(&steps, map, header.lambda).context("steer")?;
        if !bad.is_empty() {
            return Err(anyhow::anyhow!("steer: replay mismatch at steps {bad:?}").into());
        }
        println!("replay   ok ({} steps)", steps.len());
    }
    Ok(())
}

fn synth_cmd(mut cfg: RunConfig) -> Result<(), CliError> {
    let opts = &mut cfg.synth.options;
    opts.task.seed = cfg.seed;
    seed_training(&mut opts.train, cfg.seed);
    opts.decoding.seed = cfg.seed;
    let dir = start_run(&cfg, "synth")?;
    let opts = &cfg.synth.options;

    let task = PlantedFactTask::generate(&opts.task).context("synth")?;
    proxysteer::align_train::save_examples(&dir.join("dataset.jsonl"), &task.examples)
        .context("synth")?;
    write_json(&dir.join("task.json"), &task).context("synth")?;
    task.base_model()
        .context("synth")?
        .save(&dir.join("base.json"))
        .context("micro_lm")?;
    task.target_model()
        .context("synth")?
        .save(&dir.join("target.json"))
        .context("micro_lm")?;
    println!("planted-fact task -> {}", dir.display());
    if cfg.synth.experiment {
        let report = run_experiment(opts, Some(&dir.join("train"))).context("synth")?;
        write_json(&dir.join("experiment.json"), &report).context("synth")?;
        println!("initial EM {:.4}", report.initial_em);
        for r in &report.iterations {
            println!(
                "round {} selected {} EM {:.4}",
                r.iteration, r.selected, r.selected_em
            );
        }
        for v in &report.variants {
            println!("{:<14} target EM {:.4}", v.variant, v.val_em);
        }
        for f in &report.flags {
            println!("FLAG {f}");
        }
    }
    Ok(())
}
