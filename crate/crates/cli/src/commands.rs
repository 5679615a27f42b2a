use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use slowfast::config::SlowfastConfig;
use slowfast::data_pipeline::{clean_records, CoTRecord, FilterReport, GroundTruthEntry, GroundTruthIndex};
use slowfast::grpo::TrainConfig;
use slowfast::layout::{append_zoom, render_prompt, SamplingConfig, SlowFastLayout, TimeSpan, VideoMeta};
use slowfast::reasoning::{run_episode, EpisodeTrace, PolicyBackend, QuestionSpec, RemoteBackend, ScriptedBackend};
use slowfast::rewards::{assign_trace_rewards, RewardBundle};
use slowfast::synthetic_env::{
    evaluate, held_out_instances, run_experiment_with, EvalPolicy, EvalReport, SampleMode, SynthPolicyParams,
    SyntheticBackend, SyntheticInstance,
};

use crate::failure::{self, Kind, Tagged};
use crate::manifest::RunManifest;
use crate::{
    BackendKind, Cli, Command, CotsAction, EpisodeAction, EpisodeArgs, FilterArgs, LayoutOverrides, TemplateAction,
    TemplateArgs, TrainArgs,
};

pub fn dispatch(cli: Cli) -> Result<()> {
    let (config, config_path) = SlowfastConfig::load(cli.config.as_deref()).map_err(failure::config)?;
    let manifest = cli.manifest.as_deref();
    match cli.command {
        Command::Template {
            action: TemplateAction::Render(args),
        } => template_render(args, config, config_path, manifest),
        Command::Episode {
            action: EpisodeAction::Run(args),
        } => episode_run(args, config, config_path, manifest),
        Command::Train(args) => train(args, config, config_path, manifest),
        Command::Cots {
            action: CotsAction::Filter(args),
        } => cots_filter(args, config, config_path, manifest),
    }
}

fn apply_layout(cfg: &mut SamplingConfig, o: &LayoutOverrides) -> Result<()> {
    if let Some(b) = o.budget_check {
        cfg.budget_check = b.into();
    }
    if let Some(m) = o.max_steps {
        cfg.max_steps = m;
    }
    if let Some(f) = o.fps_fast {
        cfg.fps_fast = f;
    }
    cfg.validate().input()
}

fn parse_clip(text: &str, meta: &VideoMeta) -> Result<TimeSpan> {
    let (a, b) = text
        .split_once(':')
        .with_context(|| format!("clip {text:?} is not start:end"))
        .input()?;
    let a: i64 = a.trim().parse().with_context(|| format!("clip start in {text:?}")).input()?;
    let b: i64 = b.trim().parse().with_context(|| format!("clip end in {text:?}")).input()?;
    TimeSpan::clamped(a, b, meta).input()
}

fn template_render(args: TemplateArgs, mut config: SlowfastConfig, path: Option<PathBuf>, manifest: Option<&Path>) -> Result<()> {
    apply_layout(&mut config.layout, &args.layout)?;
    let mut run = RunManifest::new("template render", config.clone(), path);
    let meta = VideoMeta::new(args.duration, args.source_id).input()?;
    let mut layout = SlowFastLayout::new(meta.clone(), &config.layout).input()?;
    for clip in args.clips.iter().filter(|c| !c.trim().is_empty()) {
        layout = append_zoom(&layout, parse_clip(clip, &meta)?, &config.layout).input()?;
    }
    let prompt = render_prompt(&layout);
    match &args.out {
        Some(out) => {
            fs::write(out, format!("{prompt}\n")).with_context(|| format!("writing {}", out.display()))?;
            run.output(out)?;
        }
        None => writeln!(std::io::stdout().lock(), "{prompt}")?,
    }
    run.finish(manifest, args.out.as_deref())
}

/// Input for scripted and remote episodes.
#[derive(Debug, Deserialize)]
struct EpisodeInput {
    duration_s: f64,
    #[serde(default = "default_source")]
    source_id: String,
    question: QuestionSpec,
}

fn default_source() -> String {
    "video".into()
}

#[derive(Debug, Serialize)]
struct EpisodeRecord<'a> {
    backend: &'static str,
    seed: u64,
    trace: &'a EpisodeTrace,
    #[serde(skip_serializing_if = "Option::is_none")]
    rewards: Option<RewardBundle>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .input()?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .input()
}

fn episode_run(args: EpisodeArgs, mut config: SlowfastConfig, path: Option<PathBuf>, manifest: Option<&Path>) -> Result<()> {
    apply_layout(&mut config.layout, &args.layout)?;
    if let Some(url) = &args.url {
        config.remote.url = url.clone();
    }
    let mut run = RunManifest::new("episode run", config.clone(), path);
    run.seeds.push(args.seed);
    let sampling = &config.layout;

    let (trace, name) = match args.backend {
        BackendKind::Synthetic => {
            let params = match &args.params {
                Some(p) => {
                    run.input(p)?;
                    read_json::<SynthPolicyParams>(p)?
                }
                None => SynthPolicyParams::zeros(&config.env),
            };
            if params.to_flat().len() != SynthPolicyParams::zeros(&config.env).len() {
                return Err(failure::tag(Kind::Input, anyhow::anyhow!("params do not match the [env] shape")));
            }
            let inst = SyntheticInstance::generate(args.seed, &config.env, sampling).input()?;
            let mode = if args.greedy { SampleMode::Greedy } else { SampleMode::Sample };
            let mut backend = SyntheticBackend::new(&params, &inst, &config.env, sampling, mode);
            let meta = config.env.meta(inst.sample_id());
            let trace = run_episode(&mut backend, &meta, &inst.question.to_spec(), sampling, args.seed)
                .map_err(failure::episode)?;
            (trace, "synthetic")
        }
        BackendKind::Scripted | BackendKind::Remote => {
            let qf = args
                .question_file
                .as_deref()
                .context("--question-file is required for scripted and remote backends")
                .input()?;
            run.input(qf)?;
            let input: EpisodeInput = read_json(qf)?;
            let meta = VideoMeta::new(input.duration_s, input.source_id).input()?;
            let mut backend: Box<dyn PolicyBackend> = if args.backend == BackendKind::Scripted {
                let fx = args
                    .fixtures
                    .as_deref()
                    .context("--fixtures is required for the scripted backend")
                    .input()?;
                run.input(fx)?;
                Box::new(ScriptedBackend::from_fixture_file(fx).input()?)
            } else {
                Box::new(RemoteBackend::new(config.remote.clone()))
            };
            let trace = run_episode(backend.as_mut(), &meta, &input.question, sampling, args.seed)
                .map_err(failure::episode)?;
            let name = if args.backend == BackendKind::Scripted { "scripted" } else { "remote" };
            (trace, name)
        }
    };

    let has_gt = trace.question.gt_answer.is_some();
    let rewards = if has_gt {
        Some(assign_trace_rewards(&trace, &trace.question).input()?)
    } else {
        None
    };
    let line = serde_json::to_string(&EpisodeRecord {
        backend: name,
        seed: args.seed,
        trace: &trace,
        rewards,
    })?;
    match &args.out {
        Some(out) => {
            fs::write(out, line + "\n").with_context(|| format!("writing {}", out.display()))?;
            run.output(out)?;
        }
        None => writeln!(std::io::stdout().lock(), "{line}")?,
    }
    run.finish(manifest, args.out.as_deref())
}

#[derive(Debug, Serialize)]
struct StepEval {
    max_steps: usize,
    report: EvalReport,
}

#[derive(Debug, Serialize)]
struct Baselines {
    no_zoom: EvalReport,
    uniform_zoom: EvalReport,
    random_zoom: EvalReport,
}

#[derive(Debug, Serialize)]
struct EvalFile {
    variant: &'static str,
    seed: u64,
    trained: EvalReport,
    baselines: Baselines,
    steps: Vec<StepEval>,
}

fn train(args: TrainArgs, mut config: SlowfastConfig, path: Option<PathBuf>, manifest: Option<&Path>) -> Result<()> {
    let t: &mut TrainConfig = &mut config.train;
    if let Some(v) = args.updates {
        t.updates = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.group_size {
        t.group_size = v;
    }
    if let Some(v) = args.mix_ratio {
        t.mix_ratio = v;
    }
    if let Some(v) = args.eval_instances {
        config.env.eval_instances = v;
    }
    if let Some(v) = args.eval_every {
        config.env.eval_every = v;
    }
    config.validate().map_err(failure::config)?;
    if let Some(n) = args.workers {
        if n == 0 {
            return Err(failure::tag(Kind::Input, anyhow::anyhow!("--workers must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }

    let mut run = RunManifest::new("train", config.clone(), path);
    run.seeds.push(args.seed);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut write_err = None;
    let result = run_experiment_with(args.variant, &config.train, &config.env, &config.layout, args.seed, |rec| {
        if write_err.is_none() {
            if let Err(e) = serde_json::to_string(rec)
                .map_err(std::io::Error::from)
                .and_then(|l| writeln!(metrics, "{l}"))
            {
                write_err = Some(e);
            }
        }
    })
    .map_err(failure::experiment)?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics.jsonl");
    }
    metrics.flush()?;

    let mut csv = csv::Writer::from_path(args.out.join("summary.csv"))?;
    for row in result.summary() {
        csv.serialize(row)?;
    }
    csv.flush()?;

    fs::write(args.out.join("params.json"), serde_json::to_string_pretty(&result.params)? + "\n")?;

    let held_out = held_out_instances(args.seed, &config.env, &config.layout).input()?;
    let eval_seed = slowfast::seeds::derive(args.seed, 0xBA5E);
    let eval = |sampling: &SamplingConfig, policy| {
        evaluate(&result.params, &held_out, &config.env, sampling, policy, eval_seed).map_err(failure::experiment)
    };
    let steps = (1..=4)
        .map(|k| {
            let s = SamplingConfig {
                max_steps: k,
                ..config.layout.clone()
            };
            Ok(StepEval {
                max_steps: k,
                report: eval(&s, EvalPolicy::Trained)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = EvalFile {
        variant: args.variant.name(),
        seed: args.seed,
        trained: result.final_eval.clone(),
        baselines: Baselines {
            no_zoom: eval(&config.layout, EvalPolicy::NoZoom)?,
            uniform_zoom: eval(&config.layout, EvalPolicy::UniformZoom)?,
            random_zoom: eval(&config.layout, EvalPolicy::RandomZoom)?,
        },
        steps,
    };
    fs::write(args.out.join("eval.json"), serde_json::to_string_pretty(&file)? + "\n")?;

    run.output(&args.out)?;
    eprintln!(
        "{}: accuracy {:.3}, hit rate {:.3} after {} updates",
        args.variant.name(),
        result.final_eval.accuracy,
        result.final_eval.hit_rate,
        config.train.updates
    );
    run.finish(manifest, Some(&args.out))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .input()?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: invalid record", path.display(), i + 1))
            .input()?;
        out.push(item);
    }
    Ok(out)
}

fn cots_filter(args: FilterArgs, config: SlowfastConfig, path: Option<PathBuf>, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunManifest::new("cots filter", config.clone(), path);
    run.input(&args.input)?;
    let records: Vec<CoTRecord> = read_jsonl(&args.input)?;
    let gt = match &args.gt {
        Some(p) => {
            run.input(p)?;
            GroundTruthIndex::new(read_jsonl::<GroundTruthEntry>(p)?)
        }
        None => GroundTruthIndex::default(),
    };
    for r in &records {
        r.question.validate().with_context(|| format!("record {}", r.record_id)).input()?;
    }
    let (kept, report): (Vec<CoTRecord>, FilterReport) = clean_records(records, &gt, &config.pipeline);

    let mut out = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    for r in &kept {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    drop(out);
    run.output(&args.out)?;

    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &args.report {
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
        run.output(p)?;
    }
    writeln!(std::io::stdout().lock(), "{text}")?;
    run.finish(manifest, Some(&args.out))
}
