use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use drad_core::eval::{
    evaluate_detection, evaluate_policy, load_labeled_passages, load_qa_dataset, AnswerMode, DetectionRow,
    DetectorSpec, EvalSetup, MetricReport,
};
use drad_core::gateway::{ApiStyle, LlmGateway, MockGateway, OpenAiGateway, RemoteConfig};
use drad_core::retrieval::{build_index, load_corpus, segment_corpus, IndexHandle};
use drad_core::rhd::{detect, DetectionReportLine};
use drad_core::sek::{run_policy, PolicyKind, PolicyName, RunOptions};
use drad_core::trace::parse_trace_line;
use serde::Serialize;

use crate::config::{AppConfig, Backend};
use crate::{AnswerModeArg, Cli, Command, CompareArgs, DetectArgs, EvaluateArgs, Failure, GenerateArgs, IndexArgs, RunFlags, Task};

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_exists(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

struct Ctx {
    cfg: AppConfig,
    seed: u64,
    json: bool,
}

pub fn execute(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(path) => {
            require_exists(path, "config")?;
            AppConfig::load(path).map_err(|e| usage(format!("{e:#}")))?
        }
        None => AppConfig::default(),
    };
    let level = match (cli.log_level, &cfg.log_level) {
        (Some(l), _) => l,
        (None, Some(s)) => s.parse().map_err(|_| usage(format!("invalid log_level {s:?}")))?,
        (None, None) => log::LevelFilter::Warn,
    };
    let _ = env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).try_init();
    for path in cfg.referenced_inputs() {
        require_exists(path, "config path")?;
    }
    let ctx = Ctx {
        cfg,
        seed: cli.seed,
        json: cli.json,
    };
    match cli.command {
        Command::Index(a) => index(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Detect(a) => detect_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::ComparePolicies(a) => compare(&ctx, a),
    }
}

fn emit(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).context("writing to stdout")?;
    out.flush().context("writing to stdout")?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T, pretty: bool) -> Result<String, Failure> {
    let s = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    };
    Ok(s.context("serializing output")? + "\n")
}

fn index(_ctx: &Ctx, a: IndexArgs) -> Outcome {
    require_exists(&a.corpus, "corpus")?;
    let docs = load_corpus(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let handle = build_index(segment_corpus(docs.iter()), &a.out)
        .with_context(|| format!("building index at {}", a.out.display()))?;
    let passages = handle.doc_count().context("reading index")?;
    #[derive(Serialize)]
    struct Summary<'a> {
        documents: usize,
        passages: usize,
        index: &'a Path,
    }
    let summary = Summary {
        documents: docs.len(),
        passages,
        index: &a.out,
    };
    if _ctx.json {
        emit(&to_json(&summary, false)?)
    } else {
        emit(&format!(
            "indexed {} documents into {} passages at {}\n",
            summary.documents,
            summary.passages,
            a.out.display()
        ))
    }
}

/// Builds the policy from the config and then the flags.
fn policy_kind(cfg: &AppConfig, name: PolicyName, flags: &RunFlags) -> Result<PolicyKind, Failure> {
    let mut p = PolicyKind {
        kind: name,
        tpr_threshold: cfg.policy.tpr_threshold,
        detection: cfg.detection,
        m: cfg.policy.m,
        k: cfg.policy.k,
        window: cfg.policy.window,
    };
    if let Some(t) = flags.theta1 {
        p.detection.theta1 = t;
    }
    if let Some(m) = flags.m {
        p.m = m;
    }
    if let Some(k) = flags.k {
        p.k = k;
    }
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

fn open_index(cfg: &AppConfig, flags: &RunFlags, needed_by: &[PolicyName]) -> Result<Option<IndexHandle>, Failure> {
    let path = flags.index.as_ref().or(cfg.index.as_ref());
    let needy = needed_by.iter().find(|p| p.uses_retrieval());
    match (path, needy) {
        (None, Some(p)) => Err(usage(format!("--index is required for policy {p}"))),
        (None, None) => Ok(None),
        (Some(path), _) => {
            require_exists(path, "index")?;
            let handle = IndexHandle::open(path).with_context(|| format!("opening index {}", path.display()))?;
            Ok(Some(handle))
        }
    }
}

fn gateway(ctx: &Ctx, flags: &RunFlags) -> Result<Box<dyn LlmGateway>, Failure> {
    let g = &ctx.cfg.gateway;
    let style = match g.backend {
        Backend::Mock => {
            let script: PathBuf = flags
                .mock_script
                .clone()
                .or_else(|| g.mock_script.clone())
                .ok_or_else(|| usage("the mock backend needs --mock-script or gateway.mock_script"))?;
            require_exists(&script, "mock script")?;
            let mock = MockGateway::load(&script).with_context(|| format!("loading mock script {}", script.display()))?;
            return Ok(Box::new(mock));
        }
        Backend::OpenaiChat => ApiStyle::Chat,
        Backend::OpenaiCompletions => ApiStyle::Completions,
    };
    let mut remote = RemoteConfig {
        model: g.model.clone(),
        style,
        max_retries: g.max_retries,
        timeout_secs: g.timeout_secs,
        serialize_requests: g.serialize_requests,
        transcript: g.transcript.clone(),
        ..RemoteConfig::default()
    };
    if let Some(endpoint) = &g.endpoint {
        remote.endpoint = endpoint.clone();
    }
    let gateway = OpenAiGateway::new(remote).map_err(|e| Failure::Runtime(anyhow!(e)))?;
    Ok(Box::new(gateway))
}

fn run_options(ctx: &Ctx) -> Result<RunOptions, Failure> {
    let cfg = &ctx.cfg;
    let defaults = RunOptions::default();
    Ok(RunOptions {
        template: cfg.template()?,
        extractor: cfg.extractor()?,
        stop_sequences: cfg.prompt.stop_sequences.clone().unwrap_or(defaults.stop_sequences),
        top_logprobs: cfg.gateway.top_logprobs,
        temperature: cfg.gateway.temperature,
        seed: Some(ctx.seed),
    })
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Outcome {
    let policy = policy_kind(&ctx.cfg, a.policy, &a.run)?;
    let index = open_index(&ctx.cfg, &a.run, &[a.policy])?;
    let llm = gateway(ctx, &a.run)?;
    let options = run_options(ctx)?;
    let budget = a.run.budget.unwrap_or(ctx.cfg.policy.budget);
    let run = run_policy(&a.question, &policy, llm.as_ref(), index.as_ref(), budget, &options)
        .map_err(|e| Failure::Runtime(anyhow!(e)))?;
    emit(&to_json(&run, !ctx.json)?)
}

fn detect_cmd(ctx: &Ctx, a: DetectArgs) -> Outcome {
    require_exists(&a.trace, "trace file")?;
    let mut config = ctx.cfg.detection;
    if let Some(t) = a.theta1 {
        config.theta1 = t;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let extractor = ctx.cfg.extractor()?;
    let file = fs::File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;

    #[derive(Serialize)]
    struct Line {
        trace: usize,
        #[serde(flatten)]
        verdict: DetectionReportLine,
    }
    let mut out = String::new();
    let mut n = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", a.trace.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = parse_trace_line(&line).with_context(|| format!("{}:{}", a.trace.display(), lineno + 1))?;
        for span in extractor.recognize(&trace) {
            let verdict = detect(&trace, &span, &config).with_context(|| format!("{}:{}", a.trace.display(), lineno + 1))?;
            out.push_str(&to_json(
                &Line {
                    trace: n,
                    verdict: DetectionReportLine::new(&verdict, &config),
                },
                false,
            )?);
        }
        n += 1;
    }
    emit(&out)
}

fn dataset_path(ctx: &Ctx, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let path = flag
        .or_else(|| ctx.cfg.dataset.clone())
        .ok_or_else(|| usage("--dataset is required (or set `dataset` in the config)"))?;
    require_exists(&path, "dataset")?;
    Ok(path)
}

fn write_report(path: Option<&PathBuf>, json: &str) -> Outcome {
    if let Some(path) = path {
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn answer_mode(ctx: &Ctx, flag: Option<AnswerModeArg>) -> AnswerMode {
    match flag {
        Some(AnswerModeArg::Pattern) => AnswerMode::Pattern,
        Some(AnswerModeArg::Boolean) => AnswerMode::Boolean,
        None => ctx.cfg.prompt.answer_mode,
    }
}

fn detection_table(rows: &[DetectionRow]) -> String {
    let width = rows.iter().map(|r| r.detector.len()).max().unwrap_or(0).max("detector".len());
    let mut s = format!("{:<width$}  {:>6}\n", "detector", "auc");
    for r in rows {
        s.push_str(&format!("{:<width$}  {:>6.4}\n", r.detector, r.auc));
    }
    s
}

fn qa_table(reports: &[MetricReport]) -> String {
    let mut s = format!(
        "{:<6} {:>9} {:>6} {:>7} {:>7} {:>8} {:>6}\n",
        "policy", "completed", "failed", "em", "f1", "accuracy", "#num"
    );
    for r in reports {
        let a = &r.aggregates;
        s.push_str(&format!(
            "{:<6} {:>9} {:>6} {:>7.4} {:>7.4} {:>8.4} {:>6.2}\n",
            r.policy.as_str(),
            r.completed,
            r.failed,
            a.em,
            a.f1,
            a.accuracy,
            a.mean_retrievals
        ));
    }
    s
}

fn run_qa(
    ctx: &Ctx,
    dataset: &Path,
    policies: &[PolicyName],
    flags: &RunFlags,
    mode: AnswerMode,
    concurrency: usize,
) -> Result<Vec<MetricReport>, Failure> {
    if concurrency == 0 {
        return Err(usage("--concurrency must be at least 1"));
    }
    let kinds = policies
        .iter()
        .map(|&p| policy_kind(&ctx.cfg, p, flags))
        .collect::<Result<Vec<_>, _>>()?;
    let index = open_index(&ctx.cfg, flags, policies)?;
    let llm = gateway(ctx, flags)?;
    let options = run_options(ctx)?;
    let examples = load_qa_dataset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let setup = EvalSetup {
        llm: llm.as_ref(),
        index: index.as_ref(),
        budget: flags.budget.unwrap_or(ctx.cfg.policy.budget),
        options: &options,
        answer_mode: mode,
        marker: ctx.cfg.marker(),
        concurrency,
    };
    Ok(kinds
        .iter()
        .map(|k| {
            log::info!("evaluating {} on {} examples", k.kind, examples.len());
            evaluate_policy(&examples, k, &setup)
        })
        .collect())
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Outcome {
    let dataset = dataset_path(ctx, a.dataset)?;
    let output = a.output.as_ref().or(ctx.cfg.output.as_ref());
    match a.task {
        Task::Detection => {
            ctx.cfg.detection.validate().map_err(|e| usage(e.to_string()))?;
            let passages =
                load_labeled_passages(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
            let extractor = ctx.cfg.extractor()?;
            let rows = evaluate_detection(&passages, &DetectorSpec::standard_set(), &extractor, &ctx.cfg.detection)
                .context("scoring detectors")?;
            let json = to_json(&rows, false)?;
            write_report(output, &json)?;
            emit(&if ctx.json { json } else { detection_table(&rows) })
        }
        Task::Qa => {
            let mode = answer_mode(ctx, a.answer_mode);
            let reports = run_qa(ctx, &dataset, &[a.policy], &a.run, mode, a.concurrency)?;
            let json = to_json(&reports[0], false)?;
            write_report(output, &json)?;
            emit(&if ctx.json { json } else { qa_table(&reports) })
        }
    }
}

fn compare(ctx: &Ctx, a: CompareArgs) -> Outcome {
    if a.policies.is_empty() {
        return Err(usage("--policies must name at least one policy"));
    }
    let dataset = dataset_path(ctx, a.dataset)?;
    let mode = answer_mode(ctx, a.answer_mode);
    let reports = run_qa(ctx, &dataset, &a.policies, &a.run, mode, a.concurrency)?;
    let json = to_json(&reports, false)?;
    write_report(a.output.as_ref().or(ctx.cfg.output.as_ref()), &json)?;
    emit(&if ctx.json { json } else { qa_table(&reports) })
}
