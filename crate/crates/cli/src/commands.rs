use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use gatedrag::analysis::{compare_conditions, embeddings_from_episodes, embeddings_from_samples, ComparisonReport};
use gatedrag::eval::{evaluate, load_dataset};
use gatedrag::io::{read_jsonl, write_json, write_jsonl};
use gatedrag::llm::{HttpBackend, LlmBackend, RetryPolicy, ScriptedMock};
use gatedrag::pipeline::{BatchSummary, Pipeline, PipelineConfig};
use gatedrag::prober::{generate_prober_data, load_samples, save_samples, train_ensemble, Condition};
use gatedrag::prompts::FewShotSet;
use gatedrag::retriever::load_corpus;
use gatedrag::seed::derive_seed;
use gatedrag::{Bm25Index, Bm25Params, EmbeddingSet, EpisodeLog, ProberEnsemble, TrainParams};

use crate::config::{existing, output, write_text, BackendConfig, CliConfig};
use crate::{
    AnalyzeArgs, BackendArgs, Cli, Command, EvalArgs, IndexArgs, InputContext, InputError, InputKind, PipelineArgs,
    ProbeDataArgs, RunArgs, SampleCondition, TrainProberArgs,
};

struct Ctx {
    cfg: CliConfig,
    root_seed: u64,
}

impl Ctx {
    fn seed(&self, component: &str) -> u64 {
        derive_seed(self.root_seed, component)
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let root_seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let ctx = Ctx { cfg, root_seed };
    match cli.command {
        Command::Index(a) => index(&ctx, a),
        Command::ProbeData(a) => probe_data(&ctx, a),
        Command::TrainProber(a) => train_prober(&ctx, a),
        Command::Run(a) => run(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
    }
}

fn index(ctx: &Ctx, a: IndexArgs) -> anyhow::Result<()> {
    let corpus_path = existing(a.corpus, &ctx.cfg.paths.corpus, "corpus")?;
    let out = output(a.out, &ctx.cfg.paths.index, "index")?;
    let defaults = Bm25Params::default();
    let params = Bm25Params {
        k1: a.k1.or(ctx.cfg.bm25.k1).unwrap_or(defaults.k1),
        b: a.b.or(ctx.cfg.bm25.b).unwrap_or(defaults.b),
    };
    let corpus = load_corpus(&corpus_path).input()?;
    let index = Bm25Index::build(corpus, params).input()?;
    index.save(&out)?;
    println!("documents: {}", index.doc_count());
    println!("avg_doc_length: {:.4}", index.avg_doc_length());
    println!("vocabulary: {}", index.vocabulary_size());
    println!("wrote {}", out.display());
    Ok(())
}

fn backend(ctx: &Ctx, a: BackendArgs) -> anyhow::Result<Box<dyn LlmBackend>> {
    // Flags replace the configured backend as a whole.
    let from_flags = a.replay.is_some() || a.backend_url.is_some();
    let cfg = &ctx.cfg.backend;
    let (replay, url) = if from_flags {
        (a.replay, a.backend_url)
    } else {
        (cfg.replay.clone(), cfg.url.clone())
    };
    match (replay, url) {
        (Some(_), Some(_)) => Err(InputError::new("configure exactly one backend: replay script or URL").into()),
        (None, None) => Err(InputError::new("no backend configured; pass --replay or --backend-url").into()),
        (Some(script), None) => {
            if !script.exists() {
                bail!(InputError::new(format!("replay script not found: {}", script.display())));
            }
            Ok(Box::new(ScriptedMock::load(&script).input()?))
        }
        (None, Some(url)) => Ok(Box::new(http_backend(url, cfg))),
    }
}

fn http_backend(url: String, cfg: &BackendConfig) -> HttpBackend {
    let retry = RetryPolicy {
        max_attempts: cfg.max_attempts.unwrap_or(RetryPolicy::default().max_attempts),
        ..RetryPolicy::default()
    };
    HttpBackend::new(url, retry, Duration::from_secs(cfg.timeout_secs.unwrap_or(120)))
}

fn few_shot(ctx: &Ctx, flag: Option<PathBuf>) -> anyhow::Result<FewShotSet> {
    match flag.or_else(|| ctx.cfg.paths.few_shot.clone()) {
        None => Ok(FewShotSet::builtin()),
        Some(path) => FewShotSet::load(&path).input(),
    }
}

fn load_index(path: &Path) -> anyhow::Result<Bm25Index> {
    Bm25Index::load(path).input()
}

fn probe_data(ctx: &Ctx, a: ProbeDataArgs) -> anyhow::Result<()> {
    let dataset = existing(a.dataset, &ctx.cfg.paths.dataset, "dataset")?;
    let index_path = existing(a.index, &ctx.cfg.paths.index, "index")?;
    let out = output(a.out, &ctx.cfg.paths.samples, "samples")?;
    let examples = load_dataset(&dataset, a.limit).input()?;
    let index = load_index(&index_path)?;
    let llm = backend(ctx, a.backend)?;
    let shots = few_shot(ctx, a.few_shot)?;
    let p = &ctx.cfg.pipeline;
    let k = a.top_k.unwrap_or(p.top_k);
    let seed = ctx.seed("probe-data");
    let (samples, skipped) = generate_prober_data(
        &examples,
        &index,
        llm.as_ref(),
        k,
        shots.take(a.few_shot_k.unwrap_or(p.few_shot_k)),
        a.max_new_tokens.unwrap_or(p.max_new_tokens),
        seed,
    );
    for s in &skipped {
        eprintln!("skipped: {s}");
    }
    if samples.is_empty() {
        bail!("no samples generated ({} skipped)", skipped.len());
    }
    save_samples(&out, &samples)?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    println!("seed: root={} probe-data={seed}", ctx.root_seed);
    println!("samples: {} ({positives} correct, {} incorrect)", samples.len(), samples.len() - positives);
    println!("skipped: {}", skipped.len());
    println!("wrote {}", out.display());
    Ok(())
}

fn train_prober(ctx: &Ctx, a: TrainProberArgs) -> anyhow::Result<()> {
    let samples_path = existing(a.samples, &ctx.cfg.paths.samples, "samples")?;
    let out = output(a.out, &ctx.cfg.paths.ensemble, "ensemble")?;
    let c = &ctx.cfg.prober;
    let d = TrainParams::default();
    let params = TrainParams {
        hidden_width: a.hidden_width.or(c.hidden_width).unwrap_or(d.hidden_width),
        learning_rate: a.learning_rate.or(c.learning_rate).unwrap_or(d.learning_rate),
        momentum: a.momentum.or(c.momentum).unwrap_or(d.momentum),
        batch_size: a.batch_size.or(c.batch_size).unwrap_or(d.batch_size),
        max_epochs: a.max_epochs.or(c.max_epochs).unwrap_or(d.max_epochs),
        patience: a.patience.or(c.patience).unwrap_or(d.patience),
        holdout_fraction: a.holdout_fraction.or(c.holdout_fraction).unwrap_or(d.holdout_fraction),
        balance_classes: if a.no_balance { false } else { c.balance_classes.unwrap_or(d.balance_classes) },
        seed: ctx.seed("prober"),
    };
    let threshold = a.threshold.or(c.threshold).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        bail!(InputError::new(format!("threshold {threshold} outside [0, 1]")));
    }
    let samples = load_samples(&samples_path).input()?;
    let (ensemble, reports) = train_ensemble(&samples, &params, threshold)?;
    ensemble.save(&out)?;
    if let Some(path) = &a.report {
        write_json(path, &reports)?;
    }
    println!("seed: root={} prober={}", ctx.root_seed, params.seed);
    println!("layers: {} of {}", reports.len(), ensemble.layer_count);
    for r in &reports {
        println!(
            "layer {:>3}: epochs {:>3}  holdout loss {:.4}  holdout accuracy {:.4}",
            r.layer_index, r.epochs_run, r.best_holdout_loss, r.holdout_accuracy
        );
    }
    let mean = reports.iter().map(|r| r.holdout_accuracy).sum::<f64>() / reports.len() as f64;
    println!("mean holdout accuracy: {mean:.4}");
    println!("wrote {}", out.display());
    Ok(())
}

fn apply_pipeline_flags(mut p: PipelineConfig, a: &PipelineArgs) -> PipelineConfig {
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { p.$f = v; } )* };
    }
    set!(max_skill_rounds, top_k, evidence_cap, few_shot_k, max_new_tokens, router_max_new_tokens);
    if a.threshold.is_some() {
        p.threshold = a.threshold;
    }
    p
}

fn run(ctx: &Ctx, a: RunArgs) -> anyhow::Result<()> {
    let dataset = existing(a.dataset, &ctx.cfg.paths.dataset, "dataset")?;
    let index_path = existing(a.index, &ctx.cfg.paths.index, "index")?;
    let ensemble_path = existing(a.ensemble, &ctx.cfg.paths.ensemble, "ensemble")?;
    let out = output(a.out, &ctx.cfg.paths.logs, "logs")?;
    if a.parallel == 0 {
        bail!(InputError::new("--parallel must be at least 1"));
    }
    let mut config = apply_pipeline_flags(ctx.cfg.pipeline.clone(), &a.pipeline);
    config.seed = ctx.seed("pipeline");

    let examples = load_dataset(&dataset, a.limit).input()?;
    let index = load_index(&index_path)?;
    let ensemble = ProberEnsemble::load(&ensemble_path).input()?;
    let llm = backend(ctx, a.backend)?;
    let router = a.router_url.map(|url| http_backend(url, &ctx.cfg.backend));
    let shots = few_shot(ctx, a.few_shot)?;

    let mut pipeline = Pipeline::new(&index, llm.as_ref(), &ensemble, shots, config).input()?;
    if let Some(r) = &router {
        pipeline = pipeline.with_router_backend(r);
    }
    pipeline.check_backend().context("backend does not match the ensemble")?;
    let (logs, summary) = pipeline.run_batch(&examples, a.parallel)?;

    let persisted: Vec<EpisodeLog> = logs.iter().map(|l| l.for_persistence(!a.no_vectors)).collect();
    write_jsonl(&out, &persisted)?;
    if let Some(path) = &a.summary {
        let doc = serde_json::json!({
            "root_seed": ctx.root_seed,
            "pipeline_seed": pipeline.config().seed,
            "config": pipeline.config(),
            "summary": summary,
        });
        write_json(path, &doc)?;
    }
    print_summary(ctx, &pipeline, &summary);
    for l in logs.iter().filter(|l| l.error.is_some()) {
        eprintln!("episode {}: {}", l.example_id, l.error.as_deref().unwrap_or_default());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn print_summary(ctx: &Ctx, pipeline: &Pipeline<'_, f64>, s: &BatchSummary) {
    println!("seed: root={} pipeline={}", ctx.root_seed, pipeline.config().seed);
    println!("threshold: {}", pipeline.threshold());
    println!("episodes: {}", s.episodes);
    for (reason, n) in &s.terminations {
        println!("  {reason}: {n}");
    }
    println!("errors: {}", s.errors);
    println!(
        "mean rounds {:.3}  mean llm calls {:.3}  mean retrievals {:.3}",
        s.mean_rounds, s.mean_llm_calls, s.mean_retrievals
    );
}

fn read_logs(path: &Path) -> anyhow::Result<Vec<EpisodeLog>> {
    Ok(read_jsonl::<EpisodeLog>(path).input()?.into_iter().map(|(_, l)| l).collect())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> anyhow::Result<()> {
    let dataset = existing(a.dataset, &ctx.cfg.paths.dataset, "dataset")?;
    let logs_path = existing(a.logs, &ctx.cfg.paths.logs, "logs")?;
    let examples = load_dataset(&dataset, None).input()?;
    let logs = read_logs(&logs_path)?;
    // Scoring a prefix run: keep only the examples that have logs.
    let ids: std::collections::HashSet<&str> = logs.iter().map(|l| l.example_id.as_str()).collect();
    let examples: Vec<_> = examples.into_iter().filter(|e| ids.contains(e.id.as_str())).collect();
    let name = a
        .name
        .unwrap_or_else(|| dataset.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()));
    let report = evaluate(&name, &logs, &examples).input()?;
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    println!("dataset: {}", report.dataset_name);
    println!("n: {}", report.n);
    println!("EM {:.4}", report.em);
    println!("ACC {:.4}", report.acc);
    Ok(())
}

fn analyze(ctx: &Ctx, a: AnalyzeArgs) -> anyhow::Result<()> {
    let k = a.k.or(ctx.cfg.analysis.k).unwrap_or(2);
    let after_round = a.after_round.or(ctx.cfg.analysis.after_round).unwrap_or(1);
    let mut pairs = Vec::with_capacity(a.conditions.len());
    for spec in &a.conditions {
        let (label, path) = spec
            .split_once('=')
            .filter(|(l, p)| !l.is_empty() && !p.is_empty())
            .ok_or_else(|| InputError::new(format!("condition `{spec}` is not LABEL=PATH")))?;
        let path = PathBuf::from(path);
        if !path.exists() {
            bail!(InputError::new(format!("condition {label}: {} not found", path.display())));
        }
        pairs.push((label.to_owned(), path));
    }
    let sets: Vec<EmbeddingSet> = match a.kind {
        InputKind::Episodes => {
            let dataset = existing(a.dataset, &ctx.cfg.paths.dataset, "dataset")?;
            let examples = load_dataset(&dataset, None).input()?;
            pairs
                .iter()
                .map(|(label, path)| {
                    let logs = read_logs(path)?;
                    embeddings_from_episodes(label, &logs, &examples, after_round).input()
                })
                .collect::<anyhow::Result<_>>()?
        }
        InputKind::Samples => {
            let condition = a.sample_condition.map(|c| match c {
                SampleCondition::NoRetrieval => Condition::NoRetrieval,
                SampleCondition::SingleStepRetrieval => Condition::SingleStepRetrieval,
            });
            pairs
                .iter()
                .map(|(label, path)| {
                    let samples = load_samples(path).input()?;
                    embeddings_from_samples(label, &samples, condition, a.sample_label, a.layer).input()
                })
                .collect::<anyhow::Result<_>>()?
        }
    };
    let seed = ctx.seed("analysis");
    let report = compare_conditions(&sets, k, seed)?;
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
    }
    if let Some(dir) = &a.coords_dir {
        for c in &report.conditions {
            write_text(&dir.join(format!("{}.csv", file_safe(&c.condition))), &ComparisonReport::coords_csv(c))?;
        }
    }
    println!("seed: root={} analysis={seed}", ctx.root_seed);
    println!("{:<16} {:>6} {:>11} {:>10} {:>10}", "condition", "n", "silhouette", "cluster0", "distance");
    for c in &report.conditions {
        println!(
            "{:<16} {:>6} {:>11.4} {:>10.4} {:>10.4}",
            c.condition, c.n, c.silhouette, c.cluster_fractions[0], c.centroid_distance
        );
    }
    for d in &report.deltas {
        println!(
            "{} -> {}: silhouette {:+.4}  cluster0 {:+.4}  distance {:+.4}",
            d.from, d.to, d.silhouette, d.cluster0_fraction, d.centroid_distance
        );
    }
    Ok(())
}

fn file_safe(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
