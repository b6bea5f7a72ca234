use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use vkb_core::corpus::io::{parse_questions, write_atomic, write_kb, write_passages, write_questions, write_vocab};
use vkb_core::corpus::{generate_synthetic_corpus, preprocess_conjunction, preprocess_question, Question, SymbolicKB, TopicMode};
use vkb_core::encoder::{load_params, save_params, ModelParams};
use vkb_core::eval::{evaluate_follow, evaluate_lm, follow_examples, EvalReport};
use vkb_core::follow::answer_question;
use vkb_core::lm::{answer_lm, LmAnswerConfig};
use vkb_core::memory::{inject_pairs, load_memory, save_memory, KeyValueMemory};
use vkb_core::pipeline::{lm_examples, pretrain, FactSplit, PipelineConfig};
use vkb_core::training::{
    finetune_follow, train_entity, train_lm, LossReport, TrainConfig, TrainObserver,
};

use crate::data::{self, Dataset};
use crate::manifest::{default_path, RunManifest};
use crate::{AskMode, Cli, Command, EvalMode, MemoryCommand, TrainOverrides};

/// A well-formed command line asking for something impossible.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    let seed = cli.global.seed.unwrap_or(cfg.seed);
    Ok(cfg.reseeded(seed))
}

fn apply(train: &TrainOverrides, cfg: &mut TrainConfig) {
    if let Some(s) = train.steps {
        cfg.steps = s;
    }
    if let Some(lr) = train.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = train.batch_size {
        cfg.batch_size = b;
    }
    cfg.frozen.extend(train.freeze.iter().cloned());
}

/// Appends every step report to a JSON Lines file.
struct Metrics {
    out: Option<BufWriter<File>>,
}

impl Metrics {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self {
            out: match path {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            },
        })
    }
}

impl TrainObserver for Metrics {
    fn on_step(&mut self, report: &LossReport, _params: &ModelParams) -> vkb_core::Result<()> {
        if report.step % 50 == 0 {
            log::info!("step {} loss {:.5}", report.step, report.total);
        }
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, report)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl Drop for Metrics {
    fn drop(&mut self) {
        if let Some(out) = &mut self.out {
            let _ = out.flush();
        }
    }
}

fn read_stdin_or(path: Option<&Path>) -> Result<(String, PathBuf)> {
    match path {
        Some(p) => Ok((std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?, p.to_path_buf())),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok((s, PathBuf::from("<stdin>")))
        }
    }
}

fn print_jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn relation_ids(kb: &SymbolicKB, names: &[String]) -> Result<BTreeSet<u32>> {
    names
        .iter()
        .map(|n| {
            kb.relation_id(n)
                .ok_or_else(|| anyhow::Error::new(UsageError(format!("unknown relation '{n}' in --holdout"))))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli)?;
    let config_json = serde_json::to_value(&cfg)?;
    let name = command_name(&cli.command);
    let mut m = RunManifest::new(name, config_json, cfg.seed);
    let output = main_output(&cli.command);
    let manifest_path = cli
        .global
        .manifest
        .clone()
        .unwrap_or_else(|| default_path(output.as_deref()));
    let result = dispatch(&cli, cfg, &mut m);
    m.status = match &result {
        Ok(()) => "ok".into(),
        Err(e) => format!("error: {e:#}"),
    };
    m.write(&manifest_path)
        .with_context(|| format!("writing manifest {}", manifest_path.display()))?;
    result
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenSynth { .. } => "gen-synth",
        Command::PretrainEntity { .. } => "pretrain-entity",
        Command::PretrainRelation { .. } => "pretrain-relation",
        Command::BuildMemory { .. } => "build-memory",
        Command::PretrainLm { .. } => "pretrain-lm",
        Command::FinetuneFollow { .. } => "finetune-follow",
        Command::Query { .. } => "query",
        Command::Ask { .. } => "ask",
        Command::Eval { .. } => "eval",
        Command::Memory { action } => match action {
            MemoryCommand::Inject { .. } => "memory inject",
            MemoryCommand::Stats { .. } => "memory stats",
            MemoryCommand::Dump { .. } => "memory dump",
        },
    }
}

fn main_output(c: &Command) -> Option<PathBuf> {
    match c {
        Command::GenSynth { out } => Some(out.join("dataset")),
        Command::PretrainEntity { out, .. }
        | Command::PretrainRelation { out, .. }
        | Command::BuildMemory { out, .. }
        | Command::PretrainLm { out, .. }
        | Command::FinetuneFollow { out, .. } => Some(out.clone()),
        Command::Memory {
            action: MemoryCommand::Inject { out, .. },
        } => Some(out.clone()),
        _ => None,
    }
}

fn init_or_load(ds: &Dataset, cfg: &PipelineConfig, init: Option<&Path>, m: &mut RunManifest) -> Result<ModelParams> {
    let expected = cfg.encoder_for(ds.tokens.len(), ds.entities.len());
    match init {
        Some(p) => {
            m.input(p)?;
            Ok(load_params(p, None)?)
        }
        None => Ok(vkb_core::encoder::init_params(&expected)?),
    }
}

fn load_params_input(path: &Path, m: &mut RunManifest) -> Result<ModelParams> {
    m.input(path)?;
    load_params(path, None).with_context(|| format!("loading parameters {}", path.display()))
}

fn load_memory_input(path: &Path, m: &mut RunManifest) -> Result<KeyValueMemory> {
    m.input(path)?;
    load_memory(path).with_context(|| format!("loading memory {}", path.display()))
}

fn save_params_output(params: &ModelParams, path: &Path, m: &mut RunManifest) -> Result<()> {
    save_params(params, path)?;
    m.artifact(path)
}

fn save_memory_output(memory: &KeyValueMemory, path: &Path, m: &mut RunManifest) -> Result<()> {
    save_memory(memory, path)?;
    m.artifact(path)
}

fn dataset(dir: &Path, m: &mut RunManifest) -> Result<Dataset> {
    let ds = Dataset::open(dir)?;
    m.input(&ds.path(data::TOKENS))?;
    m.input(&ds.path(data::ENTITIES))?;
    Ok(ds)
}

fn dispatch(cli: &Cli, mut cfg: PipelineConfig, m: &mut RunManifest) -> Result<()> {
    let metrics_path = cli.global.metrics.as_deref();
    match &cli.command {
        Command::GenSynth { out } => gen_synth(&cfg, out, m),
        Command::PretrainEntity { data, out, init, train } => {
            apply(train, &mut cfg.entity);
            m.seeds.insert("entity".into(), cfg.entity.seed);
            let ds = dataset(data, m)?;
            let passages = ds.passages()?;
            m.input(&ds.path(data::PASSAGES))?;
            let mut params = init_or_load(&ds, &cfg, init.as_deref(), m)?;
            m.seeds.insert("encoder".into(), params.config.seed);
            m.begin();
            train_entity(&mut params, &passages, &cfg.entity, &mut Metrics::open(metrics_path)?)?;
            m.end("pretrain-entity");
            save_params_output(&params, out, m)
        }
        Command::PretrainRelation { data, out, init, train } => {
            apply(train, &mut cfg.relation);
            cfg.entity.steps = 0;
            m.seeds.insert("relation".into(), cfg.relation.seed);
            let ds = dataset(data, m)?;
            let passages = ds.passages()?;
            m.input(&ds.path(data::PASSAGES))?;
            let mut params = init_or_load(&ds, &cfg, init.as_deref(), m)?;
            m.seeds.insert("encoder".into(), params.config.seed);
            m.begin();
            pretrain(&mut params, &passages, &cfg, &mut Metrics::open(metrics_path)?)?;
            m.end("pretrain-relation");
            save_params_output(&params, out, m)
        }
        Command::BuildMemory { data, params, out, passages } => {
            let ds = dataset(data, m)?;
            let path = passages.clone().unwrap_or_else(|| ds.path(data::PASSAGES));
            m.input(&path)?;
            let corpus = ds.passages_at(&path)?;
            let params = load_params_input(params, m)?;
            m.seeds.insert("memory".into(), cfg.memory.seed);
            m.begin();
            let memory = cfg.memory.build(&corpus, &params)?;
            m.end("build-memory");
            log::info!("memory: {:?}", memory.stats());
            save_memory_output(&memory, out, m)
        }
        Command::PretrainLm {
            data,
            params,
            memory,
            out,
            no_mixing,
            train,
        } => {
            apply(train, &mut cfg.lm);
            if *no_mixing {
                cfg.lm_mix.mixing = false;
            }
            m.seeds.insert("lm".into(), cfg.lm.seed);
            let ds = dataset(data, m)?;
            let passages = ds.passages()?;
            m.input(&ds.path(data::PASSAGES))?;
            let mut params = load_params_input(params, m)?;
            let memory = load_memory_input(memory, m)?;
            let examples = lm_examples(&passages);
            m.begin();
            train_lm(&mut params, &memory, &examples, &cfg.lm, cfg.lm_mix, &mut Metrics::open(metrics_path)?)?;
            m.end("pretrain-lm");
            save_params_output(&params, out, m)
        }
        Command::FinetuneFollow {
            data,
            params,
            memory,
            questions,
            kb,
            out,
            memory_out,
            holdout,
            train,
        } => {
            apply(train, &mut cfg.finetune);
            m.seeds.insert("finetune".into(), cfg.finetune.seed);
            let ds = dataset(data, m)?;
            let kb_path = kb.clone().unwrap_or_else(|| ds.path(data::KB));
            m.input(&kb_path)?;
            let kb = ds.kb_at(&kb_path)?;
            let files: Vec<PathBuf> = if questions.is_empty() {
                [data::ONE_HOP_TRAIN, data::TWO_HOP_TRAIN]
                    .iter()
                    .map(|f| ds.path(f))
                    .filter(|p| p.exists())
                    .collect()
            } else {
                questions.clone()
            };
            let held = relation_ids(&kb, holdout)?;
            let mut qs = Vec::new();
            for f in &files {
                m.input(f)?;
                qs.extend(ds.questions_at(f, Some(&kb))?);
            }
            qs.retain(|q| !q.relations.iter().any(|r| held.contains(r)));
            let mut params = load_params_input(params, m)?;
            let mem = load_memory_input(memory, m)?;
            let examples = follow_examples(&kb, &qs)?;
            m.begin();
            let outcome = finetune_follow(
                &mut params,
                &mem,
                &examples,
                &cfg.finetune,
                cfg.follow,
                &mut Metrics::open(metrics_path)?,
            )?;
            m.end("finetune-follow");
            log::info!("finetuned on relations {:?}", outcome.audit);
            let rekeyed = mem.rekeyed(&params)?;
            save_params_output(&params, out, m)?;
            save_memory_output(&rekeyed, memory_out, m)
        }
        Command::Query {
            data,
            params,
            memory,
            questions,
            hops,
            topk,
        } => {
            let ds = dataset(data, m)?;
            let params = load_params_input(params, m)?;
            let memory = load_memory_input(memory, m)?;
            let (text, origin) = read_stdin_or(questions.as_deref())?;
            let qs = parse_questions(&text, &origin, &ds.tokens, &ds.entities, None)?;
            let k = topk.unwrap_or(cfg.eval.k);
            let mut rows = Vec::with_capacity(qs.len());
            for q in &qs {
                let ex = preprocess_question(&q.tokens, &q.mentions, TopicMode::Masked)?;
                let h = hops.unwrap_or(q.hops.max(1));
                let answers: Vec<(String, f64)> = match answer_question(&memory, &params, &ex, h, k) {
                    Ok(set) => set.ranked().into_iter().map(|(e, w)| (ds.entity_name(e), w)).collect(),
                    Err(vkb_core::VkbError::EmptyIntermediate(_)) => Vec::new(),
                    Err(e) => return Err(e.into()),
                };
                rows.push(json!({
                    "topic_entities": q.mentions.iter().map(|x| ds.entity_name(x.entity)).collect::<Vec<_>>(),
                    "hops": h,
                    "answers": answers,
                }));
            }
            print_jsonl(rows)
        }
        Command::Ask {
            mode: AskMode::Lm,
            data,
            params,
            memory,
            questions,
            hops,
            topk,
            conjunction,
            no_memory,
        } => {
            let ds = dataset(data, m)?;
            let params = load_params_input(params, m)?;
            let memory = load_memory_input(memory, m)?;
            let (text, origin) = read_stdin_or(questions.as_deref())?;
            let qs = parse_questions(&text, &origin, &ds.tokens, &ds.entities, None)?;
            let k = topk.unwrap_or(cfg.eval.k);
            let mut rows = Vec::with_capacity(qs.len());
            for q in &qs {
                let mentions = if *conjunction { &q.mentions[..] } else { &q.mentions[..1] };
                let ex = preprocess_conjunction(&q.tokens, mentions, TopicMode::Surface)?;
                let acfg = LmAnswerConfig {
                    k,
                    hops: hops.unwrap_or(q.hops.max(1)),
                    no_memory: *no_memory,
                };
                let (ranked, mix) = answer_lm(&memory, &params, &ex, acfg)?;
                let lambdas: Vec<f64> = mix.as_ref().map_or_else(Vec::new, |x| x.trace.iter().map(|t| t.lambda).collect());
                let null_rank = mix.as_ref().and_then(|x| x.trace.last()).map(|t| {
                    1 + t.hits.iter().filter(|h| h.2 > t.null_score).count()
                });
                rows.push(json!({
                    "answers": ranked.iter().take(k).map(|&(e, s)| (ds.entity_name(e), s)).collect::<Vec<_>>(),
                    "lambda": lambdas,
                    "null_rank": null_rank,
                }));
            }
            print_jsonl(rows)
        }
        Command::Eval {
            data,
            params,
            memory,
            questions,
            kb,
            holdout,
            mode,
            topk,
            records,
        } => {
            let ds = dataset(data, m)?;
            m.input(kb)?;
            let kb = ds.kb_at(kb)?;
            m.input(questions)?;
            let qs: Vec<Question> = ds.questions_at(questions, Some(&kb))?;
            let params = load_params_input(params, m)?;
            let memory = load_memory_input(memory, m)?;
            let held = relation_ids(&kb, holdout)?;
            if !held.is_empty() {
                vkb_core::eval::check_holdout(&kb, &held)?;
            }
            let mut ecfg = cfg.eval;
            if let Some(k) = topk {
                ecfg.k = *k;
            }
            m.begin();
            let report = match mode {
                EvalMode::Follow => evaluate_follow(&memory, &params, &kb, &qs, "eval", ecfg)?,
                EvalMode::Lm | EvalMode::LmNoMemory => evaluate_lm(
                    &memory,
                    &params,
                    &kb,
                    &qs,
                    "eval",
                    LmAnswerConfig {
                        k: ecfg.k,
                        hops: 1,
                        no_memory: *mode == EvalMode::LmNoMemory,
                    },
                )?,
            };
            m.end("eval");
            let records_path = records.clone().unwrap_or_else(|| PathBuf::from("eval-records.jsonl"));
            let mut buf = Vec::new();
            for r in &report.records {
                serde_json::to_writer(&mut buf, r)?;
                buf.push(b'\n');
            }
            write_atomic(&records_path, &buf)?;
            m.artifact(&records_path)?;
            let summary = |r: &EvalReport| {
                json!({"split": r.split, "hits_at_1": r.hits_at_1, "coverage": r.coverage, "questions": r.questions})
            };
            let mut out = summary(&report);
            if !held.is_empty() {
                let seen = report.subset("seen", |r| !r.relations.iter().any(|x| held.contains(x)));
                let novel = report.subset("novel", |r| r.relations.iter().any(|x| held.contains(x)));
                out["seen"] = summary(&seen);
                out["novel"] = summary(&novel);
            }
            println!("{}", serde_json::to_string(&out)?);
            Ok(())
        }
        Command::Memory { action } => memory_command(action, m),
    }
}

fn gen_synth(cfg: &PipelineConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    std::fs::create_dir_all(out)?;
    m.seeds.insert("synth".into(), cfg.seed);
    m.begin();
    let world = generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
    let split = FactSplit::new(world.kb.facts.len(), cfg.questions.late_fraction, cfg.seed);
    let base = FactSplit::passages(&world, &split.base);
    let late = FactSplit::passages(&world, &split.late);
    let one = world.one_hop_questions_for(&split.base, cfg.questions.test_fraction, cfg.seed);
    let late_q = world.one_hop_questions_for(&split.late, 0.0, cfg.seed).train;
    // Compositional questions only follow facts present from the start.
    let mut base_world = world.clone();
    base_world.kb.facts = split.base.iter().map(|&i| world.kb.facts[i]).collect();
    let two = base_world.two_hop_questions(cfg.questions.two_hop, cfg.questions.test_fraction, cfg.seed);
    m.end("generate");

    let files: Vec<(&str, Box<dyn Fn(&Path) -> vkb_core::Result<()>>)> = vec![
        (data::TOKENS, Box::new(|p| write_vocab(p, &world.tokens))),
        (data::ENTITIES, Box::new(|p| write_vocab(p, &world.entities))),
        (data::PASSAGES, Box::new(|p| write_passages(p, &base, &world.tokens, &world.entities))),
        (data::LATE_PASSAGES, Box::new(|p| write_passages(p, &late, &world.tokens, &world.entities))),
        (data::KB, Box::new(|p| write_kb(p, &world.kb, &world.entities))),
        (data::ONE_HOP_TRAIN, Box::new(|p| write_questions(p, &one.train, &world.tokens, &world.entities, Some(&world.kb)))),
        (data::ONE_HOP_TEST, Box::new(|p| write_questions(p, &one.test, &world.tokens, &world.entities, Some(&world.kb)))),
        (data::TWO_HOP_TRAIN, Box::new(|p| write_questions(p, &two.train, &world.tokens, &world.entities, Some(&world.kb)))),
        (data::TWO_HOP_TEST, Box::new(|p| write_questions(p, &two.test, &world.tokens, &world.entities, Some(&world.kb)))),
        (data::LATE_QUESTIONS, Box::new(|p| write_questions(p, &late_q, &world.tokens, &world.entities, Some(&world.kb)))),
    ];
    for (name, write) in &files {
        let path = out.join(name);
        write(&path)?;
        m.artifact(&path)?;
    }
    let summary = json!({
        "passages": base.len(),
        "late_passages": late.len(),
        "facts": world.kb.facts.len(),
        "one_hop_train": one.train.len(),
        "one_hop_test": one.test.len(),
        "two_hop_train": two.train.len(),
        "two_hop_test": two.test.len(),
        "late_questions": late_q.len(),
        "artifacts": m.artifacts,
    });
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    index: usize,
    topic: String,
    target: String,
    mention_count: u32,
    provenance: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    key: Option<&'a [f64]>,
}

fn memory_command(action: &MemoryCommand, m: &mut RunManifest) -> Result<()> {
    match action {
        MemoryCommand::Inject {
            data,
            params,
            memory,
            passages,
            out,
        } => {
            let ds = dataset(data, m)?;
            let params = load_params_input(params, m)?;
            let mem = load_memory_input(memory, m)?;
            m.input(passages)?;
            let corpus = ds.passages_at(passages)?;
            let pairs = vkb_core::corpus::extract_entity_pairs(&corpus, 1, usize::MAX);
            m.begin();
            let grown = inject_pairs(&mem, &corpus, &pairs, &params)?;
            m.end("inject");
            println!(
                "{}",
                serde_json::to_string(&json!({"before": mem.stats(), "after": grown.stats()}))?
            );
            save_memory_output(&grown, out, m)
        }
        MemoryCommand::Stats { memory } => {
            let mem = load_memory_input(memory, m)?;
            println!("{}", serde_json::to_string(&mem.stats())?);
            Ok(())
        }
        MemoryCommand::Dump { memory, data, keys } => {
            let mem = load_memory_input(memory, m)?;
            let ds = match data {
                Some(d) => Some(dataset(d, m)?),
                None => None,
            };
            let name = |e: u32| ds.as_ref().map_or_else(|| e.to_string(), |d| d.entity_name(e));
            print_jsonl(mem.entries().iter().enumerate().map(|(i, e)| DumpRecord {
                index: i,
                topic: name(e.pair.topic),
                target: name(e.pair.target),
                mention_count: e.mention_count,
                provenance: &e.provenance,
                key: keys.then_some(e.key.as_slice()),
            }))
        }
    }
}
