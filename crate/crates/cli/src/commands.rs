use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use pods::config::{RunConfig, Task};
use pods::data::{dialogue_vocab, mrc_vocab, read_dialogues, read_mrc, write_jsonl};
use pods::encoding::Vocabulary;
use pods::knowledge::{ingest_file, RelationMap};
use pods::matching::pivot_distribution;
use pods::metrics::MetricReport;
use pods::mrc::Ablation;
use pods::pivot::{SelectionConfig, Strategy};
use pods::synth::{gen_mrc_splits, gen_response_corpus, triples_to_tsv, MrcSpec, ResponseSpec};

use crate::args::{Cli, Command, Common};
use crate::pipeline::{fit, load_model, prepare, Data, FitOutput, Model, Prepared, Split};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(common: &Common, text: &str) -> Result<(), CliError> {
    match &common.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Applies the shared flags on top of `cfg`; flags win over the file.
pub fn apply_flags(cfg: &mut RunConfig, common: &Common) -> Result<(), CliError> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = &common.task {
        cfg.task = t.parse()?;
    }
    if let Some(s) = &common.strategy {
        cfg.selection.strategy = s.parse()?;
    }
    if let Some(m) = common.m {
        cfg.selection.m = m;
    }
    if let Some(p) = common.top_p {
        cfg.retrieval.top_p = p;
        cfg.retrieval.qa_top_p = p;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

/// Default config, then `--config`, then flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => {
            return Err(CliError::Validation(format!("config {} does not exist", p.display())));
        }
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_flags(&mut cfg, common)?;
    Ok(cfg)
}

/// Settings under which the model learns the synthetic corpora of
/// `gen-data` on one CPU core.
pub fn toy_config(task: Task) -> RunConfig {
    let mut cfg = RunConfig {
        task,
        ..RunConfig::default()
    };
    cfg.encoder.layers = 1;
    cfg.encoder.d_model = 32;
    cfg.encoder.heads = 4;
    cfg.encoder.ff_dim = 64;
    cfg.encoder.max_len = 128;
    cfg.optim.lr = 3e-3;
    cfg.batch_size = 8;
    cfg.epochs = 5;
    cfg.selection.strategy = Strategy::Cosine;
    match task {
        Task::ResponseSelection => cfg.selection.m = 3,
        Task::Mrc => cfg.selection.m = 2,
    }
    cfg
}

fn gen_data(common: &Common, train: Option<usize>, dev: Option<usize>, test: Option<usize>) -> Result<(), CliError> {
    let base = resolve_config(common)?;
    let dir = common
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("gen-data needs --out DIR".into()))?;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut cfg = toy_config(base.task);
    cfg.seed = base.seed;
    cfg.selection_seed = base.selection_seed;
    let file = |name: &str| dir.join(name);
    match base.task {
        Task::ResponseSelection => {
            let mut spec = ResponseSpec::default();
            spec.seed = common.seed.unwrap_or(spec.seed);
            spec.train = train.unwrap_or(spec.train);
            spec.dev = dev.unwrap_or(spec.dev);
            spec.test = test.unwrap_or(spec.test);
            let corpus = gen_response_corpus(&spec)?;
            write_jsonl(&file("train.jsonl"), &corpus.train)?;
            write_jsonl(&file("dev.jsonl"), &corpus.dev)?;
            write_jsonl(&file("test.jsonl"), &corpus.test)?;
            let mut ids: Vec<_> = corpus.pivots.iter().collect();
            ids.sort();
            let pivots: String = ids
                .iter()
                .map(|(id, p)| {
                    let p: Vec<String> = p.iter().map(usize::to_string).collect();
                    format!("{id}\t{}\n", p.join(","))
                })
                .collect();
            write_file(&file("pivots.tsv"), &pivots)?;
        }
        Task::Mrc => {
            let mut spec = MrcSpec::default();
            spec.seed = common.seed.unwrap_or(spec.seed);
            spec.train = train.unwrap_or(spec.train);
            spec.dev = dev.unwrap_or(spec.dev);
            spec.test = test.unwrap_or(spec.test);
            let (world, [tr, dv, ts]) = gen_mrc_splits(&spec)?;
            write_jsonl(&file("train.jsonl"), &tr)?;
            write_jsonl(&file("dev.jsonl"), &dv)?;
            write_jsonl(&file("test.jsonl"), &ts)?;
            write_file(&file("triples.tsv"), &triples_to_tsv(&world.triples))?;
            cfg.triples = Some("triples.tsv".into());
        }
    }
    cfg.train = Some("train.jsonl".into());
    cfg.dev = Some("dev.jsonl".into());
    cfg.test = Some("test.jsonl".into());
    cfg.checkpoint = Some("model.ckpt".into());
    write_file(&file("pods.conf"), &cfg.to_text())?;
    println!("wrote {} data and pods.conf to {}", base.task, dir.display());
    Ok(())
}

fn build_kg(common: &Common, triples: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let path = triples
        .or(cfg.triples.clone())
        .ok_or_else(|| CliError::Validation("build-kg needs --triples or a `triples` config key".into()))?;
    if !path.exists() {
        return Err(CliError::Validation(format!("{} does not exist", path.display())));
    }
    cfg.check_inputs()?;
    let relations = RelationMap::default();
    // Without data the vocabulary is the knowledge itself, so only weight
    // and format filters apply.
    let vocab = match cfg.task {
        Task::ResponseSelection if cfg.train.is_some() || cfg.dev.is_some() || cfg.test.is_some() => {
            let sets: Vec<_> = [&cfg.train, &cfg.dev, &cfg.test]
                .into_iter()
                .flatten()
                .map(|p| read_dialogues(p))
                .collect::<pods::Result<_>>()?;
            let refs: Vec<&[_]> = sets.iter().map(Vec::as_slice).collect();
            dialogue_vocab(&refs)
        }
        Task::Mrc if cfg.train.is_some() || cfg.dev.is_some() || cfg.test.is_some() => {
            let sets: Vec<_> = [&cfg.train, &cfg.dev, &cfg.test]
                .into_iter()
                .flatten()
                .map(|p| read_mrc(p))
                .collect::<pods::Result<_>>()?;
            let refs: Vec<&[_]> = sets.iter().map(Vec::as_slice).collect();
            mrc_vocab(&refs, &relations.surfaces())
        }
        _ => {
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let words: Vec<&str> = text
                .lines()
                .flat_map(|l| l.split('\t').take(3))
                .chain(relations.surfaces())
                .collect();
            Vocabulary::build(words)
        }
    };
    let ing = ingest_file(&path, &vocab, &relations, &cfg.retrieval)?;
    for e in &ing.malformed {
        eprintln!("warning: skipped {e}");
    }
    let mut out = String::from("# relation\thead\ttail\tweight\n");
    for f in ing.store.facts() {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", f.relation, f.head, f.tail, f.weight));
    }
    eprintln!(
        "kept {} facts; {} below threshold, {} out of vocabulary, {} malformed",
        ing.store.len(),
        ing.below_threshold,
        ing.out_of_vocabulary,
        ing.malformed.len()
    );
    emit(common, &out)
}

fn train_cmd(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let ckpt = common
        .out
        .clone()
        .or(cfg.checkpoint.clone())
        .ok_or_else(|| CliError::Validation("train needs --out or a `checkpoint` config key".into()))?;
    let prep = prepare(cfg, None)?;
    let out = FitOutput {
        checkpoint: Some(ckpt.clone()),
        log: Some(ckpt.with_extension("log")),
    };
    let (model, logs) = fit(&prep, &out)?;
    for l in &logs {
        println!("{}", l.line());
    }
    if !prep.data.is_empty(Split::Test) {
        println!("test\n{}", model.evaluate(&prep, Split::Test)?.table());
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Checkpoint from the flag or the config.
fn checkpoint_path(common: &Common, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p);
    }
    resolve_config(common)?
        .checkpoint
        .ok_or_else(|| CliError::Validation("no checkpoint given".into()))
}

/// Loads a checkpoint and points it at `data` (or its own test split),
/// applying flag overrides.
fn load_for_eval(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>) -> Result<(Model, Prepared), CliError> {
    let path = checkpoint_path(common, checkpoint)?;
    load_model(&path, |cfg| {
        let test = data.or(cfg.test.clone()).or(cfg.dev.clone());
        let test = test.ok_or_else(|| CliError::Validation("no evaluation data given".into()))?;
        cfg.train = None;
        cfg.dev = None;
        cfg.test = Some(test);
        apply_flags(cfg, &Common { config: None, ..common.clone() })
    })
}

fn eval(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, dump: Option<PathBuf>) -> Result<(), CliError> {
    let (model, prep) = load_for_eval(common, checkpoint, data)?;
    let report = model.evaluate(&prep, Split::Test)?;
    print!("{}", report.table());
    if let Some(out) = &common.out {
        let json = serde_json::to_string(&report).map_err(pods::Error::from)?;
        write_file(out, &format!("{json}\n"))?;
    }
    if let Some(dump) = dump {
        write_file(&dump, &model.dump_scores(&prep, Split::Test)?)?;
    }
    Ok(())
}

fn csv_header(first: &[&str]) -> String {
    format!("{},{}\n", first.join(","), MetricReport::csv_header())
}

fn sweep_m(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, m_list: Vec<usize>, per_point: bool) -> Result<(), CliError> {
    let (trained, prep) = if per_point {
        (None, prepare(resolve_config(common)?, None)?)
    } else {
        let (m, p) = load_for_eval(common, checkpoint, data)?;
        (Some(m), p)
    };
    let n = prep.data.max_utterances();
    let m_list = if m_list.is_empty() { (1..=n.max(1)).collect() } else { m_list };
    if m_list.contains(&0) {
        return Err(CliError::Validation("m must be at least 1".into()));
    }
    let base = prep.cfg.selection.clone();
    let points: Vec<(Strategy, usize)> = m_list
        .iter()
        .map(|&m| (Strategy::Cosine, m))
        .chain(std::iter::once((Strategy::All, n)))
        .collect();
    let mut out = csv_header(&["strategy", "m"]);
    for (strategy, m) in points {
        let sel = SelectionConfig { strategy, m, ..base.clone() };
        let report = match &trained {
            Some(model) => {
                let mut model = model.clone();
                model.set_selection(sel);
                model.evaluate(&prep, Split::Test)?
            }
            None => {
                let mut p = prep.clone();
                p.cfg.selection = sel;
                let (model, _) = fit(&p, &FitOutput::default())?;
                model.evaluate_held_out(&p)?
            }
        };
        info!("{strategy} m={m}: {:.4}", report.primary());
        out.push_str(&format!("{strategy},{m},{}\n", report.csv_row()));
    }
    emit(common, &out)
}

fn sweep_k(common: &Common, p_list: Vec<usize>) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    if cfg.task != Task::Mrc {
        return Err(CliError::Validation("sweep-k needs the mrc task".into()));
    }
    if p_list.is_empty() {
        return Err(CliError::Validation("empty --p-list".into()));
    }
    let mut out = csv_header(&["p"]);
    for p in p_list {
        let mut c = cfg.clone();
        c.retrieval.top_p = p;
        c.retrieval.qa_top_p = p;
        // No knowledge items is the knowledge-free model.
        if p == 0 {
            c.mrc.ablation = Ablation::NoKnowledge;
        }
        let prep = prepare(c, None)?;
        let (model, _) = fit(&prep, &FitOutput::default())?;
        let report = model.evaluate_held_out(&prep)?;
        info!("p={p}: {:.4}", report.primary());
        out.push_str(&format!("{p},{}\n", report.csv_row()));
    }
    emit(common, &out)
}

fn analyze_pivots(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>) -> Result<(), CliError> {
    let (model, prep) = load_for_eval(common, checkpoint, data)?;
    let (Model::Dialogue(m), Data::Dialogue(s)) = (&model, &prep.data) else {
        return Err(CliError::Validation("analyze-pivots needs the response_selection task".into()));
    };
    let instances: Vec<_> = s.test.iter().flatten().cloned().collect();
    let hist = pivot_distribution(m, &instances, prep.cfg.exec())?;
    let mut out = String::from("t,proportion\n");
    for (i, p) in hist.iter().enumerate() {
        out.push_str(&format!("{},{p:.12}\n", i + 1));
    }
    emit(common, &out)
}

fn compare_strategies(common: &Common, strategies: Vec<String>) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let strategies: Vec<Strategy> = if strategies.is_empty() {
        let mut s = vec![
            Strategy::Cosine,
            Strategy::Cls,
            Strategy::Last,
            Strategy::Random,
            Strategy::PositiveOnly,
            Strategy::All,
        ];
        if cfg.external_scores.is_some() {
            s.push(Strategy::External);
        }
        s
    } else {
        strategies.iter().map(|s| s.parse()).collect::<pods::Result<_>>()?
    };
    let prep = prepare(cfg, None)?;
    let mut out = csv_header(&["strategy"]);
    for s in strategies {
        let mut p = prep.clone();
        p.cfg.selection.strategy = s;
        let (model, _) = fit(&p, &FitOutput::default())?;
        let report = model.evaluate_held_out(&p)?;
        info!("{s}: {:.4}", report.primary());
        out.push_str(&format!("{s},{}\n", report.csv_row()));
    }
    emit(common, &out)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    match cli.command {
        Command::GenData { train, dev, test } => gen_data(c, train, dev, test),
        Command::BuildKg { triples } => build_kg(c, triples),
        Command::Train => train_cmd(c),
        Command::Eval {
            checkpoint,
            data,
            dump_scores,
        } => eval(c, checkpoint, data, dump_scores),
        Command::SweepM {
            checkpoint,
            data,
            m_list,
            train_per_point,
        } => sweep_m(c, checkpoint, data, m_list, train_per_point),
        Command::SweepK { p_list } => sweep_k(c, p_list),
        Command::AnalyzePivots { checkpoint, data } => analyze_pivots(c, checkpoint, data),
        Command::CompareStrategies { strategies } => compare_strategies(c, strategies),
    }
}
