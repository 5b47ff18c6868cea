//! Loading data, building models, training and scoring, shared by the
//! subcommands.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use pods::checkpoint::Checkpoint;
use pods::config::{RunConfig, Task};
use pods::data::{dialogue_vocab, mrc_vocab, read_dialogues, read_mrc, DialogueExample, MrcExample};
use pods::encoding::Vocabulary;
use pods::knowledge::{ingest_file, FactStore, PosLexicon, RelationMap};
use pods::matching::{Instance, ResponseModel};
use pods::metrics::MetricReport;
use pods::mrc::{MrcInstance, MrcModel};
use pods::numerics::Params;
use pods::pivot::{ExternalScores, SelectionConfig};
use pods::train::{evaluate_dialogues, evaluate_mrc, score_dialogues, score_mrc, train, EpochLog, Objective};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Default)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn get(&self, split: Split) -> &[T] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Test data when present, dev otherwise.
    pub fn held_out(&self) -> &[T] {
        if self.test.is_empty() {
            &self.dev
        } else {
            &self.test
        }
    }
}

/// Tokenized datasets; dialogue examples keep one instance per candidate.
#[derive(Debug, Clone)]
pub enum Data {
    Dialogue(Splits<Vec<Instance>>),
    Mrc(Splits<MrcInstance>),
}

impl Data {
    pub fn is_empty(&self, split: Split) -> bool {
        match self {
            Data::Dialogue(s) => s.get(split).is_empty(),
            Data::Mrc(s) => s.get(split).is_empty(),
        }
    }

    /// Largest utterance count in any loaded example.
    pub fn max_utterances(&self) -> usize {
        match self {
            Data::Dialogue(s) => [&s.train, &s.dev, &s.test]
                .iter()
                .flat_map(|v| v.iter().flatten())
                .map(|i| i.packed.num_utterances())
                .max()
                .unwrap_or(0),
            Data::Mrc(s) => [&s.train, &s.dev, &s.test]
                .iter()
                .flat_map(|v| v.iter())
                .flat_map(|i| i.packed.iter())
                .map(|p| p.num_utterances())
                .max()
                .unwrap_or(0),
        }
    }
}

/// Everything a run needs besides the model parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: RunConfig,
    pub vocab: Vocabulary,
    pub store: FactStore,
    pub external: Option<ExternalScores>,
    pub data: Data,
}

fn read_opt<T>(path: &Option<PathBuf>, read: impl Fn(&Path) -> pods::Result<Vec<T>>) -> Result<Vec<T>, CliError> {
    Ok(match path {
        Some(p) => read(p)?,
        None => Vec::new(),
    })
}

fn validate_all<T>(sets: [&[T]; 3], check: impl Fn(&T) -> pods::Result<()>) -> Result<(), CliError> {
    for set in sets {
        for ex in set {
            check(ex)?;
        }
    }
    Ok(())
}

/// Loads the datasets named in `cfg`. With `vocab` given (e.g. from a
/// checkpoint) it is used as is; otherwise a vocabulary is read from
/// `cfg.vocab` or built from the data, and `cfg.encoder.vocab_size`
/// follows it.
pub fn prepare(mut cfg: RunConfig, vocab: Option<Vocabulary>) -> Result<Prepared, CliError> {
    cfg.check_inputs()?;
    cfg.validate()?;
    let given = match (vocab, &cfg.vocab) {
        (Some(v), _) => Some(v),
        (None, Some(p)) => Some(Vocabulary::load(p)?),
        (None, None) => None,
    };
    let max_len = cfg.encoder.max_len;
    let external = cfg.external_scores.as_deref().map(ExternalScores::load).transpose()?;
    let (vocab, store, data) = match cfg.task {
        Task::ResponseSelection => {
            let train: Vec<DialogueExample> = read_opt(&cfg.train, read_dialogues)?;
            let dev: Vec<DialogueExample> = read_opt(&cfg.dev, read_dialogues)?;
            let test: Vec<DialogueExample> = read_opt(&cfg.test, read_dialogues)?;
            validate_all([&train, &dev, &test], DialogueExample::validate)?;
            let vocab = given.unwrap_or_else(|| dialogue_vocab(&[&train, &dev, &test]));
            let inst = |set: &[DialogueExample]| -> Result<Vec<Vec<Instance>>, CliError> {
                Ok(set.iter().map(|e| e.instances(&vocab, max_len)).collect::<pods::Result<_>>()?)
            };
            let splits = Splits {
                train: inst(&train)?,
                dev: inst(&dev)?,
                test: inst(&test)?,
            };
            (vocab, FactStore::default(), Data::Dialogue(splits))
        }
        Task::Mrc => {
            let train: Vec<MrcExample> = read_opt(&cfg.train, read_mrc)?;
            let dev: Vec<MrcExample> = read_opt(&cfg.dev, read_mrc)?;
            let test: Vec<MrcExample> = read_opt(&cfg.test, read_mrc)?;
            validate_all([&train, &dev, &test], MrcExample::validate)?;
            let relations = RelationMap::default();
            let vocab = given.unwrap_or_else(|| mrc_vocab(&[&train, &dev, &test], &relations.surfaces()));
            let store = match &cfg.triples {
                Some(p) => {
                    let ing = ingest_file(p, &vocab, &relations, &cfg.retrieval)?;
                    for e in &ing.malformed {
                        warn!("skipped {e}");
                    }
                    info!(
                        "knowledge: kept {} facts, {} below threshold, {} out of vocabulary, {} malformed",
                        ing.store.len(),
                        ing.below_threshold,
                        ing.out_of_vocabulary,
                        ing.malformed.len()
                    );
                    ing.store
                }
                None => FactStore::default(),
            };
            let lexicon = match &cfg.pos_lexicon {
                Some(p) => PosLexicon::load(p)?,
                None => PosLexicon::default(),
            };
            let inst = |set: &[MrcExample]| -> Result<Vec<MrcInstance>, CliError> {
                Ok(set
                    .iter()
                    .map(|e| e.instance(&vocab, max_len, &store, &lexicon, &cfg.retrieval))
                    .collect::<pods::Result<_>>()?)
            };
            let splits = Splits {
                train: inst(&train)?,
                dev: inst(&dev)?,
                test: inst(&test)?,
            };
            (vocab, store, Data::Mrc(splits))
        }
    };
    cfg.encoder.vocab_size = vocab.len();
    Ok(Prepared {
        cfg,
        vocab,
        store,
        external,
        data,
    })
}

#[derive(Debug, Clone)]
pub enum Model {
    Dialogue(ResponseModel),
    Mrc(MrcModel),
}

fn selection(cfg: &RunConfig) -> SelectionConfig {
    SelectionConfig {
        seed: cfg.selection_seed,
        ..cfg.selection.clone()
    }
}

impl Model {
    /// Freshly initialised model for `prep.cfg`.
    pub fn new(prep: &Prepared) -> Result<Self, CliError> {
        let cfg = &prep.cfg;
        Ok(match cfg.task {
            Task::ResponseSelection => {
                let mut m = ResponseModel::new(cfg.encoder.clone(), selection(cfg), cfg.share_attention, cfg.seed)?;
                m.external = prep.external.clone();
                Model::Dialogue(m)
            }
            Task::Mrc => {
                let mut m = MrcModel::new(cfg.encoder.clone(), selection(cfg), cfg.mrc.clone(), cfg.seed)?;
                m.store = prep.store.clone();
                Model::Mrc(m)
            }
        })
    }

    pub fn params(&self) -> &Params {
        match self {
            Model::Dialogue(m) => &m.params,
            Model::Mrc(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            Model::Dialogue(m) => &mut m.params,
            Model::Mrc(m) => &mut m.params,
        }
    }

    pub fn set_selection(&mut self, sel: SelectionConfig) {
        match self {
            Model::Dialogue(m) => m.selection = sel,
            Model::Mrc(m) => m.selection = sel,
        }
    }

    pub fn evaluate(&self, prep: &Prepared, split: Split) -> Result<MetricReport, CliError> {
        let exec = prep.cfg.exec();
        Ok(match (self, &prep.data) {
            (Model::Dialogue(m), Data::Dialogue(s)) => evaluate_dialogues(m, s.get(split), exec)?,
            (Model::Mrc(m), Data::Mrc(s)) => evaluate_mrc(m, s.get(split), exec)?,
            _ => return Err(CliError::Validation("model and data are for different tasks".into())),
        })
    }

    /// Evaluates on test data when loaded, dev otherwise.
    pub fn evaluate_held_out(&self, prep: &Prepared) -> Result<MetricReport, CliError> {
        let split = if prep.data.is_empty(Split::Test) { Split::Dev } else { Split::Test };
        self.evaluate(prep, split)
    }

    /// `example_id<TAB>score,score,…` per example.
    pub fn dump_scores(&self, prep: &Prepared, split: Split) -> Result<String, CliError> {
        let exec = prep.cfg.exec();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        match (self, &prep.data) {
            (Model::Dialogue(m), Data::Dialogue(s)) => {
                let examples = s.get(split);
                for (ex, (scores, _)) in examples.iter().zip(score_dialogues(m, examples, exec)?) {
                    let id = ex.first().map_or("", |i| i.example_id.as_str());
                    out.push_str(&format!("{id}\t{}\n", join(&scores)));
                }
            }
            (Model::Mrc(m), Data::Mrc(s)) => {
                let examples = s.get(split);
                for (ex, probs) in examples.iter().zip(score_mrc(m, examples, exec)?) {
                    out.push_str(&format!("{}\t{}\n", ex.example_id, join(&probs)));
                }
            }
            _ => return Err(CliError::Validation("model and data are for different tasks".into())),
        }
        Ok(out)
    }

    pub fn checkpoint(&self, prep: &Prepared) -> Checkpoint {
        Checkpoint::from_params(self.params())
            .with_section("config", prep.cfg.to_text())
            .with_section("vocab", prep.vocab.to_file_string())
    }
}

/// Config and vocabulary stored in a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig, Vocabulary), CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let origin = path.display().to_string();
    let cfg_text = ck
        .section("config")
        .ok_or_else(|| CliError::Runtime(format!("{origin}: no config snapshot")))?;
    let cfg = RunConfig::parse(cfg_text, &origin)?;
    let vocab_text = ck
        .section("vocab")
        .ok_or_else(|| CliError::Runtime(format!("{origin}: no vocabulary")))?;
    let vocab = Vocabulary::parse(vocab_text, &origin)?;
    Ok((ck, cfg, vocab))
}

/// Rebuilds the model stored at `path`; `adjust` may change the snapshot
/// config (data paths, selection) before the data is loaded.
pub fn load_model(path: &Path, adjust: impl FnOnce(&mut RunConfig) -> Result<(), CliError>) -> Result<(Model, Prepared), CliError> {
    let (ck, mut cfg, vocab) = read_checkpoint(path)?;
    let task = cfg.task;
    adjust(&mut cfg)?;
    if cfg.task != task {
        return Err(CliError::Validation(format!(
            "checkpoint is for task {task}, not {}",
            cfg.task
        )));
    }
    let prep = prepare(cfg, Some(vocab))?;
    let mut model = Model::new(&prep)?;
    ck.restore(model.params_mut())?;
    Ok((model, prep))
}

/// Where [`fit`] persists its results.
#[derive(Debug, Clone, Default)]
pub struct FitOutput {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

fn fit_objective<O>(
    obj: &mut O,
    items: &[O::Item],
    prep: &Prepared,
    out: &FitOutput,
    evaluate: impl Fn(&O) -> pods::Result<MetricReport>,
    to_checkpoint: impl Fn(&O) -> Checkpoint,
) -> Result<Vec<EpochLog>, CliError>
where
    O: Objective,
    O::Item: Clone,
{
    if let Some(log) = &out.log {
        std::fs::write(log, "").map_err(|e| CliError::Runtime(format!("{}: {e}", log.display())))?;
    }
    let has_dev = !prep.data.is_empty(Split::Dev);
    let mut best: Option<(f64, Params)> = None;
    let logs = train(
        obj,
        items,
        &prep.cfg.train_config(),
        |o| if has_dev { evaluate(o).map(Some) } else { Ok(None) },
        |o, log| {
            let score = log.dev.as_ref().map_or(f64::INFINITY, MetricReport::primary);
            if best.as_ref().is_none_or(|(b, _)| score > *b || !has_dev) {
                best = Some((score, o.params().clone()));
                if let Some(path) = &out.checkpoint {
                    to_checkpoint(o).save(path)?;
                }
            }
            if let Some(path) = &out.log {
                let mut f = OpenOptions::new().append(true).open(path).map_err(|e| pods::Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                writeln!(f, "{}", log.line()).map_err(|e| pods::Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
            Ok(())
        },
    )?;
    if let Some((_, params)) = best {
        *obj.params_mut() = params;
    }
    Ok(logs)
}

/// Trains a fresh model on the training split, selecting the epoch with
/// the best dev score (the last epoch when there is no dev data). The
/// returned model holds the selected parameters.
pub fn fit(prep: &Prepared, out: &FitOutput) -> Result<(Model, Vec<EpochLog>), CliError> {
    if prep.data.is_empty(Split::Train) {
        return Err(CliError::Validation("no training data configured".into()));
    }
    let mut model = Model::new(prep)?;
    let exec = prep.cfg.exec();
    let ckpt = |params: &Params| {
        Checkpoint::from_params(params)
            .with_section("config", prep.cfg.to_text())
            .with_section("vocab", prep.vocab.to_file_string())
    };
    let logs = match (&mut model, &prep.data) {
        (Model::Dialogue(m), Data::Dialogue(s)) => {
            let items: Vec<Instance> = s.train.iter().flatten().cloned().collect();
            fit_objective(m, &items, prep, out, |o| evaluate_dialogues(o, &s.dev, exec), |o| ckpt(&o.params))?
        }
        (Model::Mrc(m), Data::Mrc(s)) => fit_objective(m, &s.train, prep, out, |o| evaluate_mrc(o, &s.dev, exec), |o| ckpt(&o.params))?,
        _ => unreachable!("model is built for the data's task"),
    };
    Ok((model, logs))
}
