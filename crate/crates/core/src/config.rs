//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoding::EncoderConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::knowledge::RetrievalConfig;
use crate::mrc::{Ablation, MrcConfig};
use crate::optim::OptimConfig;
use crate::pivot::{SelectionConfig, Strategy};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    ResponseSelection,
    Mrc,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ResponseSelection => "response_selection",
            Task::Mrc => "mrc",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "response_selection" => Ok(Task::ResponseSelection),
            "mrc" => Ok(Task::Mrc),
            _ => Err(Error::Invalid(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// Seed of the `random` selection strategy.
    pub selection_seed: u64,
    pub encoder: EncoderConfig,
    pub selection: SelectionConfig,
    pub share_attention: bool,
    pub retrieval: RetrievalConfig,
    pub mrc: MrcConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub parallel: bool,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub pos_lexicon: Option<PathBuf>,
    pub external_scores: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::ResponseSelection,
            seed: 0,
            selection_seed: 0,
            encoder: EncoderConfig::default(),
            selection: SelectionConfig::default(),
            share_attention: false,
            retrieval: RetrievalConfig::default(),
            mrc: MrcConfig::default(),
            optim: OptimConfig::default(),
            epochs: 3,
            batch_size: 32,
            parallel: true,
            train: None,
            dev: None,
            test: None,
            vocab: None,
            triples: None,
            pos_lexicon: None,
            external_scores: None,
            checkpoint: None,
        }
    }
}

/// Every recognised key, in snapshot order.
pub const KEYS: &[&str] = &[
    "task",
    "seed",
    "selection_seed",
    "layers",
    "d_model",
    "heads",
    "ff_dim",
    "max_len",
    "dropout",
    "positions_restart",
    "pre_norm",
    "vocab_size",
    "strategy",
    "m",
    "share_attention",
    "top_p",
    "qa_top_p",
    "weight_threshold",
    "ablation",
    "duma_literal",
    "refined_qa_everywhere",
    "lr",
    "warmup_fraction",
    "weight_decay",
    "clip_norm",
    "epochs",
    "batch_size",
    "parallel",
    "train",
    "dev",
    "test",
    "vocab",
    "triples",
    "pos_lexicon",
    "external_scores",
    "checkpoint",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one key; later calls win, so flags applied after the file
    /// override it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "selection_seed" => {
                self.selection_seed = parse(key, v)?;
                self.selection.seed = self.selection_seed;
            }
            "layers" => self.encoder.layers = parse(key, v)?,
            "d_model" => self.encoder.d_model = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "ff_dim" => self.encoder.ff_dim = parse(key, v)?,
            "max_len" => self.encoder.max_len = parse(key, v)?,
            "dropout" => self.encoder.dropout = parse(key, v)?,
            "positions_restart" => self.encoder.positions_restart = parse_bool(key, v)?,
            "pre_norm" => self.encoder.pre_norm = parse_bool(key, v)?,
            "vocab_size" => self.encoder.vocab_size = parse(key, v)?,
            "strategy" => self.selection.strategy = v.parse()?,
            "m" => self.selection.m = parse(key, v)?,
            "share_attention" => self.share_attention = parse_bool(key, v)?,
            "top_p" => self.retrieval.top_p = parse(key, v)?,
            "qa_top_p" => self.retrieval.qa_top_p = parse(key, v)?,
            "weight_threshold" => self.retrieval.weight_threshold = parse(key, v)?,
            "ablation" => self.mrc.ablation = v.parse()?,
            "duma_literal" => self.mrc.duma_literal = parse_bool(key, v)?,
            "refined_qa_everywhere" => self.mrc.refined_qa_everywhere = parse_bool(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "warmup_fraction" => self.optim.warmup_fraction = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "clip_norm" => self.optim.clip_norm = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "train" => self.train = path(v),
            "dev" => self.dev = path(v),
            "test" => self.test = path(v),
            "vocab" => self.vocab = path(v),
            "triples" => self.triples = path(v),
            "pos_lexicon" => self.pos_lexicon = path(v),
            "external_scores" => self.external_scores = path(v),
            "checkpoint" => self.checkpoint = path(v),
            _ => return Err(Error::Invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "task" => self.task.to_string(),
            "seed" => self.seed.to_string(),
            "selection_seed" => self.selection_seed.to_string(),
            "layers" => self.encoder.layers.to_string(),
            "d_model" => self.encoder.d_model.to_string(),
            "heads" => self.encoder.heads.to_string(),
            "ff_dim" => self.encoder.ff_dim.to_string(),
            "max_len" => self.encoder.max_len.to_string(),
            "dropout" => self.encoder.dropout.to_string(),
            "positions_restart" => self.encoder.positions_restart.to_string(),
            "pre_norm" => self.encoder.pre_norm.to_string(),
            "vocab_size" => self.encoder.vocab_size.to_string(),
            "strategy" => self.selection.strategy.to_string(),
            "m" => self.selection.m.to_string(),
            "share_attention" => self.share_attention.to_string(),
            "top_p" => self.retrieval.top_p.to_string(),
            "qa_top_p" => self.retrieval.qa_top_p.to_string(),
            "weight_threshold" => self.retrieval.weight_threshold.to_string(),
            "ablation" => self.mrc.ablation.to_string(),
            "duma_literal" => self.mrc.duma_literal.to_string(),
            "refined_qa_everywhere" => self.mrc.refined_qa_everywhere.to_string(),
            "lr" => self.optim.lr.to_string(),
            "warmup_fraction" => self.optim.warmup_fraction.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "clip_norm" => self.optim.clip_norm.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "parallel" => self.parallel.to_string(),
            "train" => p(&self.train),
            "dev" => p(&self.dev),
            "test" => p(&self.test),
            "vocab" => p(&self.vocab),
            "triples" => p(&self.triples),
            "pos_lexicon" => p(&self.pos_lexicon),
            "external_scores" => p(&self.external_scores),
            "checkpoint" => p(&self.checkpoint),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            self.set(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in self.paths_mut() {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.train,
            &mut self.dev,
            &mut self.test,
            &mut self.vocab,
            &mut self.triples,
            &mut self.pos_lexicon,
            &mut self.external_scores,
            &mut self.checkpoint,
        ]
    }

    /// Every configured input path must exist.
    pub fn check_inputs(&self) -> Result<()> {
        let inputs = [
            &self.train,
            &self.dev,
            &self.test,
            &self.vocab,
            &self.triples,
            &self.pos_lexicon,
            &self.external_scores,
        ];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Invalid(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Every key in [`KEYS`] order; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.selection.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Invalid("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.optim.warmup_fraction) {
            return Err(Error::Invalid("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: self.optim,
            seed: self.seed,
            exec: self.exec(),
        }
    }

    pub fn with_strategy(&self, strategy: Strategy, m: usize) -> Self {
        let mut c = self.clone();
        c.selection.strategy = strategy;
        c.selection.m = m;
        c
    }

    pub fn with_ablation(&self, mode: Ablation) -> Self {
        let mut c = self.clone();
        c.mrc.ablation = mode;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("strategy", "last").unwrap();
        c.set("train", "/tmp/x.jsonl").unwrap();
        c.set("lr", "0.001").unwrap();
        let back = RunConfig::parse(&c.to_text(), "snap").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn later_values_win_and_errors_carry_lines() {
        let c = RunConfig::parse("# c\nm = 3\nm = 5\n", "f").unwrap();
        assert_eq!(c.selection.m, 5);
        assert!(matches!(RunConfig::parse("m = 3\nbogus = 1\n", "f"), Err(Error::Parse { line: 2, .. })));
        assert!(RunConfig::parse("m 3\n", "f").is_err());
        assert!(RunConfig::parse("task = chat\n", "f").is_err());
    }
}
