//! Pivot utterance scoring and top-m selection.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::encoding::SeparatedStates;
use crate::error::{Error, Result};
use crate::numerics::{cosine, Tape, Var};
use crate::seeding;

/// Default number of pivot utterances.
pub const DEFAULT_M: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Cosine between the anchor's `[SEP]` state and each utterance `[SEP]`.
    Cosine,
    /// Cosine against the `[CLS]` state instead of the anchor.
    Cls,
    /// The last utterance only.
    Last,
    /// One uniformly sampled utterance.
    Random,
    /// Cosine for positive training pairs, last utterance for negatives.
    PositiveOnly,
    /// Scores read from an external score table.
    External,
    /// Every utterance is a pivot.
    All,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Cosine,
        Strategy::Cls,
        Strategy::Last,
        Strategy::Random,
        Strategy::PositiveOnly,
        Strategy::External,
        Strategy::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Cosine => "cosine",
            Strategy::Cls => "cls",
            Strategy::Last => "last",
            Strategy::Random => "random",
            Strategy::PositiveOnly => "positive_only",
            Strategy::External => "external",
            Strategy::All => "all",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown selection strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub m: usize,
    /// Seed for the `random` strategy, independent of the model seed.
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Cosine,
            m: DEFAULT_M,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Invalid("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// Utterance scores from an external scorer, keyed by example id and
/// original utterance index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScores {
    scores: HashMap<String, HashMap<usize, f64>>,
}

impl ExternalScores {
    /// Parses `example_id<TAB>utterance_index<TAB>score` lines.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut scores: HashMap<String, HashMap<usize, f64>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err("expected 3 tab-separated fields"));
            }
            let idx: usize = fields[1].trim().parse().map_err(|_| err("bad utterance index"))?;
            let score: f64 = fields[2].trim().parse().map_err(|_| err("bad score"))?;
            if !score.is_finite() {
                return Err(err("non-finite score"));
            }
            scores.entry(fields[0].to_string()).or_default().insert(idx, score);
        }
        Ok(Self { scores })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn insert(&mut self, example_id: &str, utterance: usize, score: f64) {
        self.scores.entry(example_id.to_string()).or_default().insert(utterance, score);
    }

    pub fn get(&self, example_id: &str, utterance: usize) -> Option<f64> {
        self.scores.get(example_id)?.get(&utterance).copied()
    }
}

/// Per-example information some strategies need.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreContext<'a> {
    pub example_id: &'a str,
    /// Gold label when training; `None` at inference.
    pub label: Option<u8>,
    pub external: Option<&'a ExternalScores>,
    /// Original context index of each utterance (identity when `None`).
    pub utterance_index: Option<&'a [usize]>,
}

/// Scores every utterance `[SEP]` vector against `anchor`.
pub fn score_utterances(seps: &[&[f64]], anchor: &[f64], cfg: &SelectionConfig, ctx: &ScoreContext) -> Result<Vec<f64>> {
    let n = seps.len();
    if let Some(bad) = seps.iter().find(|s| s.len() != anchor.len()) {
        return Err(Error::shape(
            "score_utterances",
            format!("anchor of {} vs sep of {}", anchor.len(), bad.len()),
        ));
    }
    let original = |i: usize| ctx.utterance_index.map_or(i, |m| m[i]);
    Ok(match cfg.strategy {
        Strategy::Cosine | Strategy::Cls | Strategy::PositiveOnly | Strategy::All => {
            seps.iter().map(|s| cosine(anchor, s)).collect()
        }
        Strategy::Last => (0..n).map(|i| if i + 1 == n { 1.0 } else { 0.0 }).collect(),
        Strategy::Random => {
            let mut rng = seeding::rng(seeding::derive(cfg.seed, ctx.example_id));
            (0..n).map(|_| rng.random::<f64>()).collect()
        }
        Strategy::External => {
            let table = ctx
                .external
                .ok_or_else(|| Error::Invalid("external strategy needs a score table".into()))?;
            (0..n)
                .map(|i| {
                    table.get(ctx.example_id, original(i)).ok_or_else(|| {
                        Error::Invalid(format!(
                            "no external score for example {:?} utterance {}",
                            ctx.example_id,
                            original(i)
                        ))
                    })
                })
                .collect::<Result<_>>()?
        }
    })
}

/// Indices of the `k` highest scores, ties toward the lower index,
/// returned in ascending (original) order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    order
}

/// Chosen pivot indices for a strategy.
pub fn select_top_m(scores: &[f64], cfg: &SelectionConfig) -> Vec<usize> {
    match cfg.strategy {
        Strategy::All => (0..scores.len()).collect(),
        Strategy::Last | Strategy::Random => top_k(scores, 1),
        _ => top_k(scores, cfg.m),
    }
}

/// Label-dependent selection: cosine top-m for positives, the last
/// utterance for negatives, cosine top-m when the label is unknown.
pub fn positive_only_select(label: Option<u8>, scores: &[f64], cfg: &SelectionConfig) -> Vec<usize> {
    match label {
        Some(0) => vec![scores.len().saturating_sub(1)],
        _ => top_k(scores, cfg.m),
    }
}

#[derive(Debug, Clone)]
pub struct PivotSelection {
    pub scores: Vec<f64>,
    pub chosen: Vec<usize>,
    /// `H^P`: chosen padded blocks stacked in original order (`|chosen|·l` rows).
    pub pivot: Var,
    pub pivot_mask: Vec<bool>,
}

/// Anchor vector for a strategy: `[CLS]` for `cls`, otherwise the given one.
pub fn anchor_for(tape: &Tape, states: &SeparatedStates, anchor: Var, strategy: Strategy) -> Vec<f64> {
    match strategy {
        Strategy::Cls => tape.value(states.h0).data().to_vec(),
        _ => tape.value(anchor).data().to_vec(),
    }
}

/// Scores, selects and assembles the pivot context. Selection is a hard
/// choice computed from values; gradients reach `H^P` only through the
/// chosen blocks.
pub fn select_pivots(
    tape: &mut Tape,
    states: &SeparatedStates,
    anchor: Var,
    cfg: &SelectionConfig,
    ctx: &ScoreContext,
) -> Result<PivotSelection> {
    let anchor_vals = anchor_for(tape, states, anchor, cfg.strategy);
    let seps: Vec<&[f64]> = states.utterance_seps.iter().map(|&s| tape.value(s).data()).collect();
    let scores = score_utterances(&seps, &anchor_vals, cfg, ctx)?;
    let chosen = match cfg.strategy {
        Strategy::PositiveOnly => positive_only_select(ctx.label, &scores, cfg),
        _ => select_top_m(&scores, cfg),
    };
    assemble(tape, states, scores, chosen)
}

pub fn assemble(tape: &mut Tape, states: &SeparatedStates, scores: Vec<f64>, chosen: Vec<usize>) -> Result<PivotSelection> {
    if chosen.is_empty() {
        return Err(Error::Empty("pivot selection"));
    }
    let (pivot, pivot_mask) = if chosen.len() == states.n {
        (states.context, states.context_mask.clone())
    } else {
        let blocks: Vec<Var> = chosen.iter().map(|&i| states.utterance_blocks[i]).collect();
        let pivot = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks)? };
        let mask = chosen.iter().flat_map(|&i| states.block_mask(i)).collect();
        (pivot, mask)
    };
    Ok(PivotSelection {
        scores,
        chosen,
        pivot,
        pivot_mask,
    })
}

/// Last-`t` index (1 = final utterance) of the utterance whose `[SEP]`
/// state is most similar to `anchor`, ties toward the later utterance.
pub fn most_related_last_t(seps: &[&[f64]], anchor: &[f64]) -> Option<usize> {
    let n = seps.len();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in seps.iter().enumerate().rev() {
        let c = cosine(anchor, s);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| n - i)
}

/// Normalised histogram over last-`t` positions (index 0 holds `t = 1`).
pub fn histogram(last_ts: &[usize]) -> Result<Vec<f64>> {
    if last_ts.is_empty() {
        return Err(Error::Empty("pivot distribution"));
    }
    let max_t = last_ts.iter().copied().max().unwrap_or(1);
    let mut h = vec![0.0; max_t];
    for &t in last_ts {
        h[t - 1] += 1.0;
    }
    let total = last_ts.len() as f64;
    h.iter_mut().for_each(|x| *x /= total);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strategy: Strategy, m: usize) -> SelectionConfig {
        SelectionConfig { strategy, m, seed: 1 }
    }

    #[test]
    fn anchor_equal_to_an_utterance_scores_one() {
        let seps = [&[1.0, 2.0, 3.0][..], &[-1.0, 0.5, 0.0][..]];
        let s = score_utterances(&seps, &[-1.0, 0.5, 0.0], &cfg(Strategy::Cosine, 12), &ScoreContext::default()).unwrap();
        assert!((s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn last_strategy_scores_and_selects_final_turn() {
        let seps = vec![&[1.0][..]; 5];
        let c = cfg(Strategy::Last, 12);
        let s = score_utterances(&seps, &[1.0], &c, &ScoreContext::default()).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(select_top_m(&s, &c), vec![4]);
    }

    #[test]
    fn top_m_examples() {
        let c = cfg(Strategy::Cosine, 2);
        assert_eq!(select_top_m(&[0.2, 0.9, 0.5], &c), vec![1, 2]);
        assert_eq!(select_top_m(&[0.2, 0.9, 0.5], &cfg(Strategy::Cosine, 12)), vec![0, 1, 2]);
        assert_eq!(select_top_m(&[0.5, 0.5], &cfg(Strategy::Cosine, 1)), vec![0]);
        assert_eq!(select_top_m(&[0.1, 0.3], &cfg(Strategy::All, 1)), vec![0, 1]);
    }

    #[test]
    fn positive_only_dispatch() {
        let c = cfg(Strategy::PositiveOnly, 2);
        let s = [0.9, 0.1, 0.8, 0.2];
        assert_eq!(positive_only_select(Some(0), &s, &c), vec![3]);
        assert_eq!(positive_only_select(Some(1), &s, &c), select_top_m(&s, &cfg(Strategy::Cosine, 2)));
        assert_eq!(positive_only_select(None, &s, &c), vec![0, 2]);
    }

    #[test]
    fn random_scores_are_seeded_per_example() {
        let seps = vec![&[1.0][..]; 4];
        let c = cfg(Strategy::Random, 1);
        let ctx = |id| ScoreContext { example_id: id, ..Default::default() };
        let a = score_utterances(&seps, &[1.0], &c, &ctx("a")).unwrap();
        assert_eq!(a, score_utterances(&seps, &[1.0], &c, &ctx("a")).unwrap());
        assert_ne!(a, score_utterances(&seps, &[1.0], &c, &ctx("b")).unwrap());
    }

    #[test]
    fn external_scores_file() {
        let t = ExternalScores::parse("ex1\t0\t0.2\nex1\t1\t0.7\n# note\n", "mem").unwrap();
        let seps = vec![&[1.0][..]; 2];
        let c = cfg(Strategy::External, 1);
        let ctx = ScoreContext { example_id: "ex1", external: Some(&t), ..Default::default() };
        assert_eq!(score_utterances(&seps, &[1.0], &c, &ctx).unwrap(), vec![0.2, 0.7]);
        let missing = ScoreContext { example_id: "ex2", external: Some(&t), ..Default::default() };
        assert!(score_utterances(&seps, &[1.0], &c, &missing).is_err());
        assert!(ExternalScores::parse("ex1\t0\n", "mem").is_err());
    }

    #[test]
    fn histogram_properties() {
        let h = histogram(&[1, 1, 1]).unwrap();
        assert_eq!(h, vec![1.0]);
        let h = histogram(&[2, 1, 2, 3]).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(h[1], 0.5);
        assert!(histogram(&[]).is_err());
    }
}
