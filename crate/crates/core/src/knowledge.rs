//! Weighted commonsense triples: ingestion, verbalization, POS-driven
//! retrieval and fact encoding.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use log::warn;

use crate::encoding::{words, Encoder, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{mha, MhaParams, Tape, Tensor, Var};

const DEFAULT_RELATIONS: &str = include_str!("../data/relations.tsv");
const DEFAULT_LEXICON: &str = include_str!("../data/pos_lexicon.tsv");

/// Words never used as index keys.
const STOPWORDS: &[&str] = &["a", "an", "the", "of", "to", "in", "on", "at", "for", "and", "or", "is", "be"];

/// A retained `{relation, head, tail}` triple and its surface sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeFact {
    pub relation: String,
    pub head: String,
    pub tail: String,
    pub weight: f64,
    pub surface: String,
}

/// Relation name → surface phrase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMap(HashMap<String, String>);

impl Default for RelationMap {
    fn default() -> Self {
        Self::parse(DEFAULT_RELATIONS).expect("shipped relation map is well formed")
    }
}

impl RelationMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (rel, surface) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: "relation map".into(),
                line: i + 1,
                msg: "expected relation<TAB>surface".into(),
            })?;
            map.insert(normalize_relation(rel), surface.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn surface(&self, relation: &str) -> Option<&str> {
        self.0.get(&normalize_relation(relation)).map(String::as_str)
    }

    /// Every surface phrase, sorted.
    pub fn surfaces(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.0.values().map(String::as_str).collect();
        s.sort_unstable();
        s
    }
}

/// `/r/AtLocation` and `AtLocation` both become `atlocation`.
pub fn normalize_relation(rel: &str) -> String {
    rel.trim().trim_start_matches("/r/").replace(['_', '/'], "").to_lowercase()
}

/// `head + " " + surface(relation) + " " + tail`; unmapped relations fall
/// back to the lowercased relation token.
pub fn verbalize(relation: &str, head: &str, tail: &str, relations: &RelationMap) -> String {
    let surface = match relations.surface(relation) {
        Some(s) => s.to_string(),
        None => {
            warn!("no surface form for relation {relation:?}; using it verbatim");
            normalize_relation(relation)
        }
    };
    format!("{head} {surface} {tail}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    /// Facts kept per context.
    pub top_p: usize,
    /// Facts kept per question-option pair.
    pub qa_top_p: usize,
    pub weight_threshold: f64,
    pub pos_filter: Vec<PosTag>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_p: 30,
            qa_top_p: 30,
            weight_threshold: 1.0,
            pos_filter: vec![PosTag::Noun, PosTag::Verb, PosTag::Adjective],
        }
    }
}

/// Ingested facts plus a word → fact index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactStore {
    facts: Vec<KnowledgeFact>,
    tokens: Vec<Vec<usize>>,
    index: HashMap<String, Vec<usize>>,
}

/// Result of [`ingest`]: the store and every skipped malformed line.
#[derive(Debug)]
pub struct Ingested {
    pub store: FactStore,
    pub malformed: Vec<Error>,
    pub below_threshold: usize,
    pub out_of_vocabulary: usize,
}

/// Parses `relation<TAB>head<TAB>tail<TAB>weight` lines and keeps facts
/// whose weight reaches the threshold and whose words are all in `vocab`.
pub fn ingest(text: &str, origin: &str, vocab: &Vocabulary, relations: &RelationMap, cfg: &RetrievalConfig) -> Ingested {
    let mut store = FactStore::default();
    let mut malformed = Vec::new();
    let (mut below, mut oov) = (0, 0);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            malformed.push(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            continue;
        }
        let weight: f64 = match fields[3].trim().parse() {
            Ok(w) if f64::is_finite(w) && w >= 0.0 => w,
            _ => {
                malformed.push(err(format!("bad weight {:?}", fields[3])));
                continue;
            }
        };
        let (head, tail) = (fields[1].trim(), fields[2].trim());
        if fields[0].trim().is_empty() || head.is_empty() || tail.is_empty() {
            malformed.push(err("empty field".into()));
            continue;
        }
        if weight < cfg.weight_threshold {
            below += 1;
            continue;
        }
        let surface = verbalize(fields[0], head, tail, relations);
        let surface_words = words(&surface);
        if surface_words.iter().any(|w| !vocab.contains(w)) {
            oov += 1;
            continue;
        }
        store.push(KnowledgeFact {
            relation: normalize_relation(fields[0]),
            head: head.to_string(),
            tail: tail.to_string(),
            weight,
            surface,
        }, surface_words.iter().map(|w| vocab.id(w).expect("checked above")).collect());
    }
    Ingested {
        store,
        malformed,
        below_threshold: below,
        out_of_vocabulary: oov,
    }
}

pub fn ingest_file(path: &Path, vocab: &Vocabulary, relations: &RelationMap, cfg: &RetrievalConfig) -> Result<Ingested> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(ingest(&text, &path.display().to_string(), vocab, relations, cfg))
}

impl FactStore {
    fn push(&mut self, fact: KnowledgeFact, tokens: Vec<usize>) {
        let id = self.facts.len();
        let mut keys: Vec<String> = words(&fact.head);
        keys.extend(words(&fact.tail));
        let mut seen = HashSet::new();
        for k in keys {
            if STOPWORDS.contains(&k.as_str()) || !seen.insert(k.clone()) {
                continue;
            }
            self.index.entry(k).or_default().push(id);
        }
        self.facts.push(fact);
        self.tokens.push(tokens);
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn fact(&self, id: usize) -> &KnowledgeFact {
        &self.facts[id]
    }

    pub fn facts(&self) -> &[KnowledgeFact] {
        &self.facts
    }

    /// Token ids of the fact's surface text.
    pub fn tokens(&self, id: usize) -> &[usize] {
        &self.tokens[id]
    }

    pub fn lookup(&self, word: &str) -> &[usize] {
        self.index.get(word).map_or(&[], Vec::as_slice)
    }

    /// Facts related to the content words of `tokens`, weight-descending
    /// (ties by ingestion order), at most `p`.
    pub fn retrieve(&self, tokens: &[String], tags: &[PosTag], filter: &[PosTag], p: usize) -> Result<Vec<usize>> {
        if tokens.len() != tags.len() {
            return Err(Error::shape(
                "retrieve",
                format!("{} tokens but {} tags", tokens.len(), tags.len()),
            ));
        }
        let mut hits: Vec<usize> = tokens
            .iter()
            .zip(tags)
            .filter(|(_, t)| filter.contains(t))
            .flat_map(|(w, _)| self.lookup(w).iter().copied())
            .collect();
        hits.sort_unstable();
        hits.dedup();
        hits.sort_by(|&a, &b| self.facts[b].weight.total_cmp(&self.facts[a].weight).then(a.cmp(&b)));
        hits.truncate(p);
        Ok(hits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosTag {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Other,
}

impl FromStr for PosTag {
    type Err = Error;

    /// Accepts the coarse names used in the shipped lexicon and Penn
    /// Treebank prefixes (`NN*`, `VB*`, `JJ*`, `RB*`).
    fn from_str(s: &str) -> Result<Self> {
        let u = s.trim().to_uppercase();
        Ok(match u.as_str() {
            "NOUN" | "PROPN" => PosTag::Noun,
            "VERB" | "AUX" => PosTag::Verb,
            "ADJ" => PosTag::Adjective,
            "ADV" => PosTag::Adverb,
            "OTHER" | "X" => PosTag::Other,
            _ if u.starts_with("NN") => PosTag::Noun,
            _ if u.starts_with("VB") => PosTag::Verb,
            _ if u.starts_with("JJ") => PosTag::Adjective,
            _ if u.starts_with("RB") => PosTag::Adverb,
            _ if !u.is_empty() && u.chars().all(|c| c.is_ascii_uppercase() || c == '$') => PosTag::Other,
            _ => return Err(Error::Invalid(format!("unknown POS tag {s:?}"))),
        })
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adjective => "ADJ",
            PosTag::Adverb => "ADV",
            PosTag::Other => "OTHER",
        })
    }
}

/// Word → tag table with suffix heuristics for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosLexicon(HashMap<String, PosTag>);

impl Default for PosLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON, "builtin lexicon").expect("shipped lexicon is well formed")
    }
}

impl PosLexicon {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed = line
                .split_once('\t')
                .ok_or_else(|| "expected word<TAB>tag".to_string())
                .and_then(|(w, t)| t.parse::<PosTag>().map(|t| (w, t)).map_err(|e| e.to_string()));
            match parsed {
                Ok((w, t)) => {
                    map.insert(w.trim().to_lowercase(), t);
                }
                Err(msg) => {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: i + 1,
                        msg,
                    })
                }
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn tag_word(&self, word: &str) -> PosTag {
        if let Some(&t) = self.0.get(word) {
            return t;
        }
        if !word.chars().any(char::is_alphanumeric) {
            PosTag::Other
        } else if word.ends_with("ly") {
            PosTag::Adverb
        } else if word.ends_with("ing") || word.ends_with("ed") {
            PosTag::Verb
        } else {
            PosTag::Noun
        }
    }

    pub fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        tokens.iter().map(|w| self.tag_word(w)).collect()
    }
}

/// `r_k = mean(MHA(H_k, H_k, H_k))` over the encoded fact tokens.
pub fn encode_fact(tape: &mut Tape, encoder: &Encoder, self_attn: &MhaParams, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("fact surface"));
    }
    let h = encoder.encode_tokens(tape, tokens)?;
    let refined = mha(tape, h, h, h, self_attn, None)?;
    tape.mean_rows(refined)
}

/// Fact embeddings computed under one fixed parameter version.
#[derive(Debug, Default)]
pub struct FactCache {
    version: u64,
    entries: Mutex<HashMap<(u64, usize), Tensor>>,
}

impl FactCache {
    pub fn new(version: u64) -> Self {
        Self {
            version,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("fact cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(&self, fact: usize, compute: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        let key = (self.version, fact);
        if let Some(t) = self.entries.lock().expect("fact cache poisoned").get(&key) {
            return Ok(t.clone());
        }
        let t = compute()?;
        self.entries
            .lock()
            .expect("fact cache poisoned")
            .entry(key)
            .or_insert_with(|| t.clone());
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_for(texts: &[&str]) -> Vocabulary {
        Vocabulary::build(texts.iter().copied())
    }

    #[test]
    fn verbalization_examples() {
        let rel = RelationMap::default();
        assert_eq!(verbalize("causes", "virus", "disease", &rel), "virus causes disease");
        assert_eq!(verbalize("atlocation", "bike", "street", &rel), "bike at location street");
        assert_eq!(verbalize("/r/AtLocation", "bike", "street", &rel), "bike at location street");
        assert_eq!(verbalize("isa", "x", "x", &rel), "x is a x");
        assert_eq!(verbalize("Frobnicates", "a", "b", &rel), "a frobnicates b");
    }

    #[test]
    fn ingestion_filters_weight_and_vocabulary() {
        let v = vocab_for(&["bike at location street virus causes disease garage"]);
        let cfg = RetrievalConfig::default();
        let text = "atlocation\tbike\tgarage\t0.5\natlocation\tbike\tstreet\t2.0\ncauses\tzebra\tdisease\t3\nbogus line\n";
        let out = ingest(text, "mem", &v, &RelationMap::default(), &cfg);
        assert_eq!(out.store.len(), 1);
        assert_eq!(out.store.fact(0).tail, "street");
        assert_eq!(out.below_threshold, 1);
        assert_eq!(out.out_of_vocabulary, 1);
        assert_eq!(out.malformed.len(), 1);
        assert!(matches!(out.malformed[0], Error::Parse { line: 4, .. }));
    }

    #[test]
    fn index_counts_facts_per_word() {
        let v = vocab_for(&["bike at location street garage has a wheel"]);
        let text = "atlocation\tbike\tstreet\t2\natlocation\tbike\tgarage\t1\nhasa\tbike\twheel\t1.5\n";
        let out = ingest(text, "mem", &v, &RelationMap::default(), &RetrievalConfig::default());
        assert_eq!(out.store.lookup("bike").len(), 3);
        assert_eq!(out.store.lookup("street").len(), 1);
    }

    #[test]
    fn retrieval_orders_by_weight_and_caps() {
        let v = vocab_for(&["bike at location street garage has a wheel"]);
        let text = "atlocation\tbike\tgarage\t1\natlocation\tbike\tstreet\t2\nhasa\tbike\twheel\t1.5\n";
        let store = ingest(text, "mem", &v, &RelationMap::default(), &RetrievalConfig::default()).store;
        let toks = vec!["bike".to_string()];
        let lex = PosLexicon::default();
        let tags = lex.tag(&toks);
        let filter = RetrievalConfig::default().pos_filter;
        assert_eq!(store.retrieve(&toks, &tags, &filter, 30).unwrap(), vec![1, 2, 0]);
        assert_eq!(store.retrieve(&toks, &tags, &filter, 1).unwrap(), vec![1]);
        let none = vec!["the".to_string(), "quickly".to_string()];
        assert!(store.retrieve(&none, &lex.tag(&none), &filter, 30).unwrap().is_empty());
        assert!(store.retrieve(&toks, &[], &filter, 30).is_err());
    }

    #[test]
    fn pos_tagger_rules() {
        let lex = PosLexicon::default();
        assert_eq!(lex.tag_word("bike"), PosTag::Noun);
        assert_eq!(lex.tag_word("running"), PosTag::Verb);
        assert_eq!(lex.tag_word("jumped"), PosTag::Verb);
        assert_eq!(lex.tag_word("softly"), PosTag::Adverb);
        assert_eq!(lex.tag_word("the"), PosTag::Other);
        assert_eq!(lex.tag_word("?"), PosTag::Other);
        let toks: Vec<String> = ["where", "is", "my", "bike"].iter().map(|s| s.to_string()).collect();
        assert_eq!(lex.tag(&toks).len(), toks.len());
        assert_eq!("NNS".parse::<PosTag>().unwrap(), PosTag::Noun);
        assert_eq!("VBD".parse::<PosTag>().unwrap(), PosTag::Verb);
    }
}
