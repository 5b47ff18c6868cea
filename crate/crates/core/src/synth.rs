//! Synthetic corpora with known structure: topic-planted pivots for
//! response selection and location questions that only a stored triple
//! can answer.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DialogueExample, MrcExample};
use crate::error::{Error, Result};
use crate::seeding;

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable pseudo-word for `i`, distinct per index.
pub fn nonce_word(prefix: &str, i: usize) -> String {
    let mut s = prefix.to_string();
    let mut x = i;
    loop {
        s.push_str(ONSETS[x % ONSETS.len()]);
        x /= ONSETS.len();
        s.push_str(VOWELS[x % VOWELS.len()]);
        x /= VOWELS.len();
        if x == 0 {
            break;
        }
        x -= 1;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpec {
    pub topics: usize,
    pub words_per_topic: usize,
    /// Words of a topic planted together, in every utterance and candidate.
    pub topic_tokens: usize,
    pub context_fillers: usize,
    pub response_fillers: usize,
    /// Utterances per context.
    pub n: usize,
    /// Utterances carrying the hidden topic token.
    pub pivot_count: usize,
    /// Non-pivot utterances carry words of other topics instead of fillers only.
    pub distractor_topics: bool,
    pub candidates: usize,
    pub utterance_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ResponseSpec {
    fn default() -> Self {
        Self {
            topics: 4,
            words_per_topic: 3,
            topic_tokens: 3,
            context_fillers: 30,
            response_fillers: 20,
            n: 6,
            pivot_count: 1,
            distractor_topics: false,
            candidates: 2,
            utterance_len: 5,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 13,
        }
    }
}

impl ResponseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pivot_count == 0 || self.pivot_count > self.n {
            return Err(Error::Invalid(format!(
                "pivot count {} must be in 1..={}",
                self.pivot_count, self.n
            )));
        }
        if self.candidates < 2 || self.topic_tokens == 0 || self.topic_tokens > self.words_per_topic {
            return Err(Error::Invalid("need >= 2 candidates and 1 <= topic_tokens <= words_per_topic".into()));
        }
        if self.utterance_len <= self.topic_tokens {
            return Err(Error::Invalid("utterance_len must exceed topic_tokens".into()));
        }
        // Distractor utterances and negatives each need a topic of their own.
        let needed = 1 + self.distractor_utterances() + (self.candidates - 1);
        if self.topics < needed || self.context_fillers == 0 || self.response_fillers == 0 {
            return Err(Error::Invalid(format!(
                "{} topics cannot cover {needed} distinct topics per example",
                self.topics
            )));
        }
        Ok(())
    }

    fn distractor_utterances(&self) -> usize {
        if self.distractor_topics {
            self.n - self.pivot_count
        } else {
            0
        }
    }

    fn topic_word(&self, topic: usize, k: usize) -> String {
        nonce_word("", topic * self.words_per_topic + k)
    }

    /// `topic_tokens` distinct words of `topic`.
    fn topic_words(&self, topic: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        rand::seq::index::sample(rng, self.words_per_topic, self.topic_tokens)
            .into_iter()
            .map(|k| self.topic_word(topic, k))
            .collect()
    }

    fn context_filler(&self, i: usize) -> String {
        nonce_word("c", i)
    }

    fn response_filler(&self, i: usize) -> String {
        nonce_word("r", i)
    }
}

/// Train/dev/test splits plus where the planted pivots sit.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseCorpus {
    pub train: Vec<DialogueExample>,
    pub dev: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
    /// Example id → planted utterance indices.
    pub pivots: HashMap<String, Vec<usize>>,
}

pub fn gen_response_corpus(spec: &ResponseSpec) -> Result<ResponseCorpus> {
    spec.validate()?;
    let mut pivots = HashMap::new();
    let mut split = |name: &str, count: usize| {
        let mut rng = seeding::rng(seeding::derive(spec.seed, name));
        (0..count)
            .map(|i| {
                let id = format!("{name}-{i}");
                let (ex, p) = response_example(spec, &id, &mut rng);
                pivots.insert(id, p);
                ex
            })
            .collect::<Vec<_>>()
    };
    let train = split("train", spec.train);
    let dev = split("dev", spec.dev);
    let test = split("test", spec.test);
    Ok(ResponseCorpus { train, dev, test, pivots })
}

fn sentence(rng: &mut ChaCha8Rng, len: usize, keys: &[String], filler: impl Fn(usize) -> String, pool: usize) -> String {
    let mut toks: Vec<String> = (0..len - keys.len()).map(|_| filler(rng.random_range(0..pool))).collect();
    for k in keys {
        let at = rng.random_range(0..=toks.len());
        toks.insert(at, k.clone());
    }
    toks.join(" ")
}

fn response_example(spec: &ResponseSpec, id: &str, rng: &mut ChaCha8Rng) -> (DialogueExample, Vec<usize>) {
    let mut topics: Vec<usize> = (0..spec.topics).collect();
    topics.shuffle(rng);
    let hidden = topics[0];
    let k = spec.distractor_utterances();
    let distractors = &topics[1..1 + k];
    let negatives = &topics[1 + k..k + spec.candidates];
    let key = spec.topic_words(hidden, rng);

    let mut slots: Vec<usize> = (0..spec.n).collect();
    slots.shuffle(rng);
    let mut planted: Vec<usize> = slots[..spec.pivot_count].to_vec();
    planted.sort_unstable();

    let mut d = distractors.iter();
    let context = (0..spec.n)
        .map(|u| {
            let words = if planted.contains(&u) {
                key.clone()
            } else if spec.distractor_topics {
                let t = *d.next().expect("enough distractor topics");
                spec.topic_words(t, rng)
            } else {
                Vec::new()
            };
            sentence(rng, spec.utterance_len, &words, |i| spec.context_filler(i), spec.context_fillers)
        })
        .collect();

    let mut candidates = vec![sentence(rng, spec.utterance_len, &key, |i| spec.response_filler(i), spec.response_fillers)];
    for &t in negatives {
        let w = spec.topic_words(t, rng);
        candidates.push(sentence(rng, spec.utterance_len, &w, |i| spec.response_filler(i), spec.response_fillers));
    }
    let mut labels = vec![0u8; candidates.len()];
    labels[0] = 1;
    // Shuffle so the positive is not always first.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    let ex = DialogueExample {
        id: id.to_string(),
        context,
        candidates: order.iter().map(|&i| candidates[i].clone()).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
    };
    (ex, planted)
}

/// One weighted knowledge triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub relation: String,
    pub head: String,
    pub tail: String,
    pub weight: f64,
}

pub fn triples_to_tsv(triples: &[Triple]) -> String {
    let mut s = String::from("# relation\thead\ttail\tweight\n");
    for t in triples {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", t.relation, t.head, t.tail, t.weight));
    }
    s
}

pub const LOCATIONS: [&str; 12] = [
    "street", "garage", "kitchen", "park", "office", "school", "library", "station", "market", "beach", "farm", "airport",
];

const MENTIONS: [&str; 4] = [
    "i left the {} there yesterday",
    "have you seen my {} today",
    "the {} was a gift from my sister",
    "we should clean the {} soon",
];

const FILLERS: [&str; 6] = [
    "that sounds good to me",
    "see you later then",
    "i am not sure about that",
    "thanks for letting me know",
    "maybe we can talk tomorrow",
    "ok let me check",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrcSpec {
    /// Entities per split; splits never share entities.
    pub entities: usize,
    pub utterances: usize,
    pub options: usize,
    /// Other entities mentioned in the dialogue besides the asked one.
    pub distractor_entities: usize,
    /// When false the location is also stated in the dialogue.
    pub knowledge_dependent: bool,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for MrcSpec {
    fn default() -> Self {
        Self {
            entities: 200,
            utterances: 4,
            options: 3,
            distractor_entities: 1,
            knowledge_dependent: true,
            train: 500,
            dev: 200,
            test: 200,
            seed: 17,
        }
    }
}

impl MrcSpec {
    pub fn validate(&self) -> Result<()> {
        if self.options < 2 || self.options > LOCATIONS.len() {
            return Err(Error::Invalid(format!("options must be in 2..={}", LOCATIONS.len())));
        }
        if self.utterances < 1 + self.distractor_entities {
            return Err(Error::Invalid("not enough utterances for the mentioned entities".into()));
        }
        if self.entities < 1 + self.distractor_entities {
            return Err(Error::Invalid("entity pool too small".into()));
        }
        Ok(())
    }
}

/// Knowledge graph and entity pools shared by all splits.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcWorld {
    pub triples: Vec<Triple>,
    pub splits: [Vec<String>; 3],
}

/// Builds the entity pools and their triples: one `atlocation` fact of
/// weight 2 per entity, one misleading fact below the retention threshold,
/// and the `{atlocation, bike, street}` fact, in shuffled order.
pub fn gen_mrc_world(spec: &MrcSpec) -> Result<MrcWorld> {
    spec.validate()?;
    let mut rng = seeding::rng(seeding::derive(spec.seed, "world"));
    let mut names = vec!["bike".to_string()];
    names.extend((0..3 * spec.entities - 1).map(|i| nonce_word("e", i)));
    let mut triples = Vec::new();
    for (i, e) in names.iter().enumerate() {
        let loc = if i == 0 { 0 } else { rng.random_range(0..LOCATIONS.len()) };
        let wrong = (loc + 1 + rng.random_range(0..LOCATIONS.len() - 1)) % LOCATIONS.len();
        triples.push(Triple {
            relation: "atlocation".into(),
            head: e.clone(),
            tail: LOCATIONS[loc].into(),
            weight: 2.0,
        });
        triples.push(Triple {
            relation: "atlocation".into(),
            head: e.clone(),
            tail: LOCATIONS[wrong].into(),
            weight: 0.5,
        });
    }
    // Interleave the splits so ingestion order (the retrieval tie-break)
    // does not favour one of them.
    triples.shuffle(&mut rng);
    let n = spec.entities;
    let splits = [names[..n].to_vec(), names[n..2 * n].to_vec(), names[2 * n..].to_vec()];
    Ok(MrcWorld { triples, splits })
}

/// Location of each entity among retained (weight ≥ `threshold`) facts.
pub fn locations(triples: &[Triple], threshold: f64) -> HashMap<String, String> {
    let mut best: HashMap<String, (f64, String)> = HashMap::new();
    for t in triples.iter().filter(|t| t.relation == "atlocation" && t.weight >= threshold) {
        let e = best.entry(t.head.clone()).or_insert((f64::NEG_INFINITY, String::new()));
        if t.weight > e.0 {
            *e = (t.weight, t.tail.clone());
        }
    }
    best.into_iter().map(|(k, (_, v))| (k, v)).collect()
}

/// "where is the X" examples over `entities`, gold = location of X.
pub fn gen_mrc_corpus(spec: &MrcSpec, triples: &[Triple], entities: &[String], count: usize, split: &str) -> Result<Vec<MrcExample>> {
    spec.validate()?;
    let loc = locations(triples, 1.0);
    if let Some(e) = entities.iter().find(|e| !loc.contains_key(*e)) {
        return Err(Error::Invalid(format!("entity {e:?} has no location fact")));
    }
    let mut rng = seeding::rng(seeding::derive(spec.seed, split));
    (0..count)
        .map(|i| {
            let mentioned: Vec<&String> = entities.choose_multiple(&mut rng, 1 + spec.distractor_entities).collect();
            let asked = mentioned[0];
            let gold = loc[asked].clone();

            let mut slots: Vec<usize> = (0..spec.utterances).collect();
            slots.shuffle(&mut rng);
            let mut utterances: Vec<String> = (0..spec.utterances)
                .map(|_| FILLERS.choose(&mut rng).expect("fillers").to_string())
                .collect();
            for (e, &slot) in mentioned.iter().zip(&slots) {
                let t = MENTIONS.choose(&mut rng).expect("templates");
                utterances[slot] = t.replace("{}", e);
                if !spec.knowledge_dependent {
                    utterances[slot].push_str(&format!(" it is at the {}", loc[*e]));
                }
            }

            // Other mentioned entities' locations come first as distractors.
            let mut options = vec![gold.clone()];
            let mut seen: HashSet<String> = HashSet::from([gold.clone()]);
            for e in &mentioned[1..] {
                if options.len() < spec.options && seen.insert(loc[*e].clone()) {
                    options.push(loc[*e].clone());
                }
            }
            let mut rest: Vec<&str> = LOCATIONS.iter().copied().filter(|l| !seen.contains(*l)).collect();
            rest.shuffle(&mut rng);
            options.extend(rest.iter().take(spec.options - options.len()).map(|s| s.to_string()));
            let answer = rng.random_range(0..spec.options);
            options.swap(0, answer);

            Ok(MrcExample {
                id: format!("{split}-{i}"),
                utterances,
                question: format!("where is the {asked} ?"),
                options,
                answer,
            })
        })
        .collect()
}

/// The three MRC splits over a fresh world.
pub fn gen_mrc_splits(spec: &MrcSpec) -> Result<(MrcWorld, [Vec<MrcExample>; 3])> {
    let world = gen_mrc_world(spec)?;
    let train = gen_mrc_corpus(spec, &world.triples, &world.splits[0], spec.train, "train")?;
    let dev = gen_mrc_corpus(spec, &world.triples, &world.splits[1], spec.dev, "dev")?;
    let test = gen_mrc_corpus(spec, &world.triples, &world.splits[2], spec.test, "test")?;
    Ok((world, [train, dev, test]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::words;

    #[test]
    fn nonce_words_are_distinct() {
        let w: HashSet<String> = (0..5000).map(|i| nonce_word("", i)).collect();
        assert_eq!(w.len(), 5000);
    }

    #[test]
    fn single_pivot_is_the_only_overlap() {
        let spec = ResponseSpec {
            train: 50,
            dev: 0,
            test: 0,
            ..ResponseSpec::default()
        };
        let c = gen_response_corpus(&spec).unwrap();
        for ex in &c.train {
            assert_eq!(ex.labels.iter().filter(|&&y| y == 1).count(), 1);
            let pos = ex.labels.iter().position(|&y| y == 1).unwrap();
            let resp: HashSet<String> = words(&ex.candidates[pos]).into_iter().collect();
            let sharing: Vec<usize> = (0..ex.context.len())
                .filter(|&u| words(&ex.context[u]).iter().any(|w| resp.contains(w)))
                .collect();
            assert_eq!(sharing, c.pivots[&ex.id]);
        }
    }

    #[test]
    fn mrc_gold_comes_from_the_store() {
        let spec = MrcSpec::default();
        let (world, [train, ..]) = gen_mrc_splits(&spec).unwrap();
        let loc = locations(&world.triples, 1.0);
        assert_eq!(loc["bike"], "street");
        for ex in &train {
            let asked = ex.question.split(' ').nth(3).unwrap();
            assert_eq!(ex.options[ex.answer], loc[asked]);
            let dialogue: Vec<String> = ex.utterances.iter().flat_map(|u| words(u)).collect();
            assert!(!dialogue.contains(&ex.options[ex.answer]));
        }
        let bad = gen_mrc_corpus(&spec, &world.triples, &["nothing".to_string()], 1, "x");
        assert!(bad.is_err());
    }
}
