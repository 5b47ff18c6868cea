//! Dataset records and their line-delimited JSON files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoding::{words, Vocabulary};
use crate::error::{Error, Result};
use crate::knowledge::{FactStore, PosLexicon, PosTag, RetrievalConfig};
use crate::matching::Instance;
use crate::mrc::MrcInstance;

/// A context with its candidate responses and binary labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub id: String,
    pub context: Vec<String>,
    pub candidates: Vec<String>,
    pub labels: Vec<u8>,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::Invalid(format!("example {}: empty context", self.id)));
        }
        if self.candidates.len() != self.labels.len() || self.candidates.is_empty() {
            return Err(Error::Invalid(format!(
                "example {}: {} candidates but {} labels",
                self.id,
                self.candidates.len(),
                self.labels.len()
            )));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Invalid(format!("example {}: labels must be 0 or 1", self.id)));
        }
        Ok(())
    }

    /// One packed instance per candidate.
    pub fn instances(&self, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Instance>> {
        let ctx: Vec<Vec<usize>> = self.context.iter().map(|u| vocab.tokenize(u)).collect();
        self.candidates
            .iter()
            .zip(&self.labels)
            .map(|(c, &y)| Instance::new(&self.id, &ctx, &vocab.tokenize(c), y, max_len))
            .collect()
    }
}

/// A dialogue, a question and its answer options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrcExample {
    pub id: String,
    pub utterances: Vec<String>,
    pub question: String,
    pub options: Vec<String>,
    pub answer: usize,
}

impl MrcExample {
    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Invalid(format!("example {}: no utterances", self.id)));
        }
        if self.options.len() < 2 {
            return Err(Error::Invalid(format!("example {}: need at least 2 options", self.id)));
        }
        if self.answer >= self.options.len() {
            return Err(Error::Invalid(format!(
                "example {}: answer {} out of {} options",
                self.id,
                self.answer,
                self.options.len()
            )));
        }
        Ok(())
    }

    /// Tokenizes the example and attaches retrieved knowledge.
    pub fn instance(
        &self,
        vocab: &Vocabulary,
        max_len: usize,
        store: &FactStore,
        lexicon: &PosLexicon,
        cfg: &RetrievalConfig,
    ) -> Result<MrcInstance> {
        let utts: Vec<Vec<usize>> = self.utterances.iter().map(|u| vocab.tokenize(u)).collect();
        let opts: Vec<Vec<usize>> = self.options.iter().map(|o| vocab.tokenize(o)).collect();
        let mut inst = MrcInstance::new(&self.id, &utts, &vocab.tokenize(&self.question), &opts, self.answer, max_len)?;
        let retrieve = |text: &[String], p: usize| -> Result<Vec<usize>> {
            let tags: Vec<PosTag> = lexicon.tag(text);
            store.retrieve(text, &tags, &cfg.pos_filter, p)
        };
        let ctx_words: Vec<String> = self.utterances.iter().flat_map(|u| words(u)).collect();
        inst.context_facts = retrieve(&ctx_words, cfg.top_p)?;
        inst.option_facts = self
            .options
            .iter()
            .map(|o| {
                let mut qa = words(&self.question);
                qa.extend(words(o));
                retrieve(&qa, cfg.qa_top_p)
            })
            .collect::<Result<_>>()?;
        Ok(inst)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dialogues(path: &Path) -> Result<Vec<DialogueExample>> {
    let records: Vec<DialogueExample> = read_jsonl(path)?;
    records.iter().try_for_each(DialogueExample::validate)?;
    Ok(records)
}

pub fn read_mrc(path: &Path) -> Result<Vec<MrcExample>> {
    let records: Vec<MrcExample> = read_jsonl(path)?;
    records.iter().try_for_each(MrcExample::validate)?;
    Ok(records)
}

/// Converts Ubuntu-style `label<TAB>utt1<TAB>…<TAB>response` lines. Each
/// line becomes a single-candidate example; consecutive lines sharing a
/// context are merged into one example.
pub fn convert_ubuntu_tsv(text: &str, origin: &str) -> Result<Vec<DialogueExample>> {
    let mut out: Vec<DialogueExample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: &str| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if fields.len() < 3 {
            return Err(err("expected label, at least one utterance and a response"));
        }
        let label: u8 = match fields[0].trim() {
            "0" => 0,
            "1" => 1,
            _ => return Err(err("label must be 0 or 1")),
        };
        let context: Vec<String> = fields[1..fields.len() - 1].iter().map(|s| s.to_string()).collect();
        let response = fields[fields.len() - 1].to_string();
        match out.last_mut() {
            Some(prev) if prev.context == context => {
                prev.candidates.push(response);
                prev.labels.push(label);
            }
            _ => out.push(DialogueExample {
                id: format!("{origin}:{}", i + 1),
                context,
                candidates: vec![response],
                labels: vec![label],
            }),
        }
    }
    Ok(out)
}

/// Vocabulary over every text field of the given records.
pub fn dialogue_vocab(sets: &[&[DialogueExample]]) -> Vocabulary {
    let texts = sets
        .iter()
        .flat_map(|s| s.iter())
        .flat_map(|e| e.context.iter().chain(&e.candidates));
    Vocabulary::build(texts)
}

pub fn mrc_vocab(sets: &[&[MrcExample]], extra: &[&str]) -> Vocabulary {
    let mut v = Vocabulary::build(
        sets.iter()
            .flat_map(|s| s.iter())
            .flat_map(|e| e.utterances.iter().chain(std::iter::once(&e.question)).chain(&e.options)),
    );
    for text in extra {
        for w in words(text) {
            v.insert(&w);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ubuntu_lines_merge_by_context() {
        let text = "1\thi\thow are you\tfine\n0\thi\thow are you\tbanana\n1\tnew\tok\n";
        let ex = convert_ubuntu_tsv(text, "u").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].candidates, vec!["fine", "banana"]);
        assert_eq!(ex[0].labels, vec![1, 0]);
        assert_eq!(ex[1].context, vec!["new"]);
        assert!(convert_ubuntu_tsv("2\ta\tb\n", "u").is_err());
        assert!(convert_ubuntu_tsv("1\ta\n", "u").is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let ex = vec![DialogueExample {
            id: "a".into(),
            context: vec!["x y".into()],
            candidates: vec!["z".into(), "w".into()],
            labels: vec![1, 0],
        }];
        write_jsonl(&p, &ex).unwrap();
        assert_eq!(read_dialogues(&p).unwrap(), ex);
        std::fs::write(&p, "{\"id\":1}\n").unwrap();
        assert!(matches!(read_dialogues(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation_catches_bad_records() {
        let mut ex = MrcExample {
            id: "m".into(),
            utterances: vec!["a".into()],
            question: "q".into(),
            options: vec!["x".into(), "y".into()],
            answer: 1,
        };
        assert!(ex.validate().is_ok());
        ex.answer = 2;
        assert!(ex.validate().is_err());
    }
}
