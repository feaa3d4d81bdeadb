//! Conflict QA records and their JSON-lines persistence.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{Vocab, SEP};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QARecord {
    pub id: String,
    pub question: Vec<usize>,
    #[serde(default)]
    pub variant: Option<Vec<usize>>,
    pub gold: Vec<usize>,
    #[serde(default)]
    pub documents: Vec<Vec<usize>>,
    /// Per document, per token: `true` on distractor tokens.
    #[serde(default)]
    pub noise_mask: Option<Vec<Vec<bool>>>,
}

impl QARecord {
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::Empty("question"));
        }
        if self.gold.is_empty() {
            return Err(Error::Empty("gold answer"));
        }
        if let Some(v) = &self.variant {
            if v.len() != self.question.len() {
                return Err(Error::InvalidArgument(format!(
                    "record {}: variant has {} tokens, question {}",
                    self.id,
                    v.len(),
                    self.question.len()
                )));
            }
        }
        if let Some(mask) = &self.noise_mask {
            let aligned = mask.len() == self.documents.len()
                && mask.iter().zip(&self.documents).all(|(m, d)| m.len() == d.len());
            if !aligned {
                return Err(Error::InvalidArgument(format!("record {}: noise mask misaligned with documents", self.id)));
            }
        }
        Ok(())
    }

    /// Documents spliced between the question's first token and the rest
    /// of the question, with the span the documents occupy.
    pub fn prompt_with_documents(&self) -> (Vec<usize>, Range<usize>) {
        let docs: Vec<usize> = self.documents.concat();
        let mut prompt = Vec::with_capacity(self.question.len() + docs.len());
        prompt.push(self.question[0]);
        prompt.extend_from_slice(&docs);
        prompt.extend_from_slice(&self.question[1..]);
        (prompt, 1..1 + docs.len())
    }

    pub fn has_noise(&self) -> bool {
        self.noise_mask.as_ref().is_some_and(|m| m.iter().flatten().any(|&b| b))
    }
}

/// Documents per record.
pub const DOCS_PER_RECORD: usize = 2;

/// Templated birthplace questions. Every document states the gold fact;
/// with probability `noise_rate` it also carries a distractor span of two
/// facts about other subjects sharing one wrong place.
pub fn make_conflict_dataset(n_records: usize, vocab: &Vocab, noise_rate: f64, seed: u64) -> Result<Vec<QARecord>> {
    vocab.validate()?;
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::InvalidArgument(format!("noise_rate must lie in [0, 1], got {noise_rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_records);
    for r in 0..n_records {
        let s = rng.random_range(0..vocab.n_subjects);
        let param = vocab.parametric_place(s);
        let places: Vec<usize> = (0..vocab.n_places).filter(|&o| o != param).collect();
        let gold = *places.choose(&mut rng).expect("at least two places");
        let wrong: Vec<usize> = places.iter().copied().filter(|&o| o != gold).collect();
        let distractor = *wrong.choose(&mut rng).expect("at least one wrong place");
        let others: Vec<usize> = (0..vocab.n_subjects).filter(|&x| x != s).collect();

        let mut documents = Vec::with_capacity(DOCS_PER_RECORD);
        let mut masks = Vec::with_capacity(DOCS_PER_RECORD);
        for _ in 0..DOCS_PER_RECORD {
            let noisy = rng.random::<f64>() < noise_rate;
            let mut doc = vec![vocab.fact(s, gold)];
            let mut mask = vec![false];
            if noisy {
                let mut pick = others.clone();
                pick.shuffle(&mut rng);
                let span = [vocab.fact(pick[0], distractor), vocab.fact(pick[1], distractor)];
                if rng.random::<bool>() {
                    doc.splice(0..0, span);
                    mask.splice(0..0, [true, true]);
                } else {
                    doc.extend(span);
                    mask.extend([true, true]);
                }
            }
            doc.push(SEP);
            mask.push(false);
            documents.push(doc);
            masks.push(mask);
        }
        let noise_mask = masks.iter().flatten().any(|&b| b).then_some(masks);
        out.push(QARecord {
            id: format!("q{r:04}"),
            question: vocab.question(s),
            variant: Some(vocab.variant(s)),
            gold: vec![vocab.place(gold)],
            documents,
            noise_mask,
        });
    }
    Ok(out)
}

pub fn to_jsonl(records: &[QARecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

/// Hex sha256 of the JSON-lines serialisation.
pub fn dataset_checksum(records: &[QARecord]) -> String {
    Sha256::digest(to_jsonl(records).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[QARecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(records).as_bytes())?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<QARecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QARecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}
