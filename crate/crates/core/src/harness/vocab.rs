//! Closed word-level vocabulary for the birthplace template grammar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUBJECT_NAMES: [&str; 8] = ["ada", "bo", "cyd", "dora", "eli", "fay", "gus", "hal"];
const PLACE_NAMES: [&str; 8] = ["paris", "rome", "oslo", "lima", "cairo", "delhi", "quito", "perth"];

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const WHERE: usize = 4;
pub const WAS: usize = 5;
pub const BORN: usize = 6;
/// Paraphrase of `born` used by question variants.
pub const BIRTHPLACE: usize = 7;
const N_FUNCTION: usize = 8;
const FUNCTION_NAMES: [&str; N_FUNCTION] = ["<pad>", "<bos>", "<eos>", "<sep>", "where", "was", "born", "birthplace"];

/// Function words, then subjects, then places, then one fact token per
/// `(subject, place)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_subjects: usize,
    pub n_places: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { n_subjects: 8, n_places: 8 }
    }
}

impl Vocab {
    pub fn new(n_subjects: usize, n_places: usize) -> Result<Self> {
        let v = Vocab { n_subjects, n_places };
        v.validate()?;
        Ok(v)
    }

    /// Templates need a gold subject plus two distractor subjects, and
    /// three distinct places.
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 3 || self.n_places < 3 {
            return Err(Error::InvalidArgument(format!(
                "vocab too small for templates: {} subjects, {} places (need 3 of each)",
                self.n_subjects, self.n_places
            )));
        }
        if self.size() > 512 {
            return Err(Error::InvalidArgument(format!("vocab of {} symbols exceeds 512", self.size())));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        N_FUNCTION + self.n_subjects + self.n_places + self.n_subjects * self.n_places
    }

    pub fn subject(&self, s: usize) -> usize {
        debug_assert!(s < self.n_subjects);
        N_FUNCTION + s
    }

    pub fn place(&self, o: usize) -> usize {
        debug_assert!(o < self.n_places);
        N_FUNCTION + self.n_subjects + o
    }

    pub fn fact(&self, s: usize, o: usize) -> usize {
        debug_assert!(s < self.n_subjects && o < self.n_places);
        N_FUNCTION + self.n_subjects + self.n_places + s * self.n_places + o
    }

    /// Place index of a place token.
    pub fn place_of(&self, token: usize) -> Option<usize> {
        let start = N_FUNCTION + self.n_subjects;
        (start..start + self.n_places).contains(&token).then(|| token - start)
    }

    /// The place the host model believes, wrongly, to be the subject's
    /// birthplace when no documents are given.
    pub fn parametric_place(&self, s: usize) -> usize {
        (s + 1) % self.n_places
    }

    pub fn question(&self, s: usize) -> Vec<usize> {
        vec![BOS, WHERE, WAS, self.subject(s), BORN]
    }

    pub fn variant(&self, s: usize) -> Vec<usize> {
        vec![BOS, WHERE, WAS, self.subject(s), BIRTHPLACE]
    }

    pub fn name(&self, token: usize) -> String {
        let subj = N_FUNCTION;
        let place = subj + self.n_subjects;
        let fact = place + self.n_places;
        let named = |names: &[&str], i: usize, prefix: &str| {
            names.get(i).map(|n| n.to_string()).unwrap_or_else(|| format!("{prefix}{i}"))
        };
        if token < N_FUNCTION {
            FUNCTION_NAMES[token].to_string()
        } else if token < place {
            named(&SUBJECT_NAMES, token - subj, "subject")
        } else if token < fact {
            named(&PLACE_NAMES, token - place, "place")
        } else if token < self.size() {
            let k = token - fact;
            let (s, o) = (k / self.n_places, k % self.n_places);
            format!(
                "{}@{}",
                named(&SUBJECT_NAMES, s, "subject"),
                named(&PLACE_NAMES, o, "place")
            )
        } else {
            format!("<{token}>")
        }
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}
