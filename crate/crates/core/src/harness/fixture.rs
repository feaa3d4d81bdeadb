//! A hand-wired host model with planted layer roles.
//!
//! Every token embedding is a sum of orthonormal feature directions, and
//! each block reads and writes those directions:
//!
//! - layers 0 and 1 (redundant copies): head 0 copies the question subject
//!   to later positions, head 1 marks positions that follow a document;
//! - layer 2: empty;
//! - layer 3 (key layer): head 0 looks up facts about the question subject
//!   and writes their place;
//! - layer 4 (offset layer): head 0 attends to facts about *other*
//!   subjects and writes their place; its feed-forward block writes a
//!   fixed wrong place for bare `born` questions without documents;
//! - layer 5: empty.

use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BORN, BOS, SEP};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::Matrix;

pub const FIXTURE_LAYERS: usize = 6;
pub const FIXTURE_KEY_LAYER: usize = 3;
pub const FIXTURE_OFFSET_LAYER: usize = 4;

/// Feature directions. Feature `k` is `(e_{2k} − e_{2k+1}) / √2`, so every
/// combination has zero mean and survives layer-norm centring.
struct Features {
    v: Vocab,
}

const SINK: usize = 0;
const CONST: usize = 1;
const SUBJ: usize = 2;
const FACT: usize = 3;
const DOC: usize = 4;
const FUNCTION: usize = 5;

impl Features {
    fn function(&self, token: usize) -> usize {
        FUNCTION + token
    }
    fn subject(&self, s: usize) -> usize {
        FUNCTION + 8 + s
    }
    fn fact_subject(&self, s: usize) -> usize {
        self.subject(0) + self.v.n_subjects + s
    }
    fn fact_place(&self, o: usize) -> usize {
        self.fact_subject(0) + self.v.n_subjects + o
    }
    fn context_subject(&self, s: usize) -> usize {
        self.fact_place(0) + self.v.n_places + s
    }
    fn place(&self, o: usize) -> usize {
        self.context_subject(0) + self.v.n_subjects + o
    }
    fn count(&self) -> usize {
        self.place(0) + self.v.n_places
    }
}

/// Add `scale · u_f` to row `r` of `m`.
fn put(m: &mut Matrix, r: usize, f: usize, scale: f64) {
    let a = scale / std::f64::consts::SQRT_2;
    let row = m.row_mut(r);
    row[2 * f] += a;
    row[2 * f + 1] -= a;
}

/// `W += s · u_f ⊗ e_c`: reads feature `f` into column `c`.
fn read(w: &mut Matrix, f: usize, c: usize, s: f64) {
    let a = s / std::f64::consts::SQRT_2;
    let cols = w.cols();
    w.data_mut()[2 * f * cols + c] += a;
    w.data_mut()[(2 * f + 1) * cols + c] -= a;
}

/// `W += s · e_r ⊗ u_f`: writes row `r` into feature `f`.
fn write(w: &mut Matrix, r: usize, f: usize, s: f64) {
    put(w, r, f, s);
}

/// Magnitudes of the planted circuits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureKnobs {
    pub const_amp: f64,
    pub place_emb: f64,
    /// Amplitude of the place feature inside fact tokens.
    pub fact_place: f64,
    /// Query-key gain of the subject copy and document marker heads.
    pub gather_score: f64,
    pub gather_sink: f64,
    pub gather_out: f64,
    pub doc_out: f64,
    pub key_score: f64,
    pub key_sink: f64,
    pub key_out: f64,
    pub offset_score: f64,
    pub offset_sink: f64,
    pub offset_out: f64,
    pub param_in: f64,
    pub param_threshold: f64,
    pub param_doc: f64,
    pub param_out: f64,
}

impl Default for FixtureKnobs {
    fn default() -> Self {
        FixtureKnobs {
            const_amp: 3.0,
            place_emb: 3.0,
            fact_place: 3.0,
            gather_score: 4.0,
            gather_sink: 2.0,
            gather_out: 0.5,
            doc_out: 0.5,
            key_score: 36.0,
            key_sink: 2.0,
            key_out: 0.383,
            offset_score: 36.0,
            offset_sink: 2.0,
            offset_out: 0.317,
            param_in: 4.0,
            param_threshold: 37.0,
            param_doc: 10.0,
            param_out: 0.6,
        }
    }
}

pub fn fixture_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        n_layers: FIXTURE_LAYERS,
        n_heads: 2,
        d_model: 128,
        d_ff: 16,
        vocab_size: vocab.size(),
        max_seq: 32,
        seed: 0,
    }
}

/// Builds the planted model. Weights are rounded to f32 so the model
/// survives a checkpoint round trip unchanged.
pub fn fixture_model(vocab: &Vocab, k: &FixtureKnobs) -> Result<Model> {
    vocab.validate()?;
    let f = Features { v: *vocab };
    let config = fixture_config(vocab);
    if 2 * f.count() > config.d_model || vocab.n_subjects > config.d_ff || vocab.n_places + 10 > config.d_head() {
        return Err(Error::InvalidArgument(format!(
            "vocab with {} subjects and {} places does not fit the fixture width",
            vocab.n_subjects, vocab.n_places
        )));
    }
    let mut m = Model::zeroed(config)?;
    let dh = m.config.d_head();

    for t in 0..vocab.size() {
        put(&mut m.tok_emb, t, CONST, k.const_amp);
    }
    for t in 0..8 {
        put(&mut m.tok_emb, t, f.function(t), 1.0);
    }
    put(&mut m.tok_emb, BOS, SINK, 1.0);
    for s in 0..vocab.n_subjects {
        put(&mut m.tok_emb, vocab.subject(s), SUBJ, 1.0);
        put(&mut m.tok_emb, vocab.subject(s), f.subject(s), 1.0);
    }
    for o in 0..vocab.n_places {
        put(&mut m.tok_emb, vocab.place(o), f.place(o), k.place_emb);
    }
    for s in 0..vocab.n_subjects {
        for o in 0..vocab.n_places {
            let t = vocab.fact(s, o);
            put(&mut m.tok_emb, t, FACT, 1.0);
            put(&mut m.tok_emb, t, f.fact_subject(s), 1.0);
            put(&mut m.tok_emb, t, f.fact_place(o), k.fact_place);
        }
    }

    // Head-local columns: 0 baseline, 1 match, 2.. subjects or places.
    let (base, mtch, slot) = (0, 1, 2);

    for l in [0, 1] {
        let w = &mut m.layers[l];
        // Head 0: copy the subject.
        read(&mut w.wq, CONST, base, k.gather_score);
        read(&mut w.wk, SUBJ, base, 2.0);
        read(&mut w.wk, SINK, base, 2.0 * k.gather_sink / k.gather_score);
        for s in 0..vocab.n_subjects {
            read(&mut w.wv, f.subject(s), slot + s, 1.0);
            write(&mut w.wo, slot + s, f.context_subject(s), k.gather_out);
        }
        // Head 1: mark positions after a document separator.
        read(&mut w.wq, CONST, dh + base, k.gather_score);
        read(&mut w.wk, f.function(SEP), dh + base, 2.0);
        read(&mut w.wk, SINK, dh + base, 2.0 * k.gather_sink / k.gather_score);
        read(&mut w.wv, f.function(SEP), dh + slot, 1.0);
        write(&mut w.wo, dh + slot, DOC, k.doc_out);
    }

    {
        let w = &mut m.layers[FIXTURE_KEY_LAYER];
        read(&mut w.wq, CONST, base, k.key_sink);
        read(&mut w.wk, SINK, base, 1.0);
        for s in 0..vocab.n_subjects {
            read(&mut w.wq, f.context_subject(s), slot + s, k.key_score);
            read(&mut w.wk, f.fact_subject(s), slot + s, 1.0);
        }
        for o in 0..vocab.n_places {
            read(&mut w.wv, f.fact_place(o), slot + o, 1.0);
            write(&mut w.wo, slot + o, f.place(o), k.key_out);
        }
    }

    {
        let w = &mut m.layers[FIXTURE_OFFSET_LAYER];
        read(&mut w.wq, CONST, base, k.offset_sink);
        read(&mut w.wk, SINK, base, 1.0);
        read(&mut w.wk, FACT, mtch, 1.0);
        for s in 0..vocab.n_subjects {
            read(&mut w.wq, f.context_subject(s), mtch, k.offset_score);
            read(&mut w.wq, f.context_subject(s), slot + s, k.offset_score);
            read(&mut w.wk, f.fact_subject(s), slot + s, -2.0);
        }
        for o in 0..vocab.n_places {
            read(&mut w.wv, f.fact_place(o), slot + o, 1.0);
            write(&mut w.wo, slot + o, f.place(o), k.offset_out);
        }
        // Parametric recall: unit s fires on `born` with subject s and no
        // document in view.
        for s in 0..vocab.n_subjects {
            read(&mut w.w1, f.function(BORN), s, k.param_in);
            read(&mut w.w1, f.context_subject(s), s, k.param_in);
            read(&mut w.w1, DOC, s, -k.param_doc);
            w.b1.data_mut()[s] = -k.param_threshold;
            write(&mut w.w2, s, f.place(vocab.parametric_place(s)), k.param_out);
        }
    }

    m.round_to_f32();
    Ok(m)
}
