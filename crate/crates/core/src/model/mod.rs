//! Decoder-only transformer host.
//!
//! Pre-norm blocks (`h += Attn(LN₁ h)`, `h += FFN(LN₂ h)`), learned
//! positional embeddings, causal multi-head attention, ReLU feed-forward,
//! final layer norm and an unembedding tied to the token embedding.
//! Row-vector convention throughout: activations are `seq × d_model` and a
//! projection is `x · W`.

mod checkpoint;
mod generate;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::ProbVector;
use crate::dssp::{dssp_forward_on, DsspParams, DsspVars};
use crate::error::{Error, Result};
use crate::numeric::kernels::{layer_norm_rows, matmul_nt, softmax_rows};
use crate::numeric::{Mask, Matrix, Tape, Var};

pub use generate::GenerateSpec;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one block. Gains and biases are `1 × n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

pub(crate) const LAYER_TENSORS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
];

impl LayerWeights {
    fn zeros(d: usize, ff: usize) -> Self {
        LayerWeights {
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, ff),
            b1: Matrix::zeros(1, ff),
            w2: Matrix::zeros(ff, d),
            b2: Matrix::zeros(1, d),
        }
    }

    pub(crate) fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Token plus positional embeddings, the input of layer 0.
    pub embeddings: Matrix,
    /// Residual stream after each layer.
    pub hidden: Vec<Matrix>,
    /// `attention[layer][head]`, each `seq × seq` and row-stochastic. A
    /// skipped layer records identity matrices.
    pub attention: Vec<Vec<Matrix>>,
    pub logits: Matrix,
}

impl ForwardTrace {
    /// Residual stream entering `layer`.
    pub fn layer_input(&self, layer: usize) -> &Matrix {
        if layer == 0 {
            &self.embeddings
        } else {
            &self.hidden[layer - 1]
        }
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Per-layer next-token distributions at the last position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layers: Vec<ProbVector>,
}

/// Replaces the attention step of `layer` by the mixed-attention module
/// over `external`.
#[derive(Clone, Copy, Debug)]
pub struct DsspHook<'h> {
    pub layer: usize,
    pub params: &'h DsspParams,
    pub external: &'h Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'h> {
    pub skip_layers: BTreeSet<usize>,
    pub dssp_hook: Option<DsspHook<'h>>,
}

impl ForwardOptions<'_> {
    pub fn skipping(layers: impl IntoIterator<Item = usize>) -> Self {
        ForwardOptions {
            skip_layers: layers.into_iter().collect(),
            dssp_hook: None,
        }
    }
}

/// A hook whose tensors already live on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeHook {
    pub layer: usize,
    pub params: DsspVars,
    pub external: Var,
}

/// Nodes produced by [`Model::forward_on`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub embeddings: Var,
    pub hidden: Vec<Var>,
    pub attention: Vec<Vec<Matrix>>,
    pub logits: Var,
    /// Trainable host weights in [`Model::host_tensors_mut`] order, empty
    /// when the host is frozen.
    pub host_params: Vec<Var>,
}

#[derive(Clone, Copy)]
struct LayerVars {
    t: [Var; 12],
}

impl LayerVars {
    fn ln1(&self) -> (Var, Var) {
        (self.t[0], self.t[1])
    }
    fn qkvo(&self) -> [Var; 4] {
        [self.t[2], self.t[3], self.t[4], self.t[5]]
    }
    fn ln2(&self) -> (Var, Var) {
        (self.t[6], self.t[7])
    }
    fn ffn(&self) -> [Var; 4] {
        [self.t[8], self.t[9], self.t[10], self.t[11]]
    }
}

impl Model {
    /// All-zero weights with unit layer-norm gains: every block is the
    /// identity and the logits are the tied readout of the embeddings.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, ff) = (config.d_model, config.d_ff);
        Ok(Model {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq, d),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(d, ff)).collect(),
            lnf_gain: Matrix::filled(1, d, 1.0),
            lnf_bias: Matrix::zeros(1, d),
            config,
        })
    }

    /// Seeded `N(0, 0.02²)` initialisation of every projection and
    /// embedding.
    pub fn random(config: ModelConfig) -> Result<Self> {
        let mut m = Model::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(m.config.seed);
        let sd = 0.02;
        m.tok_emb = Matrix::random_normal(m.tok_emb.rows(), m.tok_emb.cols(), sd, &mut rng);
        m.pos_emb = Matrix::random_normal(m.pos_emb.rows(), m.pos_emb.cols(), sd, &mut rng);
        for l in &mut m.layers {
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                *w = Matrix::random_normal(w.rows(), w.cols(), sd, &mut rng);
            }
        }
        Ok(m)
    }

    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Block weights and the final norm, the host tensors that training may
    /// update. Embeddings stay frozen.
    pub fn host_tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    fn register_layers<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                t: l.tensors().map(|m| if trainable { tape.param_ref(m) } else { tape.constant(m) }),
            })
            .collect()
    }

    /// Records the full forward pass on `tape`. Host weights are constants
    /// unless `host_trainable`.
    pub fn forward_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[usize],
        skip_layers: &BTreeSet<usize>,
        hook: Option<TapeHook>,
        host_trainable: bool,
    ) -> Result<TapeForward> {
        self.validate_tokens(tokens)?;
        let n_layers = self.config.n_layers;
        if let Some(&l) = skip_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::InvalidArgument(format!("skip layer {l} >= n_layers {n_layers}")));
        }
        if let Some(h) = hook {
            if h.layer >= n_layers {
                return Err(Error::InvalidArgument(format!("hook layer {} >= n_layers {n_layers}", h.layer)));
            }
        }
        let n = tokens.len();
        let d = self.config.d_model;

        let tok = self.tok_emb.select_rows(tokens)?;
        let pos = self.pos_emb.select_rows(&(0..n).collect::<Vec<_>>())?;
        let tok = tape.constant_owned(tok);
        let pos = tape.constant_owned(pos);
        let emb = tape.add(tok, pos)?;

        let layer_vars = self.register_layers(tape, host_trainable);
        let mut h = emb;
        let mut hidden = Vec::with_capacity(n_layers);
        let mut attention = Vec::with_capacity(n_layers);
        for (l, lv) in layer_vars.iter().enumerate() {
            if skip_layers.contains(&l) {
                hidden.push(h);
                attention.push(vec![Matrix::identity(n); self.config.n_heads]);
                continue;
            }
            let (g1, b1) = lv.ln1();
            let x = tape.layer_norm_rows(h, g1, b1, LN_EPS)?;
            let (attn_out, probs) = self.attention_on(tape, x, lv.qkvo())?;
            attention.push(probs);
            h = match hook {
                Some(hk) if hk.layer == l => dssp_forward_on(tape, &hk.params, h, hk.external)?,
                _ => tape.add(h, attn_out)?,
            };
            let (g2, b2) = lv.ln2();
            let x = tape.layer_norm_rows(h, g2, b2, LN_EPS)?;
            let [w1, bb1, w2, bb2] = lv.ffn();
            let f = tape.matmul(x, w1)?;
            let f = tape.add_row(f, bb1)?;
            let f = tape.relu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, bb2)?;
            h = tape.add(h, f)?;
            hidden.push(h);
        }
        debug_assert_eq!(tape.shape(h), (n, d));
        let (gf, bf) = if host_trainable {
            (tape.param_ref(&self.lnf_gain), tape.param_ref(&self.lnf_bias))
        } else {
            (tape.constant(&self.lnf_gain), tape.constant(&self.lnf_bias))
        };
        let z = tape.layer_norm_rows(h, gf, bf, LN_EPS)?;
        let e = tape.constant(&self.tok_emb);
        let logits = tape.matmul_nt(z, e)?;
        let host_params = if host_trainable {
            layer_vars.iter().flat_map(|lv| lv.t).chain([gf, bf]).collect()
        } else {
            Vec::new()
        };
        Ok(TapeForward {
            embeddings: emb,
            hidden,
            attention,
            logits,
            host_params,
        })
    }

    fn attention_on(&self, tape: &mut Tape<'_>, x: Var, [wq, wk, wv, wo]: [Var; 4]) -> Result<(Var, Vec<Matrix>)> {
        let dh = self.config.d_head();
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut probs = Vec::with_capacity(self.config.n_heads);
        for hd in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let a = tape.softmax_rows(s, 1.0 / (dh as f64).sqrt(), Some(&Mask::Causal))?;
            probs.push(tape.value(a).clone());
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        Ok((tape.matmul(cat, wo)?, probs))
    }

    pub fn forward(&self, tokens: &[usize], opts: &ForwardOptions<'_>) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let hook = match opts.dssp_hook {
            Some(h) => {
                if h.params.d_model() != self.config.d_model {
                    return Err(Error::shape(
                        "dssp hook",
                        format!("module width {} vs model {}", h.params.d_model(), self.config.d_model),
                    ));
                }
                let params = h.params.register(&mut tape, false);
                let external = tape.constant(h.external);
                Some(TapeHook {
                    layer: h.layer,
                    params,
                    external,
                })
            }
            None => None,
        };
        let out = self.forward_on(&mut tape, tokens, &opts.skip_layers, hook, false)?;
        Ok(ForwardTrace {
            embeddings: tape.value(out.embeddings).clone(),
            hidden: out.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            attention: out.attention,
            logits: tape.value(out.logits).clone(),
        })
    }

    /// Final norm plus tied unembedding applied to every row of `h`.
    pub fn readout(&self, h: &Matrix) -> Result<Matrix> {
        let z = layer_norm_rows(h, self.lnf_gain.as_slice(), self.lnf_bias.as_slice(), LN_EPS)?;
        matmul_nt(&z, &self.tok_emb)
    }

    /// Softmax of the final-position logits.
    pub fn next_token_distribution(&self, trace: &ForwardTrace) -> Result<ProbVector> {
        last_row_distribution(&trace.logits)
    }

    /// Logit-lens profile: each layer's last-position hidden state read out
    /// through the final norm and unembedding.
    pub fn layer_distributions(&self, tokens: &[usize]) -> Result<LayerProfile> {
        let trace = self.forward(tokens, &ForwardOptions::default())?;
        self.profile_from_trace(&trace)
    }

    pub fn profile_from_trace(&self, trace: &ForwardTrace) -> Result<LayerProfile> {
        let layers = trace
            .hidden
            .iter()
            .map(|h| last_row_distribution(&self.readout(h)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerProfile { layers })
    }
}

fn last_row_distribution(logits: &Matrix) -> Result<ProbVector> {
    let last = Matrix::row_vector(logits.row(logits.rows() - 1).to_vec())?;
    ProbVector::new(softmax_rows(&last, 1.0)?.into_vec())
}
