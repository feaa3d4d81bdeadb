//! Shared/private mixed attention over an internal stream `I` and a
//! (filtered) external stream `D̂`.
//!
//! Every operation is recorded on a [`Tape`] so that training and the
//! convenience wrappers share one code path. Attention inside the module is
//! single-head and unmasked, with `d_k = d_model`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{DType, Matrix, Tape, TensorFile, Var};

/// Layer-norm epsilon used by the fusion output.
pub const LN_EPS: f64 = 1e-5;

/// Tensor names, in storage order.
pub const TENSOR_NAMES: [&str; 13] = [
    "w_share", "wq_s", "wk_s", "wv_s", "wq_c", "wk_c", "wv_c", "w_f", "b_f", "w_o", "b_o", "ln_gain",
    "ln_bias",
];

/// Learnable weights of the module plus the top-T hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct DsspParams {
    pub top_t: usize,
    pub w_share: Matrix,
    pub wq_s: Matrix,
    pub wk_s: Matrix,
    pub wv_s: Matrix,
    pub wq_c: Matrix,
    pub wk_c: Matrix,
    pub wv_c: Matrix,
    pub w_f: Matrix,
    pub b_f: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
}

/// Borrowed query/key/value projections.
#[derive(Clone, Copy, Debug)]
pub struct Triple<'p> {
    pub wq: &'p Matrix,
    pub wk: &'p Matrix,
    pub wv: &'p Matrix,
}

/// [`DsspParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DsspVars {
    pub top_t: usize,
    pub vars: [Var; 13],
}

impl DsspVars {
    fn get(&self, name: &str) -> Var {
        let i = TENSOR_NAMES.iter().position(|n| *n == name).expect("known tensor");
        self.vars[i]
    }
    fn self_triple(&self) -> (Var, Var, Var) {
        (self.get("wq_s"), self.get("wk_s"), self.get("wv_s"))
    }
    fn cross_triple(&self) -> (Var, Var, Var) {
        (self.get("wq_c"), self.get("wk_c"), self.get("wv_c"))
    }
}

impl DsspParams {
    /// Seeded initialisation: projections `N(0, 1/d)`, fusion weights
    /// scaled by fan-in, zero biases, LN gain 0.1 so the residual starts
    /// close to the identity.
    pub fn init(d_model: usize, d_ff: usize, top_t: usize, seed: u64) -> Result<Self> {
        check_dims(d_model, d_ff, top_t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 1.0 / (d_model as f64).sqrt();
        let mut sq = || Matrix::random_normal(d_model, d_model, sd, &mut rng);
        let (w_share, wq_s, wk_s, wv_s, wq_c, wk_c, wv_c) = (sq(), sq(), sq(), sq(), sq(), sq(), sq());
        let w_f = Matrix::random_normal(3 * d_model, d_ff, 1.0 / ((3 * d_model) as f64).sqrt(), &mut rng);
        let w_o = Matrix::random_normal(d_ff, d_model, 1.0 / (d_ff as f64).sqrt(), &mut rng);
        Ok(DsspParams {
            top_t,
            w_share,
            wq_s,
            wk_s,
            wv_s,
            wq_c,
            wk_c,
            wv_c,
            w_f,
            b_f: Matrix::zeros(1, d_ff),
            w_o,
            b_o: Matrix::zeros(1, d_model),
            ln_gain: Matrix::filled(1, d_model, 0.1),
            ln_bias: Matrix::zeros(1, d_model),
        })
    }

    /// All weights zero and LN gain one: the module is exactly the identity.
    pub fn zeros(d_model: usize, d_ff: usize, top_t: usize) -> Result<Self> {
        check_dims(d_model, d_ff, top_t)?;
        let sq = || Matrix::zeros(d_model, d_model);
        Ok(DsspParams {
            top_t,
            w_share: sq(),
            wq_s: sq(),
            wk_s: sq(),
            wv_s: sq(),
            wq_c: sq(),
            wk_c: sq(),
            wv_c: sq(),
            w_f: Matrix::zeros(3 * d_model, d_ff),
            b_f: Matrix::zeros(1, d_ff),
            w_o: Matrix::zeros(d_ff, d_model),
            b_o: Matrix::zeros(1, d_model),
            ln_gain: Matrix::filled(1, d_model, 1.0),
            ln_bias: Matrix::zeros(1, d_model),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_share.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_f.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 13] {
        [
            &self.w_share,
            &self.wq_s,
            &self.wk_s,
            &self.wv_s,
            &self.wq_c,
            &self.wk_c,
            &self.wv_c,
            &self.w_f,
            &self.b_f,
            &self.w_o,
            &self.b_o,
            &self.ln_gain,
            &self.ln_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 13] {
        [
            &mut self.w_share,
            &mut self.wq_s,
            &mut self.wk_s,
            &mut self.wv_s,
            &mut self.wq_c,
            &mut self.wk_c,
            &mut self.wv_c,
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    pub fn self_triple(&self) -> Triple<'_> {
        Triple { wq: &self.wq_s, wk: &self.wk_s, wv: &self.wv_s }
    }

    pub fn cross_triple(&self) -> Triple<'_> {
        Triple { wq: &self.wq_c, wk: &self.wk_c, wv: &self.wv_c }
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> DsspVars {
        let vars = self.tensors().map(|m| if trainable { tape.param_ref(m) } else { tape.constant(m) });
        DsspVars { top_t: self.top_t, vars }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn to_tensor_file(&self, dtype: DType) -> TensorFile {
        let mut f = TensorFile::new();
        for (name, m) in TENSOR_NAMES.iter().zip(self.tensors()) {
            f.push(*name, dtype, m.clone());
        }
        f
    }

    pub fn from_tensor_file(file: &TensorFile, top_t: usize) -> Result<Self> {
        let d = file.get("w_share")?.rows();
        let ff = file.get("b_f")?.cols();
        let mut p = DsspParams::zeros(d, ff, top_t)?;
        for (name, slot) in TENSOR_NAMES.iter().zip(p.tensors_mut()) {
            let (r, c) = slot.shape();
            *slot = file.expect(name, r, c)?;
        }
        Ok(p)
    }
}

fn check_dims(d_model: usize, d_ff: usize, top_t: usize) -> Result<()> {
    if d_model == 0 || d_ff == 0 {
        return Err(Error::InvalidArgument("DSSP dimensions must be positive".into()));
    }
    if top_t == 0 {
        return Err(Error::InvalidArgument("top_t must be at least 1".into()));
    }
    Ok(())
}

fn check_streams(op: &'static str, a: &Matrix, b: &Matrix, d_model: usize) -> Result<()> {
    if a.cols() != d_model || b.cols() != d_model {
        return Err(Error::shape(
            op,
            format!("streams have {} and {} features, weights expect {d_model}", a.cols(), b.cols()),
        ));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Empty("knowledge stream"));
    }
    Ok(())
}

/// `softmax((X·W_share)(Y·W_share)ᵀ / √d_k)` on the tape.
pub fn shared_similarity_on(tape: &mut Tape<'_>, x: Var, y: Var, w_share: Var) -> Result<Var> {
    let dk = tape.shape(w_share).1 as f64;
    let xs = tape.matmul(x, w_share)?;
    let ys = tape.matmul(y, w_share)?;
    let logits = tape.matmul_nt(xs, ys)?;
    tape.softmax_rows(logits, 1.0 / dk.sqrt(), None)
}

/// `softmax((X·W_Q)(Y·W_K)ᵀ / √d_k)(Y·W_V)`; self-attention when `x == y`.
pub fn attend_on(tape: &mut Tape<'_>, x: Var, y: Var, (wq, wk, wv): (Var, Var, Var)) -> Result<Var> {
    let dk = tape.shape(wk).1 as f64;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(y, wk)?;
    let v = tape.matmul(y, wv)?;
    let s = tape.matmul_nt(q, k)?;
    let a = tape.softmax_rows(s, 1.0 / dk.sqrt(), None)?;
    tape.matmul(a, v)
}

/// `τ(X,X) − η(X,Y)`.
pub fn differential_on(
    tape: &mut Tape<'_>,
    x: Var,
    y: Var,
    s: (Var, Var, Var),
    c: (Var, Var, Var),
) -> Result<Var> {
    let tau = attend_on(tape, x, x, s)?;
    let eta = attend_on(tape, x, y, c)?;
    tape.sub(tau, eta)
}

/// Indices of the `t` external tokens with the largest column mass in
/// `sim`, highest first, lower index winning ties.
pub fn shared_token_indices(sim: &Matrix, t: usize) -> Result<Vec<usize>> {
    if sim.cols() == 0 {
        return Err(Error::Empty("external stream"));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("top_t must be at least 1".into()));
    }
    let mut mass = vec![0.0; sim.cols()];
    for r in 0..sim.rows() {
        for (m, v) in mass.iter_mut().zip(sim.row(r)) {
            *m += v;
        }
    }
    let mut order: Vec<usize> = (0..sim.cols()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    order.truncate(t.min(sim.cols()));
    Ok(order)
}

/// The composed module, recorded on `tape`. Returns `I + Û`.
pub fn dssp_forward_on(tape: &mut Tape<'_>, p: &DsspVars, i: Var, d: Var) -> Result<Var> {
    let d_model = tape.shape(p.get("w_share")).0;
    check_streams("dssp_forward", tape.value(i), tape.value(d), d_model)?;
    let (s, c) = (p.self_triple(), p.cross_triple());

    let sim = shared_similarity_on(tape, i, d, p.get("w_share"))?;
    let idx = shared_token_indices(tape.value(sim), p.top_t)?;
    let u_share = tape.gather_rows(d, &idx)?;
    let u_enhance = attend_on(tape, i, u_share, c)?;

    let u_priv_i = differential_on(tape, i, d, s, c)?;
    let priv_d = differential_on(tape, d, i, s, c)?;
    let u_priv_d = attend_on(tape, i, priv_d, c)?;

    let u = tape.concat_cols(&[u_enhance, u_priv_i, u_priv_d])?;
    let h = tape.matmul(u, p.get("w_f"))?;
    let h = tape.add_row(h, p.get("b_f"))?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.get("w_o"))?;
    let o = tape.add_row(o, p.get("b_o"))?;
    let u_hat = tape.layer_norm_rows(o, p.get("ln_gain"), p.get("ln_bias"), LN_EPS)?;
    tape.add(i, u_hat)
}

fn triple_vars<'a>(tape: &mut Tape<'a>, t: Triple<'a>) -> (Var, Var, Var) {
    (tape.constant(t.wq), tape.constant(t.wk), tape.constant(t.wv))
}

fn check_square(op: &'static str, w: &Matrix, d: usize) -> Result<()> {
    if w.shape() != (d, d) {
        return Err(Error::shape(op, format!("weight {:?} for {d} features", w.shape())));
    }
    Ok(())
}

/// Row-stochastic `|I| × |D̂|` similarity between the two streams.
pub fn shared_similarity(i: &Matrix, d: &Matrix, w_share: &Matrix) -> Result<Matrix> {
    check_square("shared_similarity", w_share, w_share.rows())?;
    check_streams("shared_similarity", i, d, w_share.rows())?;
    let mut tape = Tape::new();
    let (iv, dv, w) = (tape.constant(i), tape.constant(d), tape.constant(w_share));
    let sim = shared_similarity_on(&mut tape, iv, dv, w)?;
    Ok(tape.value(sim).clone())
}

/// The top-T rows of `d` by similarity column mass, in score order.
pub fn select_shared_tokens(sim: &Matrix, d: &Matrix, t: usize) -> Result<Matrix> {
    if sim.cols() != d.rows() {
        return Err(Error::shape(
            "select_shared_tokens",
            format!("{} similarity columns for {} tokens", sim.cols(), d.rows()),
        ));
    }
    d.select_rows(&shared_token_indices(sim, t)?)
}

/// `η(X, Y)`: queries from `x`, keys and values from `y`.
pub fn cross_attention(x: &Matrix, y: &Matrix, c: Triple<'_>) -> Result<Matrix> {
    let d = c.wq.rows();
    for w in [c.wq, c.wk, c.wv] {
        check_square("cross_attention", w, d)?;
    }
    check_streams("cross_attention", x, y, d)?;
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x), tape.constant(y));
    let t = triple_vars(&mut tape, c);
    let out = attend_on(&mut tape, xv, yv, t)?;
    Ok(tape.value(out).clone())
}

/// `τ(X, X)`.
pub fn self_attention(x: &Matrix, s: Triple<'_>) -> Result<Matrix> {
    cross_attention(x, x, s)
}

/// `τ(X, X) − η(X, Y)`.
pub fn differential_attention(x: &Matrix, y: &Matrix, s: Triple<'_>, c: Triple<'_>) -> Result<Matrix> {
    self_attention(x, s)?.sub(&cross_attention(x, y, c)?)
}

/// `I + Û`, same shape as `i`.
pub fn dssp_forward(i: &Matrix, d: &Matrix, params: &DsspParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let (iv, dv) = (tape.constant(i), tape.constant(d));
    let out = dssp_forward_on(&mut tape, &vars, iv, dv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::random_normal(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_external_token_gets_all_similarity() {
        let sim = shared_similarity(&rand_m(3, 4, 1), &rand_m(1, 4, 2), &rand_m(4, 4, 3)).unwrap();
        assert_eq!(sim.shape(), (3, 1));
        assert!(sim.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_shared_weight_gives_uniform_rows() {
        let sim = shared_similarity(&rand_m(2, 3, 1), &rand_m(4, 3, 2), &Matrix::zeros(3, 3)).unwrap();
        assert!(sim.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_checked_similarity() {
        // I = [[1,0],[0,1]], D = [[1,0],[1,1]], W = I, scale 1/√2.
        let i = Matrix::identity(2);
        let d = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap();
        let sim = shared_similarity(&i, &d, &Matrix::identity(2)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // Row 0 logits [1, 1] → uniform; row 1 logits [0, 1].
        assert_abs_diff_eq!(sim.get(0, 0), 0.5, epsilon = 1e-15);
        let e = (s).exp();
        assert_abs_diff_eq!(sim.get(1, 1), e / (1.0 + e), epsilon = 1e-15);
    }

    #[test]
    fn selection_orders_by_column_mass() {
        let sim = Matrix::from_rows(&[[0.1, 0.6, 0.3], [0.2, 0.5, 0.3]]).unwrap();
        assert_eq!(shared_token_indices(&sim, 10).unwrap(), vec![1, 2, 0]);
        assert_eq!(shared_token_indices(&sim, 1).unwrap(), vec![1]);
        let tie = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        assert_eq!(shared_token_indices(&tie, 1).unwrap(), vec![0]);
        let d = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(select_shared_tokens(&sim, &d, 2).unwrap().as_slice(), &[2.0, 3.0]);
        assert!(shared_token_indices(&Matrix::zeros(2, 0), 1).is_err());
    }

    #[test]
    fn cross_attention_to_one_token_copies_its_value() {
        let p = DsspParams::init(4, 5, 3, 9).unwrap();
        let y = rand_m(1, 4, 4);
        let out = cross_attention(&rand_m(3, 4, 5), &y, p.cross_triple()).unwrap();
        let v = crate::numeric::matmul(&y, &p.wv_c).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_abs_diff_eq!(out.get(r, c), v.get(0, c), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hand_checked_cross_attention() {
        // Identity weights, orthonormal keys: row 0 attends [e, 1]/(e+1).
        let eye = Matrix::identity(2);
        let t = Triple { wq: &eye, wk: &eye, wv: &eye };
        let x = Matrix::from_rows(&[[2f64.sqrt(), 0.0]]).unwrap();
        let y = Matrix::identity(2);
        let out = cross_attention(&x, &y, t).unwrap();
        let e = 1f64.exp();
        assert_abs_diff_eq!(out.get(0, 0), e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 1), 1.0 / (e + 1.0), epsilon = 1e-15);
    }

    fn naive_attention(x: &Matrix, y: &Matrix, t: Triple<'_>) -> Matrix {
        let d = t.wq.rows();
        let proj = |m: &Matrix, w: &Matrix| {
            let mut out = Matrix::zeros(m.rows(), d);
            for r in 0..m.rows() {
                for c in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += m.get(r, k) * w.get(k, c);
                    }
                    out.set(r, c, s).unwrap();
                }
            }
            out
        };
        let (q, k, v) = (proj(x, t.wq), proj(y, t.wk), proj(y, t.wv));
        let mut out = Matrix::zeros(x.rows(), d);
        for i in 0..x.rows() {
            let logits: Vec<f64> = (0..y.rows())
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..d {
                let s: f64 = (0..y.rows()).map(|j| logits[j].exp() / z * v.get(j, c)).sum();
                out.set(i, c, s).unwrap();
            }
        }
        out
    }

    #[test]
    fn self_attention_matches_naive_loops() {
        let p = DsspParams::init(4, 4, 2, 11).unwrap();
        let x = rand_m(3, 4, 12);
        let fast = self_attention(&x, p.self_triple()).unwrap();
        let slow = naive_attention(&x, &x, p.self_triple());
        assert!(fast.sub(&slow).unwrap().max_abs() < 1e-12);
        let single = self_attention(&rand_m(1, 4, 13), p.self_triple()).unwrap();
        let v = crate::numeric::matmul(&rand_m(1, 4, 13), &p.wv_s).unwrap();
        assert!(single.sub(&v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let p = DsspParams::init(3, 3, 2, 1).unwrap();
        let x = rand_m(4, 3, 2);
        let perm = [2, 0, 3, 1];
        let out = self_attention(&x, p.self_triple()).unwrap();
        let out_p = self_attention(&x.select_rows(&perm).unwrap(), p.self_triple()).unwrap();
        assert!(out.select_rows(&perm).unwrap().sub(&out_p).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn differential_vanishes_when_streams_and_triples_coincide() {
        let p = DsspParams::init(4, 4, 2, 3).unwrap();
        let x = rand_m(3, 4, 4);
        let z = differential_attention(&x, &x, p.self_triple(), p.self_triple()).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn hand_checked_differential() {
        let eye = Matrix::identity(2);
        let t = Triple { wq: &eye, wk: &eye, wv: &eye };
        let x = Matrix::from_rows(&[[2f64.sqrt(), 0.0]]).unwrap();
        let y = Matrix::identity(2);
        // τ(x, x) = x (one token); η from the hand-checked case above.
        let e = 1f64.exp();
        let z = differential_attention(&x, &y, t, t).unwrap();
        assert_abs_diff_eq!(z.get(0, 0), 2f64.sqrt() - e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(z.get(0, 1), -1.0 / (e + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn zero_module_is_identity() {
        let p = DsspParams::zeros(4, 6, 10).unwrap();
        let i = rand_m(3, 4, 1);
        assert_eq!(dssp_forward(&i, &rand_m(5, 4, 2), &p).unwrap(), i);
    }

    #[test]
    fn copied_stream_cancels_internal_private_part() {
        let mut p = DsspParams::init(4, 4, 2, 5).unwrap();
        p.wq_c = p.wq_s.clone();
        p.wk_c = p.wk_s.clone();
        p.wv_c = p.wv_s.clone();
        let i = rand_m(3, 4, 6);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let (iv, dv) = (tape.constant(&i), tape.constant(&i));
        let z = differential_on(&mut tape, iv, dv, vars.self_triple(), vars.cross_triple()).unwrap();
        assert_eq!(tape.value(z).max_abs(), 0.0);
    }

    /// Straight-line evaluation with no shared helpers.
    fn reference_forward(i: &Matrix, d: &Matrix, p: &DsspParams) -> Matrix {
        let mm = |a: &Matrix, b: &Matrix| crate::numeric::matmul(a, b).unwrap();
        let att = |x: &Matrix, y: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix| {
            naive_attention(x, y, Triple { wq, wk, wv })
        };
        let dk = p.d_model() as f64;
        let is = mm(i, &p.w_share);
        let ds = mm(d, &p.w_share);
        let mut mass = vec![0.0; d.rows()];
        for r in 0..i.rows() {
            let l: Vec<f64> = (0..d.rows())
                .map(|j| (0..is.cols()).map(|c| is.get(r, c) * ds.get(j, c)).sum::<f64>() / dk.sqrt())
                .collect();
            let mx = l.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..d.rows() {
                mass[j] += (l[j] - mx).exp() / z;
            }
        }
        let mut idx: Vec<usize> = (0..d.rows()).collect();
        idx.sort_by(|&a, &b| mass[b].partial_cmp(&mass[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(p.top_t);
        let u_share = d.select_rows(&idx).unwrap();
        let enh = att(i, &u_share, &p.wq_c, &p.wk_c, &p.wv_c);
        let priv_i = att(i, i, &p.wq_s, &p.wk_s, &p.wv_s).sub(&att(i, d, &p.wq_c, &p.wk_c, &p.wv_c)).unwrap();
        let priv_d_full = att(d, d, &p.wq_s, &p.wk_s, &p.wv_s).sub(&att(d, i, &p.wq_c, &p.wk_c, &p.wv_c)).unwrap();
        let priv_d = att(i, &priv_d_full, &p.wq_c, &p.wk_c, &p.wv_c);
        let n = i.rows();
        let dm = p.d_model();
        let mut out = Matrix::zeros(n, dm);
        for r in 0..n {
            let u: Vec<f64> = enh.row(r).iter().chain(priv_i.row(r)).chain(priv_d.row(r)).copied().collect();
            let h: Vec<f64> = (0..p.d_ff())
                .map(|k| (p.b_f.get(0, k) + (0..u.len()).map(|j| u[j] * p.w_f.get(j, k)).sum::<f64>()).max(0.0))
                .collect();
            let o: Vec<f64> = (0..dm)
                .map(|c| p.b_o.get(0, c) + (0..h.len()).map(|k| h[k] * p.w_o.get(k, c)).sum::<f64>())
                .collect();
            let mean = o.iter().sum::<f64>() / dm as f64;
            let var = o.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dm as f64;
            for c in 0..dm {
                let ln = (o[c] - mean) / (var + LN_EPS).sqrt() * p.ln_gain.get(0, c) + p.ln_bias.get(0, c);
                out.set(r, c, i.get(r, c) + ln).unwrap();
            }
        }
        out
    }

    #[test]
    fn matches_straight_line_reference() {
        for seed in 0..5 {
            let mut p = DsspParams::init(6, 7, 2, seed).unwrap();
            p.ln_gain = rand_m(1, 6, seed + 100);
            p.b_f = rand_m(1, 7, seed + 200);
            let i = rand_m(3, 6, seed + 300);
            let d = rand_m(4, 6, seed + 400);
            let fast = dssp_forward(&i, &d, &p).unwrap();
            let slow = reference_forward(&i, &d, &p);
            assert!(fast.sub(&slow).unwrap().max_abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let p = DsspParams::init(4, 4, 2, 0).unwrap();
        assert!(matches!(dssp_forward(&rand_m(2, 4, 1), &rand_m(2, 3, 2), &p), Err(Error::Shape { .. })));
        assert!(dssp_forward(&rand_m(2, 4, 1), &Matrix::zeros(0, 4), &p).is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let p = DsspParams::init(3, 5, 4, 8).unwrap();
        let back = DsspParams::from_tensor_file(&p.to_tensor_file(DType::F64), 4).unwrap();
        assert_eq!(back, p);
        let f = p.to_tensor_file(DType::F32);
        assert_eq!(f.tensors[0].name, "w_share");
        assert_eq!(f.tensors[12].name, "ln_bias");
    }

    proptest! {
        #[test]
        fn selection_ignores_uniform_logit_shift(
            vals in prop::collection::vec(-3.0f64..3.0, 12),
            shift in -50.0f64..50.0,
            t in 1usize..5,
        ) {
            let logits = Matrix::from_vec(3, 4, vals).unwrap();
            let a = crate::numeric::softmax_rows(&logits, 1.0).unwrap();
            let b = crate::numeric::softmax_rows(&logits.map(|v| v + shift), 1.0).unwrap();
            prop_assert_eq!(shared_token_indices(&a, t).unwrap(), shared_token_indices(&b, t).unwrap());
        }
    }
}
