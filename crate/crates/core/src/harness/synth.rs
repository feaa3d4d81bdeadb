//! Planted shared/private stream decompositions and the projection report
//! used to measure how much of each planted subspace survives an operator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, Matrix};

/// Below this the private energy is treated as absent.
pub const ENERGY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDims {
    pub shared: usize,
    pub private_x: usize,
    pub private_y: usize,
}

impl SynthDims {
    pub fn total(&self) -> usize {
        self.shared + self.private_x + self.private_y
    }
}

/// Two token streams `X = S_X + P_X + N_X` and `Y = S_Y + P_Y + N_Y`.
///
/// The shared component is one set of per-token coefficients on the shared
/// basis: `S_X` and `S_Y` are its first `n_x` and `n_y` rows, so the streams
/// carry the same shared semantics token by token. Bases are stored as rows
/// (`k × d_model`, orthonormal).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDecomposition {
    pub s_x: Matrix,
    pub s_y: Matrix,
    pub p_x: Matrix,
    pub p_y: Matrix,
    pub n_x: Matrix,
    pub n_y: Matrix,
    pub x: Matrix,
    pub y: Matrix,
    pub basis_s: Matrix,
    pub basis_px: Matrix,
    pub basis_py: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub energy_s: f64,
    pub energy_px: f64,
    pub energy_py: f64,
    pub energy_residual: f64,
    /// `energy_s / energy_px`, infinite when the private energy is below
    /// [`ENERGY_FLOOR`].
    pub suppression_ratio: f64,
}

/// Modified Gram-Schmidt over the rows of `m`, run twice for stability.
/// Rows that collapse are reported as a degenerate draw.
fn orthonormal_rows(m: &Matrix) -> Result<Matrix> {
    let (k, d) = m.shape();
    let mut rows: Vec<Vec<f64>> = (0..k).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..2 {
        for i in 0..k {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                for (a, b) in rows[i].iter_mut().zip(&prev) {
                    *a -= dot * b;
                }
            }
            let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                return Err(Error::InvalidArgument("degenerate basis draw".into()));
            }
            rows[i].iter_mut().for_each(|a| *a /= norm);
        }
    }
    Matrix::from_vec(k, d, rows.concat())
}

fn rows_range(m: &Matrix, range: std::ops::Range<usize>) -> Result<Matrix> {
    m.select_rows(&range.collect::<Vec<_>>())
}

pub fn synth_streams(
    d_model: usize,
    n_x: usize,
    n_y: usize,
    dims: SynthDims,
    noise_scale: f64,
    seed: u64,
) -> Result<SyntheticDecomposition> {
    if n_x == 0 || n_y == 0 {
        return Err(Error::InvalidArgument("stream lengths must be at least 1".into()));
    }
    if dims.total() > d_model {
        return Err(Error::InvalidArgument(format!(
            "planted dims {} exceed d_model {d_model}",
            dims.total()
        )));
    }
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_scale {noise_scale} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dims.total();
    let basis = if k == 0 {
        Matrix::zeros(0, d_model)
    } else {
        orthonormal_rows(&Matrix::random_normal(k, d_model, 1.0, &mut rng))?
    };
    let basis_s = rows_range(&basis, 0..dims.shared)?;
    let basis_px = rows_range(&basis, dims.shared..dims.shared + dims.private_x)?;
    let basis_py = rows_range(&basis, dims.shared + dims.private_x..k)?;

    let n_max = n_x.max(n_y);
    let c_s = Matrix::random_normal(n_max, dims.shared, 1.0, &mut rng);
    let c_px = Matrix::random_normal(n_x, dims.private_x, 1.0, &mut rng);
    let c_py = Matrix::random_normal(n_y, dims.private_y, 1.0, &mut rng);
    let s_all = matmul(&c_s, &basis_s)?;
    let s_x = rows_range(&s_all, 0..n_x)?;
    let s_y = rows_range(&s_all, 0..n_y)?;
    let p_x = matmul(&c_px, &basis_px)?;
    let p_y = matmul(&c_py, &basis_py)?;
    let n_xm = Matrix::random_normal(n_x, d_model, noise_scale, &mut rng);
    let n_ym = Matrix::random_normal(n_y, d_model, noise_scale, &mut rng);
    let x = s_x.add(&p_x)?.add(&n_xm)?;
    let y = s_y.add(&p_y)?.add(&n_ym)?;
    Ok(SyntheticDecomposition {
        s_x,
        s_y,
        p_x,
        p_y,
        n_x: n_xm,
        n_y: n_ym,
        x,
        y,
        basis_s,
        basis_px,
        basis_py,
    })
}

/// Squared Frobenius norm of the projection of `u`'s rows onto the row
/// space of the orthonormal `basis`.
fn projected_energy(u: &Matrix, basis: &Matrix) -> Result<f64> {
    if basis.rows() == 0 {
        return Ok(0.0);
    }
    let coeffs = matmul(u, &basis.transpose())?;
    Ok(coeffs.as_slice().iter().map(|c| c * c).sum())
}

pub fn decomposition_report(u: &Matrix, decomp: &SyntheticDecomposition) -> Result<DecompositionReport> {
    let d = decomp.basis_s.cols();
    if u.cols() != d {
        return Err(Error::shape("decomposition_report", format!("U has {} columns, d_model is {d}", u.cols())));
    }
    let energy_s = projected_energy(u, &decomp.basis_s)?;
    let energy_px = projected_energy(u, &decomp.basis_px)?;
    let energy_py = projected_energy(u, &decomp.basis_py)?;
    // The residual is measured directly on U minus its planted projections
    // rather than by subtraction, so the energy identity is a real check.
    let mut planted = Matrix::zeros(u.rows(), d);
    for b in [&decomp.basis_s, &decomp.basis_px, &decomp.basis_py] {
        if b.rows() > 0 {
            planted = planted.add(&matmul(&matmul(u, &b.transpose())?, b)?)?;
        }
    }
    let residual = u.sub(&planted)?;
    let energy_residual = residual.as_slice().iter().map(|c| c * c).sum();
    let suppression_ratio = if energy_px <= ENERGY_FLOOR { f64::INFINITY } else { energy_s / energy_px };
    Ok(DecompositionReport { energy_s, energy_px, energy_py, energy_residual, suppression_ratio })
}
