//! Pure tensor kernels. Summation order is fixed (row-major, sequential)
//! so identical inputs always give bit-identical outputs.

use super::Matrix;
use crate::error::{Error, Result};

/// Which (row, col) entries of a score matrix may receive probability mass.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Row `i` may attend to columns `0..=i`.
    Causal,
    /// Explicit admissibility table, row-major `rows x cols`.
    Explicit {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl Mask {
    pub fn allows(&self, r: usize, c: usize) -> bool {
        match self {
            Mask::Causal => c <= r,
            Mask::Explicit { cols, allowed, .. } => allowed[r * cols + c],
        }
    }

    fn check(&self, m: &Matrix) -> Result<()> {
        if let Mask::Explicit { rows, cols, allowed } = self {
            if (*rows, *cols) != m.shape() || allowed.len() != rows * cols {
                return Err(Error::shape(
                    "softmax mask",
                    format!("mask {}x{} for matrix {:?}", rows, cols, m.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// `A · B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.as_slice(), b.as_slice());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// `A · Bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out[i * m + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// `Aᵀ · B`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// Row-wise softmax of `scale · M`, stabilised by subtracting each row's max.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Result<Matrix> {
    softmax_impl(m, scale, None)
}

/// Row-wise softmax restricted to the entries admitted by `mask`; masked
/// entries get exactly zero probability. A row with no admissible entry is
/// an error.
pub fn softmax_rows_masked(m: &Matrix, scale: f64, mask: &Mask) -> Result<Matrix> {
    mask.check(m)?;
    softmax_impl(m, scale, Some(mask))
}

fn softmax_impl(m: &Matrix, scale: f64, mask: Option<&Mask>) -> Result<Matrix> {
    if !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("softmax scale {scale}")));
    }
    let (rows, cols) = m.shape();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let allowed = |c: usize| mask.map_or(true, |mk| mk.allows(r, c));
        let src = m.row(r);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in src.iter().enumerate() {
            if allowed(c) {
                max = max.max(scale * v);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: r });
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (c, (&v, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
            if allowed(c) {
                *d = (scale * v - max).exp();
                total += *d;
            }
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(Matrix::from_raw(rows, cols, out))
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = m.row(r);
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = v - lse;
        }
    }
    Matrix::from_raw(rows, cols, out)
}

/// Normalises one row vector to zero mean / unit variance (population
/// variance plus `eps`) and applies the elementwise affine map.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm input"));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x {} gain {} bias {}", x.len(), gain.len(), bias.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps {eps}")));
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((h, g), b)| h * g + b)
        .collect())
}

/// Returns the normalised vector and `1/sqrt(var + eps)`.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// [`layer_norm`] applied to every row of `m`.
pub fn layer_norm_rows(m: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.rows() {
        out.extend(layer_norm(m.row(r), gain, bias, eps)?);
    }
    Ok(Matrix::from_raw(m.rows(), m.cols(), out))
}
