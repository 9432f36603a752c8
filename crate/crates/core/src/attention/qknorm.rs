use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Divides each row by its Euclidean norm and multiplies by `gain`.
pub fn normalize_rows(x: &Matrix, gain: f64) -> Result<Matrix> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let norm = dot(x.row(i), x.row(i)).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormRow { row: i });
        }
        let f = gain / norm;
        out.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

/// Backward of [`normalize_rows`]: returns `(dX, dgain)`.
///
/// With `u = x/|x|` and `y = g·u`, `dx = (g/|x|)(dy − u(u·dy))` and
/// `dg = Σ_rows u·dy`.
pub fn normalize_rows_backward(x: &Matrix, gain: f64, dy: &Matrix) -> Result<(Matrix, f64)> {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dgain = 0.0;
    for i in 0..x.rows() {
        let xr = x.row(i);
        let norm = dot(xr, xr).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormRow { row: i });
        }
        let dyr = dy.row(i);
        let u_dot = dot(xr, dyr) / norm;
        dgain += u_dot;
        let f = gain / norm;
        for ((o, &xv), &dv) in dx.row_mut(i).iter_mut().zip(xr).zip(dyr) {
            *o = f * (dv - xv / norm * u_dot);
        }
    }
    Ok((dx, dgain))
}

/// QK-normalization for one head: both `q` and `k` rows scaled to length
/// `gain`, so every raw logit lies in `[-gain², gain²]`.
pub fn qk_normalize(q: &Matrix, k: &Matrix, gain: f64) -> Result<(Matrix, Matrix)> {
    if gain < 0.0 || !gain.is_finite() {
        return Err(Error::InvalidArgument(format!("qk gain {gain}")));
    }
    Ok((normalize_rows(q, gain)?, normalize_rows(k, gain)?))
}
