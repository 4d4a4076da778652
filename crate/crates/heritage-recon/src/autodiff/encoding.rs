//! Sinusoidal positional encoding for MLP inputs.
//!
//! Encodings are always computed off-tape: network inputs are data, never
//! parameter-dependent, so the lifted coordinates enter the tape as constants.
//! The Jacobian variant feeds the forward-gradient pass that produces SDF
//! normals.

use super::tensor::Tensor;

/// Lift `x` to `[x?, sin(2^k pi x_d)..., cos(2^k pi x_d)...]` for
/// `k in 0..n_freq`. With `include_input` the raw coordinates come first.
/// Output length is `D * 2 * n_freq` plus `D` if the input is included.
pub fn positional_encode(x: &[f64], n_freq: usize, include_input: bool) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(encoded_len(d, n_freq, include_input));
    if include_input {
        out.extend_from_slice(x);
    }
    for k in 0..n_freq {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for &xi in x {
            out.push((f * xi).sin());
        }
        for &xi in x {
            out.push((f * xi).cos());
        }
    }
    out
}

/// Encoding plus its Jacobian: `jac[d]` holds the derivative of every output
/// component with respect to input coordinate `d`.
pub fn positional_encode_with_jacobian(
    x: &[f64],
    n_freq: usize,
    include_input: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = x.len();
    let e = encoded_len(d, n_freq, include_input);
    let enc = positional_encode(x, n_freq, include_input);
    let mut jac = vec![vec![0.0; e]; d];
    let mut off = 0;
    if include_input {
        for (dim, row) in jac.iter_mut().enumerate() {
            row[dim] = 1.0;
        }
        off = d;
    }
    for k in 0..n_freq {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for (dim, &xi) in x.iter().enumerate() {
            // d sin(f x)/dx = f cos(f x);  d cos(f x)/dx = -f sin(f x)
            jac[dim][off + dim] = f * (f * xi).cos();
            jac[dim][off + d + dim] = -f * (f * xi).sin();
        }
        off += 2 * d;
    }
    (enc, jac)
}

pub fn encoded_len(d: usize, n_freq: usize, include_input: bool) -> usize {
    d * 2 * n_freq + if include_input { d } else { 0 }
}

/// Encode a batch of points (rows) into a matrix.
pub fn encode_batch(points: &Tensor, n_freq: usize, include_input: bool) -> Tensor {
    let n = points.rows();
    let d = points.cols();
    let e = encoded_len(d, n_freq, include_input);
    let mut data = Vec::with_capacity(n * e);
    for i in 0..n {
        data.extend(positional_encode(points.row(i), n_freq, include_input));
    }
    Tensor::matrix(n, e, data).expect("encode_batch shape")
}

/// Batch encoding together with per-input-dimension tangent inputs: element
/// `d` of the returned vec is the `[n x e]` matrix of encoding derivatives
/// with respect to coordinate `d`.
pub fn encode_batch_with_jacobian(
    points: &Tensor,
    n_freq: usize,
    include_input: bool,
) -> (Tensor, Vec<Tensor>) {
    let n = points.rows();
    let d = points.cols();
    let e = encoded_len(d, n_freq, include_input);
    let mut enc = Vec::with_capacity(n * e);
    let mut jac = vec![Vec::with_capacity(n * e); d];
    for i in 0..n {
        let (row_enc, row_jac) = positional_encode_with_jacobian(points.row(i), n_freq, include_input);
        enc.extend(row_enc);
        for (dim, j) in row_jac.into_iter().enumerate() {
            jac[dim].extend(j);
        }
    }
    let enc = Tensor::matrix(n, e, enc).expect("encode shape");
    let jac = jac
        .into_iter()
        .map(|j| Tensor::matrix(n, e, j).expect("jacobian shape"))
        .collect();
    (enc, jac)
}
