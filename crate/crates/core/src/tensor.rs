//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Everything here is pure: no tape, no parameters. The differentiable
//! versions of these operations live in [`crate::tape`] and call into the
//! kernels defined here so that taped and untaped evaluation agree bit for
//! bit.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` is non-empty, every dimension is
    /// positive, and the element count matches.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!("invalid tensor shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Stacks equally long rows into a `[rows, cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Config(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// `out = b + x · W` for a single row. Zero entries of `x` are skipped, which
/// matters for image inputs where most pixels are background.
pub(crate) fn affine_row(x: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let n_out = out.len();
    match b {
        Some(b) => out.copy_from_slice(b),
        None => out.fill(0.0),
    }
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let w_row = &w[k * n_out..(k + 1) * n_out];
        for (o, &wk) in out.iter_mut().zip(w_row) {
            *o += xk * wk;
        }
    }
}

fn check_affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::Config(format!(
            "weight must be 2-d, got {:?}",
            w.shape()
        )));
    }
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    if x.shape().len() != 2 || x.shape()[1] != n_in {
        return Err(Error::Config(format!(
            "affine input {:?} does not conform to weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.len() != n_out {
            return Err(Error::Config(format!(
                "bias {:?} does not conform to weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
    }
    Ok((n_in, n_out))
}

/// `out[b, o] = Σ_k x[b, k] · W[k, o] + bias[o]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    affine_opt(x, w, Some(b))
}

pub(crate) fn affine_opt(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (_, n_out) = check_affine(x, w, b)?;
    let rows = x.rows();
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        affine_row(
            x.row_slice(r),
            w.data(),
            b.map(Tensor::data),
            &mut out[r * n_out..(r + 1) * n_out],
        );
    }
    Tensor::new(vec![rows, n_out], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub(crate) fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Returns `(max, ln Σ_k e^{l_k − max})`, summing the non-maximal terms through
/// `ln_1p` so that a dominant logit keeps full relative precision.
fn max_and_log1p_rest(logits: &[f64]) -> Option<(f64, f64)> {
    let (arg, &max) = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != arg)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    Some((max, rest.ln_1p()))
}

/// Row-wise softmax of a `[batch, k]` tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let mut data = vec![0.0; logits.len()];
    for r in 0..logits.rows() {
        softmax_row(logits.row_slice(r), &mut data[r * k..(r + 1) * k]);
    }
    Tensor {
        shape: logits.shape().to_vec(),
        data,
    }
}

/// Per-row `log softmax(logits)[label]`, evaluated in log space.
pub fn log_likelihood(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if labels.len() != logits.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    let k = logits.cols();
    let mut out = Vec::with_capacity(labels.len());
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Data(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = logits.row_slice(r);
        let (max, rest) = max_and_log1p_rest(row).expect("non-empty row");
        out.push((row[label] - max) - rest);
    }
    Tensor::new(vec![labels.len()], out)
}

/// Average-pools a `rows × cols` image by `(pool_rows, pool_cols)` blocks.
/// Both dimensions must divide evenly.
pub fn avg_pool(
    image: &[f64],
    rows: usize,
    cols: usize,
    pool_rows: usize,
    pool_cols: usize,
) -> Result<Vec<f64>> {
    if pool_rows == 0
        || pool_cols == 0
        || !rows.is_multiple_of(pool_rows)
        || !cols.is_multiple_of(pool_cols)
    {
        return Err(Error::Config(format!(
            "pool {pool_rows}x{pool_cols} does not tile a {rows}x{cols} image"
        )));
    }
    let (out_r, out_c) = (rows / pool_rows, cols / pool_cols);
    let mut out = vec![0.0; out_r * out_c];
    let norm = 1.0 / (pool_rows * pool_cols) as f64;
    for r in 0..rows {
        for c in 0..cols {
            out[(r / pool_rows) * out_c + c / pool_cols] += image[r * cols + c];
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul_bias(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (rows, inner, cols) = (x.rows(), w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for k in 0..inner {
                    acc += x.data()[r * inner + k] * w.data()[k * cols + c];
                }
                out[r * cols + c] = acc + b.data()[c];
            }
        }
        out
    }

    #[test]
    fn affine_identity_weights() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_substitution() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_t(vec![3, 4]);
        let w = rand_t(vec![4, 2]);
        let b = rand_t(vec![2]);
        let got = affine(&x, &w, &b).unwrap();
        assert_eq!(got.shape(), &[3, 2]);
        for (g, e) in got.data().iter().zip(naive_matmul_bias(&x, &w, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_shape_mismatch_is_config_error() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(affine(&x, &w, &b), Err(Error::Config(_))));
        let x = Tensor::zeros(&[1, 2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(affine(&x, &w, &b), Err(Error::Config(_))));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::row(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::row(vec![0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::row(vec![0.0, 0.0]));
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::row(vec![1000.0, 1000.0]));
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::row(vec![1f64.ln(), 3f64.ln()]));
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_examples() {
        let ll = log_likelihood(&Tensor::row(vec![0.0, 0.0]), &[0]).unwrap();
        assert!((ll.data()[0] - 0.5f64.ln()).abs() < 1e-15);

        // ln σ(20) = -ln(1 + e^-20) = -2.0611536181902037e-9 (series: e^-20 - e^-40/2).
        let ll = log_likelihood(&Tensor::row(vec![10.0, -10.0]), &[0]).unwrap();
        let expected = -(-20f64).exp() + (-40f64).exp() / 2.0;
        assert!((ll.data()[0] - expected).abs() < 1e-20);
        assert!((ll.data()[0] + 2.06e-9).abs() < 1e-11);

        let ll = log_likelihood(&Tensor::row(vec![0.7; 20]), &[13]).unwrap();
        assert!((ll.data()[0] - (1.0f64 / 20.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_rejects_bad_label() {
        let err = log_likelihood(&Tensor::row(vec![0.0, 0.0]), &[2]);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn avg_pool_blocks() {
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let pooled = avg_pool(&img, 4, 4, 2, 2).unwrap();
        assert_eq!(pooled, vec![2.5, 4.5, 10.5, 12.5]);
        assert!(avg_pool(&img, 4, 4, 3, 2).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.cols(), 3);
        assert_eq!(t.row_slice(1), &[1.0; 3]);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(logits in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
            let p = softmax(&Tensor::row(logits));
            let total: f64 = p.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(p.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }
}
