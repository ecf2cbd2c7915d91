//! Dense f64 kernel with hand-written backward passes.
//!
//! Everything here is deterministic: identical inputs give bit-identical
//! outputs. Attention sums over keys in a canonical order (keys sorted by
//! their bit patterns) so that jointly permuting keys and values does not
//! change a single bit of the result.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(rows * cols, data.len(), "matrix data length"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equal-length rows. An empty slice gives a `0 x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(cols, r.len(), "matrix row length"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(self.cols, other.rows, "matmul inner dimension"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b = other.row(k);
                for (oj, &bkj) in o.iter_mut().zip(b) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite value in {what}")))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    check_finite(x, "softmax input")?;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `ln Σ exp(x_i)`, stable for large magnitudes. Empty input or all `-inf`
/// gives `-inf`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// `y = x W + b` for `x: N x Din`, `W: Din x Dout`, `b: Dout`.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols() {
        return Err(Error::dim(w.cols(), b.len(), "linear bias length"));
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
            *v += bj;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub x: Matrix,
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Gradients of a linear layer given `dL/dy`.
pub fn linear_backward(x: &Matrix, w: &Matrix, grad_y: &Matrix) -> Result<LinearGrads> {
    if grad_y.rows() != x.rows() {
        return Err(Error::dim(x.rows(), grad_y.rows(), "linear grad rows"));
    }
    if grad_y.cols() != w.cols() {
        return Err(Error::dim(w.cols(), grad_y.cols(), "linear grad cols"));
    }
    if x.cols() != w.rows() {
        return Err(Error::dim(w.rows(), x.cols(), "linear input dim"));
    }
    let gx = grad_y.matmul(&w.transpose())?;
    let gw = x.transpose().matmul(grad_y)?;
    let mut gb = vec![0.0; w.cols()];
    for i in 0..grad_y.rows() {
        for (g, v) in gb.iter_mut().zip(grad_y.row(i)) {
            *g += v;
        }
    }
    Ok(LinearGrads {
        x: gx,
        w: gw,
        b: gb,
    })
}

/// Loss `-ln softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let p = softmax(logits)?;
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = p;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Softmax weights, one per key, in input order.
    pub weights: Vec<f64>,
    /// `Σ_k weights_k * values_k`, without any residual.
    pub context: Vec<f64>,
    /// Canonical summation order used for the forward pass.
    order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub query: Vec<f64>,
    pub keys: Matrix,
    pub values: Matrix,
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Key order independent of how the caller arranged (key, value) pairs.
fn canonical_order(keys: &Matrix, values: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.rows()).collect();
    order.sort_by(|&i, &j| {
        cmp_rows(keys.row(i), keys.row(j)).then_with(|| cmp_rows(values.row(i), values.row(j)))
    });
    order
}

/// `softmax(q Kᵀ / √d) V` for a single query, where `d` is the key width.
pub fn scaled_dot_attention(
    query: &[f64],
    keys: &Matrix,
    values: &Matrix,
) -> Result<AttentionOutput> {
    if keys.rows() == 0 {
        return Err(Error::Empty("attention needs at least one key".into()));
    }
    if keys.cols() != query.len() {
        return Err(Error::dim(query.len(), keys.cols(), "attention key width"));
    }
    if values.rows() != keys.rows() {
        return Err(Error::dim(
            keys.rows(),
            values.rows(),
            "attention value count",
        ));
    }
    let scale = 1.0 / (query.len() as f64).sqrt();
    let order = canonical_order(keys, values);

    let scores: Vec<f64> = (0..keys.rows())
        .map(|k| dot(query, keys.row(k)) * scale)
        .collect();
    check_finite(&scores, "attention scores")?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = order.iter().map(|&k| exps[k]).sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();

    let mut context = vec![0.0; values.cols()];
    for &k in &order {
        let a = weights[k];
        for (c, v) in context.iter_mut().zip(values.row(k)) {
            *c += a * v;
        }
    }
    Ok(AttentionOutput {
        weights,
        context,
        order,
    })
}

/// Backward pass of [`scaled_dot_attention`] given `dL/dcontext`.
pub fn attention_backward(
    query: &[f64],
    keys: &Matrix,
    values: &Matrix,
    out: &AttentionOutput,
    grad_context: &[f64],
) -> Result<AttentionGrads> {
    if grad_context.len() != values.cols() {
        return Err(Error::dim(
            values.cols(),
            grad_context.len(),
            "attention context grad",
        ));
    }
    let scale = 1.0 / (query.len() as f64).sqrt();
    let a = &out.weights;
    let n = keys.rows();

    let mut g_values = Matrix::zeros(n, values.cols());
    let mut g_weights = vec![0.0; n];
    for k in 0..n {
        g_weights[k] = dot(grad_context, values.row(k));
        for (gv, gc) in g_values.row_mut(k).iter_mut().zip(grad_context) {
            *gv = a[k] * gc;
        }
    }
    let weighted: f64 = out.order.iter().map(|&k| a[k] * g_weights[k]).sum();
    let g_scores: Vec<f64> = (0..n)
        .map(|k| a[k] * (g_weights[k] - weighted) * scale)
        .collect();

    let mut g_query = vec![0.0; query.len()];
    let mut g_keys = Matrix::zeros(n, keys.cols());
    for &k in &out.order {
        for (gq, kv) in g_query.iter_mut().zip(keys.row(k)) {
            *gq += g_scores[k] * kv;
        }
        for (gk, q) in g_keys.row_mut(k).iter_mut().zip(query) {
            *gk = g_scores[k] * q;
        }
    }
    Ok(AttentionGrads {
        query: g_query,
        keys: g_keys,
        values: g_values,
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim(self.m.len(), params.len(), "adam params"));
        }
        if grads.len() != self.m.len() {
            return Err(Error::dim(self.m.len(), grads.len(), "adam grads"));
        }
        check_finite(grads, "adam gradient")?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Parameter index where the worst error occurred.
    pub worst_index: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares an analytic gradient against central differences.
///
/// `f` returns `(loss, gradient)` at the given parameters. Relative error per
/// coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradcheck<F>(mut f: F, params: &[f64], tolerance: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss in gradcheck".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(
            params.len(),
            analytic.len(),
            "gradcheck gradient",
        ));
    }
    check_finite(&analytic, "analytic gradient")?;

    let mut probe = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + GRADCHECK_STEP;
        let (plus, _) = f(&probe)?;
        probe[i] = orig - GRADCHECK_STEP;
        let (minus, _) = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss probing parameter {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradReport {
        max_rel_error,
        worst_index,
        tolerance,
        pass: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&[0.0, f64::NAN]).unwrap_err().is_numerical());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn attention_single_key_returns_value() {
        let keys = Matrix::from_rows(&[[0.3, -2.0]], 2).unwrap();
        let values = Matrix::from_rows(&[[7.0, -1.5]], 2).unwrap();
        let out = scaled_dot_attention(&[5.0, 1.0], &keys, &values).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.context, vec![7.0, -1.5]);
    }

    #[test]
    fn attention_uniform_when_orthogonal() {
        let keys = Matrix::from_rows(&[[0.0, 1.0], [0.0, -3.0]], 2).unwrap();
        let values = Matrix::from_rows(&[[2.0, 4.0], [0.0, 0.0]], 2).unwrap();
        let out = scaled_dot_attention(&[1.0, 0.0], &keys, &values).unwrap();
        assert_eq!(out.context, vec![1.0, 2.0]);
    }

    #[test]
    fn attention_hand_computed() {
        // scores (4, 0)/sqrt(2) = (2.828.., 0); weight_0 = 1/(1 + e^-2.828..) = 0.944193..
        let s = 4.0 / 2f64.sqrt();
        let w0 = 1.0 / (1.0 + (-s).exp());
        assert!((w0 - 0.944193).abs() < 1e-6);
        let keys = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]], 2).unwrap();
        let values = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]], 2).unwrap();
        let out = scaled_dot_attention(&[2.0, 0.0], &keys, &values).unwrap();
        assert!((out.context[0] - w0).abs() < 1e-15);
        assert!((out.context[1] - (1.0 - w0)).abs() < 1e-15);
        assert!((out.context[0] - 0.9442).abs() < 1e-4);
        assert!((out.context[1] - 0.0558).abs() < 1e-4);
    }

    #[test]
    fn attention_errors() {
        let empty = Matrix::zeros(0, 2);
        assert!(matches!(
            scaled_dot_attention(&[1.0, 0.0], &empty, &empty),
            Err(Error::Empty(_))
        ));
        let keys = Matrix::zeros(1, 3);
        assert!(scaled_dot_attention(&[1.0, 0.0], &keys, &keys).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0]], 2).unwrap();
        let y = linear_forward(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y, x);
        let w = Matrix::from_rows(&[[3.0, 0.0], [0.0, 3.0]], 2).unwrap();
        let y = linear_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0]);
        assert!(linear_forward(&x, &w, &[0.0]).is_err());
        assert!(linear_forward(&x, &Matrix::identity(3), &[0.0; 3]).is_err());
    }

    #[test]
    fn linear_gradcheck_random_3x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 4, 2);
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        // L = Σ G ⊙ y
        let g = random_matrix(&mut rng, 3, 2);
        let n_x = 12;
        let n_w = 8;
        let mut params = x.data().to_vec();
        params.extend_from_slice(w.data());
        params.extend_from_slice(&b);
        let report = gradcheck(
            |p| {
                let x = Matrix::from_vec(3, 4, p[..n_x].to_vec())?;
                let w = Matrix::from_vec(4, 2, p[n_x..n_x + n_w].to_vec())?;
                let b = &p[n_x + n_w..];
                let y = linear_forward(&x, &w, b)?;
                let loss = dot(y.data(), g.data());
                let grads = linear_backward(&x, &w, &g)?;
                let mut flat = grads.x.into_data();
                flat.extend(grads.w.into_data());
                flat.extend(grads.b);
                Ok((loss, flat))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, _) = cross_entropy(&[30.0, -30.0], 0).unwrap();
        assert!(l < 1e-25);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = rng.random_range(0..5);
            let r = gradcheck(|p| cross_entropy(p, t), &logits, 1e-6).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = random_matrix(&mut rng, 4, 3);
        let v = random_matrix(&mut rng, 4, 3);
        let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params = q.clone();
        params.extend_from_slice(k.data());
        params.extend_from_slice(v.data());
        let r = gradcheck(
            |p| {
                let q = &p[..3];
                let k = Matrix::from_vec(4, 3, p[3..15].to_vec())?;
                let v = Matrix::from_vec(4, 3, p[15..].to_vec())?;
                let out = scaled_dot_attention(q, &k, &v)?;
                let grads = attention_backward(q, &k, &v, &out, &g)?;
                let mut flat = grads.query;
                flat.extend(grads.keys.into_data());
                flat.extend(grads.values.into_data());
                Ok((dot(&out.context, &g), flat))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn gradcheck_catches_corrupted_backward() {
        let logits = vec![0.3, -1.2, 0.8];
        let r = gradcheck(
            |p| {
                let (l, mut g) = cross_entropy(p, 1)?;
                g[2] *= 2.0;
                Ok((l, g))
            },
            &logits,
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_index, 2);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3, 1e-4);
        for _ in 0..5 {
            s.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m̂ = g, v̂ = g², so Δ = -lr * g / (|g| + eps)
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 1e-4);
        s.step(&mut p, &[0.5]).unwrap();
        let want = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - want).abs() < 1e-18);
        assert!((p[0] + 9.99999e-5).abs() < 1e-10);
    }

    #[test]
    fn adam_constant_gradient_steps_bounded() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 1e-4);
        let mut prev = p[0];
        let mut last_step = f64::INFINITY;
        for _ in 0..20 {
            s.step(&mut p, &[0.5]).unwrap();
            let step = (p[0] - prev).abs();
            assert!(step <= last_step + 1e-18);
            assert!(step <= 1e-4 / (1.0 - ADAM_BETA1));
            last_step = step;
            prev = p[0];
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = AdamState::new(2, 1e-3);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 1]).is_err());
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
