//! Minimal dense linear algebra and the two-layer perceptron used by the
//! compression head.
//!
//! Everything here is plain row-major `f64` math with hand-written
//! backpropagation, plus a central-difference gradient oracle that the
//! training code is checked against. All functions are pure; parameter
//! updates happen in the caller.

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Build a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {} at flat index {}",
                data[i], i
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from explicit rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// Internal constructor for values already known to be shape-consistent.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Stack two matrices vertically. Zero-row inputs are compatible with
    /// any column count.
    pub fn vstack(top: &Mat, bottom: &Mat) -> Result<Mat> {
        if top.rows > 0 && bottom.rows > 0 && top.cols != bottom.cols {
            return Err(Error::Dimension(format!(
                "cannot stack {} columns on {} columns",
                bottom.cols, top.cols
            )));
        }
        let cols = if top.rows > 0 { top.cols } else { bottom.cols };
        let mut data = Vec::with_capacity((top.rows + bottom.rows) * cols);
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Mat::from_parts(top.rows + bottom.rows, cols, data))
    }

    /// Round every entry to the nearest `f32`-representable value.
    ///
    /// Checkpoints and index files store single precision; rounding in
    /// memory first makes the write/read roundtrip bit-exact.
    pub fn round_to_f32(&self) -> Mat {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        Mat::from_parts(self.rows, self.cols, data)
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// C = A * B.
pub(crate) fn matmul(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                out[i * b.cols + j] += aik * b.data[k * b.cols + j];
            }
        }
    }
    Mat::from_parts(a.rows, b.cols, out)
}

/// C = A^T * B.
pub(crate) fn matmul_at_b(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = vec![0.0; a.cols * b.cols];
    for r in 0..a.rows {
        for i in 0..a.cols {
            let ari = a.data[r * a.cols + i];
            if ari == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                out[i * b.cols + j] += ari * b.data[r * b.cols + j];
            }
        }
    }
    Mat::from_parts(a.cols, b.cols, out)
}

/// C = A * B^T.
pub(crate) fn matmul_a_bt(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = vec![0.0; a.rows * b.rows];
    for i in 0..a.rows {
        for j in 0..b.rows {
            out[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Mat::from_parts(a.rows, b.rows, out)
}

/// Parameters of the two-layer perceptron `y = relu(x*W1 + b1)*W2 + b2`,
/// mapping input dimension `h` through hidden width `m` to output `h'`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl MlpParams {
    /// Validate mutual shape consistency and the compression constraint
    /// `h' <= h`.
    pub fn new(w1: Mat, b1: Vec<f64>, w2: Mat, b2: Vec<f64>) -> Result<Self> {
        if w1.cols() != b1.len() || w2.rows() != w1.cols() || w2.cols() != b2.len() {
            return Err(Error::Dimension(format!(
                "inconsistent mlp shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        if w2.cols() > w1.rows() {
            return Err(Error::Dimension(format!(
                "output dimension {} exceeds input dimension {}",
                w2.cols(),
                w1.rows()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Input dimension `h`.
    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    /// Hidden width `m`.
    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Output dimension `h'`.
    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    /// Round all parameters to `f32` precision (checkpoint precision).
    pub fn round_to_f32(&self) -> MlpParams {
        MlpParams {
            w1: self.w1.round_to_f32(),
            b1: self.b1.iter().map(|&v| v as f32 as f64).collect(),
            w2: self.w2.round_to_f32(),
            b2: self.b2.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    fn flat_len(&self) -> usize {
        self.param_count()
    }

    fn get_flat(&self, i: usize) -> f64 {
        let (n1, nb1, n2) = (self.w1.data().len(), self.b1.len(), self.w2.data().len());
        if i < n1 {
            self.w1.data()[i]
        } else if i < n1 + nb1 {
            self.b1[i - n1]
        } else if i < n1 + nb1 + n2 {
            self.w2.data()[i - n1 - nb1]
        } else {
            self.b2[i - n1 - nb1 - n2]
        }
    }

    fn set_flat(&mut self, i: usize, v: f64) {
        let (n1, nb1, n2) = (self.w1.data().len(), self.b1.len(), self.w2.data().len());
        if i < n1 {
            self.w1.data_mut()[i] = v;
        } else if i < n1 + nb1 {
            self.b1[i - n1] = v;
        } else if i < n1 + nb1 + n2 {
            self.w2.data_mut()[i - n1 - nb1] = v;
        } else {
            self.b2[i - n1 - nb1 - n2] = v;
        }
    }

    /// Apply one plain gradient-descent step: `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &GradBundle, lr: f64) -> Result<()> {
        grads.check_shapes(self)?;
        for (w, g) in self.w1.data_mut().iter_mut().zip(grads.dw1.data()) {
            *w -= lr * g;
        }
        for (b, g) in self.b1.iter_mut().zip(&grads.db1) {
            *b -= lr * g;
        }
        for (w, g) in self.w2.data_mut().iter_mut().zip(grads.dw2.data()) {
            *w -= lr * g;
        }
        for (b, g) in self.b2.iter_mut().zip(&grads.db2) {
            *b -= lr * g;
        }
        Ok(())
    }
}

/// Gradients mirroring [`MlpParams`] shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub dw1: Mat,
    pub db1: Vec<f64>,
    pub dw2: Mat,
    pub db2: Vec<f64>,
}

impl GradBundle {
    /// All-zero gradients shaped like `params`.
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            dw1: Mat::zeros(params.w1.rows(), params.w1.cols()),
            db1: vec![0.0; params.b1.len()],
            dw2: Mat::zeros(params.w2.rows(), params.w2.cols()),
            db2: vec![0.0; params.b2.len()],
        }
    }

    fn check_shapes(&self, params: &MlpParams) -> Result<()> {
        let ok = self.dw1.rows() == params.w1.rows()
            && self.dw1.cols() == params.w1.cols()
            && self.db1.len() == params.b1.len()
            && self.dw2.rows() == params.w2.rows()
            && self.dw2.cols() == params.w2.cols()
            && self.db2.len() == params.b2.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(
                "gradient shapes do not mirror parameter shapes".into(),
            ))
        }
    }

    /// Accumulate `other` into `self` (shapes must match).
    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in self.dw1.data_mut().iter_mut().zip(other.dw1.data()) {
            *a += b;
        }
        for (a, b) in self.db1.iter_mut().zip(&other.db1) {
            *a += b;
        }
        for (a, b) in self.dw2.data_mut().iter_mut().zip(other.dw2.data()) {
            *a += b;
        }
        for (a, b) in self.db2.iter_mut().zip(&other.db2) {
            *a += b;
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.dw1.data().len() + self.db1.len() + self.dw2.data().len() + self.db2.len(),
        );
        out.extend_from_slice(self.dw1.data());
        out.extend_from_slice(&self.db1);
        out.extend_from_slice(self.dw2.data());
        out.extend_from_slice(&self.db2);
        out
    }

    /// Largest entry-wise relative error against `other`, with the
    /// denominator floored at `floor` so negligible entries compare
    /// absolutely.
    pub fn max_relative_error(&self, other: &GradBundle, floor: f64) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat().iter())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Activations saved by [`mlp_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Mat,
    pre_hidden: Mat,
    hidden: Mat,
}

/// Forward pass `y = relu(x*W1 + b1)*W2 + b2` applied row-wise.
///
/// Returns the output and a cache sufficient for [`mlp_backward`].
pub fn mlp_forward(params: &MlpParams, x: &Mat) -> Result<(Mat, MlpCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {} columns, mlp expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut pre_hidden = matmul(x, &params.w1);
    for r in 0..pre_hidden.rows() {
        for c in 0..pre_hidden.cols() {
            let v = pre_hidden.get(r, c) + params.b1[c];
            pre_hidden.set(r, c, v);
        }
    }
    let hidden = Mat::from_parts(
        pre_hidden.rows(),
        pre_hidden.cols(),
        pre_hidden.data().iter().map(|&v| v.max(0.0)).collect(),
    );
    let mut y = matmul(&hidden, &params.w2);
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            let v = y.get(r, c) + params.b2[c];
            y.set(r, c, v);
        }
    }
    let cache = MlpCache {
        input: x.clone(),
        pre_hidden,
        hidden,
    };
    Ok((y, cache))
}

/// Backward pass for [`mlp_forward`] under the convention `relu'(0) = 0`.
///
/// Given the upstream gradient `dy`, returns the gradient with respect to
/// the input and a [`GradBundle`] for the parameters.
pub fn mlp_backward(params: &MlpParams, cache: &MlpCache, dy: &Mat) -> Result<(Mat, GradBundle)> {
    let n = cache.input.rows();
    if cache.input.cols() != params.input_dim()
        || cache.pre_hidden.cols() != params.hidden_dim()
        || cache.pre_hidden.rows() != n
        || cache.hidden.rows() != n
    {
        return Err(Error::InvalidState(
            "cache does not match these parameters".into(),
        ));
    }
    if dy.rows() != n || dy.cols() != params.output_dim() {
        return Err(Error::InvalidState(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            dy.rows(),
            dy.cols(),
            n,
            params.output_dim()
        )));
    }

    let dw2 = matmul_at_b(&cache.hidden, dy);
    let db2 = column_sums(dy);
    let dh = matmul_a_bt(dy, &params.w2);
    // relu'(0) = 0: strictly positive pre-activations pass gradient.
    let dz1 = Mat::from_parts(
        dh.rows(),
        dh.cols(),
        dh.data()
            .iter()
            .zip(cache.pre_hidden.data())
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect(),
    );
    let dw1 = matmul_at_b(&cache.input, &dz1);
    let db1 = column_sums(&dz1);
    let dx = matmul_a_bt(&dz1, &params.w1);
    Ok((
        dx,
        GradBundle {
            dw1,
            db1,
            dw2,
            db2,
        },
    ))
}

fn column_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += m.get(r, c);
        }
    }
    out
}

/// Central-difference gradient estimate `(f(theta+eps) - f(theta-eps)) / 2eps`
/// for every scalar parameter.
///
/// `loss_fn` must be deterministic; a non-finite loss anywhere aborts with a
/// numeric error.
pub fn finite_diff_grad<F>(loss_fn: F, params: &MlpParams, step: f64) -> Result<GradBundle>
where
    F: Fn(&MlpParams) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let mut grads = GradBundle::zeros_like(params);
    let mut probe = params.clone();
    for i in 0..params.flat_len() {
        let original = params.get_flat(i);
        probe.set_flat(i, original + step);
        let plus = loss_fn(&probe)?;
        probe.set_flat(i, original - step);
        let minus = loss_fn(&probe)?;
        probe.set_flat(i, original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing parameter {i}"
            )));
        }
        let g = (plus - minus) / (2.0 * step);
        let (n1, nb1, n2) = (
            params.w1.data().len(),
            params.b1.len(),
            params.w2.data().len(),
        );
        if i < n1 {
            grads.dw1.data_mut()[i] = g;
        } else if i < n1 + nb1 {
            grads.db1[i - n1] = g;
        } else if i < n1 + nb1 + n2 {
            grads.dw2.data_mut()[i - n1 - nb1] = g;
        } else {
            grads.db2[i - n1 - nb1 - n2] = g;
        }
    }
    Ok(grads)
}

/// L2-normalize each row; zero rows are returned unchanged.
pub fn l2_normalize_rows(x: &Mat) -> Mat {
    let mut data = Vec::with_capacity(x.data().len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let norm = dot(row, row).sqrt();
        if norm == 0.0 {
            data.extend_from_slice(row);
        } else {
            data.extend(row.iter().map(|v| v / norm));
        }
    }
    Mat::from_parts(x.rows(), x.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    fn random_params(rng: &mut ChaCha8Rng, h: usize, m: usize, out: usize) -> MlpParams {
        let w1 = Mat::from_parts(h, m, (0..h * m).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b1 = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w2 = Mat::from_parts(
            m,
            out,
            (0..m * out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let b2 = (0..out).map(|_| rng.gen_range(-0.5..0.5)).collect();
        MlpParams::new(w1, b1, w2, b2).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_parts(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    // Independent scalar-loop evaluation of relu(x*W1+b1)*W2+b2.
    fn mlp_by_hand(p: &MlpParams, x: &Mat) -> Vec<Vec<f64>> {
        let (h, m, out) = (p.input_dim(), p.hidden_dim(), p.output_dim());
        let mut result = Vec::new();
        for r in 0..x.rows() {
            let mut hidden = vec![0.0; m];
            for j in 0..m {
                let mut z = p.b1[j];
                for i in 0..h {
                    z += x.get(r, i) * p.w1.get(i, j);
                }
                hidden[j] = if z > 0.0 { z } else { 0.0 };
            }
            let mut row = vec![0.0; out];
            for j in 0..out {
                let mut y = p.b2[j];
                for (i, hv) in hidden.iter().enumerate() {
                    y += hv * p.w2.get(i, j);
                }
                row[j] = y;
            }
            result.push(row);
        }
        result
    }

    #[test]
    fn mat_new_rejects_bad_length_and_nonfinite() {
        assert!(matches!(
            Mat::new(2, 2, vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Mat::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn forward_identity_weights_relu_zeroes_negative() {
        let params = MlpParams::new(identity(2), vec![0.0; 2], identity(2), vec![0.0; 2]).unwrap();
        let x = Mat::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let (y, _) = mlp_forward(&params, &x).unwrap();
        assert_eq!(y.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn forward_zero_input_yields_output_bias() {
        let params = MlpParams::new(
            identity(3),
            vec![0.0; 3],
            identity(3),
            vec![0.25, -0.5, 4.0],
        )
        .unwrap();
        let x = Mat::zeros(4, 3);
        let (y, _) = mlp_forward(&params, &x).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.25, -0.5, 4.0]);
        }
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_params(&mut rng, 4, 4, 2);
        let x = random_mat(&mut rng, 3, 4);
        let (y, _) = mlp_forward(&params, &x).unwrap();
        let expected = mlp_by_hand(&params, &x);
        for r in 0..3 {
            for c in 0..2 {
                assert!((y.get(r, c) - expected[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_params(&mut rng, 6, 5, 3);
        let x = random_mat(&mut rng, 4, 6);
        let (a, _) = mlp_forward(&params, &x).unwrap();
        let (b, _) = mlp_forward(&params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(&mut rng, 4, 4, 2);
        let x = random_mat(&mut rng, 3, 5);
        assert!(matches!(mlp_forward(&params, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(&mut rng, 4, 3, 2);
        let x = random_mat(&mut rng, 2, 4);
        let (_, cache) = mlp_forward(&params, &x).unwrap();
        let dy = Mat::zeros(2, 2);
        let (dx, grads) = mlp_backward(&params, &cache, &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert_eq!(grads, GradBundle::zeros_like(&params));
    }

    #[test]
    fn backward_single_unit_chain_rule() {
        // 1x1x1 network with positive pre-activation: y = w2*relu(w1*x+b1)+b2.
        // With dY=1: dW2 = hidden activation, dW1 = w2*x, db1 = w2, db2 = 1.
        let params = MlpParams::new(
            Mat::new(1, 1, vec![0.7]).unwrap(),
            vec![0.3],
            Mat::new(1, 1, vec![-1.1]).unwrap(),
            vec![0.2],
        )
        .unwrap();
        let x = Mat::new(1, 1, vec![2.0]).unwrap();
        let (_, cache) = mlp_forward(&params, &x).unwrap();
        let dy = Mat::new(1, 1, vec![1.0]).unwrap();
        let (dx, grads) = mlp_backward(&params, &cache, &dy).unwrap();
        let hidden = 0.7 * 2.0 + 0.3;
        assert!((grads.dw2.get(0, 0) - hidden).abs() < 1e-15);
        assert!((grads.dw1.get(0, 0) - (-1.1 * 2.0)).abs() < 1e-15);
        assert!((grads.db1[0] - (-1.1)).abs() < 1e-15);
        assert!((grads.db2[0] - 1.0).abs() < 1e-15);
        assert!((dx.get(0, 0) - (-1.1 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = random_params(&mut rng, 4, 3, 2);
        let other = random_params(&mut rng, 5, 3, 2);
        let x = random_mat(&mut rng, 2, 5);
        let (_, cache) = mlp_forward(&other, &x).unwrap();
        let dy = Mat::zeros(2, 2);
        assert!(matches!(
            mlp_backward(&params, &cache, &dy),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences_on_random_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..12 {
            let h = rng.gen_range(2..=16);
            let m = rng.gen_range(2..=16);
            let out = rng.gen_range(1..=h);
            let n = rng.gen_range(1..=8);
            let params = random_params(&mut rng, h, m, out);
            let x = random_mat(&mut rng, n, h);
            // Linear functional of the output with fixed coefficients:
            // L = sum_ij c_ij * y_ij, so dL/dY = C exactly.
            let coeffs = random_mat(&mut rng, n, out);
            let (_, cache) = mlp_forward(&params, &x).unwrap();
            let (_, analytic) = mlp_backward(&params, &cache, &coeffs).unwrap();
            let loss = |p: &MlpParams| {
                let (y, _) = mlp_forward(p, &x)?;
                Ok(dot(y.data(), coeffs.data()))
            };
            let numeric = finite_diff_grad(loss, &params, 1e-4).unwrap();
            let err = analytic.max_relative_error(&numeric, 1e-5);
            assert!(err <= 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn finite_diff_constant_loss_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = random_params(&mut rng, 3, 3, 2);
        let grads = finite_diff_grad(|_| Ok(7.5), &params, 1e-4).unwrap();
        assert_eq!(grads, GradBundle::zeros_like(&params));
    }

    #[test]
    fn finite_diff_quadratic_matches_analytic() {
        // Loss theta^2 probed at theta = 3 via the first w1 entry: d/dtheta = 6.
        let params = MlpParams::new(
            Mat::new(1, 1, vec![3.0]).unwrap(),
            vec![0.0],
            Mat::new(1, 1, vec![0.0]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let grads = finite_diff_grad(
            |p| {
                let t = p.w1.get(0, 0);
                Ok(t * t)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!((grads.dw1.get(0, 0) - 6.0).abs() < 1e-6);

        // Two-parameter quadratic: L = a^2 + 3ab. dL/da = 2a+3b, dL/db = 3a.
        let params2 = MlpParams::new(
            Mat::new(1, 2, vec![1.5, -0.5]).unwrap(),
            vec![0.0, 0.0],
            Mat::new(2, 1, vec![0.0, 0.0]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let grads2 = finite_diff_grad(
            |p| {
                let a = p.w1.get(0, 0);
                let b = p.w1.get(0, 1);
                Ok(a * a + 3.0 * a * b)
            },
            &params2,
            1e-4,
        )
        .unwrap();
        assert!((grads2.dw1.get(0, 0) - (2.0 * 1.5 + 3.0 * -0.5)).abs() < 1e-6);
        assert!((grads2.dw1.get(0, 1) - 3.0 * 1.5).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nonfinite_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_params(&mut rng, 2, 2, 1);
        assert!(matches!(
            finite_diff_grad(|_| Ok(0.0), &params, 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &params, 1e-4),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn normalize_three_four_five() {
        let x = Mat::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = l2_normalize_rows(&x);
        assert!((y.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((y.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_keeps_zero_rows() {
        let x = Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let y = l2_normalize_rows(&x);
        assert_eq!(y.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent_and_preserves_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_mat(&mut rng, 6, 4);
        let y = l2_normalize_rows(&x);
        let z = l2_normalize_rows(&y);
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in 0..x.rows() {
            let norm_x = dot(x.row(r), x.row(r)).sqrt();
            if norm_x > 0.0 {
                let cos = dot(x.row(r), y.row(r)) / norm_x;
                assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vstack_handles_empty_parts() {
        let top = Mat::zeros(0, 0);
        let bottom = Mat::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let stacked = Mat::vstack(&top, &bottom).unwrap();
        assert_eq!(stacked.rows(), 1);
        assert_eq!(stacked.cols(), 2);
    }
}
