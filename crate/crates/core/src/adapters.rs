//! Small dense kernels for low-rank adapters and rotary position encodings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("matrix shape {rows}x{cols} does not fit {len} values")]
    Shape {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("matrix values must be finite")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("rank {r} outside 1..={max}")]
    RankOutOfRange { r: usize, max: usize },
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("paired rotation needs an even dimension, got {0}")]
    OddDim(usize),
    #[error("invalid rope config: {0}")]
    InvalidRope(String),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdapterError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(AdapterError::Shape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, AdapterError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AdapterError::Shape {
                rows: rows.len(),
                cols,
                len: rows.iter().map(|r| r.len()).sum(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, AdapterError> {
        if x.len() != self.cols {
            return Err(AdapterError::DimMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, AdapterError> {
        if self.cols != other.rows {
            return Err(AdapterError::DimMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(u.len(), v.len());
        for (r, a) in u.iter().enumerate() {
            for (c, b) in v.iter().enumerate() {
                m.set(r, c, a * b);
            }
        }
        m
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, AdapterError> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(AdapterError::DimMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Frozen base weight plus a trainable rank-`r` update `B·A`, scaled by `alpha / r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub w0: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
    pub r: usize,
}

impl LoraLayer {
    /// Builds a layer from explicit factors. `r` is taken from the shape of `a`.
    pub fn from_parts(w0: Matrix, a: Matrix, b: Matrix, alpha: f64) -> Result<Self, AdapterError> {
        let (d_out, d_in, r) = (w0.rows, w0.cols, a.rows);
        check_rank(d_in, d_out, r)?;
        check_alpha(alpha)?;
        if a.cols != d_in {
            return Err(AdapterError::DimMismatch {
                expected: d_in,
                got: a.cols,
            });
        }
        if b.rows != d_out || b.cols != r {
            return Err(AdapterError::DimMismatch {
                expected: d_out * r,
                got: b.rows * b.cols,
            });
        }
        Ok(Self { w0, a, b, alpha, r })
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

fn check_rank(d_in: usize, d_out: usize, r: usize) -> Result<(), AdapterError> {
    let max = d_in.min(d_out);
    if r == 0 || r > max {
        return Err(AdapterError::RankOutOfRange { r, max });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<(), AdapterError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(AdapterError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// `A` is drawn from N(0, 1/√r) with a seeded ChaCha8 stream, `B` is zero, and
/// `W0` defaults to the identity when `d_in == d_out` and none is supplied.
pub fn lora_init(
    d_in: usize,
    d_out: usize,
    r: usize,
    alpha: f64,
    seed: u64,
    w0: Option<Matrix>,
) -> Result<LoraLayer, AdapterError> {
    check_rank(d_in, d_out, r)?;
    check_alpha(alpha)?;
    let w0 = match w0 {
        Some(w) if (w.rows, w.cols) == (d_out, d_in) => w,
        Some(w) => {
            return Err(AdapterError::DimMismatch {
                expected: d_out * d_in,
                got: w.rows * w.cols,
            })
        }
        None => {
            let mut w = Matrix::zeros(d_out, d_in);
            for i in 0..d_in.min(d_out) {
                w.set(i, i, 1.0);
            }
            w
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std dev");
    let a_data = (0..r * d_in).map(|_| normal.sample(&mut rng)).collect();
    Ok(LoraLayer {
        w0,
        a: Matrix::new(r, d_in, a_data)?,
        b: Matrix::zeros(d_out, r),
        alpha,
        r,
    })
}

/// Work counters from one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ForwardTrace {
    pub multiply_adds: usize,
    /// Largest temporary buffer the pass allocated, in values.
    pub max_intermediate_len: usize,
}

/// `h = W0·x + (alpha/r)·B·(A·x)`, routed through the rank-`r` bottleneck.
pub fn lora_forward(layer: &LoraLayer, x: &[f64]) -> Result<Vec<f64>, AdapterError> {
    lora_forward_traced(layer, x).map(|(h, _)| h)
}

pub fn lora_forward_traced(
    layer: &LoraLayer,
    x: &[f64],
) -> Result<(Vec<f64>, ForwardTrace), AdapterError> {
    let base = layer.w0.matvec(x)?;
    let ax = layer.a.matvec(x)?;
    let bax = layer.b.matvec(&ax)?;
    let s = layer.scale();
    let h = base.iter().zip(&bax).map(|(w, d)| w + s * d).collect();
    let (d_in, d_out, r) = (layer.d_in(), layer.d_out(), layer.r);
    let trace = ForwardTrace {
        multiply_adds: d_out * d_in + r * d_in + d_out * r + d_out,
        max_intermediate_len: d_out.max(r),
    };
    Ok((h, trace))
}

/// `W0 + (alpha/r)·B·A`.
pub fn lora_merge(layer: &LoraLayer) -> Matrix {
    let delta = layer
        .b
        .matmul(&layer.a)
        .expect("factor shapes checked at construction");
    layer
        .w0
        .add(&delta.scaled(layer.scale()))
        .expect("merged shape matches W0")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoraGrads {
    pub d_a: Matrix,
    pub d_b: Matrix,
}

/// Gradients of a loss with `dL/dh = upstream` with respect to `A` and `B`.
/// `W0` is frozen and gets none.
pub fn lora_grads(
    layer: &LoraLayer,
    x: &[f64],
    upstream: &[f64],
) -> Result<LoraGrads, AdapterError> {
    if upstream.len() != layer.d_out() {
        return Err(AdapterError::DimMismatch {
            expected: layer.d_out(),
            got: upstream.len(),
        });
    }
    let s = layer.scale();
    let ax = layer.a.matvec(x)?;
    let bt_u = layer.b.transpose().matvec(upstream)?;
    Ok(LoraGrads {
        d_a: Matrix::outer(&bt_u, x).scaled(s),
        d_b: Matrix::outer(upstream, &ax).scaled(s),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    PaperLiteral,
    PairedRotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub dim: usize,
    pub base: f64,
    pub mode: RopeMode,
}

impl RopeConfig {
    pub fn new(dim: usize, mode: RopeMode) -> Result<Self, AdapterError> {
        let cfg = Self {
            dim,
            base: 10000.0,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.dim == 0 {
            return Err(AdapterError::InvalidRope("dim must be positive".into()));
        }
        if !(self.base.is_finite() && self.base > 0.0) {
            return Err(AdapterError::InvalidRope(format!(
                "base must be positive, got {}",
                self.base
            )));
        }
        if self.mode == RopeMode::PairedRotation && !self.dim.is_multiple_of(2) {
            return Err(AdapterError::OddDim(self.dim));
        }
        Ok(())
    }

    /// Encodes a query and key at position `pos` in the configured mode.
    pub fn apply(
        &self,
        q: &[f64],
        k: &[f64],
        pos: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), AdapterError> {
        self.validate()?;
        for v in [q, k] {
            if v.len() != self.dim {
                return Err(AdapterError::DimMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
        }
        match self.mode {
            RopeMode::PaperLiteral => rope_paper_with_base(q, k, pos, self.base),
            RopeMode::PairedRotation => {
                Ok((rope_standard(q, pos, self)?, rope_standard(k, pos, self)?))
            }
        }
    }
}

/// Elementwise form: angle `i·j / 10000^(d/2)` for 0-based dimension `j`,
/// `q'_j = q_j·cos`, `k'_j = k_j·sin`.
pub fn rope_paper(q: &[f64], k: &[f64], i: usize) -> Result<(Vec<f64>, Vec<f64>), AdapterError> {
    rope_paper_with_base(q, k, i, 10000.0)
}

fn rope_paper_with_base(
    q: &[f64],
    k: &[f64],
    i: usize,
    base: f64,
) -> Result<(Vec<f64>, Vec<f64>), AdapterError> {
    if q.len() != k.len() {
        return Err(AdapterError::DimMismatch {
            expected: q.len(),
            got: k.len(),
        });
    }
    let denom = base.powf(q.len() as f64 / 2.0);
    let theta = |j: usize| (i * j) as f64 / denom;
    let q2 = q
        .iter()
        .enumerate()
        .map(|(j, v)| v * theta(j).cos())
        .collect();
    let k2 = k
        .iter()
        .enumerate()
        .map(|(j, v)| v * theta(j).sin())
        .collect();
    Ok((q2, k2))
}

/// Rotates each pair `(2t, 2t+1)` by `m·base^(-2t/dim)`.
pub fn rope_standard(v: &[f64], m: usize, config: &RopeConfig) -> Result<Vec<f64>, AdapterError> {
    let dim = v.len();
    if !dim.is_multiple_of(2) {
        return Err(AdapterError::OddDim(dim));
    }
    if dim != config.dim {
        return Err(AdapterError::DimMismatch {
            expected: config.dim,
            got: dim,
        });
    }
    let mut out = vec![0.0; dim];
    for t in 0..dim / 2 {
        let phi = m as f64 * config.base.powf(-2.0 * t as f64 / dim as f64);
        let (sin, cos) = phi.sin_cos();
        let (a, b) = (v[2 * t], v[2 * t + 1]);
        out[2 * t] = a * cos - b * sin;
        out[2 * t + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// Relative error with a floor on the denominator, for gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite-difference gradients of `L = upstream · lora_forward(x)`.
pub fn finite_difference_grads(
    layer: &LoraLayer,
    x: &[f64],
    upstream: &[f64],
    step: f64,
) -> Result<LoraGrads, AdapterError> {
    let loss =
        |l: &LoraLayer| -> Result<f64, AdapterError> { Ok(dot(&lora_forward(l, x)?, upstream)) };
    let mut probe = layer.clone();
    let mut d_a = Matrix::zeros(layer.a.rows, layer.a.cols);
    for idx in 0..layer.a.data.len() {
        let orig = probe.a.data[idx];
        probe.a.data[idx] = orig + step;
        let up = loss(&probe)?;
        probe.a.data[idx] = orig - step;
        let down = loss(&probe)?;
        probe.a.data[idx] = orig;
        d_a.data[idx] = (up - down) / (2.0 * step);
    }
    let mut d_b = Matrix::zeros(layer.b.rows, layer.b.cols);
    for idx in 0..layer.b.data.len() {
        let orig = probe.b.data[idx];
        probe.b.data[idx] = orig + step;
        let up = loss(&probe)?;
        probe.b.data[idx] = orig - step;
        let down = loss(&probe)?;
        probe.b.data[idx] = orig;
        d_b.data[idx] = (up - down) / (2.0 * step);
    }
    Ok(LoraGrads { d_a, d_b })
}

/// Worst-case errors from the kernel self-checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelftestReport {
    pub fresh_forward_max_abs_err: f64,
    pub merge_forward_max_rel_err: f64,
    pub grad_max_rel_err: f64,
    pub rope_norm_max_abs_err: f64,
    pub rope_shift_max_abs_err: f64,
    pub rope_paper_position_zero_exact: bool,
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, random_vec(rng, rows * cols)).expect("finite samples")
}

/// Random layer with a trained-looking `B` and a random `W0`.
fn random_layer(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    d_out: usize,
    r: usize,
    alpha: f64,
) -> LoraLayer {
    let w0 = random_matrix(rng, d_out, d_in);
    let mut layer =
        lora_init(d_in, d_out, r, alpha, rand::Rng::random(rng), Some(w0)).expect("valid shapes");
    layer.b = random_matrix(rng, d_out, r);
    layer
}

/// LoRA and RoPE checks: fresh-init forward, merge agreement over 100 vectors at
/// d = 32, finite-difference gradients over 20 random triples, and the RoPE
/// norm and relative-shift sweeps over positions 0..=16 at dim 8.
pub fn kernels_selftest(seed: u64) -> SelftestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let fresh = lora_init(16, 16, 4, 8.0, seed, None).expect("valid shapes");
    let mut fresh_err: f64 = 0.0;
    for _ in 0..100 {
        let x = random_vec(&mut rng, 16);
        let h = lora_forward(&fresh, &x).expect("shape");
        let base = fresh.w0.matvec(&x).expect("shape");
        for (a, b) in h.iter().zip(&base) {
            fresh_err = fresh_err.max((a - b).abs());
        }
    }

    let layer = random_layer(&mut rng, 32, 24, 4, 8.0);
    let merged = lora_merge(&layer);
    let mut merge_err: f64 = 0.0;
    for _ in 0..100 {
        let x = random_vec(&mut rng, 32);
        let diff: Vec<f64> = merged
            .matvec(&x)
            .expect("shape")
            .iter()
            .zip(lora_forward(&layer, &x).expect("shape"))
            .map(|(a, b)| a - b)
            .collect();
        merge_err = merge_err.max(l2_norm(&diff) / l2_norm(&x));
    }

    let mut grad_err: f64 = 0.0;
    for t in 0..20 {
        let (d_in, d_out, r) = (6 + t % 3, 6 - t % 2, 2);
        let layer = random_layer(&mut rng, d_in, d_out, r, 1.0 + t as f64 * 0.5);
        let x = random_vec(&mut rng, d_in);
        let up = random_vec(&mut rng, d_out);
        let analytic = lora_grads(&layer, &x, &up).expect("shape");
        let numeric = finite_difference_grads(&layer, &x, &up, 1e-5).expect("shape");
        for (a, f) in analytic
            .d_a
            .data
            .iter()
            .chain(&analytic.d_b.data)
            .zip(numeric.d_a.data.iter().chain(&numeric.d_b.data))
        {
            grad_err = grad_err.max(relative_error(*a, *f));
        }
    }

    let cfg = RopeConfig::new(8, RopeMode::PairedRotation).expect("even dim");
    let q = random_vec(&mut rng, 8);
    let k = random_vec(&mut rng, 8);
    let mut norm_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    for m in 0..=16 {
        let qm = rope_standard(&q, m, &cfg).expect("dim");
        norm_err = norm_err.max((l2_norm(&qm) - l2_norm(&q)).abs());
        for n in 0..=16 {
            let base = dot(&qm, &rope_standard(&k, n, &cfg).expect("dim"));
            for s in 0..=16 {
                let shifted = dot(
                    &rope_standard(&q, m + s, &cfg).expect("dim"),
                    &rope_standard(&k, n + s, &cfg).expect("dim"),
                );
                shift_err = shift_err.max((base - shifted).abs());
            }
        }
    }

    let (q0, k0) = rope_paper(&q, &k, 0).expect("same length");
    SelftestReport {
        fresh_forward_max_abs_err: fresh_err,
        merge_forward_max_rel_err: merge_err,
        grad_max_rel_err: grad_err,
        rope_norm_max_abs_err: norm_err,
        rope_shift_max_abs_err: shift_err,
        rope_paper_position_zero_exact: q0 == q && k0.iter().all(|v| *v == 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_layer(alpha: f64) -> LoraLayer {
        LoraLayer::from_parts(
            Matrix::identity(2),
            Matrix::from_rows(&[&[0.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let layer = hand_layer(1.0);
        assert_eq!(lora_forward(&layer, &[3.0, 5.0]).unwrap(), vec![8.0, 5.0]);
        assert_eq!(
            lora_merge(&layer),
            Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]).unwrap()
        );
        // alpha = 2 doubles the delta (5, 0)
        assert_eq!(
            lora_forward(&hand_layer(2.0), &[3.0, 5.0]).unwrap(),
            vec![13.0, 5.0]
        );
    }

    #[test]
    fn init_rules() {
        let a = lora_init(6, 4, 4, 2.0, 9, None).unwrap();
        let b = lora_init(6, 4, 4, 2.0, 9, None).unwrap();
        assert_eq!(a, b);
        assert!(a.b.data().iter().all(|v| *v == 0.0));
        assert_ne!(a.a, lora_init(6, 4, 4, 2.0, 10, None).unwrap().a);
        assert_eq!(
            lora_init(6, 4, 5, 2.0, 9, None).unwrap_err(),
            AdapterError::RankOutOfRange { r: 5, max: 4 }
        );
        assert!(matches!(
            lora_init(6, 4, 0, 2.0, 9, None),
            Err(AdapterError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            lora_init(6, 4, 2, 0.0, 9, None),
            Err(AdapterError::InvalidAlpha(_))
        ));
        let x = [1.0, -2.0, 3.0, 0.5, 0.0, 7.0];
        assert_eq!(lora_forward(&a, &x).unwrap(), a.w0.matvec(&x).unwrap());
        assert_eq!(lora_merge(&a), a.w0);
        assert!(matches!(
            lora_forward(&a, &[1.0]),
            Err(AdapterError::DimMismatch { .. })
        ));
    }

    #[test]
    fn init_std_dev_is_inverse_sqrt_rank() {
        let layer = lora_init(512, 512, 16, 1.0, 3, None).unwrap();
        let vals = layer.a.data();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var.sqrt() - 0.25).abs() < 0.005, "{}", var.sqrt());
    }

    #[test]
    fn forward_stays_in_the_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_layer(&mut rng, 32, 32, 2, 4.0);
        let (_, trace) = lora_forward_traced(&layer, &random_vec(&mut rng, 32)).unwrap();
        // materialising BA alone would need a 32x32 buffer and 32*32*2 multiply-adds
        assert!(trace.max_intermediate_len < 32 * 32);
        assert_eq!(trace.multiply_adds, 32 * 32 + 2 * 32 + 32 * 2 + 32);
    }

    #[test]
    fn grads_at_init_and_scaling() {
        let layer = lora_init(5, 4, 2, 3.0, 7, None).unwrap();
        let x = [1.0, 2.0, -1.0, 0.5, 3.0];
        let up = [0.3, -1.0, 2.0, 0.1];
        let g = lora_grads(&layer, &x, &up).unwrap();
        assert!(g.d_a.data().iter().all(|v| *v == 0.0));
        assert!(g.d_b.data().iter().any(|v| *v != 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l1 = random_layer(&mut rng, 5, 4, 2, 1.0);
        let g1 = lora_grads(&l1, &x, &up).unwrap();
        l1.alpha = 2.0;
        let g2 = lora_grads(&l1, &x, &up).unwrap();
        assert_eq!(g2.d_a, g1.d_a.scaled(2.0));
        assert_eq!(g2.d_b, g1.d_b.scaled(2.0));
        assert!(matches!(
            lora_grads(&l1, &x, &[1.0]),
            Err(AdapterError::DimMismatch { .. })
        ));
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = random_layer(&mut rng, 6, 6, 2, 4.0);
        let x = random_vec(&mut rng, 6);
        let up = random_vec(&mut rng, 6);
        let a = lora_grads(&layer, &x, &up).unwrap();
        let f = finite_difference_grads(&layer, &x, &up, 1e-5).unwrap();
        for (p, q) in a
            .d_a
            .data()
            .iter()
            .chain(a.d_b.data())
            .zip(f.d_a.data().iter().chain(f.d_b.data()))
        {
            assert!(relative_error(*p, *q) < 1e-4, "{p} vs {q}");
        }
    }

    #[test]
    fn rope_paper_cases() {
        let q = [0.5, -1.5, 2.0];
        let k = [3.0, 4.0, -5.0];
        let (q0, k0) = rope_paper(&q, &k, 0).unwrap();
        assert_eq!(q0, q.to_vec());
        assert!(k0.iter().all(|v| *v == 0.0));

        // d = 2: denominator 10000^1; theta(1,0) = 0, theta(1,1) = 1e-4
        let (q1, k1) = rope_paper(&[1.0, 1.0], &[1.0, 1.0], 1).unwrap();
        assert_eq!(q1, vec![1.0, (1e-4f64).cos()]);
        assert!((q1[1] - 0.999999995).abs() < 1e-12);
        assert_eq!(k1, vec![0.0, (1e-4f64).sin()]);
        assert!(matches!(
            rope_paper(&[1.0], &[1.0, 2.0], 1),
            Err(AdapterError::DimMismatch { .. })
        ));
    }

    #[test]
    fn rope_standard_cases() {
        let cfg = RopeConfig::new(4, RopeMode::PairedRotation).unwrap();
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rope_standard(&v, 0, &cfg).unwrap(), v.to_vec());
        // first pair rotates by m radians: (1, 0) at m = 1 -> (cos 1, sin 1)
        let r = rope_standard(&[1.0, 0.0, 0.0, 0.0], 1, &cfg).unwrap();
        assert_eq!(r[..2], [1f64.cos(), 1f64.sin()]);
        assert_eq!(
            rope_standard(&[1.0, 2.0, 3.0], 1, &cfg),
            Err(AdapterError::OddDim(3))
        );
        assert_eq!(
            RopeConfig::new(5, RopeMode::PairedRotation),
            Err(AdapterError::OddDim(5))
        );
        assert!(RopeConfig::new(5, RopeMode::PaperLiteral).is_ok());
    }

    #[test]
    fn rope_config_dispatch() {
        let q = [1.0, 2.0, 3.0, 4.0];
        let k = [0.5, 0.5, -1.0, 2.0];
        let paper = RopeConfig::new(4, RopeMode::PaperLiteral).unwrap();
        assert_eq!(
            paper.apply(&q, &k, 3).unwrap(),
            rope_paper(&q, &k, 3).unwrap()
        );
        let paired = RopeConfig::new(4, RopeMode::PairedRotation).unwrap();
        let (q2, k2) = paired.apply(&q, &k, 3).unwrap();
        assert_eq!(q2, rope_standard(&q, 3, &paired).unwrap());
        assert_eq!(k2, rope_standard(&k, 3, &paired).unwrap());
    }

    #[test]
    fn selftest_within_tolerances() {
        let r = kernels_selftest(42);
        assert!(r.fresh_forward_max_abs_err <= 1e-15);
        assert!(r.merge_forward_max_rel_err <= 1e-12);
        assert!(r.grad_max_rel_err < 1e-4, "{}", r.grad_max_rel_err);
        assert!(r.rope_norm_max_abs_err <= 1e-12);
        assert!(r.rope_shift_max_abs_err <= 1e-9);
        assert!(r.rope_paper_position_zero_exact);
    }

    proptest! {
        #[test]
        fn merge_agrees_with_forward(seed in any::<u64>(), d in 2usize..=32, r_frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = 1 + ((d - 1) as f64 * r_frac) as usize;
            let layer = random_layer(&mut rng, d, d, r, 2.0);
            let x = random_vec(&mut rng, d);
            let diff: Vec<f64> = lora_merge(&layer).matvec(&x).unwrap().iter()
                .zip(lora_forward(&layer, &x).unwrap()).map(|(a, b)| a - b).collect();
            prop_assert!(l2_norm(&diff) <= 1e-12 * l2_norm(&x));
        }

        #[test]
        fn rope_preserves_norm(v in proptest::collection::vec(-10.0f64..10.0, 1..=16), m in 0usize..10_000) {
            let mut v = v;
            if v.len() % 2 == 1 { v.push(1.0); }
            let cfg = RopeConfig::new(v.len(), RopeMode::PairedRotation).unwrap();
            let out = rope_standard(&v, m, &cfg).unwrap();
            prop_assert!((l2_norm(&out) - l2_norm(&v)).abs() <= 1e-12);
        }
    }
}
