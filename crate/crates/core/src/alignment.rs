//! Cosine-similarity matrices and the symmetric cross-entropy loss used to
//! pull audio projections towards CLIP text and image projections.
//!
//! Every function here works on `candle` tensors of any float dtype. The
//! trainer feeds `f32` tensors that carry gradients; tests use `f64` so that
//! results can be compared against scalar oracles at 1e-9.
//!
//! Two evaluation paths exist. [`alignment_loss`] materialises the full
//! `M x M` similarity matrices and stays differentiable. [`tceocs`] and
//! [`AlignmentLoss::value`] stream over row blocks with an online column
//! log-sum-exp, so validation splits of tens of thousands of rows never hold
//! the whole matrix in memory.

use candle_core::{DType, Tensor, D};

/// Rows whose Euclidean norm is at or below this are rejected as degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-12;
/// Tolerance on unit norm for batches flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;
/// Rows per block in the streaming evaluators.
const STREAM_BLOCK_ROWS: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum AlignmentError {
    #[error("row {row} has norm {norm:e} (degenerate encoder output)")]
    ZeroRow { row: usize, norm: f64 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite logit")]
    NonFinite,
    #[error("projection batch is not row-normalized")]
    NotNormalized,
    #[error("expected a rank-2 matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

/// An `M x N` matrix of projections, one row per observation.
#[derive(Debug, Clone)]
pub struct ProjectionBatch {
    rows: Tensor,
    normalized: bool,
}

impl ProjectionBatch {
    /// Wraps raw (unnormalized) projections.
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(AlignmentError::NotAMatrix(rows.dims().to_vec()));
        }
        Ok(Self {
            rows,
            normalized: false,
        })
    }

    /// Wraps rows that are already unit length, checking the claim.
    pub fn normalized(rows: Tensor) -> Result<Self> {
        let batch = Self::new(rows)?;
        let norms = row_norms(&batch.rows)?;
        if norms
            .iter()
            .any(|n| !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL)
        {
            return Err(AlignmentError::NotNormalized);
        }
        Ok(Self {
            normalized: true,
            ..batch
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(AlignmentError::ShapeMismatch {
                left: vec![m, n],
                right: vec![1, bad.len()],
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let rows = Tensor::from_vec(flat, (m, n), &candle_core::Device::Cpu)?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn into_tensor(self) -> Tensor {
        self.rows
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Number of observations `M`.
    pub fn len(&self) -> usize {
        self.rows.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Projection width `N`.
    pub fn width(&self) -> usize {
        self.rows.dims()[1]
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.rows.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// Square matrix of pairwise cosine similarities.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    entries: Tensor,
}

impl SimilarityMatrix {
    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn transpose(&self) -> Result<Self> {
        Ok(Self {
            entries: self.entries.t()?.contiguous()?,
        })
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.entries.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

fn row_norms(rows: &Tensor) -> Result<Vec<f64>> {
    Ok(rows
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_vec1::<f64>()?)
}

fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(AlignmentError::ShapeMismatch {
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    Ok(())
}

fn ensure_finite(t: &Tensor) -> Result<()> {
    let total = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(AlignmentError::NonFinite)
    }
}

/// Divides every row by its Euclidean norm.
///
/// The division is a tensor op, so gradients flow through it.
pub fn row_normalize(batch: &ProjectionBatch) -> Result<ProjectionBatch> {
    let norms = batch.rows.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let host = norms
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    if let Some((row, &norm)) = host
        .iter()
        .enumerate()
        .find(|(_, n)| n.is_nan() || **n <= ZERO_NORM_EPS)
    {
        return Err(AlignmentError::ZeroRow { row, norm });
    }
    Ok(ProjectionBatch {
        rows: batch.rows.broadcast_div(&norms)?,
        normalized: true,
    })
}

/// `entries[j][k] = a_j . b_k` for two normalized batches of equal shape.
pub fn cosine_similarity_matrix(
    a: &ProjectionBatch,
    b: &ProjectionBatch,
) -> Result<SimilarityMatrix> {
    if !a.normalized || !b.normalized {
        return Err(AlignmentError::NotNormalized);
    }
    ensure_same_shape(&a.rows, &b.rows)?;
    let entries = a.rows.matmul(&b.rows.t()?)?;
    Ok(SimilarityMatrix { entries })
}

/// Row-wise softmax cross-entropy against a (soft or one-hot) target matrix,
/// averaged over rows: `-(1/M) sum_j sum_k target[j][k] * ln softmax(logits_j)_k`.
///
/// Returns a scalar tensor that keeps the autograd graph of `logits`.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(AlignmentError::NotAMatrix(logits.dims().to_vec()));
    }
    ensure_same_shape(logits, target)?;
    ensure_finite(logits)?;
    let rows = logits.dims()[0] as f64;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let target = target.to_dtype(logits.dtype())?;
    Ok(((log_probs * target)?.sum_all()? * (-1.0 / rows))?)
}

/// [`cross_entropy`] evaluated to a plain number.
pub fn cross_entropy_value(logits: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(cross_entropy(logits, target)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

/// Identity target `I_M` in the dtype of `like`.
pub fn identity_target(m: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = vec![0f64; m * m];
    for i in 0..m {
        data[i * m + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, (m, m), like.device())?.to_dtype(like.dtype())?)
}

/// Streaming accumulator for `CE(P, I) + CE(P^T, I)` with `P = A B^T / temperature`.
///
/// Rows of `P` are produced block by block. Row log-sum-exps finish inside a
/// block; column log-sum-exps are carried as running `(max, scaled sum)` pairs.
struct TwoWayCrossEntropy {
    col_max: Vec<f64>,
    col_sum: Vec<f64>,
    row_total: f64,
    diag_total: f64,
}

impl TwoWayCrossEntropy {
    fn new(m: usize) -> Self {
        Self {
            col_max: vec![f64::NEG_INFINITY; m],
            col_sum: vec![0.0; m],
            row_total: 0.0,
            diag_total: 0.0,
        }
    }

    fn push_block(&mut self, first_row: usize, block: &[f64], m: usize) -> Result<()> {
        let mut block_col_max = vec![f64::NEG_INFINITY; m];
        for (r, row) in block.chunks_exact(m).enumerate() {
            let mut row_max = f64::NEG_INFINITY;
            for (k, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(AlignmentError::NonFinite);
                }
                row_max = row_max.max(x);
                if x > block_col_max[k] {
                    block_col_max[k] = x;
                }
            }
            let sum: f64 = row.iter().map(|&x| (x - row_max).exp()).sum();
            self.row_total += row_max + sum.ln();
            self.diag_total += row[first_row + r];
        }
        for ((cm, cs), &bm) in self
            .col_max
            .iter_mut()
            .zip(self.col_sum.iter_mut())
            .zip(&block_col_max)
        {
            let new_max = cm.max(bm);
            if *cm != new_max {
                *cs *= (*cm - new_max).exp();
                *cm = new_max;
            }
        }
        for row in block.chunks_exact(m) {
            for ((&x, &cm), cs) in row.iter().zip(&self.col_max).zip(self.col_sum.iter_mut()) {
                *cs += (x - cm).exp();
            }
        }
        Ok(())
    }

    fn finish(self, m: usize) -> f64 {
        let col_total: f64 = self
            .col_max
            .iter()
            .zip(&self.col_sum)
            .map(|(mx, s)| mx + s.ln())
            .sum();
        // Both directions share the same diagonal.
        (self.row_total + col_total - 2.0 * self.diag_total) / m as f64
    }
}

fn streaming_tceocs(a: &Tensor, b: &Tensor, temperature: f64) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let m = a.dims()[0];
    let bt = b.t()?.contiguous()?;
    let mut acc = TwoWayCrossEntropy::new(m);
    let mut start = 0;
    while start < m {
        let len = STREAM_BLOCK_ROWS.min(m - start);
        let mut block = a.narrow(0, start, len)?.matmul(&bt)?;
        if temperature != 1.0 {
            block = (block / temperature)?;
        }
        let host = block
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        acc.push_block(start, &host, m)?;
        start += len;
    }
    Ok(acc.finish(m))
}

/// Total cross-entropy of cosine similarities between two normalized batches:
/// `CE(P, I) + CE(P^T, I)` with `P = A B^T`.
pub fn tceocs(a: &ProjectionBatch, b: &ProjectionBatch) -> Result<f64> {
    AlignmentLoss::default().tceocs(a, b)
}

/// Differentiable alignment loss with unit temperature.
pub fn alignment_loss(
    audio: &ProjectionBatch,
    text: &ProjectionBatch,
    image: &ProjectionBatch,
) -> Result<Tensor> {
    AlignmentLoss::default().loss(audio, text, image)
}

/// The audio/text/image contrastive objective.
///
/// `(CE(P,I) + CE(P^T,I) + CE(Q,I) + CE(Q^T,I)) / 6` where `P = A T^T` and
/// `Q = A V^T`. The divisor stays 6 even though there are four terms.
/// Logits are raw cosine similarities divided by `temperature` (default 1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlignmentLoss {
    pub temperature: f64,
}

impl Default for AlignmentLoss {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl AlignmentLoss {
    pub const DIVISOR: f64 = 6.0;

    fn logits(&self, a: &ProjectionBatch, b: &ProjectionBatch) -> Result<Tensor> {
        let sim = cosine_similarity_matrix(a, b)?.entries;
        if self.temperature == 1.0 {
            Ok(sim)
        } else {
            Ok((sim / self.temperature)?)
        }
    }

    fn check_batches(&self, batches: [&ProjectionBatch; 3]) -> Result<()> {
        for b in batches {
            if !b.normalized {
                return Err(AlignmentError::NotNormalized);
            }
        }
        ensure_same_shape(&batches[0].rows, &batches[1].rows)?;
        ensure_same_shape(&batches[0].rows, &batches[2].rows)
    }

    /// Full-matrix loss; keeps the autograd graph of the audio batch.
    pub fn loss(
        &self,
        audio: &ProjectionBatch,
        text: &ProjectionBatch,
        image: &ProjectionBatch,
    ) -> Result<Tensor> {
        self.check_batches([audio, text, image])?;
        let p = self.logits(audio, text)?;
        let q = self.logits(audio, image)?;
        let eye = identity_target(audio.len(), &p)?;
        let pt = p.t()?.contiguous()?;
        let qt = q.t()?.contiguous()?;
        let total = (((cross_entropy(&p, &eye)? + cross_entropy(&pt, &eye)?)?
            + cross_entropy(&q, &eye)?)?
            + cross_entropy(&qt, &eye)?)?;
        Ok((total / Self::DIVISOR)?)
    }

    /// Streaming evaluation of the same loss for large `M` (no gradient).
    pub fn value(
        &self,
        audio: &ProjectionBatch,
        text: &ProjectionBatch,
        image: &ProjectionBatch,
    ) -> Result<f64> {
        self.check_batches([audio, text, image])?;
        let t = streaming_tceocs(&audio.rows, &text.rows, self.temperature)?;
        let i = streaming_tceocs(&audio.rows, &image.rows, self.temperature)?;
        Ok((t + i) / Self::DIVISOR)
    }

    /// Streaming `CE(P, I) + CE(P^T, I)`.
    pub fn tceocs(&self, a: &ProjectionBatch, b: &ProjectionBatch) -> Result<f64> {
        if !a.normalized || !b.normalized {
            return Err(AlignmentError::NotNormalized);
        }
        streaming_tceocs(&a.rows, &b.rows, self.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn matrix(rows: &[&[f64]]) -> Tensor {
        let m = rows.len();
        let n = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (m, n), &Device::Cpu).unwrap()
    }

    fn unit(rows: &[&[f64]]) -> ProjectionBatch {
        row_normalize(&ProjectionBatch::new(matrix(rows)).unwrap()).unwrap()
    }

    pub(crate) fn random_unit_batch(m: usize, n: usize, seed: u64) -> ProjectionBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..m * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let t = Tensor::from_vec(data, (m, n), &Device::Cpu).unwrap();
        row_normalize(&ProjectionBatch::new(t).unwrap()).unwrap()
    }

    #[test]
    fn normalizes_rows() {
        let out = unit(&[&[3.0, 4.0]]).to_rows().unwrap();
        assert!((out[0][0] - 0.6).abs() < 1e-12);
        assert!((out[0][1] - 0.8).abs() < 1e-12);
        let eye = unit(&[&[1.0, 0.0], &[0.0, 1.0]]).to_rows().unwrap();
        assert_eq!(eye, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn zero_row_is_rejected() {
        let b = ProjectionBatch::new(matrix(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        match row_normalize(&b) {
            Err(AlignmentError::ZeroRow { row: 1, .. }) => {}
            other => panic!("expected ZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn similarity_examples() {
        let eye = unit(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = cosine_similarity_matrix(&eye, &eye)
            .unwrap()
            .to_rows()
            .unwrap();
        assert_eq!(s, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = cosine_similarity_matrix(&unit(&[&[1.0, 0.0]]), &unit(&[&[-1.0, 0.0]]))
            .unwrap()
            .to_rows()
            .unwrap();
        assert_eq!(s, vec![vec![-1.0]]);
        let s = cosine_similarity_matrix(&unit(&[&[1.0, 0.0]]), &unit(&[&[0.6, 0.8]]))
            .unwrap()
            .to_rows()
            .unwrap();
        assert!((s[0][0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn similarity_shape_mismatch() {
        let a = random_unit_batch(3, 4, 1);
        let b = random_unit_batch(2, 4, 2);
        assert!(matches!(
            cosine_similarity_matrix(&a, &b),
            Err(AlignmentError::ShapeMismatch { .. })
        ));
        let raw = ProjectionBatch::new(matrix(&[&[1.0, 0.0]])).unwrap();
        assert!(matches!(
            cosine_similarity_matrix(&raw, &raw),
            Err(AlignmentError::NotNormalized)
        ));
    }

    #[test]
    fn cross_entropy_single_element_is_zero() {
        for c in [-3.0, 0.0, 0.7, 25.0] {
            let ce = cross_entropy_value(&matrix(&[&[c]]), &matrix(&[&[1.0]])).unwrap();
            assert_eq!(ce, 0.0);
        }
    }

    #[test]
    fn cross_entropy_confident_diagonal() {
        let logits = matrix(&[&[100.0, 0.0], &[0.0, 100.0]]);
        let ce = cross_entropy_value(&logits, &matrix(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        // exact value is ln(1 + e^-100) ~ 3.7e-44
        assert!((0.0..1e-40).contains(&ce), "{ce}");
    }

    #[test]
    fn cross_entropy_rejects_non_finite() {
        let logits = matrix(&[&[f64::NAN, 0.0], &[0.0, 1.0]]);
        let eye = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            cross_entropy_value(&logits, &eye),
            Err(AlignmentError::NonFinite)
        ));
        let short = matrix(&[&[1.0, 0.0]]);
        assert!(matches!(
            cross_entropy_value(&short, &eye),
            Err(AlignmentError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tceocs_of_single_row_is_zero() {
        let a = random_unit_batch(1, 16, 3);
        let b = random_unit_batch(1, 16, 4);
        assert_eq!(tceocs(&a, &b).unwrap(), 0.0);
        let loss = alignment_loss(&a, &b, &random_unit_batch(1, 16, 5)).unwrap();
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn streaming_matches_full_matrix() {
        // 600 rows spans three stream blocks.
        for (m, seed) in [(7, 11), (600, 12)] {
            let a = random_unit_batch(m, 24, seed);
            let b = random_unit_batch(m, 24, seed + 100);
            let p = cosine_similarity_matrix(&a, &b).unwrap();
            let eye = identity_target(m, p.entries()).unwrap();
            let full = cross_entropy_value(p.entries(), &eye).unwrap()
                + cross_entropy_value(p.transpose().unwrap().entries(), &eye).unwrap();
            let streamed = tceocs(&a, &b).unwrap();
            assert!((full - streamed).abs() < 1e-9, "{full} vs {streamed}");
        }
    }

    #[test]
    fn streaming_loss_matches_differentiable_loss() {
        let a = random_unit_batch(40, 12, 21);
        let t = random_unit_batch(40, 12, 22);
        let i = random_unit_batch(40, 12, 23);
        for temperature in [1.0, 0.07] {
            let l = AlignmentLoss { temperature };
            let full = l.loss(&a, &t, &i).unwrap().to_scalar::<f64>().unwrap();
            let streamed = l.value(&a, &t, &i).unwrap();
            assert!((full - streamed).abs() < 1e-9, "{full} vs {streamed}");
        }
    }

    #[test]
    fn chance_level_law() {
        for (m, seed) in [(64usize, 1u64), (256, 2), (1024, 3)] {
            let a = random_unit_batch(m, 768, seed);
            let t = random_unit_batch(m, 768, seed + 10);
            let i = random_unit_batch(m, 768, seed + 20);
            let loss = AlignmentLoss::default().value(&a, &t, &i).unwrap();
            let chance = 2.0 / 3.0 * (m as f64).ln();
            assert!(
                (loss - chance).abs() / chance < 0.02,
                "M={m}: {loss} vs {chance}"
            );
        }
    }

    #[test]
    fn f32_inputs_are_accepted() {
        let a = random_unit_batch(9, 8, 31);
        let b = random_unit_batch(9, 8, 32);
        let a32 = ProjectionBatch::normalized(a.rows().to_dtype(DType::F32).unwrap()).unwrap();
        let b32 = ProjectionBatch::normalized(b.rows().to_dtype(DType::F32).unwrap()).unwrap();
        let x = tceocs(&a, &b).unwrap();
        let y = tceocs(&a32, &b32).unwrap();
        assert!((x - y).abs() < 1e-5);
    }
}
