//! Image-level contrastive loss (NT-Xent) over in-batch negatives.

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::scalar::{gemm, MatRef, Scalar};

pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}-d and {}-d vectors", a.len(), b.len())));
    }
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// `2N` embeddings ordered `(z~_1, z^_1, ..., z~_N, z^_N)`; row `i` pairs with `i ^ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub embeddings: Matrix<T>,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn new(embeddings: Matrix<T>) -> Result<Self> {
        if embeddings.rows < 2 || !embeddings.rows.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "contrastive batch needs an even number (>= 2) of views, got {}",
                embeddings.rows
            )));
        }
        if embeddings.cols == 0 {
            return Err(Error::InvalidArgument("zero-dimensional embeddings".into()));
        }
        Ok(Self { embeddings })
    }

    /// Number of positive pairs `N`.
    pub fn pairs(&self) -> usize {
        self.embeddings.rows / 2
    }

    pub fn views(&self) -> usize {
        self.embeddings.rows
    }

    #[inline]
    pub fn partner(i: usize) -> usize {
        i ^ 1
    }

    /// `true` when there are no negatives (`N = 1`), which makes every term zero.
    pub fn is_degenerate(&self) -> bool {
        self.pairs() == 1
    }

    fn unit_rows(&self) -> Result<(Vec<T>, Vec<T>)> {
        let (n, d) = (self.embeddings.rows, self.embeddings.cols);
        let mut unit = self.embeddings.data.clone();
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &mut unit[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!("embedding {r} has norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok((unit, norms))
    }

    fn similarity(&self, unit: &[T]) -> Vec<T> {
        let (n, d) = (self.embeddings.rows, self.embeddings.cols);
        let mut sim = vec![T::zero(); n * n];
        gemm(MatRef::new(unit, n, d), MatRef::t(unit, n, d), T::zero(), &mut sim);
        sim
    }
}

/// `l(view i, its partner)`: softmax cross-entropy of the positive against
/// the `2N - 2` other views.
pub fn ntxent_single<T: Scalar>(batch: &ContrastiveBatch<T>, i: usize, temperature: T) -> Result<T> {
    check_temperature(temperature)?;
    if i >= batch.views() {
        return Err(Error::InvalidArgument(format!("view {i} outside batch of {}", batch.views())));
    }
    let d = batch.embeddings.cols;
    let anchor = batch.embeddings.row(i);
    let p = ContrastiveBatch::<T>::partner(i);
    let mut logits = Vec::with_capacity(batch.views() - 1);
    let mut pos = T::zero();
    for k in 0..batch.views() {
        if k == i {
            continue;
        }
        let s = cosine_sim(anchor, &batch.embeddings.data[k * d..(k + 1) * d])? / temperature;
        if k == p {
            pos = s;
        }
        logits.push(s);
    }
    Ok(log_sum_exp(&logits) - pos)
}

/// `L_img = (1/N) * sum over pairs of [l(i, j) + l(j, i)]` and its gradient
/// with respect to the raw (un-normalized) embeddings.
pub fn image_loss<T: Scalar>(batch: &ContrastiveBatch<T>, temperature: T) -> Result<(T, Matrix<T>)> {
    check_temperature(temperature)?;
    let (n, d) = (batch.views(), batch.embeddings.cols);
    let (unit, norms) = batch.unit_rows()?;
    let sim = batch.similarity(&unit);
    let pairs = T::of(batch.pairs() as f64);
    let inv_t = T::one() / temperature;

    let mut total = T::zero();
    // gradient of the loss with respect to the similarity matrix
    let mut dsim = vec![T::zero(); n * n];
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let p = ContrastiveBatch::<T>::partner(i);
        let row = &sim[i * n..(i + 1) * n];
        logits.clear();
        logits.extend((0..n).filter(|&k| k != i).map(|k| row[k] * inv_t));
        let lse = log_sum_exp(&logits);
        total += lse - row[p] * inv_t;
        for k in (0..n).filter(|&k| k != i) {
            let soft = (row[k] * inv_t - lse).exp();
            let target = if k == p { T::one() } else { T::zero() };
            dsim[i * n + k] = (soft - target) * inv_t / pairs;
        }
    }
    let loss = total / pairs;

    // sim = U U^T  =>  dU = (dS + dS^T) U
    let mut sym = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            sym[i * n + k] = dsim[i * n + k] + dsim[k * n + i];
        }
    }
    let mut dunit = vec![T::zero(); n * d];
    gemm(MatRef::new(&sym, n, n), MatRef::new(&unit, n, d), T::zero(), &mut dunit);

    // through u = z / |z|:  dz = (du - u (u . du)) / |z|
    let mut grad = Matrix::zeros(n, d);
    for r in 0..n {
        let u = &unit[r * d..(r + 1) * d];
        let du = &dunit[r * d..(r + 1) * d];
        let proj = u.iter().zip(du).map(|(&a, &b)| a * b).sum::<T>();
        for ((g, &a), &b) in grad.row_mut(r).iter_mut().zip(u).zip(du) {
            *g = (b - a * proj) / norms[r];
        }
    }
    Ok((loss, grad))
}

fn check_temperature<T: Scalar>(t: T) -> Result<()> {
    if !(t > T::zero() && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: Vec<Vec<f64>>) -> ContrastiveBatch<f64> {
        let d = rows[0].len();
        let n = rows.len();
        ContrastiveBatch::new(Matrix::from_vec(n, d, rows.into_iter().flatten().collect())).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0f64).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0f64).abs() < 1e-15);
        let v: f64 = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(cosine_sim(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn identical_embeddings_give_log_one_plus_m() {
        let b = batch(vec![vec![0.3, -1.2, 2.0]; 4]);
        for i in 0..4 {
            let l = ntxent_single(&b, i, 0.5).unwrap();
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
        let (img, _) = image_loss(&b, 0.5).unwrap();
        assert!((img - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_negatives_closed_form() {
        // pair (e1, e1); the other pair (e2, e3) is orthogonal to e1
        let b = batch(vec![
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let l = ntxent_single(&b, 0, 0.5).unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
        assert!((expect - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn single_pair_is_degenerate_zero() {
        let b = batch(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(b.is_degenerate());
        assert_eq!(ntxent_single(&b, 0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = batch(vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 1.0]]);
        assert!(image_loss(&b, 0.5).is_err());
        let ok = batch(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(image_loss(&ok, 0.0).is_err());
        assert!(ContrastiveBatch::new(Matrix::from_vec(3, 1, vec![1.0f64; 3])).is_err());
    }

    #[test]
    fn increasing_positive_similarity_lowers_loss() {
        let mk = |t: f64| {
            batch(vec![
                vec![1.0, 0.0, 0.0],
                vec![t.cos(), t.sin(), 0.0],
                vec![0.2, 0.5, 0.7],
                vec![-0.4, 0.3, 0.1],
            ])
        };
        // the positive partner rotates towards the anchor; negatives fixed
        let mut prev = f64::INFINITY;
        for step in (0..=10).rev() {
            let angle = step as f64 * 0.15;
            let l = ntxent_single(&mk(angle), 0, 0.5).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|r| (0..5).map(|c| ((r * 7 + c * 3) as f64 * 0.71).sin() + 0.1).collect())
            .collect();
        let b = batch(rows);
        let (_, g) = image_loss(&b, 0.3).unwrap();
        let h = 1e-6;
        for i in 0..b.embeddings.data.len() {
            let mut p = b.clone();
            p.embeddings.data[i] += h;
            let mut m = b.clone();
            m.embeddings.data[i] -= h;
            let fd = (image_loss(&p, 0.3).unwrap().0 - image_loss(&m, 0.3).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-7, "{fd} vs {}", g.data[i]);
        }
    }

    proptest! {
        #[test]
        fn loss_is_positive_and_scale_invariant(
            data in prop::collection::vec(-3.0f64..3.0, 6 * 4),
            scales in prop::collection::vec(0.1f64..10.0, 6),
        ) {
            prop_assume!(data.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
            let b = ContrastiveBatch::new(Matrix::from_vec(6, 4, data.clone())).unwrap();
            let (l, _) = image_loss(&b, 0.5).unwrap();
            prop_assert!(l > 0.0);
            for i in 0..6 {
                prop_assert!(ntxent_single(&b, i, 0.5).unwrap() > 0.0);
            }
            let scaled: Vec<f64> = data
                .chunks(4)
                .zip(&scales)
                .flat_map(|(r, s)| r.iter().map(move |v| v * s))
                .collect();
            let bs = ContrastiveBatch::new(Matrix::from_vec(6, 4, scaled)).unwrap();
            let (ls, _) = image_loss(&bs, 0.5).unwrap();
            prop_assert!((l - ls).abs() < 1e-9);
        }
    }
}
