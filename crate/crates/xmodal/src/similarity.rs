//! The two similarity functions behind every matching loss, with exact
//! partial derivatives. Scores are kept in log space throughout: downstream
//! softmax losses exponentiate implicitly via `log_sum_exp`, so raw
//! similarities (which blow up near the inverse-distance floor) never exist
//! as numbers.

use crate::numerics::{pairwise_cosine, pairwise_euclidean, row_norms_checked, Matrix};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default floor added to the Euclidean distance before inverting.
pub const DEFAULT_DISTANCE_EPS: f64 = 1e-6;
/// Default initial scale for the scaled-cosine kernel.
pub const DEFAULT_SCALE_W: f64 = 10.0;
/// Default initial offset for the scaled-cosine kernel.
pub const DEFAULT_SCALE_B: f64 = -5.0;

/// Similarity kernel: which metric, plus its parameters.
///
/// `InverseEuclidean` scores log S = 1 / (distance + eps). The floor keeps
/// the score and its gradient finite when two rows coincide; this is a
/// deliberate deviation from the bare inverse, which diverges at zero.
/// `ScaledCosine` scores log S = w * cos + b with learnable `w` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SimilarityKernel {
    InverseEuclidean { eps: f64 },
    ScaledCosine { w: f64, b: f64 },
}

impl SimilarityKernel {
    pub fn inverse_euclidean(eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "distance floor eps must be positive and finite, got {eps}"
            )));
        }
        Ok(SimilarityKernel::InverseEuclidean { eps })
    }

    pub fn scaled_cosine(w: f64, b: f64) -> Result<Self> {
        if !w.is_finite() || !b.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scale parameters must be finite, got w={w}, b={b}"
            )));
        }
        Ok(SimilarityKernel::ScaledCosine { w, b })
    }

    /// Default angular kernel: w and b start with a usable softmax range.
    pub fn default_angular() -> Self {
        SimilarityKernel::ScaledCosine {
            w: DEFAULT_SCALE_W,
            b: DEFAULT_SCALE_B,
        }
    }

    /// Default inverse-distance kernel.
    pub fn default_euclidean() -> Self {
        SimilarityKernel::InverseEuclidean {
            eps: DEFAULT_DISTANCE_EPS,
        }
    }

    pub fn is_angular(&self) -> bool {
        matches!(self, SimilarityKernel::ScaledCosine { .. })
    }

    /// Learnable parameters as (w, b); zero-sized for inverse-Euclidean.
    pub fn params(&self) -> (f64, f64) {
        match self {
            SimilarityKernel::InverseEuclidean { .. } => (0.0, 0.0),
            SimilarityKernel::ScaledCosine { w, b } => (*w, *b),
        }
    }

    /// Overwrite learnable parameters; no-op for inverse-Euclidean.
    pub fn set_params(&mut self, new_w: f64, new_b: f64) {
        if let SimilarityKernel::ScaledCosine { w, b } = self {
            *w = new_w;
            *b = new_b;
        }
    }
}

/// Gradients of `sum_ij upstream_ij * log S_ij` with respect to everything.
#[derive(Debug, Clone)]
pub struct ScoreGrad {
    pub d_a: Matrix,
    pub d_b: Matrix,
    pub d_w: f64,
    pub d_bias: f64,
}

/// Log-similarity matrix: entry (i, j) is log S(a_i, b_j).
pub fn score(kernel: &SimilarityKernel, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    match kernel {
        SimilarityKernel::InverseEuclidean { eps } => {
            let mut d = pairwise_euclidean(a, b)?;
            for v in d.data_mut() {
                *v = 1.0 / (*v + eps);
            }
            Ok(d)
        }
        SimilarityKernel::ScaledCosine { w, b: bias } => {
            let mut c = pairwise_cosine(a, b)?;
            for v in c.data_mut() {
                *v = w * *v + bias;
            }
            Ok(c)
        }
    }
}

/// Backward pass of [`score`]: exact analytic gradients of
/// `sum_ij upstream_ij * log S_ij` w.r.t. both embedding batches and the
/// kernel parameters. `d_w`/`d_bias` are zero for the inverse-Euclidean
/// kernel, which has no learnable parameters.
pub fn score_grad(
    kernel: &SimilarityKernel,
    a: &Matrix,
    b: &Matrix,
    upstream: &Matrix,
) -> Result<ScoreGrad> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "score_grad: {} vs {} columns",
            a.cols(),
            b.cols()
        )));
    }
    if upstream.rows() != a.rows() || upstream.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "score_grad: upstream {}x{} for batches {}x{}",
            upstream.rows(),
            upstream.cols(),
            a.rows(),
            b.rows()
        )));
    }
    let dim = a.cols();
    let mut d_a = Matrix::zeros(a.rows(), dim);
    let mut d_b = Matrix::zeros(b.rows(), dim);
    let mut d_w = 0.0;
    let mut d_bias = 0.0;

    match kernel {
        SimilarityKernel::InverseEuclidean { eps } => {
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    let u = upstream.get(i, j);
                    if u == 0.0 {
                        continue;
                    }
                    let dist = crate::numerics::euclidean_distance(a.row(i), b.row(j));
                    // d(logS)/d(dist) = -1/(dist+eps)^2; at dist = 0 the
                    // row difference is zero so the whole term vanishes.
                    if dist == 0.0 {
                        continue;
                    }
                    let coeff = -u / ((dist + eps) * (dist + eps) * dist);
                    for k in 0..dim {
                        let diff = a.get(i, k) - b.get(j, k);
                        d_a.set(i, k, d_a.get(i, k) + coeff * diff);
                        d_b.set(j, k, d_b.get(j, k) - coeff * diff);
                    }
                }
            }
        }
        SimilarityKernel::ScaledCosine { w, .. } => {
            let norms_a = row_norms_checked(a)?;
            let norms_b = row_norms_checked(b)?;
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    let u = upstream.get(i, j);
                    let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                    let cos = dot / (norms_a[i] * norms_b[j]);
                    d_w += u * cos;
                    d_bias += u;
                    if u == 0.0 {
                        continue;
                    }
                    let uw = u * w;
                    for k in 0..dim {
                        let ga = b.get(j, k) / (norms_a[i] * norms_b[j])
                            - cos * a.get(i, k) / (norms_a[i] * norms_a[i]);
                        let gb = a.get(i, k) / (norms_a[i] * norms_b[j])
                            - cos * b.get(j, k) / (norms_b[j] * norms_b[j]);
                        d_a.set(i, k, d_a.get(i, k) + uw * ga);
                        d_b.set(j, k, d_b.get(j, k) + uw * gb);
                    }
                }
            }
        }
    }
    Ok(ScoreGrad {
        d_a,
        d_b,
        d_w,
        d_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn dot_with_upstream(
        kernel: &SimilarityKernel,
        a: &Matrix,
        b: &Matrix,
        upstream: &Matrix,
    ) -> f64 {
        let s = score(kernel, a, b).unwrap();
        let mut acc = 0.0;
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                acc += upstream.get(i, j) * s.get(i, j);
            }
        }
        acc
    }

    /// Relative error with a unit floor: sub-unit gradients are compared in
    /// absolute terms, which is what a 1e-5 tolerance means in practice.
    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
    }

    fn finite_diff_check(kernel: &SimilarityKernel, a: &Matrix, b: &Matrix, u: &Matrix) -> f64 {
        const H: f64 = 1e-6;
        let grads = score_grad(kernel, a, b, u).unwrap();
        let mut worst: f64 = 0.0;

        for i in 0..a.rows() {
            for k in 0..a.cols() {
                let mut ap = a.clone();
                ap.set(i, k, a.get(i, k) + H);
                let mut am = a.clone();
                am.set(i, k, a.get(i, k) - H);
                let num = (dot_with_upstream(kernel, &ap, b, u)
                    - dot_with_upstream(kernel, &am, b, u))
                    / (2.0 * H);
                worst = worst.max(rel_err(grads.d_a.get(i, k), num));
            }
        }
        for j in 0..b.rows() {
            for k in 0..b.cols() {
                let mut bp = b.clone();
                bp.set(j, k, b.get(j, k) + H);
                let mut bm = b.clone();
                bm.set(j, k, b.get(j, k) - H);
                let num = (dot_with_upstream(kernel, a, &bp, u)
                    - dot_with_upstream(kernel, a, &bm, u))
                    / (2.0 * H);
                worst = worst.max(rel_err(grads.d_b.get(j, k), num));
            }
        }
        if let SimilarityKernel::ScaledCosine { w, b: bias } = *kernel {
            let kp = SimilarityKernel::ScaledCosine { w: w + H, b: bias };
            let km = SimilarityKernel::ScaledCosine { w: w - H, b: bias };
            let num =
                (dot_with_upstream(&kp, a, b, u) - dot_with_upstream(&km, a, b, u)) / (2.0 * H);
            worst = worst.max(rel_err(grads.d_w, num));

            let kp = SimilarityKernel::ScaledCosine { w, b: bias + H };
            let km = SimilarityKernel::ScaledCosine { w, b: bias - H };
            let num =
                (dot_with_upstream(&kp, a, b, u) - dot_with_upstream(&km, a, b, u)) / (2.0 * H);
            worst = worst.max(rel_err(grads.d_bias, num));
        }
        worst
    }

    #[test]
    fn scaled_cosine_identical_unit_rows_scores_one() {
        let kernel = SimilarityKernel::scaled_cosine(1.0, 0.0).unwrap();
        let a = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let s = score(&kernel, &a, &a).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        // S itself is e
        assert!((s.get(0, 0).exp() - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn inverse_euclidean_unit_distance() {
        let kernel = SimilarityKernel::inverse_euclidean(1e-6).unwrap();
        let a = Matrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let s = score(&kernel, &a, &b).unwrap();
        assert!((s.get(0, 0) - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn scaled_cosine_orthogonal_rows_score_bias() {
        let kernel = SimilarityKernel::scaled_cosine(10.0, -5.0).unwrap();
        let a = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert_eq!(score(&kernel, &a, &b).unwrap().get(0, 0), -5.0);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let a = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let b = Matrix::from_fn(4, 2, |_, _| rng.normal());
        let u = Matrix::zeros(3, 4);
        for kernel in [
            SimilarityKernel::default_angular(),
            SimilarityKernel::default_euclidean(),
        ] {
            let g = score_grad(&kernel, &a, &b, &u).unwrap();
            assert!(g.d_a.data().iter().all(|&v| v == 0.0));
            assert!(g.d_b.data().iter().all(|&v| v == 0.0));
            assert_eq!(g.d_w, 0.0);
            assert_eq!(g.d_bias, 0.0);
        }
    }

    #[test]
    fn scaled_cosine_bias_grad_is_upstream_sum() {
        let mut rng = Rng::new(11);
        let a = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let b = Matrix::from_fn(2, 2, |_, _| rng.normal());
        let u = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let g = score_grad(&SimilarityKernel::default_angular(), &a, &b, &u).unwrap();
        let sum: f64 = u.data().iter().sum();
        assert!((g.d_bias - sum).abs() < 1e-12);
    }

    #[test]
    fn random_batches_match_finite_differences() {
        let mut rng = Rng::new(17);
        let a = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let b = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let u = Matrix::from_fn(3, 3, |_, _| rng.normal());
        for kernel in [
            SimilarityKernel::scaled_cosine(2.0, -1.0).unwrap(),
            SimilarityKernel::inverse_euclidean(1e-6).unwrap(),
        ] {
            let worst = finite_diff_check(&kernel, &a, &b, &u);
            assert!(worst < 1e-5, "worst rel err {worst} for {kernel:?}");
        }
    }

    #[test]
    fn finite_difference_sweep_100_instances() {
        for seed in 0..100u64 {
            let mut rng = Rng::new(seed);
            let a = Matrix::from_fn(3, 2, |_, _| rng.normal());
            let b = Matrix::from_fn(4, 2, |_, _| rng.normal());
            let u = Matrix::from_fn(3, 4, |_, _| rng.normal());
            let kernel = if seed % 2 == 0 {
                SimilarityKernel::scaled_cosine(rng.uniform_in(0.5, 12.0), rng.uniform_in(-6.0, 1.0))
                    .unwrap()
            } else {
                SimilarityKernel::inverse_euclidean(1e-6).unwrap()
            };
            let worst = finite_diff_check(&kernel, &a, &b, &u);
            assert!(worst < 1e-5, "seed {seed}: worst rel err {worst}");
        }
    }

    #[test]
    fn scaled_cosine_log_scores_invariant_to_row_rescaling() {
        let kernel = SimilarityKernel::scaled_cosine(7.0, -3.0).unwrap();
        let mut rng = Rng::new(23);
        let a = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let b = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let base = score(&kernel, &a, &b).unwrap();
        let mut a2 = a.clone();
        for i in 0..a2.rows() {
            let s = rng.uniform_in(0.1, 10.0);
            for v in a2.row_mut(i) {
                *v *= s;
            }
        }
        let scaled = score(&kernel, &a2, &b).unwrap();
        for (x, y) in base.data().iter().zip(scaled.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn scaled_cosine_embedding_grads_orthogonal_to_embedding() {
        // A consequence of scale invariance: moving along the embedding
        // itself cannot change any cosine.
        let kernel = SimilarityKernel::default_angular();
        let mut rng = Rng::new(31);
        let a = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let b = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let u = Matrix::from_fn(4, 5, |_, _| rng.normal());
        let g = score_grad(&kernel, &a, &b, &u).unwrap();
        for i in 0..a.rows() {
            let dot: f64 = g.d_a.row(i).iter().zip(a.row(i)).map(|(x, y)| x * y).sum();
            assert!(dot.abs() < 1e-9, "row {i}: <grad, a> = {dot}");
        }
        for j in 0..b.rows() {
            let dot: f64 = g.d_b.row(j).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            assert!(dot.abs() < 1e-9, "row {j}: <grad, b> = {dot}");
        }
    }

    #[test]
    fn inverse_euclidean_monotone_and_bounded() {
        let eps = 1e-3;
        let kernel = SimilarityKernel::inverse_euclidean(eps).unwrap();
        let origin = Matrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let mut last = f64::INFINITY;
        for d in [0.0, 0.1, 0.5, 1.0, 5.0, 100.0] {
            let b = Matrix::from_rows(&[&[d, 0.0]]).unwrap();
            let s = score(&kernel, &origin, &b).unwrap().get(0, 0);
            assert!(s <= 1.0 / eps + 1e-12);
            assert!(s < last || d == 0.0);
            last = s;
        }
    }

    #[test]
    fn scaled_cosine_rejects_zero_rows() {
        let kernel = SimilarityKernel::default_angular();
        let a = Matrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        assert_eq!(
            score(&kernel, &a, &b),
            Err(Error::DegenerateEmbedding { row: 0 })
        );
    }
}
