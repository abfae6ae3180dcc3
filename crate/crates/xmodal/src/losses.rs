//! Training objectives over paired embedding batches, with values and exact
//! gradients.
//!
//! The softmax family selects the matching row of the other modality among
//! all batch rows (the batch supplies the negatives): the audio-to-video
//! direction, its transpose, the two-direction sum, and the cross-domain
//! variant whose denominators mix in same-modality negatives so embeddings
//! separate within each modality too. Pairwise contrastive and binary
//! baselines are included for comparison runs.
//!
//! Everything is computed in log space via `log_sum_exp`; raw similarities
//! are never exponentiated (the inverse-distance kernel can produce scores
//! in the thousands near its floor).

use crate::numerics::{euclidean_distance, log_sum_exp, Matrix, Rng};
use crate::similarity::{score, score_grad, SimilarityKernel};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which objective to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    PairwiseContrastive,
    PairwiseBinary,
    Mwm,
    Cddl,
}

/// A fully specified objective: kind plus kernel, and the margin for the
/// contrastive baseline. The "angular" variants are `Mwm`/`Cddl` with a
/// scaled-cosine kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub kernel: SimilarityKernel,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(kind: LossKind, kernel: SimilarityKernel) -> Self {
        LossSpec {
            kind,
            kernel,
            margin: default_margin(),
        }
    }
}

/// Loss value plus gradients w.r.t. both modality batches and the kernel's
/// learnable parameters. For the binary baseline `grad_w`/`grad_b` carry the
/// slope/bias gradients of its decision head instead.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_v: Matrix,
    pub grad_w: f64,
    pub grad_b: f64,
    /// Named sub-losses; for the multi-way objectives these sum to `value`.
    pub components: BTreeMap<String, f64>,
}

impl LossResult {
    fn zeros(n: usize, d: usize) -> Self {
        LossResult {
            value: 0.0,
            grad_a: Matrix::zeros(n, d),
            grad_v: Matrix::zeros(n, d),
            grad_w: 0.0,
            grad_b: 0.0,
            components: BTreeMap::new(),
        }
    }
}

fn check_batch(xa: &Matrix, xv: &Matrix) -> Result<()> {
    if xa.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if xa.rows() != xv.rows() {
        return Err(Error::ShapeMismatch(format!(
            "batch sizes differ: {} vs {}",
            xa.rows(),
            xv.rows()
        )));
    }
    if xa.cols() != xv.cols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims differ: {} vs {}",
            xa.cols(),
            xv.cols()
        )));
    }
    Ok(())
}

/// N-way matching loss in one direction: row j of `xa` must out-score all
/// other rows of `xv` for its own column j. Positives sit on the diagonal;
/// every off-diagonal pair acts as a negative.
pub fn loss_av(kernel: &SimilarityKernel, xa: &Matrix, xv: &Matrix) -> Result<LossResult> {
    check_batch(xa, xv)?;
    let n = xa.rows();
    let logs = score(kernel, xa, xv)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut upstream = Matrix::zeros(n, n);
    for j in 0..n {
        let lse = log_sum_exp(logs.row(j))?;
        value -= inv_n * (logs.get(j, j) - lse);
        for k in 0..n {
            let p = (logs.get(j, k) - lse).exp();
            let delta = if k == j { 1.0 } else { 0.0 };
            upstream.set(j, k, inv_n * (p - delta));
        }
    }
    let g = score_grad(kernel, xa, xv, &upstream)?;
    let mut components = BTreeMap::new();
    components.insert("AV".to_string(), value);
    Ok(LossResult {
        value,
        grad_a: g.d_a,
        grad_v: g.d_b,
        grad_w: g.d_w,
        grad_b: g.d_bias,
        components,
    })
}

/// Both matching directions summed; components `AV` and `VA`.
pub fn loss_mwm(kernel: &SimilarityKernel, xa: &Matrix, xv: &Matrix) -> Result<LossResult> {
    let av = loss_av(kernel, xa, xv)?;
    let va = loss_av(kernel, xv, xa)?;
    let mut out = av;
    out.value += va.value;
    out.grad_a.add_scaled(&va.grad_v, 1.0)?;
    out.grad_v.add_scaled(&va.grad_a, 1.0)?;
    out.grad_w += va.grad_w;
    out.grad_b += va.grad_b;
    out.components.insert("VA".to_string(), va.value);
    Ok(out)
}

/// Cross-domain term: the positive is the cross-modal partner, the
/// negatives are the other rows of the *same* modality as the anchor.
/// With a single row there are no negatives and the loss is exactly zero.
pub fn loss_aav(kernel: &SimilarityKernel, xa: &Matrix, xv: &Matrix) -> Result<LossResult> {
    check_batch(xa, xv)?;
    let n = xa.rows();
    let cross = score(kernel, xa, xv)?;
    let within = score(kernel, xa, xa)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut u_cross = Matrix::zeros(n, n);
    let mut u_within = Matrix::zeros(n, n);
    let mut denom = Vec::with_capacity(n);
    for j in 0..n {
        denom.clear();
        denom.push(cross.get(j, j));
        for k in 0..n {
            if k != j {
                denom.push(within.get(k, j));
            }
        }
        let lse = log_sum_exp(&denom)?;
        value -= inv_n * (cross.get(j, j) - lse);
        let p_pos = (cross.get(j, j) - lse).exp();
        u_cross.set(j, j, -inv_n * (1.0 - p_pos));
        for k in 0..n {
            if k != j {
                let p = (within.get(k, j) - lse).exp();
                u_within.set(k, j, inv_n * p);
            }
        }
    }
    let gc = score_grad(kernel, xa, xv, &u_cross)?;
    let gw = score_grad(kernel, xa, xa, &u_within)?;
    // xa appears as both arguments of the within-modality score matrix.
    let mut grad_a = gc.d_a;
    grad_a.add_scaled(&gw.d_a, 1.0)?;
    grad_a.add_scaled(&gw.d_b, 1.0)?;
    let mut components = BTreeMap::new();
    components.insert("AAV".to_string(), value);
    Ok(LossResult {
        value,
        grad_a,
        grad_v: gc.d_b,
        grad_w: gc.d_w + gw.d_w,
        grad_b: gc.d_bias + gw.d_bias,
        components,
    })
}

/// Full cross-domain discriminative loss: both matching directions plus
/// both within-modality terms. Components `AV`, `VA`, `AAV`, `VVA` sum to
/// the value; gradients are the component sums.
pub fn loss_cddl(kernel: &SimilarityKernel, xa: &Matrix, xv: &Matrix) -> Result<LossResult> {
    let mut out = loss_mwm(kernel, xa, xv)?;
    let aav = loss_aav(kernel, xa, xv)?;
    let vva = loss_aav(kernel, xv, xa)?;
    out.value += aav.value + vva.value;
    out.grad_a.add_scaled(&aav.grad_a, 1.0)?;
    out.grad_v.add_scaled(&aav.grad_v, 1.0)?;
    out.grad_a.add_scaled(&vva.grad_v, 1.0)?;
    out.grad_v.add_scaled(&vva.grad_a, 1.0)?;
    out.grad_w += aav.grad_w + vva.grad_w;
    out.grad_b += aav.grad_b + vva.grad_b;
    out.components.insert("AAV".to_string(), aav.value);
    out.components.insert("VVA".to_string(), vva.value);
    Ok(out)
}

/// Same/different label for an aligned row pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Same,
    Different,
}

fn check_pairs(xa: &Matrix, xv: &Matrix, labels: &[PairLabel]) -> Result<()> {
    check_batch(xa, xv)?;
    if labels.len() != xa.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} pairs",
            labels.len(),
            xa.rows()
        )));
    }
    Ok(())
}

/// Margin contrastive baseline on pairwise Euclidean distance: squared
/// distance for same pairs, squared hinge for different pairs.
pub fn loss_pairwise_contrastive(
    xa: &Matrix,
    xv: &Matrix,
    labels: &[PairLabel],
    margin: f64,
) -> Result<LossResult> {
    check_pairs(xa, xv, labels)?;
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let n = xa.rows();
    let d = xa.cols();
    let inv_n = 1.0 / n as f64;
    let mut out = LossResult::zeros(n, d);
    for j in 0..n {
        let dist = euclidean_distance(xa.row(j), xv.row(j));
        match labels[j] {
            PairLabel::Same => {
                out.value += inv_n * dist * dist;
                for k in 0..d {
                    let diff = xa.get(j, k) - xv.get(j, k);
                    out.grad_a.set(j, k, out.grad_a.get(j, k) + inv_n * 2.0 * diff);
                    out.grad_v.set(j, k, out.grad_v.get(j, k) - inv_n * 2.0 * diff);
                }
            }
            PairLabel::Different => {
                let hinge = margin - dist;
                if hinge > 0.0 && dist > 0.0 {
                    out.value += inv_n * hinge * hinge;
                    let coeff = -inv_n * 2.0 * hinge / dist;
                    for k in 0..d {
                        let diff = xa.get(j, k) - xv.get(j, k);
                        out.grad_a.set(j, k, out.grad_a.get(j, k) + coeff * diff);
                        out.grad_v.set(j, k, out.grad_v.get(j, k) - coeff * diff);
                    }
                } else if hinge > 0.0 {
                    // coincident different-pair: hinge active but the
                    // distance gradient has no direction; subgradient 0.
                    out.value += inv_n * hinge * hinge;
                }
            }
        }
    }
    Ok(out)
}

/// Learned affine decision head for the binary baseline: the logit is
/// `slope * distance + bias` and "same" probability is `sigmoid(-logit)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryHead {
    pub slope: f64,
    pub bias: f64,
}

impl Default for BinaryHead {
    fn default() -> Self {
        BinaryHead {
            slope: 1.0,
            bias: 0.0,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic baseline on an affine function of pairwise distance. The head's
/// gradients are reported in `grad_w` (slope) and `grad_b` (bias).
pub fn loss_pairwise_binary(
    head: &BinaryHead,
    xa: &Matrix,
    xv: &Matrix,
    labels: &[PairLabel],
) -> Result<LossResult> {
    check_pairs(xa, xv, labels)?;
    let n = xa.rows();
    let d = xa.cols();
    let inv_n = 1.0 / n as f64;
    let mut out = LossResult::zeros(n, d);
    for j in 0..n {
        let dist = euclidean_distance(xa.row(j), xv.row(j));
        let z = head.slope * dist + head.bias;
        let y = match labels[j] {
            PairLabel::Same => 1.0,
            PairLabel::Different => 0.0,
        };
        // -log p(label): softplus(z) for same, softplus(-z) for different
        out.value += inv_n * if y > 0.5 { softplus(z) } else { softplus(-z) };
        let dz = inv_n * (y - sigmoid(-z));
        out.grad_w += dz * dist;
        out.grad_b += dz;
        if dist > 0.0 {
            let coeff = dz * head.slope / dist;
            for k in 0..d {
                let diff = xa.get(j, k) - xv.get(j, k);
                out.grad_a.set(j, k, out.grad_a.get(j, k) + coeff * diff);
                out.grad_v.set(j, k, out.grad_v.get(j, k) - coeff * diff);
            }
        }
    }
    Ok(out)
}

/// Evaluate any configured objective on an aligned self-supervised batch
/// (row j of each modality is the positive pair).
///
/// The multi-way losses take their negatives from the batch itself. For the
/// pairwise baselines, pairs are derived deterministically: every aligned
/// row is a positive and each row is also paired with its cyclic successor
/// in the other modality as a negative.
pub fn evaluate_batch(
    spec: &LossSpec,
    head: &BinaryHead,
    xa: &Matrix,
    xv: &Matrix,
) -> Result<LossResult> {
    match spec.kind {
        LossKind::Mwm => loss_mwm(&spec.kernel, xa, xv),
        LossKind::Cddl => loss_cddl(&spec.kernel, xa, xv),
        LossKind::PairwiseContrastive | LossKind::PairwiseBinary => {
            check_batch(xa, xv)?;
            let n = xa.rows();
            let d = xa.cols();
            let (pa, pv, labels) = derive_pairs(xa, xv);
            let pair_res = match spec.kind {
                LossKind::PairwiseContrastive => {
                    loss_pairwise_contrastive(&pa, &pv, &labels, spec.margin)?
                }
                _ => loss_pairwise_binary(head, &pa, &pv, &labels)?,
            };
            // scatter pair-row gradients back onto the original batch rows
            let mut out = LossResult::zeros(n, d);
            out.value = pair_res.value;
            out.grad_w = pair_res.grad_w;
            out.grad_b = pair_res.grad_b;
            for j in 0..n {
                for k in 0..d {
                    let mut ga = pair_res.grad_a.get(j, k);
                    let mut gv = pair_res.grad_v.get(j, k);
                    if n > 1 {
                        ga += pair_res.grad_a.get(n + j, k);
                    }
                    out.grad_a.set(j, k, ga);
                    if n > 1 {
                        let prev = (j + n - 1) % n;
                        gv += pair_res.grad_v.get(n + prev, k);
                    }
                    out.grad_v.set(j, k, gv);
                }
            }
            Ok(out)
        }
    }
}

/// Positive pairs on aligned rows plus one cyclic-shift negative per row.
fn derive_pairs(xa: &Matrix, xv: &Matrix) -> (Matrix, Matrix, Vec<PairLabel>) {
    let n = xa.rows();
    let d = xa.cols();
    if n == 1 {
        return (xa.clone(), xv.clone(), vec![PairLabel::Same]);
    }
    let mut pa = Matrix::zeros(2 * n, d);
    let mut pv = Matrix::zeros(2 * n, d);
    let mut labels = Vec::with_capacity(2 * n);
    for j in 0..n {
        pa.row_mut(j).copy_from_slice(xa.row(j));
        pv.row_mut(j).copy_from_slice(xv.row(j));
        labels.push(PairLabel::Same);
    }
    for j in 0..n {
        pa.row_mut(n + j).copy_from_slice(xa.row(j));
        pv.row_mut(n + j).copy_from_slice(xv.row((j + 1) % n));
        labels.push(PairLabel::Different);
    }
    (pa, pv, labels)
}

/// Worst-case relative error between analytic gradients and central finite
/// differences (h = 1e-6) on one random batch: all embedding entries plus
/// the learnable scalars of the objective. The denominator is floored at 1
/// so sub-unit gradients are compared absolutely.
pub fn loss_grad_check(spec: &LossSpec, n: usize, d: usize, seed: u64) -> Result<f64> {
    if n < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "grad check needs n >= 2 and d >= 2, got n={n}, d={d}"
        )));
    }
    const H: f64 = 1e-6;
    let mut rng = Rng::new(seed);
    let xa = Matrix::from_fn(n, d, |_, _| rng.normal());
    let xv = Matrix::from_fn(n, d, |_, _| rng.normal());
    let head = BinaryHead::default();

    let analytic = evaluate_batch(spec, &head, &xa, &xv)?;
    let value_of = |spec: &LossSpec, head: &BinaryHead, xa: &Matrix, xv: &Matrix| -> Result<f64> {
        Ok(evaluate_batch(spec, head, xa, xv)?.value)
    };
    let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(1.0);

    let mut worst: f64 = 0.0;
    for i in 0..n {
        for k in 0..d {
            let mut hi = xa.clone();
            hi.set(i, k, xa.get(i, k) + H);
            let mut lo = xa.clone();
            lo.set(i, k, xa.get(i, k) - H);
            let num = (value_of(spec, &head, &hi, &xv)? - value_of(spec, &head, &lo, &xv)?)
                / (2.0 * H);
            worst = worst.max(rel(analytic.grad_a.get(i, k), num));

            let mut hi = xv.clone();
            hi.set(i, k, xv.get(i, k) + H);
            let mut lo = xv.clone();
            lo.set(i, k, xv.get(i, k) - H);
            let num = (value_of(spec, &head, &xa, &hi)? - value_of(spec, &head, &xa, &lo)?)
                / (2.0 * H);
            worst = worst.max(rel(analytic.grad_v.get(i, k), num));
        }
    }
    if spec.kernel.is_angular() && matches!(spec.kind, LossKind::Mwm | LossKind::Cddl) {
        let (w, b) = spec.kernel.params();
        let mut hi = *spec;
        hi.kernel.set_params(w + H, b);
        let mut lo = *spec;
        lo.kernel.set_params(w - H, b);
        let num =
            (value_of(&hi, &head, &xa, &xv)? - value_of(&lo, &head, &xa, &xv)?) / (2.0 * H);
        worst = worst.max(rel(analytic.grad_w, num));

        let mut hi = *spec;
        hi.kernel.set_params(w, b + H);
        let mut lo = *spec;
        lo.kernel.set_params(w, b - H);
        let num =
            (value_of(&hi, &head, &xa, &xv)? - value_of(&lo, &head, &xa, &xv)?) / (2.0 * H);
        worst = worst.max(rel(analytic.grad_b, num));
    }
    if spec.kind == LossKind::PairwiseBinary {
        let hi = BinaryHead {
            slope: head.slope + H,
            ..head
        };
        let lo = BinaryHead {
            slope: head.slope - H,
            ..head
        };
        let num =
            (value_of(spec, &hi, &xa, &xv)? - value_of(spec, &lo, &xa, &xv)?) / (2.0 * H);
        worst = worst.max(rel(analytic.grad_w, num));

        let hi = BinaryHead {
            bias: head.bias + H,
            ..head
        };
        let lo = BinaryHead {
            bias: head.bias - H,
            ..head
        };
        let num =
            (value_of(spec, &hi, &xa, &xv)? - value_of(spec, &lo, &xa, &xv)?) / (2.0 * H);
        worst = worst.max(rel(analytic.grad_b, num));
    }
    Ok(worst)
}
