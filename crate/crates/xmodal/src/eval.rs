//! Evaluation protocols: verification EER over scored trials, cross-modal
//! trial generation, retrieval recall@K, and a frozen-feature linear probe.

use crate::losses::PairLabel;
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Scored verification trials. Higher scores mean "more likely same".
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub scores: Vec<f64>,
    pub labels: Vec<PairLabel>,
}

impl TrialSet {
    pub fn new(scores: Vec<f64>, labels: Vec<PairLabel>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(idx) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("trial score {idx}")));
        }
        Ok(TrialSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == PairLabel::Same).count()
    }

    pub fn num_negative(&self) -> usize {
        self.len() - self.num_positive()
    }

    /// Write as `score,label` CSV rows under a header line.
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("score,label\n");
        for (score, label) in self.scores.iter().zip(&self.labels) {
            let tag = match label {
                PairLabel::Same => "same",
                PairLabel::Different => "different",
            };
            out.push_str(&format!("{score},{tag}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("score,label") => {}
            other => {
                return Err(Error::Config(format!(
                    "expected 'score,label' header, got {other:?}"
                )))
            }
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (score, label) = line.split_once(',').ok_or_else(|| {
                Error::Config(format!("trial row {} is not 'score,label'", idx + 2))
            })?;
            scores.push(
                score
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad score on row {}: {e}", idx + 2)))?,
            );
            labels.push(match label {
                "same" => PairLabel::Same,
                "different" => PairLabel::Different,
                other => {
                    return Err(Error::Config(format!(
                        "bad label '{other}' on row {}",
                        idx + 2
                    )))
                }
            });
        }
        TrialSet::new(scores, labels)
    }
}

/// Equal error rate and the score threshold where it occurs.
///
/// Sweeps every distinct score as an accept-if-greater-or-equal threshold
/// and linearly interpolates between the two ROC operating points that
/// bracket FAR = FRR.
pub fn eer(trials: &TrialSet) -> Result<(f64, f64)> {
    let pos = trials.num_positive();
    let neg = trials.num_negative();
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "EER needs both trial classes, got {pos} positive / {neg} negative"
        )));
    }
    // distinct thresholds, descending; the sentinel above every score is the
    // accept-nothing operating point (FAR 0, FRR 1)
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&i, &j| trials.scores[j].partial_cmp(&trials.scores[i]).unwrap());

    let mut points: Vec<(f64, f64, f64)> = Vec::new(); // (threshold, far, frr)
    let sentinel = trials.scores[order[0]] + 1.0;
    points.push((sentinel, 0.0, 1.0));
    let mut accepted_pos = 0usize;
    let mut accepted_neg = 0usize;
    let mut idx = 0;
    while idx < order.len() {
        let threshold = trials.scores[order[idx]];
        // accept the whole tie group at once
        while idx < order.len() && trials.scores[order[idx]] == threshold {
            match trials.labels[order[idx]] {
                PairLabel::Same => accepted_pos += 1,
                PairLabel::Different => accepted_neg += 1,
            }
            idx += 1;
        }
        let far = accepted_neg as f64 / neg as f64;
        let frr = (pos - accepted_pos) as f64 / pos as f64;
        points.push((threshold, far, frr));
    }

    for pair in points.windows(2) {
        let (t0, far0, frr0) = pair[0];
        let (t1, far1, frr1) = pair[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d1 >= 0.0 {
            // d0 < 0 <= d1: crossing sits in this segment
            let t = if d1 - d0 > 0.0 { -d0 / (d1 - d0) } else { 1.0 };
            let rate = far0 + t * (far1 - far0);
            let threshold = t0 + t * (t1 - t0);
            return Ok((rate, threshold));
        }
    }
    // the final point has FAR 1, FRR 0, so a crossing always exists
    unreachable!("FAR-FRR crossing not found");
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Randomly generated cross-modal trials: rows of `emb_a`/`emb_b` are
/// per-identity embeddings aligned by row. Pair counts honour `num_pairs`
/// and `positive_fraction` exactly (rounded to the nearest count); scores
/// are cosine similarities.
pub fn cross_modal_trials(
    emb_a: &Matrix,
    emb_b: &Matrix,
    num_pairs: usize,
    positive_fraction: f64,
    rng: &mut Rng,
) -> Result<TrialSet> {
    if emb_a.rows() != emb_b.rows() || emb_a.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-modal trials need two aligned identities or more, got {} / {}",
            emb_a.rows(),
            emb_b.rows()
        )));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "positive_fraction must lie in (0, 1), got {positive_fraction}"
        )));
    }
    let n = emb_a.rows();
    let num_pos = ((num_pairs as f64) * positive_fraction).round() as usize;
    if num_pos == 0 || num_pos >= num_pairs {
        return Err(Error::InvalidArgument(format!(
            "{num_pairs} pairs at fraction {positive_fraction} leaves an empty class"
        )));
    }
    let mut scores = Vec::with_capacity(num_pairs);
    let mut labels = Vec::with_capacity(num_pairs);
    for _ in 0..num_pos {
        let i = rng.below(n);
        scores.push(cosine(emb_a.row(i), emb_b.row(i)));
        labels.push(PairLabel::Same);
    }
    for _ in 0..(num_pairs - num_pos) {
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        scores.push(cosine(emb_a.row(i), emb_b.row(j)));
        labels.push(PairLabel::Different);
    }
    TrialSet::new(scores, labels)
}

/// Within-modality verification trials: `identities[r]` labels row r of
/// `emb`, and identities may repeat (several segments per identity). Same
/// pairs take two distinct rows of one identity.
pub fn verification_trials(
    emb: &Matrix,
    identities: &[usize],
    num_pairs: usize,
    positive_fraction: f64,
    rng: &mut Rng,
) -> Result<TrialSet> {
    if identities.len() != emb.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} identity labels for {} rows",
            identities.len(),
            emb.rows()
        )));
    }
    let mut by_identity: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (row, &id) in identities.iter().enumerate() {
        by_identity.entry(id).or_default().push(row);
    }
    if by_identity.len() < 2 {
        return Err(Error::InvalidArgument(
            "verification trials need at least two identities".into(),
        ));
    }
    let multi: Vec<&Vec<usize>> = by_identity.values().filter(|rows| rows.len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::InvalidArgument(
            "no identity has two segments to form a positive pair".into(),
        ));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "positive_fraction must lie in (0, 1), got {positive_fraction}"
        )));
    }
    let num_pos = ((num_pairs as f64) * positive_fraction).round() as usize;
    if num_pos == 0 || num_pos >= num_pairs {
        return Err(Error::InvalidArgument(format!(
            "{num_pairs} pairs at fraction {positive_fraction} leaves an empty class"
        )));
    }
    let mut scores = Vec::with_capacity(num_pairs);
    let mut labels = Vec::with_capacity(num_pairs);
    for _ in 0..num_pos {
        let rows = multi[rng.below(multi.len())];
        let picks = rng.choose_distinct(rows.len(), 2);
        scores.push(cosine(emb.row(rows[picks[0]]), emb.row(rows[picks[1]])));
        labels.push(PairLabel::Same);
    }
    let ids: Vec<usize> = by_identity.keys().copied().collect();
    for _ in 0..(num_pairs - num_pos) {
        let a = rng.below(ids.len());
        let mut b = rng.below(ids.len() - 1);
        if b >= a {
            b += 1;
        }
        let rows_a = &by_identity[&ids[a]];
        let rows_b = &by_identity[&ids[b]];
        let ra = rows_a[rng.below(rows_a.len())];
        let rb = rows_b[rng.below(rows_b.len())];
        scores.push(cosine(emb.row(ra), emb.row(rb)));
        labels.push(PairLabel::Different);
    }
    TrialSet::new(scores, labels)
}

/// Fraction of queries whose aligned gallery row ranks in the top `k` by
/// cosine similarity. Ties rank the lower gallery index first.
pub fn recall_at_k(queries: &Matrix, gallery: &Matrix, k: usize) -> Result<f64> {
    if queries.rows() != gallery.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} queries vs {} gallery rows",
            queries.rows(),
            gallery.rows()
        )));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    if k == 0 || k > gallery.rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} for a gallery of {}",
            gallery.rows()
        )));
    }
    let n = queries.rows();
    let mut hits = 0usize;
    for j in 0..n {
        let target = cosine(queries.row(j), gallery.row(j));
        let mut rank = 0usize;
        for i in 0..n {
            if i == j {
                continue;
            }
            let s = cosine(queries.row(j), gallery.row(i));
            if s > target || (s == target && i < j) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Outcome of a frozen-feature probe.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub num_classes: usize,
}

/// Multinomial logistic regression on frozen features, trained by full-batch
/// gradient descent from zero init (deterministic). Strictly linear so it
/// measures the representation, not probe capacity.
pub fn linear_probe(
    train_feats: &Matrix,
    train_labels: &[usize],
    test_feats: &Matrix,
    test_labels: &[usize],
    num_classes: usize,
    top_k: usize,
    epochs: usize,
) -> Result<ProbeResult> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("probe needs at least 2 classes".into()));
    }
    if top_k == 0 || top_k > num_classes {
        return Err(Error::InvalidArgument(format!(
            "top_k = {top_k} for {num_classes} classes"
        )));
    }
    if train_labels.len() != train_feats.rows() || test_labels.len() != test_feats.rows() {
        return Err(Error::ShapeMismatch("one label per feature row".into()));
    }
    if train_feats.cols() != test_feats.cols() {
        return Err(Error::ShapeMismatch("train/test feature dims differ".into()));
    }
    if train_feats.rows() == 0 || test_feats.rows() == 0 {
        return Err(Error::InvalidArgument("empty probe split".into()));
    }
    let mut seen = vec![false; num_classes];
    for &label in train_labels.iter().chain(test_labels) {
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside {num_classes} classes"
            )));
        }
    }
    for &label in train_labels {
        seen[label] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!(
            "class {missing} absent from the training set"
        )));
    }

    let dim = train_feats.cols();
    let n = train_feats.rows();
    let mut weights = Matrix::zeros(num_classes, dim);
    let mut bias = vec![0.0; num_classes];

    let opt_cfg = crate::encoders::OptimizerConfig {
        kind: crate::encoders::OptimizerKind::Adam,
        learning_rate: 0.05,
        ..Default::default()
    };
    let mut opt =
        crate::encoders::OptimizerState::new(opt_cfg, &[num_classes * dim, num_classes]);

    let mut probs = vec![0.0; num_classes];
    for _ in 0..epochs {
        let mut grad_w = Matrix::zeros(num_classes, dim);
        let mut grad_b = vec![0.0; num_classes];
        for r in 0..n {
            let x = train_feats.row(r);
            let mut max_logit = f64::NEG_INFINITY;
            for c in 0..num_classes {
                let logit: f64 =
                    bias[c] + weights.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                probs[c] = logit;
                max_logit = max_logit.max(logit);
            }
            let mut z = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max_logit).exp();
                z += *p;
            }
            for c in 0..num_classes {
                let p = probs[c] / z;
                let delta = p - if c == train_labels[r] { 1.0 } else { 0.0 };
                grad_b[c] += delta / n as f64;
                for (j, v) in x.iter().enumerate() {
                    grad_w.set(c, j, grad_w.get(c, j) + delta * v / n as f64);
                }
            }
        }
        opt.begin_step();
        opt.update(0, weights.data_mut(), grad_w.data())?;
        opt.update(1, &mut bias, &grad_b)?;
    }

    let mut top1_hits = 0usize;
    let mut topk_hits = 0usize;
    for r in 0..test_feats.rows() {
        let x = test_feats.row(r);
        let logits: Vec<f64> = (0..num_classes)
            .map(|c| bias[c] + weights.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let truth = test_labels[r];
        let target = logits[truth];
        let mut rank = 0usize;
        for (c, &s) in logits.iter().enumerate() {
            if c == truth {
                continue;
            }
            if s > target || (s == target && c < truth) {
                rank += 1;
            }
        }
        if rank == 0 {
            top1_hits += 1;
        }
        if rank < top_k {
            topk_hits += 1;
        }
    }
    Ok(ProbeResult {
        top1: top1_hits as f64 / test_feats.rows() as f64,
        topk: topk_hits as f64 / test_feats.rows() as f64,
        k: top_k,
        num_classes,
    })
}
