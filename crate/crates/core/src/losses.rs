//! Adaptation objective terms.
//!
//! All terms are recorded on a [`Tape`](crate::autodiff::Tape) so they can be
//! back-propagated into the feature extractor. Logarithms are clamped at
//! [`LOG_EPS`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Reduce, Var, LOG_EPS};
use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, Tensor};

fn cross_entropy<'t>(probs: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    if probs.shape() != targets.shape() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: probs.shape(),
            right: targets.shape(),
        });
    }
    let t = probs.tape().constant(targets.clone());
    Ok(probs
        .log_clamped(LOG_EPS)?
        .mul(t)?
        .reduce(Reduce::Sum, Axis::Row)?
        .mean()?
        .scale(-1.0))
}

/// Mean of `−log p_i[y_i]` over the batch.
pub fn ce_labeled<'t>(probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (n, c) = probs.shape();
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "ce_labeled",
            left: (n, c),
            right: (labels.len(), 1),
        });
    }
    cross_entropy(probs, &Tensor::one_hot(labels, c)?)
}

/// Cross-entropy against one-hot pseudo-label rows.
pub fn ce_pseudo<'t>(probs: Var<'t>, pseudo: &Tensor) -> Result<Var<'t>> {
    cross_entropy(probs, pseudo)
}

/// `−Σ_k p_k log p_k` per row, as an `m×1` column.
fn entropy_rows<'t>(p: Var<'t>) -> Result<Var<'t>> {
    Ok(p
        .mul(p.log_clamped(LOG_EPS)?)?
        .reduce(Reduce::Sum, Axis::Row)?
        .scale(-1.0))
}

/// `mean_i H(p_i) − H(mean_i p_i)`. Minimising it makes individual
/// predictions certain and the batch marginal diverse.
pub fn mutual_info<'t>(probs: Var<'t>) -> Result<Var<'t>> {
    if probs.shape().0 == 0 {
        return Err(Error::Domain {
            op: "mutual_info",
            msg: "empty batch".into(),
        });
    }
    let conditional = entropy_rows(probs)?.mean()?;
    let marginal = entropy_rows(probs.reduce(Reduce::Mean, Axis::Col)?)?.sum()?;
    conditional.sub(marginal)
}

/// Pair weight used by the probability contrastive term: 1 for the other view
/// of the same instance, `p_i·p_k` for rows predicting the same class, else 0.
pub fn adaptive_weight(p_i: &[f64], p_k: &[f64], same_index: bool) -> f64 {
    if same_index {
        1.0
    } else if argmax(p_i) == argmax(p_k) {
        dot(p_i, p_k)
    } else {
        0.0
    }
}

/// Whether `p_i · p_j` equals 1 to within 1e-12. For simplex vectors this holds
/// exactly when both are the same one-hot vector.
pub fn check_onehot_product(p_i: &[f64], p_j: &[f64]) -> bool {
    (dot(p_i, p_j) - 1.0).abs() <= 1e-12
}

/// How the contrastive sum is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpcrNorm {
    /// Divide by the number of rows `2B`.
    Batch,
    /// Raw double sum.
    Sum,
    /// Each row divided by its total pair weight, then averaged over rows.
    Positives,
}

fn check_pairing(n: usize, pairing: &[usize]) -> Result<()> {
    if pairing.len() != n {
        return Err(Error::Contract(format!(
            "pairing has {} entries for {n} rows",
            pairing.len()
        )));
    }
    if n < 4 {
        return Err(Error::Contract(format!(
            "contrastive loss needs at least 2 instances (4 views), got {n} rows"
        )));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n || j == i || pairing[j] != i {
            return Err(Error::Contract(format!(
                "pairing must be a fixed-point-free involution; row {i} maps to {j}"
            )));
        }
    }
    Ok(())
}

/// Standard pairing for `[weak; strong]` stacks of `b` instances.
pub fn view_pairing(b: usize) -> Vec<usize> {
    (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect()
}

/// Matrix of adaptive weights `w_ik` (self pairs get 0).
///
/// Rows are grouped by the argmax of their instance's weak view, taken to be
/// the lower-indexed row of each pair.
pub fn spcr_weights(probs: &Tensor, pairing: &[usize]) -> Result<Tensor> {
    let n = probs.rows();
    check_pairing(n, pairing)?;
    let group: Vec<usize> = (0..n).map(|i| argmax(probs.row(i.min(pairing[i])))).collect();
    let mut w = Tensor::zeros(n, n);
    for i in 0..n {
        for k in (0..n).filter(|&k| k != i) {
            let v = if k == pairing[i] {
                1.0
            } else if group[i] == group[k] {
                dot(probs.row(i), probs.row(k))
            } else {
                0.0
            };
            w.set(i, k, v);
        }
    }
    Ok(w)
}

fn contrastive<'t>(x: Var<'t>, weights: &Tensor, tau: f64, norm: SpcrNorm) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", "temperature must be positive"));
    }
    let tape = x.tape();
    let n = x.shape().0;
    let mut weights = weights.clone();
    if norm == SpcrNorm::Positives {
        for r in 0..n {
            let row = weights.row_mut(r);
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|w| *w /= total);
            }
        }
    }
    let mut off_diag = Tensor::full(n, n, 1.0);
    for i in 0..n {
        off_diag.set(i, i, 0.0);
    }
    let row_weight = Tensor::new(n, 1, weights.iter_rows().map(|r| r.iter().sum()).collect())?;

    let sim = x.matmul(x.t())?.scale(1.0 / tau);
    let positive = sim.mul(tape.constant(weights))?.sum()?;
    let log_denominator = sim
        .exp()
        .mul(tape.constant(off_diag))?
        .reduce(Reduce::Sum, Axis::Row)?
        .log_clamped(LOG_EPS)?;
    let normaliser = log_denominator.mul(tape.constant(row_weight))?.sum()?;
    let scale = match norm {
        SpcrNorm::Batch | SpcrNorm::Positives => 1.0 / n as f64,
        SpcrNorm::Sum => 1.0,
    };
    Ok(normaliser.sub(positive)?.scale(scale))
}

/// Semantic probability contrastive regularisation over `2B` probability rows.
///
/// Row `i` is attracted to its counterpart view `pairing[i]` (weight 1) and to
/// every other row with the same argmax (weight `p_i·p_k`), against all rows
/// `j ≠ i`. The weights are computed from the current values and treated as
/// constants.
pub fn spcr_loss<'t>(probs: Var<'t>, pairing: &[usize], tau: f64, norm: SpcrNorm) -> Result<Var<'t>> {
    let weights = spcr_weights(&probs.value(), pairing)?;
    contrastive(probs, &weights, tau, norm)
}

/// [`spcr_loss`] with the pair weights supplied by the caller, e.g. taken
/// from an earlier evaluation so that finite differences hold them fixed.
pub fn spcr_loss_with_weights<'t>(probs: Var<'t>, weights: &Tensor, tau: f64, norm: SpcrNorm) -> Result<Var<'t>> {
    let n = probs.shape().0;
    if weights.shape() != (n, n) {
        return Err(Error::Dimension {
            op: "spcr_loss",
            left: (n, n),
            right: weights.shape(),
        });
    }
    contrastive(probs, weights, tau, norm)
}

/// Instance-level InfoNCE over embeddings: only the counterpart view is positive.
pub fn info_nce<'t>(z: Var<'t>, pairing: &[usize], tau: f64, norm: SpcrNorm) -> Result<Var<'t>> {
    let n = z.shape().0;
    check_pairing(n, pairing)?;
    let mut w = Tensor::zeros(n, n);
    for (i, &j) in pairing.iter().enumerate() {
        w.set(i, j, 1.0);
    }
    contrastive(z, &w, tau, norm)
}

/// Mean squared l2 distance between mixed-sample probabilities and mixed labels.
pub fn hmr_loss<'t>(probs_mix: Var<'t>, y_mix: &Tensor) -> Result<Var<'t>> {
    if probs_mix.shape() != y_mix.shape() {
        return Err(Error::Dimension {
            op: "hmr_loss",
            left: probs_mix.shape(),
            right: y_mix.shape(),
        });
    }
    let diff = probs_mix.sub(probs_mix.tape().constant(y_mix.clone()))?;
    diff.mul(diff)?.reduce(Reduce::Sum, Axis::Row)?.mean()
}

/// Moving-average predictions `ỹ_i ← β·ỹ_i + (1−β)·p_i` per unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyPredictionStore {
    beta: f64,
    values: Tensor,
    initialized: Vec<bool>,
}

impl EarlyPredictionStore {
    pub fn new(samples: usize, classes: usize, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config("beta", "must lie in [0, 1)"));
        }
        Ok(Self {
            beta,
            values: Tensor::zeros(samples, classes),
            initialized: vec![false; samples],
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initialized.is_empty()
    }

    pub fn get(&self, id: usize) -> &[f64] {
        self.values.row(id)
    }

    pub fn is_initialized(&self, id: usize) -> bool {
        self.initialized[id]
    }

    fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&bad) => Err(Error::Index {
                what: "early prediction store",
                index: bad,
                len: self.len(),
            }),
            None => Ok(()),
        }
    }

    /// Folds the (detached) batch probabilities into the store.
    pub fn update(&mut self, probs: &Tensor, ids: &[usize]) -> Result<()> {
        self.check(ids)?;
        if probs.rows() != ids.len() || probs.cols() != self.values.cols() {
            return Err(Error::Dimension {
                op: "tpr_update",
                left: probs.shape(),
                right: (ids.len(), self.values.cols()),
            });
        }
        for (r, &id) in ids.iter().enumerate() {
            let beta = self.beta;
            for (v, &p) in self.values.row_mut(id).iter_mut().zip(probs.row(r)) {
                *v = beta * *v + (1.0 - beta) * p;
            }
            self.initialized[id] = true;
        }
        Ok(())
    }

    pub fn targets(&self, ids: &[usize]) -> Result<Tensor> {
        self.check(ids)?;
        if let Some(&id) = ids.iter().find(|&&i| !self.initialized[i]) {
            return Err(Error::Contract(format!(
                "early prediction for sample {id} read before its first update"
            )));
        }
        self.values.select_rows(ids)
    }
}

/// Mean of `log(max(1 − ỹ_iᵀp_i, 1e-8))`; gradients flow through `p` only.
pub fn tpr_loss<'t>(store: &EarlyPredictionStore, probs: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    let targets = store.targets(ids)?;
    let agreement = probs.row_dot(probs.tape().constant(targets))?;
    agreement.scale(-1.0).add_scalar(1.0).log_clamped(LOG_EPS)?.mean()
}

/// Weights of the three regularisers in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub prob: f64,
    pub mix: f64,
    pub pre: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            prob: 0.3,
            mix: 60.0,
            pre: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_prob", self.prob), ("lambda_mix", self.mix), ("lambda_pre", self.pre)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_l: f64,
    pub l_u: f64,
    pub l_mi: f64,
    pub l_prob: f64,
    pub l_mix: f64,
    pub l_pre: f64,
}

impl LossBreakdown {
    pub fn base(&self) -> f64 {
        base_loss(self.l_l, self.l_u, self.l_mi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub breakdown: LossBreakdown,
}

pub fn base_loss(l_l: f64, l_u: f64, l_mi: f64) -> f64 {
    l_l + l_u + l_mi
}

/// `L_base + λ_prob·L_prob + λ_mix·L_mix + λ_pre·L_pre`.
pub fn total_loss(parts: &LossBreakdown, weights: &LossWeights) -> Result<LossValue> {
    weights.validate()?;
    let total = parts.base()
        + weights.prob * parts.l_prob
        + weights.mix * parts.l_mix
        + weights.pre * parts.l_pre;
    Ok(LossValue {
        total,
        breakdown: *parts,
    })
}

/// Recorded loss terms of one step; absent terms count as zero.
pub struct LossTerms<'t> {
    pub l_l: Var<'t>,
    pub l_u: Option<Var<'t>>,
    pub l_mi: Option<Var<'t>>,
    pub l_prob: Option<Var<'t>>,
    pub l_mix: Option<Var<'t>>,
    pub l_pre: Option<Var<'t>>,
}

impl<'t> LossTerms<'t> {
    pub fn breakdown(&self) -> LossBreakdown {
        let v = |t: &Option<Var<'t>>| t.map_or(0.0, |v| v.item());
        LossBreakdown {
            l_l: self.l_l.item(),
            l_u: v(&self.l_u),
            l_mi: v(&self.l_mi),
            l_prob: v(&self.l_prob),
            l_mix: v(&self.l_mix),
            l_pre: v(&self.l_pre),
        }
    }

    /// The weighted objective as a tape variable, summed in the same order as
    /// [`total_loss`].
    pub fn total(&self, weights: &LossWeights) -> Result<Var<'t>> {
        weights.validate()?;
        let mut acc = self.l_l;
        for t in [self.l_u, self.l_mi].into_iter().flatten() {
            acc = acc.add(t)?;
        }
        for (w, t) in [(weights.prob, self.l_prob), (weights.mix, self.l_mix), (weights.pre, self.l_pre)] {
            if let Some(t) = t {
                acc = acc.add(t.scale(w))?;
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use approx::assert_abs_diff_eq;

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::one_hot(&[1, 0], 3).unwrap());
        assert_eq!(ce_labeled(p, &[1, 0]).unwrap().item(), 0.0);
        let u = tape.constant(Tensor::full(3, 4, 0.25));
        assert_abs_diff_eq!(ce_labeled(u, &[0, 1, 3]).unwrap().item(), 4f64.ln(), epsilon = 1e-15);
        let p = tape.constant(probs(&[&[0.7, 0.3], &[0.2, 0.8]]));
        let expect = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert_abs_diff_eq!(ce_labeled(p, &[0, 1]).unwrap().item(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(expect, 0.2899, epsilon = 1e-4);
        let pseudo = Tensor::one_hot(&[0, 1], 2).unwrap();
        assert_abs_diff_eq!(ce_pseudo(p, &pseudo).unwrap().item(), expect, epsilon = 1e-15);
        assert!(matches!(ce_labeled(p, &[0, 2]), Err(Error::Index { .. })));
    }

    #[test]
    fn mutual_info_examples() {
        let tape = Tape::new();
        let same = tape.constant(Tensor::one_hot(&[0, 0, 0], 3).unwrap());
        assert_eq!(mutual_info(same).unwrap().item(), 0.0);
        let diverse = tape.constant(Tensor::one_hot(&[0, 1, 2], 3).unwrap());
        assert_abs_diff_eq!(mutual_info(diverse).unwrap().item(), -(3f64.ln()), epsilon = 1e-12);
        let p = tape.constant(probs(&[&[0.9, 0.1], &[0.1, 0.9]]));
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let expect = h - 2f64.ln();
        assert_abs_diff_eq!(mutual_info(p).unwrap().item(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, -0.3681, epsilon = 1e-4);
    }

    #[test]
    fn adaptive_weight_cases() {
        assert_eq!(adaptive_weight(&[0.2, 0.8], &[0.9, 0.1], true), 1.0);
        assert_abs_diff_eq!(adaptive_weight(&[0.9, 0.1], &[0.8, 0.2], false), 0.74, epsilon = 1e-15);
        assert_eq!(adaptive_weight(&[0.9, 0.1], &[0.2, 0.8], false), 0.0);
    }

    #[test]
    fn onehot_product() {
        assert!(check_onehot_product(&[1.0, 0.0], &[1.0, 0.0]));
        assert!(!check_onehot_product(&[1.0, 0.0], &[0.0, 1.0]));
        assert!(!check_onehot_product(&[0.5, 0.5], &[0.5, 0.5]));
    }

    #[test]
    fn spcr_symmetric_batch() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(4, 2, 0.5));
        let loss = spcr_loss(p, &view_pairing(2), 0.15, SpcrNorm::Batch).unwrap();
        // w = 1 for the counterpart and p·p = 0.5 for the two other rows
        let expect = (1.0 + 0.5 + 0.5) * 3f64.ln();
        assert_abs_diff_eq!(loss.item(), expect, epsilon = 1e-12);
    }

    #[test]
    fn spcr_rejects_tiny_batches_and_bad_pairings() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(2, 2, 0.5));
        assert!(matches!(spcr_loss(p, &[1, 0], 0.15, SpcrNorm::Batch), Err(Error::Contract(_))));
        let p = tape.constant(Tensor::full(4, 2, 0.5));
        assert!(spcr_loss(p, &[1, 0, 2, 3], 0.15, SpcrNorm::Batch).is_err());
        assert!(spcr_loss(p, &[1, 2, 3, 0], 0.15, SpcrNorm::Batch).is_err());
    }

    #[test]
    fn spcr_without_semantic_peers_equals_info_nce() {
        let tape = Tape::new();
        // argmaxes 0,1,2,3 for the weak views and the same for strong ones,
        // so only counterparts share a class
        let p = tape.constant(probs(&[
            &[0.7, 0.1, 0.1, 0.1],
            &[0.1, 0.6, 0.2, 0.1],
            &[0.6, 0.2, 0.1, 0.1],
            &[0.2, 0.5, 0.2, 0.1],
        ]));
        let pairing = view_pairing(2);
        let a = spcr_loss(p, &pairing, 0.15, SpcrNorm::Sum).unwrap().item();
        let b = info_nce(p, &pairing, 0.15, SpcrNorm::Sum).unwrap().item();
        // rows 0 and 2 share argmax 0 and are counterparts; rows 1 and 3 too
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn hmr_examples() {
        let tape = Tape::new();
        let y = probs(&[&[0.5, 0.5]]);
        assert_eq!(hmr_loss(tape.constant(y.clone()), &y).unwrap().item(), 0.0);
        let p = tape.constant(probs(&[&[1.0, 0.0]]));
        assert_eq!(hmr_loss(p, &probs(&[&[0.0, 1.0]])).unwrap().item(), 2.0);
        let p = tape.constant(probs(&[&[0.6, 0.4]]));
        assert_abs_diff_eq!(hmr_loss(p, &y).unwrap().item(), 0.02, epsilon = 1e-15);
        assert!(matches!(hmr_loss(p, &Tensor::zeros(1, 3)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn store_follows_geometric_series() {
        let p = probs(&[&[0.6, 0.3, 0.1]]);
        let mut store = EarlyPredictionStore::new(2, 3, 0.7).unwrap();
        store.update(&p, &[1]).unwrap();
        for (a, b) in store.get(1).iter().zip(p.data()) {
            assert_abs_diff_eq!(*a, 0.3 * b, epsilon = 1e-15);
        }
        for _ in 1..10 {
            store.update(&p, &[1]).unwrap();
        }
        let gap = store
            .get(1)
            .iter()
            .zip(p.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(gap, 0.7f64.powi(10) * 0.6, epsilon = 1e-12);
        assert!(!store.is_initialized(0));
        assert!(matches!(store.update(&p, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn tpr_values_and_guards() {
        let tape = Tape::new();
        let mut store = EarlyPredictionStore::new(1, 2, 0.0).unwrap();
        store.update(&probs(&[&[0.5, 0.5]]), &[0]).unwrap();
        let p = tape.constant(probs(&[&[1.0, 0.0]]));
        assert_abs_diff_eq!(tpr_loss(&store, p, &[0]).unwrap().item(), 0.5f64.ln(), epsilon = 1e-15);

        let fresh = EarlyPredictionStore::new(1, 2, 0.7).unwrap();
        assert!(matches!(tpr_loss(&fresh, p, &[0]), Err(Error::Contract(_))));

        let mut agree = EarlyPredictionStore::new(1, 2, 0.0).unwrap();
        agree.update(&probs(&[&[1.0, 0.0]]), &[0]).unwrap();
        let v = tpr_loss(&agree, p, &[0]).unwrap().item();
        assert_abs_diff_eq!(v, LOG_EPS.ln(), epsilon = 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(LossWeights::default(), LossWeights { prob: 0.3, mix: 60.0, pre: 3.0 });
        let zero = total_loss(&LossBreakdown::default(), &LossWeights::default()).unwrap();
        assert_eq!(zero.total, 0.0);
        let parts = LossBreakdown {
            l_l: 1.0,
            l_prob: 2.0,
            l_mix: 0.1,
            l_pre: -0.5,
            ..Default::default()
        };
        assert_abs_diff_eq!(total_loss(&parts, &LossWeights::default()).unwrap().total, 6.1, epsilon = 1e-12);
        let bad = LossWeights { prob: -1.0, ..Default::default() };
        assert!(total_loss(&parts, &bad).unwrap_err().is_config());
        assert_eq!(base_loss(0.0, 0.0, 0.0), 0.0);
        assert_eq!(base_loss(1.0, 2.0, -0.5), 2.5);
    }

    #[test]
    fn tape_total_matches_breakdown() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let terms = LossTerms {
            l_l: s(0.4),
            l_u: Some(s(1.2)),
            l_mi: Some(s(-0.7)),
            l_prob: Some(s(2.3)),
            l_mix: Some(s(0.01)),
            l_pre: Some(s(-1.1)),
        };
        let w = LossWeights::default();
        let via_tape = terms.total(&w).unwrap().item();
        let via_parts = total_loss(&terms.breakdown(), &w).unwrap().total;
        assert!((via_tape - via_parts).abs() <= 1e-12);
    }
}
