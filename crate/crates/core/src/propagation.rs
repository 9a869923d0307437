//! KNN-graph label propagation for pseudo-labels.
//!
//! Nodes are target samples (labeled first, then unlabeled). Each node links
//! to its `k` most cosine-similar neighbours with weight `max(0, cos)`; the
//! affinity is symmetrised by averaging and row-normalised. Labels spread from
//! seed nodes by iterating `Y ← α·S·Y + (1−α)·Y⁰` to the fixed point
//! `(1−α)(I − αS)⁻¹Y⁰`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Sparse row-stochastic affinity plus the raw directed neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    /// `neighbors[i]` = the `k` nearest nodes of `i` with their clamped cosine weights.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    /// Row-normalised symmetric affinity, sparse by row, sorted by column.
    pub affinity: Vec<Vec<(usize, f64)>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.affinity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.affinity.is_empty()
    }

    pub fn dense_affinity(&self) -> Tensor {
        let n = self.len();
        let mut s = Tensor::zeros(n, n);
        for (i, row) in self.affinity.iter().enumerate() {
            for &(j, w) in row {
                s.set(i, j, w);
            }
        }
        s
    }

    /// Writes `src,dst,weight` for every non-zero affinity entry.
    pub fn write_edges<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "src,dst,weight")?;
        for (i, row) in self.affinity.iter().enumerate() {
            for &(j, v) in row {
                writeln!(w, "{i},{j},{v}")?;
            }
        }
        Ok(())
    }
}

pub fn build_knn_graph(z: &Tensor, k: usize) -> Result<NeighborGraph> {
    let n = z.rows();
    if k == 0 || k >= n {
        return Err(Error::config("knn_k", format!("need 0 < k < n, got k={k}, n={n}")));
    }
    let norms: Vec<f64> = z.iter_rows().map(crate::tensor::l2_norm).collect();
    let mut neighbors = Vec::with_capacity(n);
    let mut sims: Vec<(usize, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        sims.clear();
        for j in (0..n).filter(|&j| j != i) {
            let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                crate::tensor::dot(z.row(i), z.row(j)) / (norms[i] * norms[j])
            };
            sims.push((j, c));
        }
        // descending similarity, lower index first on ties
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        neighbors.push(
            sims.iter()
                .take(k)
                .map(|&(j, c)| (j, c.max(0.0)))
                .collect::<Vec<_>>(),
        );
    }

    let mut sym: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for (i, row) in neighbors.iter().enumerate() {
        for &(j, w) in row {
            if w > 0.0 {
                *sym[i].entry(j).or_default() += 0.5 * w;
                *sym[j].entry(i).or_default() += 0.5 * w;
            }
        }
    }
    let affinity = sym
        .into_iter()
        .map(|row| {
            let total: f64 = row.values().sum();
            if total > 0.0 {
                row.into_iter().map(|(j, w)| (j, w / total)).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    Ok(NeighborGraph {
        neighbors,
        affinity,
    })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Entropy at or below this counts as a certain prediction.
const CERTAIN: f64 = 1e-12;

/// Seed labels over the graph nodes `[labeled..., unlabeled...]`.
///
/// Every labeled sample is a seed with its true label. Among the unlabeled
/// rows, the `⌊q·N_u⌋` lowest-entropy predictions (ties by index) and every
/// zero-entropy prediction become seeds with their argmax.
pub fn select_seeds(
    probs_u: &Tensor,
    labeled: &[usize],
    quantile: f64,
) -> Result<Vec<Option<usize>>> {
    if !(0.0..1.0).contains(&quantile) {
        return Err(Error::config("seed_quantile", "must lie in [0, 1)"));
    }
    let n_u = probs_u.rows();
    let mut seeds: Vec<Option<usize>> = labeled.iter().map(|&y| Some(y)).collect();
    seeds.resize(labeled.len() + n_u, None);
    let ent: Vec<f64> = probs_u.iter_rows().map(entropy).collect();
    let mut order: Vec<usize> = (0..n_u).collect();
    order.sort_by(|&a, &b| ent[a].total_cmp(&ent[b]).then(a.cmp(&b)));
    let take = (quantile * n_u as f64).floor() as usize;
    for (rank, &i) in order.iter().enumerate() {
        if rank < take || ent[i] <= CERTAIN {
            seeds[labeled.len() + i] = Some(argmax(probs_u.row(i)));
        }
    }
    Ok(seeds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationParams {
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    /// Winning share of the propagated mass per node, 0 for unreached nodes.
    pub confidence: Vec<f64>,
    pub seed_mask: Vec<bool>,
    /// Final propagated scores `Y` (before the argmax).
    pub scores: Tensor,
    pub iterations: usize,
    /// Nodes that no seed reached; these fell back to the model prediction.
    pub unreached: usize,
}

impl PseudoLabels {
    pub fn one_hot(&self, classes: usize) -> Tensor {
        Tensor::one_hot(&self.labels, classes).expect("labels in range")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "node,label,confidence,seed")?;
        for i in 0..self.labels.len() {
            writeln!(
                w,
                "{i},{},{},{}",
                self.labels[i],
                self.confidence[i],
                u8::from(self.seed_mask[i])
            )?;
        }
        Ok(())
    }
}

/// Runs propagation from `seeds` over `graph`.
///
/// `fallback` holds one probability row per node and labels every node that
/// no seed can reach; such nodes get confidence 0. Seed nodes always keep
/// their seed label in the output.
pub fn propagate(
    graph: &NeighborGraph,
    seeds: &[Option<usize>],
    classes: usize,
    params: PropagationParams,
    fallback: &Tensor,
) -> Result<PseudoLabels> {
    let n = graph.len();
    if seeds.len() != n || fallback.rows() != n {
        return Err(Error::Data(format!(
            "graph has {n} nodes but {} seeds and {} fallback rows",
            seeds.len(),
            fallback.rows()
        )));
    }
    if !(0.0..1.0).contains(&params.alpha) {
        return Err(Error::config("prop_alpha", "must lie in [0, 1)"));
    }
    let mut y0 = Tensor::zeros(n, classes);
    for (i, s) in seeds.iter().enumerate() {
        if let Some(c) = *s {
            if c >= classes {
                return Err(Error::Index {
                    what: "classes",
                    index: c,
                    len: classes,
                });
            }
            y0.set(i, c, 1.0);
        }
    }

    let alpha = params.alpha;
    let mut y = y0.clone();
    let mut next = Tensor::zeros(n, classes);
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let mut change: f64 = 0.0;
        for i in 0..n {
            let out = next.row_mut(i);
            for (o, &b) in out.iter_mut().zip(y0.row(i)) {
                *o = (1.0 - alpha) * b;
            }
            for &(j, w) in &graph.affinity[i] {
                for (o, &v) in out.iter_mut().zip(y.row(j)) {
                    *o += alpha * w * v;
                }
            }
            for (o, &v) in out.iter().zip(y.row(i)) {
                change = change.max((o - v).abs());
            }
        }
        std::mem::swap(&mut y, &mut next);
        if change < params.tol {
            break;
        }
    }

    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut unreached = 0;
    for i in 0..n {
        let row = y.row(i);
        let total: f64 = row.iter().sum();
        if let Some(c) = seeds[i] {
            labels.push(c);
            confidence.push(if total > 0.0 { row[c] / total } else { 1.0 });
        } else if total > 0.0 {
            let k = argmax(row);
            labels.push(k);
            confidence.push(row[k] / total);
        } else {
            unreached += 1;
            labels.push(argmax(fallback.row(i)));
            confidence.push(0.0);
        }
    }
    Ok(PseudoLabels {
        labels,
        confidence,
        seed_mask: seeds.iter().map(Option::is_some).collect(),
        scores: y,
        iterations,
        unreached,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize, c: usize) -> Tensor {
        Tensor::full(n, c, 1.0 / c as f64)
    }

    #[test]
    fn identical_points_share_weight() {
        let z = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let g = build_knn_graph(&z, 2).unwrap();
        for (i, row) in g.affinity.iter().enumerate() {
            assert_eq!(row.len(), 2);
            assert!(row.iter().all(|&(j, w)| j != i && (w - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn orthogonal_clusters_stay_apart() {
        let z = Tensor::from_rows(&[
            [1.0, 0.0],
            [0.9, 0.0],
            [1.1, 0.0],
            [0.0, 1.0],
            [0.0, 0.8],
            [0.0, 1.2],
        ])
        .unwrap();
        let g = build_knn_graph(&z, 2).unwrap();
        for (i, row) in g.affinity.iter().enumerate() {
            for &(j, w) in row {
                assert!(w > 0.0);
                assert_eq!(i < 3, j < 3, "edge {i}->{j}");
            }
        }
    }

    #[test]
    fn k_must_be_below_n() {
        let z = Tensor::zeros(3, 2);
        assert!(build_knn_graph(&z, 3).unwrap_err().is_config());
    }

    #[test]
    fn seed_selection_limits() {
        let p = uniform(10, 3);
        let s = select_seeds(&p, &[0, 1], 1e-9).unwrap();
        assert_eq!(s.iter().flatten().count(), 2);
        let s = select_seeds(&p, &[], 0.3).unwrap();
        assert_eq!(s.iter().flatten().count(), 3);
        // ties by index: the first three nodes win
        assert!(s[..3].iter().all(Option::is_some));
        let onehot = Tensor::one_hot(&[2, 0, 1, 1], 3).unwrap();
        let s = select_seeds(&onehot, &[0], 0.1).unwrap();
        assert_eq!(s, vec![Some(0), Some(2), Some(0), Some(1), Some(1)]);
        let s = select_seeds(&Tensor::zeros(0, 3), &[1, 2], 0.3).unwrap();
        assert_eq!(s, vec![Some(1), Some(2)]);
    }

    #[test]
    fn single_seeded_node() {
        let g = NeighborGraph {
            neighbors: vec![vec![]],
            affinity: vec![vec![]],
        };
        let pl = propagate(&g, &[Some(1)], 3, PropagationParams::default(), &uniform(1, 3)).unwrap();
        assert_eq!(pl.labels, vec![1]);
        assert_eq!(pl.confidence, vec![1.0]);
    }

    #[test]
    fn alpha_zero_leaves_only_seeds() {
        let z = Tensor::from_rows(&[[1.0, 0.1], [1.0, 0.2], [0.1, 1.0]]).unwrap();
        let g = build_knn_graph(&z, 1).unwrap();
        let params = PropagationParams {
            alpha: 0.0,
            ..Default::default()
        };
        let fb = Tensor::from_rows(&[[0.2, 0.8], [0.9, 0.1], [0.3, 0.7]]).unwrap();
        let pl = propagate(&g, &[Some(0), None, None], 2, params, &fb).unwrap();
        assert_eq!(pl.labels, vec![0, 0, 1]);
        assert_eq!(pl.unreached, 2);
        assert_eq!(pl.confidence, vec![1.0, 0.0, 0.0]);
        assert_eq!(pl.iterations, 1);
    }
}
