//! Easy/hard sample mining against classifier anchors, and mixup batches.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentSpec, Strength};
use crate::error::{Error, Result};
use crate::model::AnchorSet;
use crate::seed;
use crate::tensor::{cosine, Tensor};

/// Which unlabeled samples compete for a class's easy/hard slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardPool {
    /// Only samples pseudo-labeled with the class.
    ClassRestricted,
    /// Every unlabeled sample.
    Global,
}

/// How hard rows are paired with easy rows when mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Easy rows in order, hard rows drawn uniformly from the pooled set.
    CyclicRandom,
    /// Hard row drawn from the easy row's class when that class has any.
    WithinClass,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMined {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    pub easy_dist: Vec<f64>,
    pub hard_dist: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub pool_sizes: Vec<usize>,
    /// Classes whose pool was smaller than `n_easy + n_hard`.
    pub shrunk: usize,
    pub empty: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedSets {
    pub per_class: Vec<ClassMined>,
    pub stats: MiningStats,
}

impl MinedSets {
    /// `(sample id, class)` for every easy sample, class by class.
    pub fn easy(&self) -> Vec<(usize, usize)> {
        self.flatten(|m| &m.easy)
    }

    pub fn hard(&self) -> Vec<(usize, usize)> {
        self.flatten(|m| &m.hard)
    }

    fn flatten(&self, f: impl Fn(&ClassMined) -> &Vec<usize>) -> Vec<(usize, usize)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(c, m)| f(m).iter().map(move |&i| (i, c)))
            .collect()
    }
}

/// Splits `pool` slots between easy and hard proportionally, rounding easy up.
fn shrink(pool: usize, n_easy: usize, n_hard: usize) -> (usize, usize) {
    if pool >= n_easy + n_hard {
        return (n_easy, n_hard);
    }
    let e = (pool * n_easy).div_ceil(n_easy + n_hard);
    (e, pool - e)
}

/// For each class, ranks its pool by cosine distance `1 − cos(z, anchor)`:
/// the `n_easy` closest are easy, the `n_hard` farthest are hard (ties by index).
pub fn mine(
    z: &Tensor,
    pseudo: &[usize],
    anchors: &AnchorSet,
    n_easy: usize,
    n_hard: usize,
    pool: HardPool,
) -> Result<MinedSets> {
    if n_easy == 0 || n_hard == 0 {
        return Err(Error::config("n_easy/n_hard", "must be at least 1"));
    }
    if pseudo.len() != z.rows() {
        return Err(Error::Data(format!(
            "{} pseudo-labels for {} feature rows",
            pseudo.len(),
            z.rows()
        )));
    }
    let classes = anchors.len();
    let mut per_class = Vec::with_capacity(classes);
    let mut stats = MiningStats::default();
    for c in 0..classes {
        let members: Vec<usize> = match pool {
            HardPool::ClassRestricted => (0..z.rows()).filter(|&i| pseudo[i] == c).collect(),
            HardPool::Global => (0..z.rows()).collect(),
        };
        stats.pool_sizes.push(members.len());
        if members.is_empty() {
            stats.empty += 1;
            per_class.push(ClassMined::default());
            continue;
        }
        let (ne, nh) = shrink(members.len(), n_easy, n_hard);
        if (ne, nh) != (n_easy, n_hard) {
            stats.shrunk += 1;
        }
        let anchor = anchors.anchor(c);
        let mut ranked: Vec<(usize, f64)> = members
            .iter()
            .map(|&i| (i, 1.0 - cosine(z.row(i), anchor)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let easy: Vec<(usize, f64)> = ranked[..ne].to_vec();
        let mut far = ranked[ne..].to_vec();
        far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let hard: Vec<(usize, f64)> = far.into_iter().take(nh).collect();
        per_class.push(ClassMined {
            easy: easy.iter().map(|e| e.0).collect(),
            easy_dist: easy.iter().map(|e| e.1).collect(),
            hard: hard.iter().map(|e| e.0).collect(),
            hard_dist: hard.iter().map(|e| e.1).collect(),
        });
    }
    Ok(MinedSets { per_class, stats })
}

/// Stacks the selected rows on top of their strong-augmented copies and
/// duplicates the labels to match.
pub fn build_views(
    features: &Tensor,
    items: &[(usize, usize)],
    aug: &AugmentSpec,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let ids: Vec<usize> = items.iter().map(|p| p.0).collect();
    let x = features.select_rows(&ids)?;
    let strong = augment(&x, aug, Strength::Strong, seed);
    let labels = items.iter().chain(items).map(|p| p.1).collect();
    Ok((x.vstack(&strong)?, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixBatch {
    pub x_mix: Tensor,
    pub y_mix: Tensor,
    pub theta: Vec<f64>,
}

/// One mixed row per easy row: `θ·x_easy + (1−θ)·x_hard` with `θ ~ Beta(α, α)`,
/// labels mixed the same way from one-hot class vectors.
#[allow(clippy::too_many_arguments)]
pub fn mix(
    x_easy: &Tensor,
    y_easy: &[usize],
    x_hard: &Tensor,
    y_hard: &[usize],
    classes: usize,
    alpha: f64,
    pairing: Pairing,
    seed: u64,
) -> Result<MixBatch> {
    if x_easy.rows() == 0 || x_hard.rows() == 0 {
        return Err(Error::Data("mixup needs non-empty easy and hard pools".into()));
    }
    if x_easy.cols() != x_hard.cols() {
        return Err(Error::Dimension {
            op: "mix",
            left: x_easy.shape(),
            right: x_hard.shape(),
        });
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config("mixup_alpha", e.to_string()))?;
    let mut rng = seed::rng(seed, &[seed::stream::MIX]);
    let n = x_easy.rows();
    let d = x_easy.cols();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (j, &c) in y_hard.iter().enumerate() {
        by_class[c].push(j);
    }
    let mut x_mix = Tensor::zeros(n, d);
    let mut y_mix = Tensor::zeros(n, classes);
    let mut theta = Vec::with_capacity(n);
    for i in 0..n {
        let t: f64 = beta.sample(&mut rng);
        let j = match pairing {
            Pairing::WithinClass if !by_class[y_easy[i]].is_empty() => {
                let pool = &by_class[y_easy[i]];
                pool[rng.random_range(0..pool.len())]
            }
            _ => rng.random_range(0..x_hard.rows()),
        };
        for (o, (a, b)) in x_mix
            .row_mut(i)
            .iter_mut()
            .zip(x_easy.row(i).iter().zip(x_hard.row(j)))
        {
            *o = t * a + (1.0 - t) * b;
        }
        let row = y_mix.row_mut(i);
        row[y_easy[i]] += t;
        row[y_hard[j]] += 1.0 - t;
        theta.push(t);
    }
    Ok(MixBatch { x_mix, y_mix, theta })
}

/// Mixes with a fixed coefficient; used to probe the endpoints.
pub fn mix_with_theta(
    x_easy: &[f64],
    y_easy: usize,
    x_hard: &[f64],
    y_hard: usize,
    classes: usize,
    theta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let x = x_easy
        .iter()
        .zip(x_hard)
        .map(|(a, b)| theta * a + (1.0 - theta) * b)
        .collect();
    let mut y = vec![0.0; classes];
    y[y_easy] += theta;
    y[y_hard] += 1.0 - theta;
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Classifier;

    fn anchors(rows: &[[f64; 2]]) -> AnchorSet {
        Classifier::new(Tensor::from_rows(rows).unwrap(), 0.05).anchors()
    }

    #[test]
    fn easy_is_closest_hard_is_farthest() {
        let z = Tensor::from_rows(&[[0.99, 0.1], [0.5, 0.5]]).unwrap();
        let m = mine(&z, &[0, 0], &anchors(&[[1.0, 0.0], [0.0, 1.0]]), 1, 1, HardPool::ClassRestricted).unwrap();
        assert_eq!(m.per_class[0].easy, vec![0]);
        assert_eq!(m.per_class[0].hard, vec![1]);
        assert!(m.per_class[1].easy.is_empty());
        assert_eq!(m.stats.empty, 1);
    }

    #[test]
    fn ties_fall_back_to_index_order() {
        let z = Tensor::full(6, 2, 1.0);
        let m = mine(&z, &[0; 6], &anchors(&[[1.0, 0.0], [0.0, 1.0]]), 2, 3, HardPool::ClassRestricted).unwrap();
        let c = &m.per_class[0];
        assert_eq!(c.easy, vec![0, 1]);
        assert_eq!(c.hard, vec![2, 3, 4]);
        assert!(c.easy_dist.iter().chain(&c.hard_dist).all(|&d| d == c.easy_dist[0]));
    }

    #[test]
    fn small_pools_shrink_proportionally() {
        assert_eq!(shrink(40, 15, 15), (15, 15));
        assert_eq!(shrink(7, 15, 15), (4, 3));
        assert_eq!(shrink(1, 15, 15), (1, 0));
        let z = Tensor::from_rows(&[[1.0, 0.0], [0.8, 0.6], [0.6, 0.8]]).unwrap();
        let m = mine(&z, &[0, 0, 0], &anchors(&[[1.0, 0.0], [0.0, 1.0]]), 15, 15, HardPool::ClassRestricted).unwrap();
        assert_eq!(m.per_class[0].easy, vec![0, 1]);
        assert_eq!(m.per_class[0].hard, vec![2]);
        assert_eq!(m.stats.shrunk, 1);
    }

    #[test]
    fn global_pool_ignores_pseudo_labels() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]]).unwrap();
        let m = mine(&z, &[0, 0, 0], &anchors(&[[1.0, 0.0], [0.0, 1.0]]), 1, 1, HardPool::Global).unwrap();
        assert_eq!(m.per_class[1].easy, vec![1]);
        assert_eq!(m.per_class[1].hard, vec![0]);
    }

    #[test]
    fn views_double_rows() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let items = [(0, 1), (2, 0), (3, 1)];
        let ident = AugmentSpec::new(0.0, 0.0, 0.0).unwrap();
        let (v, y) = build_views(&x, &items, &ident, 3).unwrap();
        assert_eq!(v.rows(), 6);
        assert_eq!(y, vec![1, 0, 1, 1, 0, 1]);
        for r in 0..3 {
            assert_eq!(v.row(r), v.row(r + 3));
        }
        let aug = AugmentSpec::new(0.0, 0.3, 0.25).unwrap();
        assert_eq!(build_views(&x, &items, &aug, 5).unwrap(), build_views(&x, &items, &aug, 5).unwrap());
    }

    #[test]
    fn endpoints_and_midpoint() {
        let (x, y) = mix_with_theta(&[1.0, 2.0], 0, &[5.0, 6.0], 1, 3, 1.0);
        assert_eq!(x, vec![1.0, 2.0]);
        assert_eq!(y, vec![1.0, 0.0, 0.0]);
        let (_, y) = mix_with_theta(&[1.0, 2.0], 0, &[5.0, 6.0], 1, 3, 0.5);
        assert_eq!(y, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn mixed_labels_stay_on_simplex() {
        let xe = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]]).unwrap();
        let xh = Tensor::from_rows(&[[2.0, 2.0], [3.0, 1.0]]).unwrap();
        for pairing in [Pairing::CyclicRandom, Pairing::WithinClass] {
            let b = mix(&xe, &[0, 1, 2], &xh, &[1, 2], 3, 1.0, pairing, 4).unwrap();
            for r in 0..3 {
                assert!((b.y_mix.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!((0.0..=1.0).contains(&b.theta[r]));
            }
        }
        assert!(mix(&xe, &[0, 1, 2], &Tensor::zeros(0, 2), &[], 3, 1.0, Pairing::CyclicRandom, 0).is_err());
    }
}
