//! Naive reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serl::losses::SpcrNorm;
use serl::propagation::{build_knn_graph, NeighborGraph};
use serl::Tensor;

pub const LOG_EPS: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Random point on the probability simplex, occasionally sparse.
pub fn simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                -rng.random::<f64>().max(1e-300).ln()
            }
        })
        .collect();
    let s: f64 = v.iter().sum();
    if s == 0.0 {
        v[rng.random_range(0..c)] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub fn simplex_matrix(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    let r: Vec<Vec<f64>> = (0..n).map(|_| simplex(rng, c)).collect();
    Tensor::from_rows(&r).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn clog(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * clog(x)).sum::<f64>()
}

/// Contrastive loss over `[weak; strong]` stacks, written as explicit loops.
pub fn naive_spcr(p: &[Vec<f64>], tau: f64, norm: SpcrNorm) -> f64 {
    let n = p.len();
    let b = n / 2;
    let other = |i: usize| if i < b { i + b } else { i - b };
    let weak_class = |i: usize| argmax(&p[i % b]);
    let mut total = 0.0;
    for i in 0..n {
        let mut w = vec![0.0; n];
        for k in 0..n {
            if k == i {
                continue;
            }
            w[k] = if k == other(i) {
                1.0
            } else if weak_class(i) == weak_class(k) {
                p[i].iter().zip(&p[k]).map(|(a, c)| a * c).sum()
            } else {
                0.0
            };
        }
        if norm == SpcrNorm::Positives {
            let s: f64 = w.iter().sum();
            if s > 0.0 {
                w.iter_mut().for_each(|x| *x /= s);
            }
        }
        let sim = |a: usize, c: usize| p[a].iter().zip(&p[c]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += sim(i, j).exp();
            }
        }
        for k in 0..n {
            if w[k] != 0.0 {
                total -= w[k] * (sim(i, k) - clog(denom));
            }
        }
    }
    match norm {
        SpcrNorm::Sum => total,
        _ => total / n as f64,
    }
}

pub fn naive_hmr(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        for c in 0..p[i].len() {
            total += (p[i][c] - y[i][c]).powi(2);
        }
    }
    total / p.len() as f64
}

pub fn naive_tpr(targets: &[Vec<f64>], p: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let agree: f64 = (0..p[i].len()).map(|c| targets[i][c] * p[i][c]).sum();
        total += clog(1.0 - agree);
    }
    total / p.len() as f64
}

pub fn naive_mutual_info(p: &[Vec<f64>]) -> f64 {
    let n = p.len() as f64;
    let c = p[0].len();
    let mut mean = vec![0.0; c];
    let mut cond = 0.0;
    for row in p {
        cond += entropy(row) / n;
        for k in 0..c {
            mean[k] += row[k] / n;
        }
    }
    cond - entropy(&mean)
}

/// Solves `A X = B` by Gauss-Jordan elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        assert!(d.abs() > 1e-12, "singular system");
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r][col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            for k in 0..b[r].len() {
                b[r][k] -= f * b[col][k];
            }
        }
    }
    (0..n).map(|r| b[r].iter().map(|v| v / a[r][r]).collect()).collect()
}

/// Fixed point `(1−α)(I − αS)⁻¹Y⁰` by a direct linear solve.
pub fn closed_form(s: &Tensor, seeds: &[Option<usize>], classes: usize, alpha: f64) -> Vec<Vec<f64>> {
    let n = s.rows();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - alpha * s.get(i, j)).collect())
        .collect();
    let b: Vec<Vec<f64>> = seeds
        .iter()
        .map(|s| {
            let mut row = vec![0.0; classes];
            if let Some(c) = *s {
                row[c] = 1.0 - alpha;
            }
            row
        })
        .collect();
    solve(a, b)
}

/// Row-normalised affinity of two disjoint `len`-node paths.
pub fn two_chains(len: usize) -> NeighborGraph {
    let n = 2 * len;
    let mut neighbors = vec![Vec::new(); n];
    for start in [0, len] {
        for i in start..start + len - 1 {
            neighbors[i].push((i + 1, 1.0));
            neighbors[i + 1].push((i, 1.0));
        }
    }
    let affinity = neighbors
        .iter()
        .map(|row: &Vec<(usize, f64)>| {
            let mut r = row.clone();
            r.sort_by_key(|e| e.0);
            let d = r.len() as f64;
            r.into_iter().map(|(j, _)| (j, 1.0 / d)).collect()
        })
        .collect();
    NeighborGraph { neighbors, affinity }
}

pub struct GraphFixture {
    pub graph: NeighborGraph,
    pub seeds: Vec<Option<usize>>,
    pub classes: usize,
}

/// Random kNN graphs with 3 to 12 nodes plus the two-chain graph.
pub fn graph_fixtures(count: usize) -> Vec<GraphFixture> {
    let mut r = rng(0x6EAF);
    let mut out = Vec::with_capacity(count + 1);
    for _ in 0..count {
        let n = r.random_range(3..=12);
        let d = r.random_range(2..=4);
        let classes = r.random_range(2..=4);
        let z = Tensor::new(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let k = r.random_range(1..n);
        let graph = build_knn_graph(&z, k).unwrap();
        let mut seeds: Vec<Option<usize>> = (0..n)
            .map(|_| r.random_bool(0.3).then(|| r.random_range(0..classes)))
            .collect();
        if seeds.iter().all(Option::is_none) {
            seeds[0] = Some(0);
        }
        out.push(GraphFixture { graph, seeds, classes });
    }
    let mut seeds = vec![None; 10];
    seeds[0] = Some(0);
    seeds[7] = Some(1);
    out.push(GraphFixture {
        graph: two_chains(5),
        seeds,
        classes: 2,
    });
    out
}
