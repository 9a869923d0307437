mod common;

use common::{closed_form, graph_fixtures, two_chains};
use rand::seq::SliceRandom;
use serl::propagation::{build_knn_graph, propagate, select_seeds, NeighborGraph, PropagationParams};
use serl::Tensor;

fn tight() -> PropagationParams {
    PropagationParams {
        alpha: 0.99,
        max_iters: 100_000,
        tol: 1e-15,
    }
}

fn no_fallback(n: usize, c: usize) -> Tensor {
    Tensor::full(n, c, 1.0 / c as f64)
}

#[test]
fn iteration_reaches_the_linear_solve() {
    for (f, fx) in graph_fixtures(200).iter().enumerate() {
        let n = fx.graph.len();
        let out = propagate(&fx.graph, &fx.seeds, fx.classes, tight(), &no_fallback(n, fx.classes)).unwrap();
        let expect = closed_form(&fx.graph.dense_affinity(), &fx.seeds, fx.classes, 0.99);
        for i in 0..n {
            for c in 0..fx.classes {
                let got = out.scores.get(i, c);
                assert!((got - expect[i][c]).abs() < 1e-6, "fixture {f} node {i} class {c}: {got} vs {}", expect[i][c]);
            }
            if let Some(s) = fx.seeds[i] {
                assert_eq!(out.labels[i], s, "fixture {f} seed {i}");
                assert!(out.seed_mask[i]);
            }
        }
    }
}

#[test]
fn each_chain_takes_its_seed_label() {
    let g = two_chains(5);
    let mut seeds = vec![None; 10];
    seeds[2] = Some(1);
    seeds[9] = Some(0);
    let out = propagate(&g, &seeds, 2, PropagationParams::default(), &no_fallback(10, 2)).unwrap();
    assert_eq!(out.labels, [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
    assert_eq!(out.unreached, 0);
}

#[test]
fn unreachable_nodes_fall_back() {
    let g = two_chains(3);
    let seeds = vec![Some(1), None, None, None, None, None];
    let fallback = Tensor::from_rows(&[[0.9, 0.1]; 6]).unwrap();
    let out = propagate(&g, &seeds, 2, PropagationParams::default(), &fallback).unwrap();
    assert_eq!(&out.labels[..3], &[1, 1, 1]);
    assert_eq!(&out.labels[3..], &[0, 0, 0]);
    assert_eq!(out.unreached, 3);
    assert!(out.confidence[3..].iter().all(|&c| c == 0.0));
}

fn permute_graph(g: &NeighborGraph, perm: &[usize]) -> NeighborGraph {
    // node i of the new graph is node perm[i] of the old one
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let remap = |rows: &Vec<Vec<(usize, f64)>>| -> Vec<Vec<(usize, f64)>> {
        perm.iter()
            .map(|&p| {
                let mut r: Vec<_> = rows[p].iter().map(|&(j, w)| (inv[j], w)).collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect()
    };
    NeighborGraph {
        neighbors: remap(&g.neighbors),
        affinity: remap(&g.affinity),
    }
}

#[test]
fn permuting_nodes_permutes_outputs() {
    let mut r = common::rng(17);
    for fx in graph_fixtures(30) {
        let n = fx.graph.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let base = propagate(&fx.graph, &fx.seeds, fx.classes, tight(), &no_fallback(n, fx.classes)).unwrap();
        let pg = permute_graph(&fx.graph, &perm);
        let ps: Vec<_> = perm.iter().map(|&p| fx.seeds[p]).collect();
        let out = propagate(&pg, &ps, fx.classes, tight(), &no_fallback(n, fx.classes)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..fx.classes {
                assert!((out.scores.get(i, c) - base.scores.get(p, c)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn graph_matches_a_brute_force_construction() {
    let mut r = common::rng(3);
    for _ in 0..50 {
        use rand::Rng;
        let n = r.random_range(3..=12);
        let k = r.random_range(1..n);
        let z = Tensor::new(n, 3, (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let s = build_knn_graph(&z, k).unwrap().dense_affinity();

        let cos = |i: usize, j: usize| serl::tensor::cosine(z.row(i), z.row(j));
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| cos(i, b).total_cmp(&cos(i, a)).then(a.cmp(&b)));
            for &j in &others[..k] {
                let v = cos(i, j).max(0.0) / 2.0;
                w[i][j] += v;
                w[j][i] += v;
            }
        }
        for i in 0..n {
            let total: f64 = w[i].iter().sum();
            for j in 0..n {
                let expect = if total > 0.0 { w[i][j] / total } else { 0.0 };
                assert!((s.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn seed_selection_examples() {
    let uniform = Tensor::full(10, 4, 0.25);
    let seeds = select_seeds(&uniform, &[0, 1], 0.3).unwrap();
    assert_eq!(seeds.iter().skip(2).filter(|s| s.is_some()).count(), 3);

    let onehot = Tensor::one_hot(&[2, 0, 1, 1], 3).unwrap();
    let seeds = select_seeds(&onehot, &[], 0.0).unwrap();
    assert_eq!(seeds, vec![Some(2), Some(0), Some(1), Some(1)]);
}
