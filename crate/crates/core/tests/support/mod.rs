//! Independent oracles and random instance builders shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ifsl_core::causal_graph::Dag;
use ifsl_core::heads::{mixture_loss_and_grad, Component};
use ifsl_core::{HeadKind, HeadParams, KnowledgeBase, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian_vec(rng, rows * cols)).unwrap()
}

pub fn random_kb<R: Rng>(rng: &mut R, dim: usize, m: usize) -> KnowledgeBase {
    let means = (0..m).map(|_| gaussian_vec(rng, dim)).collect();
    KnowledgeBase::new(means, gaussian_matrix(rng, m, dim), gaussian_vec(rng, m)).unwrap()
}

pub fn random_head<R: Rng>(rng: &mut R, kind: HeadKind, k: usize, dim: usize) -> HeadParams {
    match kind {
        HeadKind::Linear => HeadParams::linear(gaussian_matrix(rng, k, dim), gaussian_vec(rng, k)).unwrap(),
        HeadKind::Cosine => HeadParams::cosine(gaussian_matrix(rng, k, dim)).unwrap(),
        HeadKind::Centroid => {
            let rows: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(rng, dim)).collect();
            HeadParams::centroid(&rows).unwrap()
        }
    }
}

fn rebuild(h: &HeadParams, weights: Vec<f64>, bias: Vec<f64>) -> HeadParams {
    let w = Matrix::from_vec(h.num_classes(), h.input_dim(), weights).unwrap();
    match h.kind() {
        HeadKind::Linear => HeadParams::linear(w, bias).unwrap(),
        HeadKind::Cosine => HeadParams::cosine(w).unwrap(),
        HeadKind::Centroid => {
            let rows: Vec<Vec<f64>> = w.iter_rows().map(<[f64]>::to_vec).collect();
            HeadParams::centroid(&rows).unwrap()
        }
    }
}

fn loss(heads: &[HeadParams], comps: &[Component], y: usize, wd: f64) -> f64 {
    mixture_loss_and_grad(heads, comps, y, wd).unwrap().0
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the analytic gradient
/// and a central finite difference with step `step`, over every weight (and
/// every linear bias) of every head. A gradient that vanishes identically
/// (e.g. a cosine head on 1-d inputs) is compared in absolute terms.
pub fn gradient_relative_error(heads: &[HeadParams], comps: &[Component], y: usize, wd: f64, step: f64) -> f64 {
    let (_, grads) = mixture_loss_and_grad(heads, comps, y, wd).unwrap();
    let (mut diff, mut analytic_sq, mut numeric_sq) = (0.0, 0.0, 0.0);
    for (hi, h) in heads.iter().enumerate() {
        let w = h.weights().as_slice().to_vec();
        let b = h.bias().to_vec();
        let mut probe = |analytic: f64, perturb: &dyn Fn(f64) -> HeadParams| {
            let mut plus = heads.to_vec();
            plus[hi] = perturb(step);
            let mut minus = heads.to_vec();
            minus[hi] = perturb(-step);
            let numeric = (loss(&plus, comps, y, wd) - loss(&minus, comps, y, wd)) / (2.0 * step);
            diff += (analytic - numeric) * (analytic - numeric);
            analytic_sq += analytic * analytic;
            numeric_sq += numeric * numeric;
        };
        for i in 0..w.len() {
            probe(grads[hi].weights.as_slice()[i], &|d| {
                let mut w2 = w.clone();
                w2[i] += d;
                rebuild(h, w2, b.clone())
            });
        }
        if h.kind() == HeadKind::Linear {
            for i in 0..b.len() {
                probe(grads[hi].bias[i], &|d| {
                    let mut b2 = b.clone();
                    b2[i] += d;
                    rebuild(h, w.clone(), b2)
                });
            }
        }
    }
    let scale = analytic_sq.max(numeric_sq).sqrt();
    if scale < 1e-9 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Random DAG over `n` nodes named `V0..`, edges only from lower to higher
/// index of a random permutation, each present with probability `p`.
pub fn random_dag<R: Rng>(rng: &mut R, n: usize, p: f64) -> Dag {
    let names: Vec<String> = (0..n).map(|i| format!("V{i}")).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < p {
                edges.push((names[order[a]].clone(), names[order[b]].clone()));
            }
        }
    }
    Dag::new(&names, &edges).unwrap()
}

/// d-separation by enumerating every simple path of the skeleton and
/// checking each junction: a collider is open iff it or one of its
/// descendants is conditioned on, any other node is open iff it is not.
pub fn brute_force_dsep(g: &Dag, x: &[String], y: &[String], z: &[String]) -> bool {
    let names = g.nodes();
    let idx = |n: &str| names.iter().position(|m| m == n).unwrap();
    let n = names.len();
    let mut adj = vec![Vec::new(); n];
    for (a, b) in g.edges() {
        adj[idx(a)].push(idx(b));
        adj[idx(b)].push(idx(a));
    }
    let edge = |a: usize, b: usize| g.has_edge(&names[a], &names[b]);
    let zset: BTreeSet<usize> = z.iter().map(|s| idx(s)).collect();
    let opens_collider = |v: usize| g.descendants(&names[v]).unwrap().iter().any(|d| zset.contains(&idx(d)));
    let active = |path: &[usize]| {
        path.windows(3).all(|w| {
            let (a, v, b) = (w[0], w[1], w[2]);
            if edge(a, v) && edge(b, v) {
                opens_collider(v)
            } else {
                !zset.contains(&v)
            }
        })
    };

    fn walk(path: &mut Vec<usize>, target: usize, adj: &[Vec<usize>], active: &dyn Fn(&[usize]) -> bool) -> bool {
        let last = *path.last().unwrap();
        if last == target {
            return active(path);
        }
        for &next in &adj[last] {
            if path.contains(&next) {
                continue;
            }
            path.push(next);
            let found = walk(path, target, adj, active);
            path.pop();
            if found {
                return true;
            }
        }
        false
    }

    for a in x {
        for b in y {
            let mut path = vec![idx(a)];
            if walk(&mut path, idx(b), &adj, &active) {
                return false;
            }
        }
    }
    true
}

/// Random disjoint `(X, Y, Z)` over the nodes of `g`, `X` and `Y` non-empty.
pub fn random_query<R: Rng>(rng: &mut R, g: &Dag) -> (Vec<String>, Vec<String>, Vec<String>) {
    let n = g.len();
    loop {
        let roles: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pick = |r: u8| -> Vec<String> {
            (0..n)
                .filter(|&i| roles[i] == r)
                .map(|i| g.nodes()[i].clone())
                .collect()
        };
        let (x, y, z) = (pick(0), pick(1), pick(2));
        if !x.is_empty() && !y.is_empty() {
            return (x, y, z);
        }
    }
}
