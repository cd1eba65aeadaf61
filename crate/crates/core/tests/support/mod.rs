//! Slow, loop-level reference implementations used as oracles. Shared with
//! the CLI acceptance target through `#[path]`.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;

use tabret_core::encoder::GraphTransformerConfig;
use tabret_core::numerics::{Matrix, ParameterStore};
use tabret_core::table::{Cell, Table, TableContext};

/// A random table whose spans tile a grid of at most `max_dim` x `max_dim`
/// slots exactly, plus the top-left corner and spans of every cell in
/// declaration order.
pub struct RandomTable {
    pub table: Table,
    pub n_rows: usize,
    pub n_cols: usize,
    pub rects: Vec<(usize, usize, usize, usize)>,
}

pub fn random_table<R: Rng>(rng: &mut R, max_dim: usize, max_span: usize, id: &str) -> RandomTable {
    let n_rows = rng.random_range(1..=max_dim);
    let n_cols = rng.random_range(1..=max_dim);
    let mut owner: Vec<Vec<Option<usize>>> = vec![vec![None; n_cols]; n_rows];
    let mut rects = Vec::new();
    let mut rows: Vec<Vec<Cell>> = vec![Vec::new(); n_rows];
    for r in 0..n_rows {
        for c in 0..n_cols {
            if owner[r][c].is_some() {
                continue;
            }
            let rs = rng.random_range(1..=max_span.min(n_rows - r));
            let mut cs = rng.random_range(1..=max_span.min(n_cols - c));
            // a span from above that blocks a lower slot also blocks this row
            while (c..c + cs).any(|cc| owner[r][cc].is_some()) {
                cs -= 1;
            }
            let id = rects.len();
            for row in owner.iter_mut().skip(r).take(rs) {
                for slot in row.iter_mut().skip(c).take(cs) {
                    *slot = Some(id);
                }
            }
            rects.push((r, c, rs, cs));
            rows[r].push(Cell::spanning(format!("x{id}"), rs, cs));
        }
    }
    // a row covered entirely by spans from above has no cells of its own,
    // which the parser rejects
    if rows.iter().any(Vec::is_empty) {
        return random_table(rng, max_dim, max_span, id);
    }
    RandomTable {
        table: Table { id: id.to_string(), rows, context: TableContext::default() },
        n_rows,
        n_cols,
        rects,
    }
}

/// Nodes (as kind tags) and directed edges found by scanning every pair of
/// neighbouring grid slots. Node ids follow cells, rows, columns.
pub fn slot_scan_graph(
    n_rows: usize,
    n_cols: usize,
    rects: &[(usize, usize, usize, usize)],
) -> (Vec<String>, BTreeSet<(usize, usize)>) {
    let mut owner = vec![vec![usize::MAX; n_cols]; n_rows];
    for (id, &(r, c, rs, cs)) in rects.iter().enumerate() {
        for row in owner.iter_mut().skip(r).take(rs) {
            for slot in row.iter_mut().skip(c).take(cs) {
                *slot = id;
            }
        }
    }
    let n = rects.len();
    let mut nodes: Vec<String> = (0..n).map(|i| format!("cell{i}")).collect();
    nodes.extend((0..n_rows).map(|r| format!("row{r}")));
    nodes.extend((0..n_cols).map(|c| format!("col{c}")));
    let mut edges = BTreeSet::new();
    for r in 0..n_rows {
        for c in 0..n_cols {
            let a = owner[r][c];
            for (rr, cc) in [(r + 1, c), (r, c + 1)] {
                if rr < n_rows && cc < n_cols && owner[rr][cc] != a {
                    edges.insert((a, owner[rr][cc]));
                    edges.insert((owner[rr][cc], a));
                }
            }
            edges.insert((a, n + r));
            edges.insert((a, n + n_rows + c));
        }
    }
    (nodes, edges)
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn get(store: &ParameterStore, name: &str) -> Matrix {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).clone()
}

fn dot_rows(a: &Matrix, i: usize, w: &Matrix, col: usize) -> f64 {
    (0..a.ncols()).map(|k| a[[i, k]] * w[[k, col]]).sum()
}

/// `states · W` computed with explicit loops.
fn loop_matmul(x: &Matrix, w: &Matrix) -> Matrix {
    Array2::from_shape_fn((x.nrows(), w.ncols()), |(i, j)| dot_rows(x, i, w, j))
}

/// Attention weights of one head: `alpha[i][j]` for every node `i` and
/// every `j` in its in-neighbourhood (self included).
pub fn dense_attention(
    store: &ParameterStore,
    layer: usize,
    head: usize,
    slope: f64,
    edges: &[(usize, usize)],
    states: &Matrix,
) -> Vec<Vec<(usize, f64)>> {
    let n = states.nrows();
    let key = get(store, &format!("gt.{layer}.head{head}.key"));
    let att = get(store, &format!("gt.{layer}.head{head}.attention"));
    let keys = loop_matmul(states, &key);
    let dh = keys.ncols();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut neigh: Vec<usize> = edges.iter().filter(|e| e.1 == i).map(|e| e.0).collect();
        neigh.push(i);
        let raw: Vec<f64> = neigh
            .iter()
            .map(|&j| {
                let mut s = 0.0;
                for k in 0..dh {
                    s += att[[k, 0]] * keys[[i, k]] + att[[dh + k, 0]] * keys[[j, k]];
                }
                leaky(s, slope)
            })
            .collect();
        let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = raw.iter().map(|r| (r - m).exp()).sum();
        out.push(neigh.iter().zip(&raw).map(|(&j, r)| (j, (r - m).exp() / z)).collect());
    }
    out
}

fn loop_layer_norm(x: &mut Matrix, gain: &Matrix, bias: &Matrix, eps: f64) {
    let d = x.ncols();
    for i in 0..x.nrows() {
        let mean: f64 = (0..d).map(|k| x[[i, k]]).sum::<f64>() / d as f64;
        let var: f64 = (0..d).map(|k| (x[[i, k]] - mean).powi(2)).sum::<f64>() / d as f64;
        for k in 0..d {
            x[[i, k]] = (x[[i, k]] - mean) / (var + eps).sqrt() * gain[[0, k]] + bias[[0, k]];
        }
    }
}

/// One graph transformer layer without dropout and with a single affine
/// feed-forward map, written with explicit loops over nodes, heads and
/// edges.
pub fn dense_layer(
    store: &ParameterStore,
    config: &GraphTransformerConfig,
    layer: usize,
    edges: &[(usize, usize)],
    states: &Matrix,
) -> Matrix {
    assert!(config.ffn_hidden.is_none());
    let (n, d) = states.dim();
    let dh = config.head_dim();
    let mut attended: Matrix = Array2::zeros((n, d));
    for h in 0..config.heads {
        let alpha = dense_attention(store, layer, h, config.leaky_slope, edges, states);
        let msg = loop_matmul(states, &get(store, &format!("gt.{layer}.head{h}.message")));
        for i in 0..n {
            for &(j, a) in &alpha[i] {
                for k in 0..dh {
                    attended[[i, h * dh + k]] += a * msg[[j, k]];
                }
            }
        }
    }
    let carried = loop_matmul(states, &get(store, &format!("gt.{layer}.residual")));
    let u = Array2::from_shape_fn((n, d), |(i, k)| leaky(carried[[i, k]] + attended[[i, k]], config.leaky_slope));
    let w = get(store, &format!("gt.{layer}.ffn.weight"));
    let b = get(store, &format!("gt.{layer}.ffn.bias"));
    let mut out = Array2::from_shape_fn((n, d), |(i, k)| dot_rows(&u, i, &w, k) + b[[0, k]]);
    loop_layer_norm(
        &mut out,
        &get(store, &format!("gt.{layer}.norm.gain")),
        &get(store, &format!("gt.{layer}.norm.bias")),
        config.layer_norm_eps,
    );
    out
}

/// NDCG@k straight from the definition: exponential or linear gain,
/// `log2(rank + 1)` discount, ideal order by sorting the judged grades.
pub fn direct_ndcg(ranked: &[f64], judged: &[f64], k: usize, exponential: bool) -> f64 {
    let gain = |g: f64| if exponential { 2f64.powf(g) - 1.0 } else { g };
    let dcg = |gs: &[f64]| -> f64 {
        let mut s = 0.0;
        for (i, g) in gs.iter().enumerate().take(k) {
            s += gain(*g) / ((i + 2) as f64).log2();
        }
        s
    };
    let mut ideal = judged.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(ranked) / idcg
    }
}

/// Average precision: mean over relevant items of precision at their
/// rank, divided by the total relevant count.
pub fn direct_ap(ranked: &[f64], total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (i, g) in ranked.iter().enumerate() {
        if *g > 0.0 {
            hits += 1.0;
            sum += hits / (i + 1) as f64;
        }
    }
    sum / total_relevant as f64
}
