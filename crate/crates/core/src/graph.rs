//! Multi-granular tabular graphs: one node per cell, plus a global node per
//! grid row and per grid column.
//!
//! Adjacent cells are joined in both directions. Every cell feeds each row
//! and column node its rectangle intersects; global nodes have no out-edges.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::table::{cell_text, CellRect, GridIndex, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum NodeKind {
    Cell(usize),
    Row(usize),
    Col(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    #[serde(flatten)]
    pub kind: NodeKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularGraph {
    pub origin: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<(usize, usize)>,
    pub n_cells: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Grid placement of every cell, indexed by cell id.
    pub cells: Vec<CellRect>,
    /// Number of declared cells whose row or column span exceeds one.
    pub merged_cells: usize,
}

impl TabularGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    // Node positions below assume the canonical order produced by
    // `build_graph`, not a permuted copy.
    pub fn row_node(&self, r: usize) -> usize {
        self.n_cells + r
    }

    pub fn col_node(&self, c: usize) -> usize {
        self.n_cells + self.n_rows + c
    }

    pub fn is_cell(&self, node: usize) -> bool {
        matches!(self.nodes[node].kind, NodeKind::Cell(_))
    }

    /// Cell nodes feeding each node, in edge-list order. Empty for cells.
    /// The order survives [`TabularGraph::permuted`], so sums over it are
    /// reproducible bit for bit.
    pub fn constituents(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for &(src, dst) in &self.edges {
            if self.is_cell(src) && !self.is_cell(dst) {
                out[dst].push(src);
            }
        }
        out
    }

    /// Returns a copy whose node `i` is this graph's node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> TabularGraph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        TabularGraph {
            nodes: perm.iter().map(|&old| self.nodes[old].clone()).collect(),
            edges: self
                .edges
                .iter()
                .map(|&(s, d)| (inverse[s], inverse[d]))
                .collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serialization cannot fail")
    }
}

/// Cells sharing an edge segment of positive length with `cell_id`.
pub fn adjacent_cells(grid: &GridIndex, cell_id: usize) -> BTreeSet<usize> {
    let a = grid.cells[cell_id];
    let overlaps = |lo1: usize, hi1: usize, lo2: usize, hi2: usize| lo1.max(lo2) < hi1.min(hi2);
    grid.cells
        .iter()
        .enumerate()
        .filter(|&(id, b)| {
            id != cell_id
                && (((a.col_end() == b.col || b.col_end() == a.col)
                    && overlaps(a.row, a.row_end(), b.row, b.row_end()))
                    || ((a.row_end() == b.row || b.row_end() == a.row)
                        && overlaps(a.col, a.col_end(), b.col, b.col_end())))
        })
        .map(|(id, _)| id)
        .collect()
}

/// Builds the tabular graph. Node order is cells (by id), rows, columns.
pub fn build_graph(table: &Table, grid: &GridIndex) -> TabularGraph {
    let n_cells = grid.cell_count();
    let mut nodes = Vec::with_capacity(n_cells + grid.n_rows + grid.n_cols);
    for id in 0..n_cells {
        nodes.push(Node {
            kind: NodeKind::Cell(id),
            text: cell_text(table, grid, id).to_string(),
        });
    }

    let mut edges = Vec::new();
    for id in 0..n_cells {
        for other in adjacent_cells(grid, id) {
            edges.push((id, other));
        }
    }

    let mut row_members: Vec<Vec<usize>> = vec![Vec::new(); grid.n_rows];
    let mut col_members: Vec<Vec<usize>> = vec![Vec::new(); grid.n_cols];
    for (id, rect) in grid.cells.iter().enumerate() {
        for members in &mut row_members[rect.row..rect.row_end()] {
            members.push(id);
        }
        for members in &mut col_members[rect.col..rect.col_end()] {
            members.push(id);
        }
    }

    let row_base = n_cells;
    let col_base = n_cells + grid.n_rows;
    let joined = |ids: &mut dyn Iterator<Item = usize>| {
        ids.map(|id| cell_text(table, grid, id))
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (r, members) in row_members.iter().enumerate() {
        // grid order along the row, each cell once
        let mut ordered: Vec<usize> = grid.occupancy[r].clone();
        ordered.dedup();
        nodes.push(Node {
            kind: NodeKind::Row(r),
            text: joined(&mut ordered.into_iter()),
        });
        edges.extend(members.iter().map(|&id| (id, row_base + r)));
    }
    for (c, members) in col_members.iter().enumerate() {
        let mut ordered: Vec<usize> = (0..grid.n_rows).map(|r| grid.occupancy[r][c]).collect();
        ordered.dedup();
        nodes.push(Node {
            kind: NodeKind::Col(c),
            text: joined(&mut ordered.into_iter()),
        });
        edges.extend(members.iter().map(|&id| (id, col_base + c)));
    }

    TabularGraph {
        origin: table.id.clone(),
        nodes,
        edges,
        n_cells,
        n_rows: grid.n_rows,
        n_cols: grid.n_cols,
        cells: grid.cells.clone(),
        merged_cells: grid.cells[..grid.declared_cells]
            .iter()
            .filter(|r| r.row_span > 1 || r.col_span > 1)
            .count(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub cell_nodes: usize,
    pub row_nodes: usize,
    pub col_nodes: usize,
    pub edges: usize,
    pub merged_cells: usize,
}

pub fn graph_stats(graph: &TabularGraph) -> GraphStats {
    let mut stats = GraphStats {
        edges: graph.edges.len(),
        merged_cells: graph.merged_cells,
        ..GraphStats::default()
    };
    for node in &graph.nodes {
        match node.kind {
            NodeKind::Cell(_) => stats.cell_nodes += 1,
            NodeKind::Row(_) => stats.row_nodes += 1,
            NodeKind::Col(_) => stats.col_nodes += 1,
        }
    }
    stats
}
