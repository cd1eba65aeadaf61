//! Graph-based natural-language table retrieval.
//!
//! Tables are parsed into an occupancy grid ([`table`]), converted to a
//! multi-granular graph of cell, row and column nodes ([`graph`]), encoded
//! by a graph transformer ([`encoder`]) and matched against a query
//! ([`matcher`]). [`training`] holds the ranking objectives and the
//! graph-context pre-training loop; [`eval`] the BM25 baseline and ranking
//! metrics.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
    }};
}

pub mod embedding;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod matcher;
pub mod model;
pub mod numerics;
pub mod table;
pub mod toy;
pub mod training;
