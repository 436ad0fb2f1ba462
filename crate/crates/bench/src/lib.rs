//! Shared fixtures for the benchmarks.

use ndarray::Array3;

use mftf_core::{AttentionKind, AttentionRecord, BackendInfo, Branch, GridShape, MaskGrid, QueryTensor};

/// Cross-attention records over a `side`×`side` grid with a bright square
/// for token 1, from `layers` layers.
pub fn cross_records(side: usize, heads: usize, text_len: usize, layers: usize) -> (Vec<AttentionRecord>, BackendInfo) {
    let grid = GridShape::new(side, side);
    let info = BackendInfo::new(
        "bench",
        (0..layers).map(|_| (AttentionKind::Cross, grid, heads, 40)),
        [4, side, side],
        text_len,
        [side * 8, side * 8],
    );
    let records = (0..layers)
        .map(|l| {
            let map = Array3::from_shape_fn((heads, grid.cells(), text_len), |(h, i, t)| {
                let (r, c) = grid.coords(i);
                let inside = r >= side / 4 && r < side / 2 && c >= side / 4 && c < side / 2;
                let base = ((h * 31 + i * 7 + t * 13 + l) % 17) as f32 / 170.0;
                if t == 1 && inside {
                    base + 0.5
                } else {
                    base
                }
            });
            AttentionRecord::cross(0, l, Branch::Cond, map)
        })
        .collect();
    (records, info)
}

/// A square object mask and a query tensor on a `side`×`side` grid.
pub fn query_fixture(side: usize, heads: usize, head_dim: usize) -> (QueryTensor, MaskGrid) {
    let grid = GridShape::new(side, side);
    let mask = MaskGrid::from_fn(1, 0, grid, |r, c| r >= side / 4 && r < side / 2 && c >= side / 4 && c < side / 2);
    let q = Array3::from_shape_fn((heads, grid.cells(), head_dim), |(h, i, d)| ((h + i * 3 + d * 5) % 23) as f32 - 11.0);
    (q, mask)
}
