//! Fixed 2-D sine/cosine positional embeddings for patch grids.

/// Embedding table of shape `[rows*cols, dim]` (row-major patch order).
/// Half the channels encode the row coordinate, half the column; each
/// half interleaves sine and cosine over a geometric frequency ladder.
/// `dim` must be divisible by 4.
pub fn sincos_2d(dim: usize, rows: usize, cols: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "positional dim {dim} not divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * dim;
            for (i, &w) in omega.iter().enumerate() {
                out[base + 2 * i] = (r as f64 * w).sin();
                out[base + 2 * i + 1] = (r as f64 * w).cos();
                out[base + dim / 2 + 2 * i] = (c as f64 * w).sin();
                out[base + dim / 2 + 2 * i + 1] = (c as f64 * w).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_range() {
        let e = sincos_2d(8, 3, 4);
        assert_eq!(e.len(), 3 * 4 * 8);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn distinct_positions_get_distinct_embeddings() {
        let dim = 16;
        let (rows, cols) = (4, 4);
        let e = sincos_2d(dim, rows, cols);
        for a in 0..rows * cols {
            for b in (a + 1)..rows * cols {
                let ea = &e[a * dim..(a + 1) * dim];
                let eb = &e[b * dim..(b + 1) * dim];
                assert_ne!(ea, eb, "positions {a} and {b} collide");
            }
        }
    }

    #[test]
    fn row_channels_constant_along_columns() {
        let dim = 8;
        let e = sincos_2d(dim, 2, 3);
        // first half encodes the row: equal for all cells of one row
        for c in 1..3 {
            assert_eq!(e[0..dim / 2], e[c * dim..c * dim + dim / 2]);
        }
    }
}
