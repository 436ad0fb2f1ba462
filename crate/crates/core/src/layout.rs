//! Masked query selection and per-object affine transport.
//!
//! Query vectors are moved whole, never blended. Each destination cell pulls
//! the vector of the source cell its inverse-mapped coordinates round to,
//! which leaves no holes when an object is enlarged. Source cells that end up
//! without an object vector are filled from the background.

use ndarray::{s, Array2, Axis};

use crate::error::{MftfError, Result};
use crate::masking::union_masks;
use crate::model::{FillPolicy, GridShape, LayoutParams, MaskGrid, QueryTensor};

/// Affine map over `(x, y) = (col, row)` grid coordinates.
///
/// `x' = m[0][0] x + m[0][1] y + m[0][2]`, `y' = m[1][0] x + m[1][1] y + m[1][2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub m: [[f64; 3]; 2],
}

impl AffineMap {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(MftfError::config("affine map is not invertible"));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Self {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Cosine and sine of an angle in degrees, exact at multiples of 90.
fn cos_sin_deg(theta: f64) -> (f64, f64) {
    let r = theta.rem_euclid(360.0);
    match r {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let rad = r.to_radians();
            (rad.cos(), rad.sin())
        }
    }
}

/// Scale and rotate about `centroid = (row, col)`, then translate.
///
/// Rows grow downwards, so a counterclockwise turn as seen in the image maps
/// the unit step right of the centroid to the unit step above it.
pub fn build_affine(params: &LayoutParams, centroid: (f64, f64)) -> AffineMap {
    let (cy, cx) = centroid;
    let (cos, sin) = cos_sin_deg(params.theta);
    let (a, b) = (params.scale * cos, params.scale * sin);
    AffineMap {
        m: [
            [a, b, cx - a * cx - b * cy + params.dx],
            [-b, a, cy + b * cx - a * cy + params.dy],
        ],
    }
}

/// Half-up rounding; the small bias keeps exact ties stable under float noise.
#[inline]
fn round_cell(v: f64) -> i64 {
    (v + 0.5 + 1e-9).floor() as i64
}

/// Result of editing one self-attention query tensor.
#[derive(Clone, Debug)]
pub struct QueryEdit {
    pub query: QueryTensor,
    /// Cells that received a transported object vector.
    pub destinations: Vec<usize>,
    /// Object source cells left without an object vector, filled per policy.
    pub vacated: Vec<usize>,
    /// Objects skipped because their mask was empty.
    pub noops: Vec<usize>,
}

/// Edit a single object. See [`edit_query_multi`].
pub fn edit_query(
    q_s: &QueryTensor,
    mask: &MaskGrid,
    params: &LayoutParams,
    fill: FillPolicy,
) -> Result<QueryEdit> {
    edit_query_multi(q_s, &[(mask.clone(), *params)], fill)
}

/// Transport every object's masked queries by its affine edit.
///
/// Background cells that are neither vacated nor destinations keep `q_s`.
/// Where destinations collide the later object wins. Dropped objects have
/// all their cells filled and relocate nothing.
pub fn edit_query_multi(
    q_s: &QueryTensor,
    objects: &[(MaskGrid, LayoutParams)],
    fill: FillPolicy,
) -> Result<QueryEdit> {
    let Some((first, _)) = objects.first() else {
        return Err(MftfError::config("edit_query needs at least one object"));
    };
    let grid = first.shape();
    let n = q_s.dim().1;
    if grid.cells() != n {
        return Err(MftfError::shape(format!(
            "mask grid {grid} has {} cells, query has {n}",
            grid.cells()
        )));
    }
    for (_, p) in objects {
        p.validate()?;
    }
    let masks: Vec<MaskGrid> = objects.iter().map(|(m, _)| m.clone()).collect();
    let union = union_masks(&masks)?;

    let mut noops = Vec::new();
    let mut moves: Vec<Vec<(usize, usize)>> = Vec::with_capacity(objects.len());
    let mut is_dest = vec![false; n];
    for (k, (mask, params)) in objects.iter().enumerate() {
        let Some(centroid) = mask.centroid() else {
            if !params.drop {
                log::warn!(
                    "mask for token {} is empty; layout edit is a no-op",
                    mask.token_index
                );
                noops.push(k);
            }
            moves.push(Vec::new());
            continue;
        };
        if params.drop {
            moves.push(Vec::new());
            continue;
        }
        let m = transport(mask, params, centroid)?;
        for &(dst, _) in &m {
            is_dest[dst] = true;
        }
        moves.push(m);
    }

    let mut out = q_s.clone();
    let vacated: Vec<usize> = (0..n).filter(|&i| union.cells()[i] && !is_dest[i]).collect();
    match fill {
        FillPolicy::Zero => {
            for &v in &vacated {
                out.slice_mut(s![.., v, ..]).fill(0.0);
            }
        }
        FillPolicy::NearestBackground => {
            for &v in &vacated {
                match nearest_background(&union, v) {
                    Some(b) => out.slice_mut(s![.., v, ..]).assign(&q_s.slice(s![.., b, ..])),
                    None => out.slice_mut(s![.., v, ..]).fill(0.0),
                }
            }
        }
    }
    for m in &moves {
        for &(dst, src) in m {
            out.slice_mut(s![.., dst, ..]).assign(&q_s.slice(s![.., src, ..]));
        }
    }
    let destinations = (0..n).filter(|&i| is_dest[i]).collect();
    Ok(QueryEdit {
        query: out,
        destinations,
        vacated,
        noops,
    })
}

/// `(destination, source)` cell pairs for one object, by inverse mapping.
pub fn transport(
    mask: &MaskGrid,
    params: &LayoutParams,
    centroid: (f64, f64),
) -> Result<Vec<(usize, usize)>> {
    let grid = mask.shape();
    let inv = build_affine(params, centroid).inverse()?;
    let mut pairs = Vec::new();
    for dst in 0..grid.cells() {
        let (r, c) = grid.coords(dst);
        let (x, y) = inv.apply(c as f64, r as f64);
        let (sr, sc) = (round_cell(y), round_cell(x));
        if sr < 0 || sc < 0 || sr >= grid.h as i64 || sc >= grid.w as i64 {
            continue;
        }
        let (sr, sc) = (sr as usize, sc as usize);
        if mask.get(sr, sc) {
            pairs.push((dst, grid.index(sr, sc)));
        }
    }
    Ok(pairs)
}

/// Closest cell outside `objects` by Manhattan distance, ties to the first in
/// row-major order.
pub fn nearest_background(objects: &MaskGrid, cell: usize) -> Option<usize> {
    let grid = objects.shape();
    let (r, c) = grid.coords(cell);
    let (r, c) = (r as i64, c as i64);
    let (h, w) = (grid.h as i64, grid.w as i64);
    let max_d = h + w;
    for d in 0..=max_d {
        for dr in -d..=d {
            let rr = r + dr;
            if rr < 0 || rr >= h {
                continue;
            }
            let rem = d - dr.abs();
            let cols = if rem == 0 { [c, c] } else { [c - rem, c + rem] };
            for (j, &cc) in cols.iter().enumerate() {
                if j == 1 && rem == 0 {
                    break;
                }
                if cc < 0 || cc >= w {
                    continue;
                }
                if !objects.get(rr as usize, cc as usize) {
                    return Some(grid.index(rr as usize, cc as usize));
                }
            }
        }
    }
    None
}

/// L2 norm of every cell's query across heads and channels, as an `(h, w)` map.
pub fn query_norm_map(q: &QueryTensor, grid: GridShape) -> Result<Array2<f32>> {
    if q.dim().1 != grid.cells() {
        return Err(MftfError::shape(format!(
            "query with {} cells cannot be shown on grid {grid}",
            q.dim().1
        )));
    }
    let norms = q.map_axis(Axis(0), |v| v.iter().map(|x| x * x).sum::<f32>());
    let per_cell = norms.sum_axis(Axis(1)).mapv(f32::sqrt);
    Ok(per_cell.into_shape_with_order((grid.h, grid.w)).expect("cells match grid"))
}
