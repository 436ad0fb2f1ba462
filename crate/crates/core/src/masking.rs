//! Object masks from cross-attention.
//!
//! For one prompt token, each captured cross-attention layer contributes its
//! head-averaged attention column, min-max normalized over the spatial cells.
//! Layers of different resolution are bilinearly resampled to the requested
//! grid and averaged. The average is normalized once more and thresholded:
//! a cell belongs to the object when its score is at least `eta`.

use ndarray::Array2;

use crate::error::{MftfError, Result};
use crate::model::{AttentionRecord, BackendInfo, GridShape, MaskGrid};

/// Normalized attention score per cell of `grid`, in `[0, 1]`.
///
/// Thresholding this map at `eta` gives [`create_mask`]; callers that need
/// several thresholds of the same token can compute it once.
pub fn soft_mask(
    records: &[AttentionRecord],
    token_index: usize,
    grid: GridShape,
    info: &BackendInfo,
) -> Result<Array2<f64>> {
    let mut acc = Array2::<f64>::zeros((grid.h, grid.w));
    // accumulate in a canonical order so the float sum ignores capture order
    let mut crosses: Vec<_> = records
        .iter()
        .filter_map(|r| r.cross_map().map(|m| (r.site, r.branch, m)))
        .collect();
    crosses.sort_by_key(|(site, branch, _)| (site.layer, site.step, *branch));
    let mut used = 0usize;
    for (site, _, map) in crosses {
        let (heads, n, m) = map.dim();
        if token_index >= m {
            return Err(MftfError::Index(format!(
                "token index {token_index} out of range for text length {m}"
            )));
        }
        let layer_grid = info.layer(site.layer)?.grid;
        if layer_grid.cells() != n || heads == 0 {
            return Err(MftfError::shape(format!(
                "cross map of layer {} has {n} cells, layer grid is {layer_grid}",
                site.layer
            )));
        }
        let mut column = Array2::<f64>::zeros((layer_grid.h, layer_grid.w));
        for (i, v) in column.iter_mut().enumerate() {
            let mut sum = 0.0f64;
            for h in 0..heads {
                sum += f64::from(map[[h, i, token_index]]);
            }
            *v = sum / heads as f64;
        }
        min_max_normalize(&mut column);
        acc += &bilinear(&column, grid);
        used += 1;
    }
    if used == 0 {
        return Err(MftfError::config("mask creation needs at least one cross-attention record"));
    }
    acc /= used as f64;
    min_max_normalize(&mut acc);
    Ok(acc)
}

/// Binary mask of `token_index` at the resolution of `target_layer`.
pub fn create_mask(
    records: &[AttentionRecord],
    token_index: usize,
    eta: f64,
    target_layer: usize,
    info: &BackendInfo,
) -> Result<MaskGrid> {
    let grid = info.layer(target_layer)?.grid;
    let mut mask = create_mask_at(records, token_index, eta, grid, info)?;
    mask.source_layer = target_layer;
    Ok(mask)
}

/// [`create_mask`] for an explicit grid rather than a layer.
pub fn create_mask_at(
    records: &[AttentionRecord],
    token_index: usize,
    eta: f64,
    grid: GridShape,
    info: &BackendInfo,
) -> Result<MaskGrid> {
    check_eta(eta)?;
    let soft = soft_mask(records, token_index, grid, info)?;
    let source = records.iter().find(|r| r.cross_map().is_some()).map_or(0, |r| r.site.layer);
    Ok(threshold(&soft, token_index, source, eta))
}

pub fn threshold(soft: &Array2<f64>, token_index: usize, source_layer: usize, eta: f64) -> MaskGrid {
    let (h, w) = soft.dim();
    MaskGrid::from_fn(token_index, source_layer, GridShape::new(h, w), |r, c| soft[[r, c]] >= eta)
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(MftfError::config(format!("eta {eta} outside [0, 1]")));
    }
    Ok(())
}

/// Maps `[min, max]` onto `[0, 1]`. A constant map becomes all ones, so every
/// cell sits at the maximum.
pub(crate) fn min_max_normalize(a: &mut Array2<f64>) {
    let min = a.iter().copied().fold(f64::INFINITY, f64::min);
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 {
        a.mapv_inplace(|v| (v - min) / range);
    } else {
        a.fill(1.0);
    }
}

/// Half-pixel-centred bilinear resampling with edge clamping.
pub(crate) fn bilinear(src: &Array2<f64>, to: GridShape) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (to.h, to.w) {
        return src.clone();
    }
    let axis = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    Array2::from_shape_fn((to.h, to.w), |(r, c)| {
        let (r0, r1, fr) = axis(r, h, to.h);
        let (c0, c1, fc) = axis(c, w, to.w);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Nearest-neighbour resampling.
pub fn resample_mask(mask: &MaskGrid, to: GridShape) -> MaskGrid {
    let from = mask.shape();
    if from == to {
        return mask.clone();
    }
    MaskGrid::from_fn(mask.token_index, mask.source_layer, to, |r, c| {
        mask.get(r * from.h / to.h, c * from.w / to.w)
    })
}

/// Cellwise OR.
pub fn union_masks(masks: &[MaskGrid]) -> Result<MaskGrid> {
    let first = masks
        .first()
        .ok_or_else(|| MftfError::config("union of zero masks"))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if m.shape() != out.shape() {
            return Err(MftfError::shape(format!(
                "cannot union masks of shape {} and {}",
                out.shape(),
                m.shape()
            )));
        }
        let shape = out.shape();
        for (i, &set) in m.cells().iter().enumerate() {
            if set {
                let (r, c) = shape.coords(i);
                out.set(r, c, true);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, Branch};
    use ndarray::Array3;
    use proptest::prelude::*;

    fn info() -> BackendInfo {
        BackendInfo::new(
            "t",
            [
                (AttentionKind::SelfAttention, GridShape::new(8, 8), 2, 4),
                (AttentionKind::Cross, GridShape::new(8, 8), 2, 4),
                (AttentionKind::SelfAttention, GridShape::new(4, 4), 2, 4),
                (AttentionKind::Cross, GridShape::new(4, 4), 2, 4),
            ],
            [4, 8, 8],
            8,
            [16, 16],
        )
    }

    fn hot_block_record() -> AttentionRecord {
        // token 1 is 1.0 on the 2x2 block at rows 2..4, cols 5..7
        let map = Array3::from_shape_fn((2, 64, 3), |(_, i, t)| {
            let (r, c) = (i / 8, i % 8);
            let hot = (2..4).contains(&r) && (5..7).contains(&c);
            match t {
                1 if hot => 1.0,
                _ => 0.0,
            }
        });
        AttentionRecord::cross(0, 1, Branch::Cond, map)
    }

    #[test]
    fn eta_zero_gives_all_ones() {
        let m = create_mask(&[hot_block_record()], 1, 0.0, 1, &info()).unwrap();
        assert_eq!(m.count(), 64);
    }

    #[test]
    fn eta_one_keeps_only_the_maximum() {
        let m = create_mask(&[hot_block_record()], 1, 1.0, 1, &info()).unwrap();
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn hot_block_survives_threshold() {
        let m = create_mask(&[hot_block_record()], 1, 0.5, 1, &info()).unwrap();
        let cells: Vec<_> = m.object_cells().collect();
        assert_eq!(cells, vec![(2, 5), (2, 6), (3, 5), (3, 6)]);
    }

    #[test]
    fn token_out_of_range_is_an_index_error() {
        let err = create_mask(&[hot_block_record()], 3, 0.2, 1, &info()).unwrap_err();
        assert!(matches!(err, MftfError::Index(_)));
        assert!(create_mask(&[], 0, 0.2, 1, &info()).is_err());
    }

    #[test]
    fn coarse_target_layer_resamples() {
        let m = create_mask(&[hot_block_record()], 1, 0.5, 3, &info()).unwrap();
        assert_eq!(m.shape(), GridShape::new(4, 4));
        assert!(m.get(1, 2) || m.get(1, 3));
    }

    #[test]
    fn checkerboard_downsamples_to_subsampled_pattern() {
        let m = MaskGrid::from_fn(0, 0, GridShape::new(8, 8), |r, c| (r + c) % 2 == 0);
        let d = resample_mask(&m, GridShape::new(4, 4));
        for r in 0..4 {
            for c in 0..4 {
                assert!(d.get(r, c), "cell ({r},{c}) samples an even-parity source");
            }
        }
    }

    #[test]
    fn single_cell_upsamples_to_block() {
        let m = MaskGrid::from_fn(0, 0, GridShape::new(4, 4), |r, c| (r, c) == (1, 2));
        let u = resample_mask(&m, GridShape::new(8, 8));
        let cells: Vec<_> = u.object_cells().collect();
        assert_eq!(cells, vec![(2, 4), (2, 5), (3, 4), (3, 5)]);
        assert_eq!(resample_mask(&m, m.shape()), m);
    }

    #[test]
    fn union_laws() {
        let g = GridShape::new(3, 3);
        let a = MaskGrid::from_fn(0, 0, g, |r, c| (r, c) == (0, 0));
        let b = MaskGrid::from_fn(1, 0, g, |r, c| (r, c) == (2, 1));
        assert_eq!(union_masks(&[a.clone(), MaskGrid::zeros(0, 0, g)]).unwrap(), a);
        assert_eq!(union_masks(&[a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(union_masks(&[a.clone(), b]).unwrap().count(), 2);
        let other = MaskGrid::zeros(0, 0, GridShape::new(2, 2));
        assert!(matches!(union_masks(&[a, other]), Err(MftfError::Shape(_))));
    }

    #[test]
    fn bilinear_identity_is_exact() {
        let a = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 / 15.0);
        assert_eq!(bilinear(&a, GridShape::new(4, 4)), a);
    }

    fn random_record(layer: usize, cells: usize, values: &[f32]) -> AttentionRecord {
        let map = Array3::from_shape_fn((2, cells, 3), |(h, i, t)| values[(h * cells + i) * 3 + t]);
        AttentionRecord::cross(0, layer, Branch::Cond, map)
    }

    proptest! {
        #[test]
        fn masks_shrink_as_eta_grows(
            values in proptest::collection::vec(0.0f32..1.0, 2 * 64 * 3),
            coarse in proptest::collection::vec(0.0f32..1.0, 2 * 16 * 3),
            e1 in 0.0f64..=1.0,
            e2 in 0.0f64..=1.0,
        ) {
            let records = [random_record(1, 64, &values), random_record(3, 16, &coarse)];
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let a = create_mask(&records, 1, lo, 1, &info()).unwrap();
            let b = create_mask(&records, 1, hi, 1, &info()).unwrap();
            prop_assert!(b.is_subset_of(&a));
        }

        #[test]
        fn record_order_does_not_matter(
            values in proptest::collection::vec(0.0f32..1.0, 2 * 64 * 3),
            coarse in proptest::collection::vec(0.0f32..1.0, 2 * 16 * 3),
            eta in 0.0f64..=1.0,
        ) {
            let fwd = [random_record(1, 64, &values), random_record(3, 16, &coarse)];
            let rev = [fwd[1].clone(), fwd[0].clone()];
            prop_assert_eq!(
                create_mask(&fwd, 2, eta, 1, &info()).unwrap(),
                create_mask(&rev, 2, eta, 1, &info()).unwrap()
            );
        }

        #[test]
        fn resampling_twice_is_idempotent(
            bits in proptest::collection::vec(any::<bool>(), 64),
            h in 1usize..10,
            w in 1usize..10,
        ) {
            let m = MaskGrid::from_cells(0, 0, GridShape::new(8, 8), bits).unwrap();
            let to = GridShape::new(h, w);
            let once = resample_mask(&m, to);
            prop_assert_eq!(resample_mask(&once, to), once);
        }
    }
}
