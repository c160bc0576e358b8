//! Geometric normalization: crop to content, nearest-neighbor resampling,
//! and exact restoration of outputs to the original grid.
//!
//! Every forward operation returns a [`GeomTransform`] recording how to
//! undo it. Binary volumes are resampled with nearest-neighbor sampling
//! (no threshold parameter, binarity preserved): the center of output voxel
//! `i` maps to input index space at `(i + 0.5) * scale - 0.5`, which is
//! rounded half-up and clamped — computed as `floor((i + 0.5) * scale)`.
//! Spacing is rescaled so the physical extent of the volume is preserved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Record of a crop + resample normalization, sufficient to restore a
/// network output to the original grid geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeomTransform {
    /// Voxel offset of the crop within the original grid.
    pub crop_lo: [usize; 3],
    pub original_dims: [usize; 3],
    pub cropped_dims: [usize; 3],
    /// Per-axis input-voxels-per-output-voxel ratio of the resample step
    /// (`cropped_dims / target_dims`).
    pub scale: [f64; 3],
    pub target_dims: [usize; 3],
    /// Original geometry, kept so restoration is bit-exact.
    pub original_spacing: [f64; 3],
    pub original_origin: [f64; 3],
}

impl GeomTransform {
    /// Identity transform for a grid.
    pub fn identity(g: &VoxelGrid) -> Self {
        Self {
            crop_lo: [0, 0, 0],
            original_dims: g.dims(),
            cropped_dims: g.dims(),
            scale: [1.0, 1.0, 1.0],
            target_dims: g.dims(),
            original_spacing: g.spacing(),
            original_origin: g.origin(),
        }
    }

    /// Chains a crop transform with a subsequent resample transform.
    pub fn compose(crop: &GeomTransform, resample: &GeomTransform) -> Result<Self> {
        if crop.target_dims != resample.original_dims {
            return Err(Error::DimensionError(format!(
                "cannot compose: crop target {:?} != resample input {:?}",
                crop.target_dims, resample.original_dims
            )));
        }
        Ok(Self {
            crop_lo: crop.crop_lo,
            original_dims: crop.original_dims,
            cropped_dims: crop.cropped_dims,
            scale: resample.scale,
            target_dims: resample.target_dims,
            original_spacing: crop.original_spacing,
            original_origin: crop.original_origin,
        })
    }
}

/// Crops to the foreground bounding box dilated by `margin_vox` (clamped to
/// the grid). The origin is updated so retained voxels keep their physical
/// coordinates.
pub fn crop_to_content(g: &VoxelGrid, margin_vox: usize) -> Result<(VoxelGrid, GeomTransform)> {
    let bb = g.bounding_box()?;
    let dims = g.dims();
    let lo = [
        bb.lo[0].saturating_sub(margin_vox),
        bb.lo[1].saturating_sub(margin_vox),
        bb.lo[2].saturating_sub(margin_vox),
    ];
    let hi = [
        (bb.hi[0] + margin_vox).min(dims[0] - 1),
        (bb.hi[1] + margin_vox).min(dims[1] - 1),
        (bb.hi[2] + margin_vox).min(dims[2] - 1),
    ];
    let out_dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let spacing = g.spacing();
    let origin = g.origin();
    let new_origin = [
        origin[0] + lo[0] as f64 * spacing[0],
        origin[1] + lo[1] as f64 * spacing[1],
        origin[2] + lo[2] as f64 * spacing[2],
    ];
    let out = VoxelGrid::from_fn(out_dims, spacing, new_origin, |x, y, z| {
        g.get(x + lo[0], y + lo[1], z + lo[2])
    })?;
    let t = GeomTransform {
        crop_lo: lo,
        original_dims: dims,
        cropped_dims: out_dims,
        scale: [1.0, 1.0, 1.0],
        target_dims: out_dims,
        original_spacing: spacing,
        original_origin: origin,
    };
    Ok((out, t))
}

#[inline]
fn nearest_source_index(i: usize, scale: f64, n_in: usize) -> usize {
    let u = (i as f64 + 0.5) * scale;
    let s = u.floor();
    if s < 0.0 {
        0
    } else {
        (s as usize).min(n_in - 1)
    }
}

fn resample_data(g: &VoxelGrid, target_dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> VoxelGrid {
    let in_dims = g.dims();
    let scale = [
        in_dims[0] as f64 / target_dims[0] as f64,
        in_dims[1] as f64 / target_dims[1] as f64,
        in_dims[2] as f64 / target_dims[2] as f64,
    ];
    let map = |n_out: usize, axis: usize| -> Vec<usize> {
        (0..n_out)
            .map(|i| nearest_source_index(i, scale[axis], in_dims[axis]))
            .collect()
    };
    let xs = map(target_dims[0], 0);
    let ys = map(target_dims[1], 1);
    let zs = map(target_dims[2], 2);
    VoxelGrid::from_fn(target_dims, spacing, origin, |x, y, z| {
        g.get(xs[x], ys[y], zs[z])
    })
    .expect("valid target dims")
}

/// Nearest-neighbor resampling to `target_dims`, preserving physical extent.
pub fn resample_nearest(g: &VoxelGrid, target_dims: [usize; 3]) -> Result<(VoxelGrid, GeomTransform)> {
    if target_dims.iter().any(|&d| d == 0) {
        return Err(Error::DimensionError(format!(
            "target_dims must be positive, got {target_dims:?}"
        )));
    }
    let in_dims = g.dims();
    let spacing = g.spacing();
    let origin = g.origin();
    let scale = [
        in_dims[0] as f64 / target_dims[0] as f64,
        in_dims[1] as f64 / target_dims[1] as f64,
        in_dims[2] as f64 / target_dims[2] as f64,
    ];
    // Volume box [origin - s/2, origin + (n - 1/2) s] is preserved.
    let new_spacing = [
        spacing[0] * scale[0],
        spacing[1] * scale[1],
        spacing[2] * scale[2],
    ];
    let new_origin = [
        origin[0] + (new_spacing[0] - spacing[0]) / 2.0,
        origin[1] + (new_spacing[1] - spacing[1]) / 2.0,
        origin[2] + (new_spacing[2] - spacing[2]) / 2.0,
    ];
    let out = resample_data(g, target_dims, new_spacing, new_origin);
    let t = GeomTransform {
        crop_lo: [0, 0, 0],
        original_dims: in_dims,
        cropped_dims: in_dims,
        scale,
        target_dims,
        original_spacing: spacing,
        original_origin: origin,
    };
    Ok((out, t))
}

/// Crop to content, then resample: the standard normalization before the
/// network. The returned transform restores outputs in one step.
pub fn preprocess(
    g: &VoxelGrid,
    margin_vox: usize,
    target_dims: [usize; 3],
) -> Result<(VoxelGrid, GeomTransform)> {
    let (cropped, t_crop) = crop_to_content(g, margin_vox)?;
    let (resampled, t_res) = resample_nearest(&cropped, target_dims)?;
    Ok((resampled, GeomTransform::compose(&t_crop, &t_res)?))
}

/// Inverts a normalization: resample back to the cropped dims, then paste at
/// the crop offset into a zero grid with the original geometry.
pub fn restore(g: &VoxelGrid, t: &GeomTransform) -> Result<VoxelGrid> {
    if g.dims() != t.target_dims {
        return Err(Error::DimensionError(format!(
            "restore expects dims {:?}, got {:?}",
            t.target_dims,
            g.dims()
        )));
    }
    let sp = t.original_spacing;
    let cropped_origin = [
        t.original_origin[0] + t.crop_lo[0] as f64 * sp[0],
        t.original_origin[1] + t.crop_lo[1] as f64 * sp[1],
        t.original_origin[2] + t.crop_lo[2] as f64 * sp[2],
    ];
    let back = resample_data(g, t.cropped_dims, sp, cropped_origin);
    let lo = t.crop_lo;
    let hi = [
        lo[0] + t.cropped_dims[0],
        lo[1] + t.cropped_dims[1],
        lo[2] + t.cropped_dims[2],
    ];
    VoxelGrid::from_fn(t.original_dims, sp, t.original_origin, |x, y, z| {
        if x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2] {
            back.get(x - lo[0], y - lo[1], z - lo[2])
        } else {
            false
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, dims: [usize; 3], density: f64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelGrid::from_fn(dims, [0.7, 1.3, 2.1], [5.0, -3.0, 0.5], |_, _, _| {
            rng.gen::<f64>() < density
        })
        .unwrap()
    }

    #[test]
    fn crop_single_voxel_margin_zero() {
        let g = VoxelGrid::from_fn([9, 9, 9], [1.0; 3], [0.0; 3], |x, y, z| {
            (x, y, z) == (4, 2, 7)
        })
        .unwrap();
        let (c, t) = crop_to_content(&g, 0).unwrap();
        assert_eq!(c.dims(), [1, 1, 1]);
        assert_eq!(c.foreground_count(), 1);
        assert_eq!(t.crop_lo, [4, 2, 7]);
        assert_eq!(c.origin(), [4.0, 2.0, 7.0]);
    }

    #[test]
    fn crop_full_grid_clamps_margin() {
        let g = VoxelGrid::from_fn([6, 6, 6], [1.0; 3], [0.0; 3], |_, _, _| true).unwrap();
        let (c, _) = crop_to_content(&g, 4).unwrap();
        assert_eq!(c.dims(), [6, 6, 6]);
    }

    #[test]
    fn crop_then_restore_round_trips() {
        for seed in 0..6u64 {
            for margin in [0usize, 2] {
                let g = random_grid(seed, [14, 11, 9], 0.2);
                if g.is_empty() {
                    continue;
                }
                let (c, t) = crop_to_content(&g, margin).unwrap();
                let r = restore(&c, &t).unwrap();
                assert_eq!(r, g, "seed {seed} margin {margin}");
            }
        }
    }

    #[test]
    fn crop_is_idempotent_at_margin_zero() {
        let g = random_grid(3, [12, 12, 12], 0.15);
        let (c1, _) = crop_to_content(&g, 0).unwrap();
        let (c2, _) = crop_to_content(&c1, 0).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn resample_identity_when_target_equals_dims() {
        let g = random_grid(4, [8, 7, 6], 0.5);
        let (r, t) = resample_nearest(&g, g.dims()).unwrap();
        assert_eq!(r, g);
        assert_eq!(t.scale, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn upsample_2x_replicates_blocks() {
        let g = VoxelGrid::from_fn([2, 2, 2], [1.0; 3], [0.0; 3], |x, y, z| {
            (x, y, z) == (1, 0, 1)
        })
        .unwrap();
        let (r, _) = resample_nearest(&g, [4, 4, 4]).unwrap();
        assert_eq!(r.foreground_count(), 8);
        for z in 2..4 {
            for y in 0..2 {
                for x in 2..4 {
                    assert!(r.get(x, y, z));
                }
            }
        }
    }

    #[test]
    fn downsample_matches_per_voxel_mapping_oracle() {
        let g = random_grid(5, [16, 16, 16], 0.5);
        let (r, _) = resample_nearest(&g, [11, 11, 11]).unwrap();
        let scale = 16.0 / 11.0;
        for z in 0..11 {
            for y in 0..11 {
                for x in 0..11 {
                    let m = |i: usize| (((i as f64 + 0.5) * scale).floor() as usize).min(15);
                    assert_eq!(r.get(x, y, z), g.get(m(x), m(y), m(z)));
                }
            }
        }
    }

    #[test]
    fn physical_extent_is_preserved() {
        let g = random_grid(6, [16, 12, 10], 0.5);
        let (r, _) = resample_nearest(&g, [7, 23, 5]).unwrap();
        for a in 0..3 {
            let before = g.dims()[a] as f64 * g.spacing()[a];
            let after = r.dims()[a] as f64 * r.spacing()[a];
            assert!((before - after).abs() < 1e-9, "axis {a}: {before} vs {after}");
        }
    }

    #[test]
    fn lossless_upsample_round_trip() {
        for seed in 0..5u64 {
            let g = random_grid(seed + 20, [9, 6, 11], 0.4);
            if g.is_empty() {
                continue;
            }
            for target in [[9, 6, 11], [10, 7, 12], [18, 12, 22], [27, 13, 11]] {
                let (up, t) = resample_nearest(&g, target).unwrap();
                let back = restore(&up, &t).unwrap();
                assert_eq!(back, g, "seed {seed} target {target:?}");
            }
        }
    }

    #[test]
    fn restore_rejects_wrong_dims() {
        let g = random_grid(9, [8, 8, 8], 0.4);
        let (_, t) = resample_nearest(&g, [6, 6, 6]).unwrap();
        let wrong = random_grid(10, [5, 6, 6], 0.4);
        assert!(matches!(restore(&wrong, &t), Err(Error::DimensionError(_))));
    }

    #[test]
    fn restore_all_zero_is_all_zero() {
        let g = random_grid(11, [10, 10, 10], 0.3);
        let (_, t) = preprocess(&g, 1, [8, 8, 8]).unwrap();
        let zero = VoxelGrid::zeros([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        // Geometry of the network output is irrelevant to restore; dims must match.
        let r = restore(&zero, &t).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.dims(), g.dims());
    }

    #[test]
    fn transform_serializes_round_trip() {
        let g = random_grid(12, [12, 10, 8], 0.3);
        let (_, t) = preprocess(&g, 2, [8, 8, 8]).unwrap();
        let text = serde_json::to_string(&t).unwrap();
        let back: GeomTransform = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
    }
}
