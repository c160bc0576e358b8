//! Synthetic defect generation.
//!
//! Turns a healthy skull into a (defective skull, ground-truth defect)
//! training pair: a random number of cuboid/ellipsoid patches are placed on
//! the upper skull, each optionally warped by its own random elastic
//! displacement field, and their union -- intersected with the skull --
//! becomes the defect. Because every case is freshly seeded, each epoch of
//! training sees new defects; that on-the-fly heterogeneity is the point of
//! the pipeline.
//!
//! Everything is a pure function of `(skull, config, seed)`; see
//! [`crate::seeds`] for the sub-stream derivation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::config_hash;
use crate::seeds::{self, tag};
use crate::volume::VoxelGrid;
use rand::Rng;

/// Patch geometry kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchShape {
    Cuboid,
    Ellipsoid,
}

/// All randomized-defect parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Patches per case, drawn uniformly from `min..=max`.
    pub patch_count_min: u32,
    pub patch_count_max: u32,
    /// Candidate shapes, chosen uniformly per patch.
    pub shape_kinds: Vec<PatchShape>,
    /// Per-axis half-extent as a fraction of the skull bounding-box extent.
    pub size_frac_min: f64,
    pub size_frac_max: f64,
    /// Lowest allowed patch-center height, as a fraction of the bounding-box
    /// z-extent. Restricts defects to the cranial (upper) region.
    pub z_min_frac: f64,
    /// Deformable ("D") vs sharp-edged ("ND") masking.
    pub deform_enabled: bool,
    /// Control-lattice spacing of the displacement field, in voxels.
    pub control_spacing_vox: u32,
    /// Max per-axis control-point displacement, in voxels.
    pub max_disp_vox: f64,
    /// Gaussian smoothing sigma applied to the interpolated field, in voxels.
    pub smooth_sigma_vox: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patch_count_min: 1,
            patch_count_max: 3,
            shape_kinds: vec![PatchShape::Cuboid, PatchShape::Ellipsoid],
            size_frac_min: 0.10,
            size_frac_max: 0.30,
            z_min_frac: 0.4,
            deform_enabled: true,
            control_spacing_vox: 8,
            max_disp_vox: 6.0,
            smooth_sigma_vox: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_count_min < 1 || self.patch_count_min > self.patch_count_max {
            return Err(Error::InvalidConfig(format!(
                "patch count range [{}, {}] invalid",
                self.patch_count_min, self.patch_count_max
            )));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::InvalidConfig("shape_kinds must be nonempty".into()));
        }
        if !(self.size_frac_min > 0.0 && self.size_frac_min <= self.size_frac_max && self.size_frac_max < 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "size fractions [{}, {}] must satisfy 0 < min <= max < 1",
                self.size_frac_min, self.size_frac_max
            )));
        }
        if !self.z_min_frac.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "z_min_frac {} must be finite",
                self.z_min_frac
            )));
        }
        if self.control_spacing_vox < 2 {
            return Err(Error::InvalidConfig(format!(
                "control_spacing_vox {} must be >= 2",
                self.control_spacing_vox
            )));
        }
        if !(self.max_disp_vox >= 0.0) || !self.max_disp_vox.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "max_disp_vox {} must be finite and >= 0",
                self.max_disp_vox
            )));
        }
        if !(self.smooth_sigma_vox >= 0.0) || !self.smooth_sigma_vox.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "smooth_sigma_vox {} must be finite and >= 0",
                self.smooth_sigma_vox
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Dense per-voxel displacement field, in voxel units.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    dims: [usize; 3],
    /// One flat component grid per axis, x-fastest.
    comps: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    #[inline]
    pub fn vector_at(&self, idx: usize) -> [f64; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    /// Largest absolute component anywhere in the field.
    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// A (defective skull, ground-truth defect) pair with provenance.
/// Invariants: `defective = skull \ defect_gt`, `defect_gt ⊆ skull`,
/// `defect_gt` nonempty.
#[derive(Debug, Clone)]
pub struct CasePair {
    pub defective: VoxelGrid,
    pub defect_gt: VoxelGrid,
    pub seed: u64,
    pub config_hash: String,
}

/// Geometry record of one sampled patch, written into case manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchMeta {
    pub kind: PatchShape,
    pub center: [usize; 3],
    pub half_extents: [f64; 3],
    pub deformed: bool,
}

fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Samples the patch masks for one case. Each patch is a full-size mask on
/// the skull's grid. Draw order per patch is fixed: shape kind, center,
/// then per-axis half-extents.
pub fn sample_patch_set(skull: &VoxelGrid, cfg: &SynthConfig, seed: u64) -> Result<Vec<VoxelGrid>> {
    Ok(sample_patch_set_with_meta(skull, cfg, seed)?
        .into_iter()
        .map(|(g, _)| g)
        .collect())
}

pub fn sample_patch_set_with_meta(
    skull: &VoxelGrid,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<(VoxelGrid, PatchMeta)>> {
    cfg.validate()?;
    let bb = skull.bounding_box().map_err(|_| Error::EmptyVolume("sample_patch_set".into()))?;
    let extent = bb.extent();

    // Eligible centers: foreground voxels at or above the height cutoff.
    let z_cut = bb.lo[2] as f64 + cfg.z_min_frac * (bb.hi[2] - bb.lo[2]) as f64;
    let eligible: Vec<[usize; 3]> = skull
        .iter_foreground()
        .filter(|&[_, _, z]| z as f64 >= z_cut)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleCenters);
    }

    let count = {
        let mut rng = seeds::rng(seed, &[tag::PATCH_COUNT]);
        if cfg.patch_count_min == cfg.patch_count_max {
            cfg.patch_count_min
        } else {
            rng.gen_range(cfg.patch_count_min..=cfg.patch_count_max)
        }
    };

    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count as u64 {
        let mut rng = seeds::rng(seed, &[tag::PATCH_GEOM, i]);
        let kind = cfg.shape_kinds[rng.gen_range(0..cfg.shape_kinds.len())];
        let center = eligible[rng.gen_range(0..eligible.len())];
        let mut half = [0.0f64; 3];
        for (axis, h) in half.iter_mut().enumerate() {
            let frac = uniform_in(&mut rng, cfg.size_frac_min, cfg.size_frac_max);
            *h = frac * extent[axis] as f64;
        }
        let mask = rasterize_patch(skull, kind, center, half);
        let meta = PatchMeta {
            kind,
            center,
            half_extents: half,
            deformed: cfg.deform_enabled,
        };
        out.push((mask, meta));
    }
    Ok(out)
}

fn rasterize_patch(
    like: &VoxelGrid,
    kind: PatchShape,
    center: [usize; 3],
    half: [f64; 3],
) -> VoxelGrid {
    let c = [center[0] as f64, center[1] as f64, center[2] as f64];
    VoxelGrid::from_fn(like.dims(), like.spacing(), like.origin(), |x, y, z| {
        let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        match kind {
            PatchShape::Cuboid => {
                d[0].abs() <= half[0] && d[1].abs() <= half[1] && d[2].abs() <= half[2]
            }
            PatchShape::Ellipsoid => {
                let mut s = 0.0;
                for a in 0..3 {
                    let t = d[a] / half[a];
                    s += t * t;
                }
                s <= 1.0
            }
        }
    })
    .expect("geometry preserved")
}

/// Builds a random smooth displacement field: uniform control vectors on a
/// coarse lattice, trilinearly interpolated to full resolution, then
/// separably smoothed with a truncated, renormalized Gaussian. Smoothing
/// weights are renormalized over the in-bounds support at each voxel, so
/// constant fields pass through unchanged.
pub fn random_displacement_field(
    dims: [usize; 3],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<DisplacementField> {
    cfg.validate()?;
    if !cfg.deform_enabled {
        return Err(Error::InvalidConfig(
            "random_displacement_field requires deform_enabled".into(),
        ));
    }
    let spacing = cfg.control_spacing_vox as usize;
    let d = cfg.max_disp_vox;

    // Control points sit at in-grid positions 0, s, 2s, ... < dims; voxels
    // past the last point clamp to it. Spacing >= dims therefore leaves one
    // point per axis and the field is constant before smoothing.
    let ncp: [usize; 3] = core::array::from_fn(|a| (dims[a] - 1) / spacing + 1);
    let n_ctrl = ncp[0] * ncp[1] * ncp[2];

    let mut rng = seeds::rng(seed, &[]);
    let mut control: [Vec<f64>; 3] = [
        Vec::with_capacity(n_ctrl),
        Vec::with_capacity(n_ctrl),
        Vec::with_capacity(n_ctrl),
    ];
    for comp in control.iter_mut() {
        for _ in 0..n_ctrl {
            comp.push(if d == 0.0 { 0.0 } else { rng.gen_range(-d..d) });
        }
    }

    // Per-axis interpolation tables: cell index and fraction for each voxel.
    let tables: [Vec<(usize, usize, f64)>; 3] = core::array::from_fn(|a| {
        (0..dims[a])
            .map(|x| {
                let u = x as f64 / spacing as f64;
                let i0 = (u.floor() as usize).min(ncp[a] - 1);
                let i1 = (i0 + 1).min(ncp[a] - 1);
                let t = u - i0 as f64;
                (i0, i1, t)
            })
            .collect()
    });

    let n = dims[0] * dims[1] * dims[2];
    let mut comps: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (axis, dst) in comps.iter_mut().enumerate() {
        let src = &control[axis];
        let mut idx = 0usize;
        for z in 0..dims[2] {
            let (z0, z1, tz) = tables[2][z];
            for y in 0..dims[1] {
                let (y0, y1, ty) = tables[1][y];
                for x in 0..dims[0] {
                    let (x0, x1, tx) = tables[0][x];
                    let at = |cx: usize, cy: usize, cz: usize| src[(cz * ncp[1] + cy) * ncp[0] + cx];
                    let c00 = at(x0, y0, z0) * (1.0 - tx) + at(x1, y0, z0) * tx;
                    let c10 = at(x0, y1, z0) * (1.0 - tx) + at(x1, y1, z0) * tx;
                    let c01 = at(x0, y0, z1) * (1.0 - tx) + at(x1, y0, z1) * tx;
                    let c11 = at(x0, y1, z1) * (1.0 - tx) + at(x1, y1, z1) * tx;
                    let c0 = c00 * (1.0 - ty) + c10 * ty;
                    let c1 = c01 * (1.0 - ty) + c11 * ty;
                    dst[idx] = c0 * (1.0 - tz) + c1 * tz;
                    idx += 1;
                }
            }
        }
    }

    if cfg.smooth_sigma_vox > 0.0 {
        let kernel = gaussian_kernel(cfg.smooth_sigma_vox);
        for comp in comps.iter_mut() {
            smooth_separable(comp, dims, &kernel);
        }
    }

    // Interpolation and renormalized smoothing are convex combinations, so
    // |v| <= max_disp up to rounding; clamp the few trailing ulps away.
    if d >= 0.0 {
        for comp in comps.iter_mut() {
            for v in comp.iter_mut() {
                *v = v.clamp(-d, d);
            }
        }
    }

    Ok(DisplacementField { dims, comps })
}

/// Truncated Gaussian, radius `ceil(3 sigma)`, normalized to sum 1.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

/// Separable 1D convolution along each axis with per-voxel renormalization
/// over the in-bounds kernel support.
fn smooth_separable(data: &mut Vec<f64>, dims: [usize; 3], kernel: &[f64]) {
    let radius = (kernel.len() / 2) as isize;
    let [nx, ny, nz] = dims;
    let mut scratch = vec![0.0f64; nx.max(ny).max(nz)];

    let pass = |line: &mut [f64], scratch: &mut [f64]| {
        let n = line.len() as isize;
        for p in 0..n {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let q = p + ki as isize - radius;
                if q >= 0 && q < n {
                    acc += w * line[q as usize];
                    wsum += w;
                }
            }
            scratch[p as usize] = acc / wsum;
        }
        line.copy_from_slice(&scratch[..n as usize]);
    };

    // x
    let mut row = vec![0.0f64; nx];
    for z in 0..nz {
        for y in 0..ny {
            let base = (z * ny + y) * nx;
            row.copy_from_slice(&data[base..base + nx]);
            pass(&mut row, &mut scratch);
            data[base..base + nx].copy_from_slice(&row);
        }
    }
    // y
    let mut col = vec![0.0f64; ny];
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                col[y] = data[(z * ny + y) * nx + x];
            }
            pass(&mut col, &mut scratch);
            for y in 0..ny {
                data[(z * ny + y) * nx + x] = col[y];
            }
        }
    }
    // z
    let mut pil = vec![0.0f64; nz];
    let plane = nx * ny;
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                pil[z] = data[z * plane + y * nx + x];
            }
            pass(&mut pil, &mut scratch);
            for z in 0..nz {
                data[z * plane + y * nx + x] = pil[z];
            }
        }
    }
}

/// Backward-warps a binary mask through a displacement field: the output at
/// voxel `v` is the trilinear sample of the mask at `v + field(v)`,
/// binarized at 0.5. Out-of-bounds samples read as background.
pub fn warp_mask(mask: &VoxelGrid, field: &DisplacementField) -> Result<VoxelGrid> {
    if mask.dims() != field.dims() {
        return Err(Error::GeometryMismatch {
            left: format!("mask dims {:?}", mask.dims()),
            right: format!("field dims {:?}", field.dims()),
        });
    }
    let [nx, ny, nz] = mask.dims();
    let sample = |p: [f64; 3]| -> f64 {
        let x0 = p[0].floor();
        let y0 = p[1].floor();
        let z0 = p[2].floor();
        let tx = p[0] - x0;
        let ty = p[1] - y0;
        let tz = p[2] - z0;
        let mut acc = 0.0;
        for (dz, wz) in [(0i64, 1.0 - tz), (1, tz)] {
            for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
                    let w = wx * wy * wz;
                    if w == 0.0 {
                        continue;
                    }
                    let cx = x0 as i64 + dx;
                    let cy = y0 as i64 + dy;
                    let cz = z0 as i64 + dz;
                    if cx < 0 || cy < 0 || cz < 0 {
                        continue;
                    }
                    let (cx, cy, cz) = (cx as usize, cy as usize, cz as usize);
                    if cx >= nx || cy >= ny || cz >= nz {
                        continue;
                    }
                    if mask.get(cx, cy, cz) {
                        acc += w;
                    }
                }
            }
        }
        acc
    };
    let mut idx = 0usize;
    VoxelGrid::from_fn(mask.dims(), mask.spacing(), mask.origin(), |x, y, z| {
        let v = field.vector_at(idx);
        idx += 1;
        sample([x as f64 + v[0], y as f64 + v[1], z as f64 + v[2]]) >= 0.5
    })
}

/// Synthesizes one training case. Retries with derived sub-seeds (up to 16)
/// until the defect is nonempty; a degenerate configuration whose patches
/// never touch the skull fails with `SynthesisFailed`.
pub fn synthesize_case(skull: &VoxelGrid, cfg: &SynthConfig, seed: u64) -> Result<CasePair> {
    synthesize_case_full(skull, cfg, seed).map(|(pair, _, _)| pair)
}

pub const SYNTH_MAX_ATTEMPTS: u32 = 16;

/// As [`synthesize_case`], also returning patch metadata and the number of
/// attempts consumed.
pub fn synthesize_case_full(
    skull: &VoxelGrid,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(CasePair, Vec<PatchMeta>, u32)> {
    cfg.validate()?;
    if skull.is_empty() {
        return Err(Error::EmptyVolume("synthesize_case".into()));
    }
    let hash = cfg.hash();
    for attempt in 0..SYNTH_MAX_ATTEMPTS {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            seeds::derive(seed, &[tag::SYNTH_RETRY, attempt as u64])
        };
        let patches = sample_patch_set_with_meta(skull, cfg, attempt_seed)?;
        let mut union: Option<VoxelGrid> = None;
        let mut metas = Vec::with_capacity(patches.len());
        for (i, (mask, meta)) in patches.into_iter().enumerate() {
            let mask = if cfg.deform_enabled {
                let field_seed = seeds::derive(attempt_seed, &[tag::PATCH_FIELD, i as u64]);
                let field = random_displacement_field(mask.dims(), cfg, field_seed)?;
                warp_mask(&mask, &field)?
            } else {
                mask
            };
            union = Some(match union {
                None => mask,
                Some(u) => u.union(&mask)?,
            });
            metas.push(meta);
        }
        let union = union.expect("count >= 1");
        let defect_gt = union.intersect(skull)?;
        if defect_gt.is_empty() {
            continue;
        }
        let defective = skull.subtract(&defect_gt)?;
        let pair = CasePair {
            defective,
            defect_gt,
            seed,
            config_hash: hash.clone(),
        };
        return Ok((pair, metas, attempt + 1));
    }
    Err(Error::SynthesisFailed {
        attempts: SYNTH_MAX_ATTEMPTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn test_skull(seed: u64) -> VoxelGrid {
        generate_phantom(&PhantomConfig::default(), seed).unwrap()
    }

    fn degenerate_cfg() -> SynthConfig {
        SynthConfig {
            patch_count_min: 1,
            patch_count_max: 1,
            shape_kinds: vec![PatchShape::Cuboid],
            size_frac_min: 0.2,
            size_frac_max: 0.2,
            deform_enabled: false,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn degenerate_distribution_gives_exact_half_extents() {
        let skull = test_skull(1);
        let cfg = degenerate_cfg();
        let patches = sample_patch_set_with_meta(&skull, &cfg, 7).unwrap();
        assert_eq!(patches.len(), 1);
        let extent = skull.bounding_box().unwrap().extent();
        let (_, meta) = &patches[0];
        for a in 0..3 {
            assert_eq!(meta.half_extents[a], 0.2 * extent[a] as f64);
        }
        assert_eq!(meta.kind, PatchShape::Cuboid);
    }

    #[test]
    fn same_seed_same_patches() {
        let skull = test_skull(2);
        let cfg = SynthConfig::default();
        let a = sample_patch_set(&skull, &cfg, 123).unwrap();
        let b = sample_patch_set(&skull, &cfg, 123).unwrap();
        assert_eq!(a, b);
        let c = sample_patch_set(&skull, &cfg, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn patch_count_histogram_is_uniform_within_3_sigma() {
        let skull = test_skull(3);
        let cfg = SynthConfig::default(); // counts 1..=3
        let draws = 500usize;
        let mut hist = [0usize; 3];
        for s in 0..draws as u64 {
            let n = sample_patch_set(&skull, &cfg, s).unwrap().len();
            hist[n - 1] += 1;
        }
        // Binomial(500, 1/3): sigma = sqrt(500 * 1/3 * 2/3) ~ 10.54.
        let expected = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (i, &h) in hist.iter().enumerate() {
            assert!(
                (h as f64 - expected).abs() <= 3.0 * sigma,
                "count {} drawn {} times, expected {expected} +- {}",
                i + 1,
                h,
                3.0 * sigma
            );
        }
    }

    #[test]
    fn no_eligible_centers_is_an_error() {
        // With z_min_frac <= 1 the top bbox slice always qualifies, so the
        // error requires a cutoff above the foreground (no range invariant
        // constrains z_min_frac).
        let skull = test_skull(4);
        let cfg = SynthConfig {
            z_min_frac: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(
            sample_patch_set(&skull, &cfg, 0),
            Err(Error::NoEligibleCenters)
        ));
        let empty = VoxelGrid::zeros([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(
            sample_patch_set(&empty, &SynthConfig::default(), 0),
            Err(Error::EmptyVolume(_))
        ));
    }

    #[test]
    fn zero_max_disp_gives_zero_field() {
        let cfg = SynthConfig {
            max_disp_vox: 0.0,
            ..SynthConfig::default()
        };
        let f = random_displacement_field([12, 12, 12], &cfg, 5).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn single_control_cell_is_constant_and_smoothing_invariant() {
        let cfg = SynthConfig {
            control_spacing_vox: 64, // one cell covers the whole 12-cube
            ..SynthConfig::default()
        };
        let f = random_displacement_field([12, 12, 12], &cfg, 6).unwrap();
        for axis in 0..3 {
            let c = f.component(axis);
            let first = c[0];
            for &v in c {
                assert!(
                    (v - first).abs() <= 1e-12,
                    "axis {axis}: {v} vs {first}"
                );
            }
        }
    }

    #[test]
    fn field_matches_dense_oracle() {
        // Direct (non-separable) oracle: trilinear interpolation of the same
        // control lattice, then a full 3D renormalized Gaussian window.
        let cfg = SynthConfig::default();
        let dims = [16usize, 16, 16];
        let seed = 99u64;
        let f = random_displacement_field(dims, &cfg, seed).unwrap();

        let spacing = cfg.control_spacing_vox as usize;
        let ncp: [usize; 3] = core::array::from_fn(|a| (dims[a] - 1) / spacing + 1);
        let n_ctrl = ncp[0] * ncp[1] * ncp[2];
        let mut rng = seeds::rng(seed, &[]);
        let mut control: Vec<Vec<f64>> = Vec::new();
        for _ in 0..3 {
            let mut c = Vec::with_capacity(n_ctrl);
            for _ in 0..n_ctrl {
                c.push(rng.gen_range(-cfg.max_disp_vox..cfg.max_disp_vox));
            }
            control.push(c);
        }

        let interp = |comp: &[f64], x: usize, y: usize, z: usize| -> f64 {
            let coord = [x, y, z];
            let mut i0 = [0usize; 3];
            let mut i1 = [0usize; 3];
            let mut t = [0.0f64; 3];
            for a in 0..3 {
                let u = coord[a] as f64 / spacing as f64;
                i0[a] = (u.floor() as usize).min(ncp[a] - 1);
                i1[a] = (i0[a] + 1).min(ncp[a] - 1);
                t[a] = u - i0[a] as f64;
            }
            let mut acc = 0.0;
            for (cz, wz) in [(i0[2], 1.0 - t[2]), (i1[2], t[2])] {
                for (cy, wy) in [(i0[1], 1.0 - t[1]), (i1[1], t[1])] {
                    for (cx, wx) in [(i0[0], 1.0 - t[0]), (i1[0], t[0])] {
                        acc += comp[(cz * ncp[1] + cy) * ncp[0] + cx] * wx * wy * wz;
                    }
                }
            }
            acc
        };

        let radius = (3.0 * cfg.smooth_sigma_vox).ceil() as isize;
        let w1 = |j: isize| (-((j * j) as f64) / (2.0 * cfg.smooth_sigma_vox.powi(2))).exp();
        for axis in 0..3 {
            // Dense field before smoothing.
            let mut dense = vec![0.0f64; dims[0] * dims[1] * dims[2]];
            let mut idx = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        dense[idx] = interp(&control[axis], x, y, z);
                        idx += 1;
                    }
                }
            }
            // Full 3D renormalized window.
            let mut idx = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let mut acc = 0.0;
                        let mut wsum = 0.0;
                        for dz in -radius..=radius {
                            let zz = z as isize + dz;
                            if zz < 0 || zz >= dims[2] as isize {
                                continue;
                            }
                            for dy in -radius..=radius {
                                let yy = y as isize + dy;
                                if yy < 0 || yy >= dims[1] as isize {
                                    continue;
                                }
                                for dx in -radius..=radius {
                                    let xx = x as isize + dx;
                                    if xx < 0 || xx >= dims[0] as isize {
                                        continue;
                                    }
                                    let w = w1(dx) * w1(dy) * w1(dz);
                                    wsum += w;
                                    acc += w
                                        * dense[(zz as usize * dims[1] + yy as usize) * dims[0]
                                            + xx as usize];
                                }
                            }
                        }
                        let want = acc / wsum;
                        let got = f.component(axis)[idx];
                        assert!(
                            (want - got).abs() <= 1e-9,
                            "axis {axis} voxel ({x},{y},{z}): {got} vs {want}"
                        );
                        idx += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn field_smoothness_bound() {
        let cfg = SynthConfig::default();
        let bound = 2.0 * cfg.max_disp_vox / cfg.control_spacing_vox as f64;
        for seed in 0..10u64 {
            let dims = [20usize, 18, 16];
            let f = random_displacement_field(dims, &cfg, seed).unwrap();
            for axis in 0..3 {
                let c = f.component(axis);
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            let i = (z * dims[1] + y) * dims[0] + x;
                            if x + 1 < dims[0] {
                                assert!((c[i + 1] - c[i]).abs() <= bound);
                            }
                            if y + 1 < dims[1] {
                                assert!((c[i + dims[0]] - c[i]).abs() <= bound);
                            }
                            if z + 1 < dims[2] {
                                assert!((c[i + dims[0] * dims[1]] - c[i]).abs() <= bound);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn warp_with_zero_field_is_identity() {
        let skull = test_skull(5);
        let zero = DisplacementField {
            dims: skull.dims(),
            comps: [
                vec![0.0; skull.len()],
                vec![0.0; skull.len()],
                vec![0.0; skull.len()],
            ],
        };
        assert_eq!(warp_mask(&skull, &zero).unwrap(), skull);
    }

    #[test]
    fn constant_integer_field_translates_backward() {
        // field (-2, 0, 0): output(v) samples mask at v - 2, i.e. the mask
        // moves +2 along x; the last two x-slabs fall off the edge.
        let mask = VoxelGrid::from_fn([10, 6, 6], [1.0; 3], [0.0; 3], |x, y, z| {
            (2..5).contains(&x) && y == 3 && z == 2
        })
        .unwrap();
        let n = mask.len();
        let field = DisplacementField {
            dims: mask.dims(),
            comps: [vec![-2.0; n], vec![0.0; n], vec![0.0; n]],
        };
        let warped = warp_mask(&mask, &field).unwrap();
        let expected = VoxelGrid::from_fn([10, 6, 6], [1.0; 3], [0.0; 3], |x, y, z| {
            (4..7).contains(&x) && y == 3 && z == 2
        })
        .unwrap();
        assert_eq!(warped, expected);
    }

    #[test]
    fn warp_matches_scalar_reference() {
        let skull = test_skull(6);
        let cfg = SynthConfig::default();
        let field = random_displacement_field(skull.dims(), &cfg, 17).unwrap();
        let warped = warp_mask(&skull, &field).unwrap();

        // Independent scalar reference: straightforward trilinear gather.
        let [nx, ny, nz] = skull.dims();
        let read = |x: i64, y: i64, z: i64| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                0.0
            } else if skull.get(x as usize, y as usize, z as usize) {
                1.0
            } else {
                0.0
            }
        };
        let mut idx = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = field.vector_at(idx);
                    let p = [x as f64 + v[0], y as f64 + v[1], z as f64 + v[2]];
                    let x0 = p[0].floor();
                    let y0 = p[1].floor();
                    let z0 = p[2].floor();
                    let (tx, ty, tz) = (p[0] - x0, p[1] - y0, p[2] - z0);
                    let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);
                    let mut acc = 0.0;
                    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                                acc += wx * wy * wz * read(x0 + dx, y0 + dy, z0 + dz);
                            }
                        }
                    }
                    assert_eq!(warped.get(x, y, z), acc >= 0.5, "voxel ({x},{y},{z})");
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn case_partition_invariants_hold() {
        let skull = test_skull(7);
        let cfg = SynthConfig::default();
        for seed in 0..20u64 {
            let pair = synthesize_case(&skull, &cfg, seed).unwrap();
            assert!(!pair.defect_gt.is_empty());
            assert_eq!(pair.defective, skull.subtract(&pair.defect_gt).unwrap());
            assert_eq!(pair.defective.union(&pair.defect_gt).unwrap(), skull);
            assert!(pair.defective.intersect(&pair.defect_gt).unwrap().is_empty());
            assert!(pair.defect_gt.subtract(&skull).unwrap().is_empty());
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let skull = test_skull(8);
        let cfg = SynthConfig::default();
        let a = synthesize_case(&skull, &cfg, 42).unwrap();
        let b = synthesize_case(&skull, &cfg, 42).unwrap();
        assert_eq!(a.defective, b.defective);
        assert_eq!(a.defect_gt, b.defect_gt);
    }

    #[test]
    fn nd_equals_d_with_zero_displacement() {
        let skull = test_skull(9);
        let nd = SynthConfig {
            deform_enabled: false,
            ..SynthConfig::default()
        };
        let d0 = SynthConfig {
            deform_enabled: true,
            max_disp_vox: 0.0,
            ..SynthConfig::default()
        };
        for seed in 0..10u64 {
            let a = synthesize_case(&skull, &nd, seed).unwrap();
            let b = synthesize_case(&skull, &d0, seed).unwrap();
            assert_eq!(a.defective, b.defective, "seed {seed}");
            assert_eq!(a.defect_gt, b.defect_gt, "seed {seed}");
        }
    }

    #[test]
    fn nd_mode_keeps_sharp_patch_boundaries() {
        let skull = test_skull(10);
        let cfg = degenerate_cfg();
        let (pair, metas, _) = synthesize_case_full(&skull, &cfg, 3).unwrap();
        // Reconstruct the sharp patch from metadata; the defect must be
        // exactly patch ∩ skull.
        let meta = &metas[0];
        let patch = VoxelGrid::from_fn(skull.dims(), skull.spacing(), skull.origin(), |x, y, z| {
            let d = [
                x as f64 - meta.center[0] as f64,
                y as f64 - meta.center[1] as f64,
                z as f64 - meta.center[2] as f64,
            ];
            d[0].abs() <= meta.half_extents[0]
                && d[1].abs() <= meta.half_extents[1]
                && d[2].abs() <= meta.half_extents[2]
        })
        .unwrap();
        assert_eq!(pair.defect_gt, patch.intersect(&skull).unwrap());
    }

    #[test]
    fn undeformed_synthesis_always_hits_the_skull() {
        // An undeformed patch contains its center, which lies on the skull,
        // so the first attempt succeeds even for vanishing patch sizes.
        let cfg = SynthConfig {
            size_frac_min: 1e-9,
            size_frac_max: 1e-9,
            shape_kinds: vec![PatchShape::Ellipsoid],
            deform_enabled: false,
            ..SynthConfig::default()
        };
        let single =
            VoxelGrid::from_fn([4, 4, 4], [1.0; 3], [0.0; 3], |x, y, z| (x, y, z) == (2, 2, 2))
                .unwrap();
        let (pair, _, attempts) = synthesize_case_full(&single, &cfg, 0).unwrap();
        assert_eq!(attempts, 1);
        assert_eq!(pair.defect_gt.foreground_count(), 1);
    }

    #[test]
    fn degenerate_deformation_fails_after_all_retries() {
        // A one-voxel skull plus an enormous displacement throws every
        // warped patch far off the grid; all 16 attempts come up empty.
        let cfg = SynthConfig {
            patch_count_min: 1,
            patch_count_max: 1,
            shape_kinds: vec![PatchShape::Cuboid],
            size_frac_min: 1e-9,
            size_frac_max: 1e-9,
            deform_enabled: true,
            control_spacing_vox: 64,
            max_disp_vox: 1e6,
            smooth_sigma_vox: 0.0,
            ..SynthConfig::default()
        };
        let single =
            VoxelGrid::from_fn([6, 6, 6], [1.0; 3], [0.0; 3], |x, y, z| (x, y, z) == (3, 3, 3))
                .unwrap();
        match synthesize_case(&single, &cfg, 12345) {
            Err(Error::SynthesisFailed { attempts }) => assert_eq!(attempts, 16),
            other => panic!("expected SynthesisFailed, got {other:?}"),
        }
    }
}
