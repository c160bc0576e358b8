//! Binary morphology on voxel grids.
//!
//! Structuring elements are Euclidean balls: the ball of radius `r` contains
//! offset `o` iff `|o|_2 <= r`. Rather than scanning the ball neighborhood
//! per voxel, dilation and erosion threshold the exact squared distance
//! transform (`dilate(g, r) = { v : dist^2(v, g) <= r^2 }`), which is O(n)
//! and exact because squared center-to-center distances in voxel units are
//! integers. Everything outside the grid counts as background.

use crate::dt::squared_distance_field;
use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Shape of a structuring element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeKind {
    Ball,
}

/// Structuring element: a Euclidean ball of integer radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    pub kind: SeKind,
    pub radius_vox: u32,
}

impl StructuringElement {
    pub fn ball(radius_vox: u32) -> Self {
        Self {
            kind: SeKind::Ball,
            radius_vox,
        }
    }
}

/// Morphological operator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Dilate,
    Erode,
    /// Erode then dilate.
    Open,
    /// Dilate then erode.
    Close,
}

fn dilate(g: &VoxelGrid, r: u32) -> VoxelGrid {
    if r == 0 || g.is_empty() {
        return g.clone();
    }
    let d = squared_distance_field(g, [1.0; 3]);
    let r2 = (r as f64) * (r as f64);
    let mut out = g.clone();
    let words = out.words_mut();
    for w in words.iter_mut() {
        *w = 0;
    }
    for (idx, &dd) in d.iter().enumerate() {
        if dd <= r2 {
            words[idx >> 6] |= 1u64 << (idx & 63);
        }
    }
    out.mask_tail();
    out
}

fn erode(g: &VoxelGrid, r: u32) -> VoxelGrid {
    if r == 0 {
        return g.clone();
    }
    let [nx, ny, nz] = g.dims();
    let bg = g.complement();
    // Distance to in-grid background; all-foreground input gives +inf.
    let d = squared_distance_field(&bg, [1.0; 3]);
    let r2 = (r as f64) * (r as f64);
    let ru = r as usize;
    VoxelGrid::from_fn(g.dims(), g.spacing(), g.origin(), |x, y, z| {
        if !g.get(x, y, z) {
            return false;
        }
        // The ball must stay inside the grid (outside is background)...
        let inside = x >= ru && y >= ru && z >= ru && x + ru < nx && y + ru < ny && z + ru < nz;
        // ...and clear of in-grid background.
        inside && d[(z * ny + y) * nx + x] > r2
    })
    .expect("geometry preserved")
}

/// Applies a morphological operator with a ball structuring element.
/// Open is erode-then-dilate; close is dilate-then-erode.
pub fn morph(g: &VoxelGrid, op: MorphOp, se: StructuringElement) -> VoxelGrid {
    let r = se.radius_vox;
    match op {
        MorphOp::Dilate => dilate(g, r),
        MorphOp::Erode => erode(g, r),
        MorphOp::Open => dilate(&erode(g, r), r),
        MorphOp::Close => erode(&dilate(g, r), r),
    }
}

/// Foreground voxels with at least one six-connected background or
/// out-of-grid neighbor. Equivalent to `g \ erode(g, ball(1))`.
pub fn boundary(g: &VoxelGrid) -> VoxelGrid {
    let [nx, ny, nz] = g.dims();
    VoxelGrid::from_fn(g.dims(), g.spacing(), g.origin(), |x, y, z| {
        if !g.get(x, y, z) {
            return false;
        }
        x == 0
            || y == 0
            || z == 0
            || x == nx - 1
            || y == ny - 1
            || z == nz - 1
            || !g.get(x - 1, y, z)
            || !g.get(x + 1, y, z)
            || !g.get(x, y - 1, z)
            || !g.get(x, y + 1, z)
            || !g.get(x, y, z - 1)
            || !g.get(x, y, z + 1)
    })
    .expect("geometry preserved")
}

/// Neighborhood connectivity for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

/// Connected-component labeling of a grid.
///
/// Labels are `1..=K`, ordered by decreasing component size with ties broken
/// by the smallest linear voxel index; 0 is background.
#[derive(Debug, Clone)]
pub struct LabelGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    labels: Vec<u32>,
    /// `component_sizes[k]` is the voxel count of label `k + 1`.
    component_sizes: Vec<usize>,
}

impl LabelGrid {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn component_count(&self) -> usize {
        self.component_sizes.len()
    }

    pub fn component_sizes(&self) -> &[usize] {
        &self.component_sizes
    }

    pub fn label_at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[(z * self.dims[1] + y) * self.dims[0] + x]
    }

    /// Mask of all components whose size is at least `min_vox`.
    pub fn filter_by_size(&self, min_vox: usize) -> VoxelGrid {
        let keep: Vec<bool> = self.component_sizes.iter().map(|&s| s >= min_vox).collect();
        let mut g = VoxelGrid::zeros(self.dims, self.spacing, self.origin).expect("valid dims");
        let words = g.words_mut();
        for (idx, &l) in self.labels.iter().enumerate() {
            if l != 0 && keep[(l - 1) as usize] {
                words[idx >> 6] |= 1u64 << (idx & 63);
            }
        }
        g.mask_tail();
        g
    }
}

/// BFS labeling under 6- or 26-connectivity.
pub fn connected_components(g: &VoxelGrid, connectivity: Connectivity) -> LabelGrid {
    let [nx, ny, nz] = g.dims();
    let n = g.len();
    let mut labels = vec![0u32; n];
    // (size, first linear index, provisional label)
    let mut comps: Vec<(usize, usize, u32)> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut next = 1u32;

    let offsets: Vec<[isize; 3]> = match connectivity {
        Connectivity::Six => vec![
            [-1, 0, 0],
            [1, 0, 0],
            [0, -1, 0],
            [0, 1, 0],
            [0, 0, -1],
            [0, 0, 1],
        ],
        Connectivity::TwentySix => {
            let mut v = Vec::with_capacity(26);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if (dx, dy, dz) != (0, 0, 0) {
                            v.push([dx, dy, dz]);
                        }
                    }
                }
            }
            v
        }
    };

    for seed in 0..n {
        if !g.get_linear(seed) || labels[seed] != 0 {
            continue;
        }
        let label = next;
        next += 1;
        let mut size = 0usize;
        labels[seed] = label;
        stack.push(seed);
        while let Some(idx) = stack.pop() {
            size += 1;
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            for off in &offsets {
                let xx = x as isize + off[0];
                let yy = y as isize + off[1];
                let zz = z as isize + off[2];
                if xx < 0 || yy < 0 || zz < 0 {
                    continue;
                }
                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                if xx >= nx || yy >= ny || zz >= nz {
                    continue;
                }
                let nidx = (zz * ny + yy) * nx + xx;
                if g.get_linear(nidx) && labels[nidx] == 0 {
                    labels[nidx] = label;
                    stack.push(nidx);
                }
            }
        }
        comps.push((size, seed, label));
    }

    // Relabel by decreasing size, ties by smallest first index.
    comps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut remap = vec![0u32; next as usize];
    let mut component_sizes = Vec::with_capacity(comps.len());
    for (rank, &(size, _, old)) in comps.iter().enumerate() {
        remap[old as usize] = rank as u32 + 1;
        component_sizes.push(size);
    }
    for l in labels.iter_mut() {
        if *l != 0 {
            *l = remap[*l as usize];
        }
    }

    LabelGrid {
        dims: g.dims(),
        spacing: g.spacing(),
        origin: g.origin(),
        labels,
        component_sizes,
    }
}

/// Recovers a defect mask from a reconstruction and its defective input:
/// voxelwise difference, optional opening, then removal of small
/// 26-connected components.
pub const DEFAULT_EXTRACT_OPEN_RADIUS: u32 = 1;
pub const DEFAULT_EXTRACT_MIN_COMPONENT_VOX: usize = 10;

pub fn extract_defect(
    reconstruction: &VoxelGrid,
    defective_input: &VoxelGrid,
    min_component_vox: usize,
    open_radius: u32,
) -> Result<VoxelGrid> {
    reconstruction.ensure_compatible(defective_input)?;
    let mut diff = reconstruction.subtract(defective_input)?;
    if open_radius > 0 {
        diff = morph(&diff, MorphOp::Open, StructuringElement::ball(open_radius));
    }
    if min_component_vox > 1 {
        let cc = connected_components(&diff, Connectivity::TwentySix);
        diff = cc.filter_by_size(min_component_vox);
    }
    Ok(diff)
}

#[allow(dead_code)]
fn _error_type_check(e: Error) -> Error {
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, dims: [usize; 3], density: f64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelGrid::from_fn(dims, [1.0; 3], [0.0; 3], |_, _, _| rng.gen::<f64>() < density)
            .unwrap()
    }

    /// Brute-force per-voxel ball scan; outside the grid is background.
    pub(crate) fn oracle_morph(g: &VoxelGrid, op: MorphOp, r: u32) -> VoxelGrid {
        match op {
            MorphOp::Open => {
                let e = oracle_morph(g, MorphOp::Erode, r);
                return oracle_morph(&e, MorphOp::Dilate, r);
            }
            MorphOp::Close => {
                let d = oracle_morph(g, MorphOp::Dilate, r);
                return oracle_morph(&d, MorphOp::Erode, r);
            }
            _ => {}
        }
        let [nx, ny, nz] = g.dims();
        let ri = r as isize;
        let mut offsets = Vec::new();
        for dz in -ri..=ri {
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dx * dx + dy * dy + dz * dz <= ri * ri {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        VoxelGrid::from_fn(g.dims(), g.spacing(), g.origin(), |x, y, z| {
            let probe = |off: &[isize; 3]| -> bool {
                let xx = x as isize + off[0];
                let yy = y as isize + off[1];
                let zz = z as isize + off[2];
                if xx < 0 || yy < 0 || zz < 0 {
                    return false;
                }
                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                if xx >= nx || yy >= ny || zz >= nz {
                    return false;
                }
                g.get(xx, yy, zz)
            };
            match op {
                MorphOp::Dilate => offsets.iter().any(probe),
                MorphOp::Erode => offsets.iter().all(probe),
                _ => unreachable!(),
            }
        })
        .unwrap()
    }

    #[test]
    fn erode_single_voxel_is_empty() {
        let g = VoxelGrid::from_fn([7, 7, 7], [1.0; 3], [0.0; 3], |x, y, z| {
            (x, y, z) == (3, 3, 3)
        })
        .unwrap();
        assert!(morph(&g, MorphOp::Erode, StructuringElement::ball(1)).is_empty());
    }

    #[test]
    fn close_of_solid_box_is_identity_in_interior() {
        let g = VoxelGrid::from_fn([12, 12, 12], [1.0; 3], [0.0; 3], |x, y, z| {
            (3..9).contains(&x) && (3..9).contains(&y) && (3..9).contains(&z)
        })
        .unwrap();
        assert_eq!(morph(&g, MorphOp::Close, StructuringElement::ball(2)), g);
    }

    #[test]
    fn all_ops_match_neighborhood_oracle() {
        for seed in 0..6u64 {
            let g = random_grid(seed, [12, 12, 12], 0.35);
            for r in [1u32, 2] {
                for op in [MorphOp::Dilate, MorphOp::Erode, MorphOp::Open, MorphOp::Close] {
                    let fast = morph(&g, op, StructuringElement::ball(r));
                    let slow = oracle_morph(&g, op, r);
                    assert_eq!(fast, slow, "seed {seed} r {r} op {op:?}");
                }
            }
        }
    }

    #[test]
    fn duality_on_padded_domain() {
        // Pad so border effects vanish, then: dilate(g) == !erode(!g).
        for seed in 0..4u64 {
            for r in [1u32, 2, 3] {
                let inner = random_grid(seed, [8, 8, 8], 0.4);
                let pad = r as usize;
                let dims = [8 + 2 * pad, 8 + 2 * pad, 8 + 2 * pad];
                let g = VoxelGrid::from_fn(dims, [1.0; 3], [0.0; 3], |x, y, z| {
                    x >= pad
                        && y >= pad
                        && z >= pad
                        && x < 8 + pad
                        && y < 8 + pad
                        && z < 8 + pad
                        && inner.get(x - pad, y - pad, z - pad)
                })
                .unwrap();
                let lhs = morph(&g, MorphOp::Dilate, StructuringElement::ball(r));
                let rhs = morph(&g.complement(), MorphOp::Erode, StructuringElement::ball(r))
                    .complement();
                // Compare on the inner region only: erosion of the complement
                // also erodes inward from the domain border.
                for z in pad..8 + pad {
                    for y in pad..8 + pad {
                        for x in pad..8 + pad {
                            assert_eq!(lhs.get(x, y, z), rhs.get(x, y, z), "seed {seed} r {r}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn open_close_idempotent_and_monotone() {
        for seed in 0..4u64 {
            let g = random_grid(seed, [10, 10, 10], 0.4);
            let se = StructuringElement::ball(1);
            let o = morph(&g, MorphOp::Open, se);
            assert_eq!(morph(&o, MorphOp::Open, se), o);
            let c = morph(&g, MorphOp::Close, se);
            assert_eq!(morph(&c, MorphOp::Close, se), c);

            // Monotonicity: g ⊆ h ⇒ op(g) ⊆ op(h).
            let h = g.union(&random_grid(seed + 100, [10, 10, 10], 0.2)).unwrap();
            for op in [MorphOp::Dilate, MorphOp::Erode] {
                let og = morph(&g, op, se);
                let oh = morph(&h, op, se);
                assert!(og.subtract(&oh).unwrap().is_empty(), "seed {seed} op {op:?}");
            }
        }
    }

    #[test]
    fn boundary_trivial_cases() {
        let empty = VoxelGrid::zeros([5, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        assert!(boundary(&empty).is_empty());

        let single = VoxelGrid::from_fn([5, 5, 5], [1.0; 3], [0.0; 3], |x, y, z| {
            (x, y, z) == (2, 2, 2)
        })
        .unwrap();
        assert_eq!(boundary(&single), single);
    }

    #[test]
    fn boundary_of_solid_cube_is_its_shell() {
        let g = VoxelGrid::from_fn([9, 9, 9], [1.0; 3], [0.0; 3], |x, y, z| {
            (2..7).contains(&x) && (2..7).contains(&y) && (2..7).contains(&z)
        })
        .unwrap();
        let b = boundary(&g);
        // 5^3 - 3^3 interior = 98 shell voxels.
        assert_eq!(b.foreground_count(), 98);
    }

    #[test]
    fn boundary_definitions_agree() {
        for seed in 0..6u64 {
            let g = random_grid(seed, [10, 9, 8], 0.5);
            let via_erode = g
                .subtract(&morph(&g, MorphOp::Erode, StructuringElement::ball(1)))
                .unwrap();
            assert_eq!(boundary(&g), via_erode, "seed {seed}");
        }
    }

    #[test]
    fn components_respect_connectivity() {
        // Two voxels touching only diagonally.
        let g = VoxelGrid::from_fn([4, 4, 4], [1.0; 3], [0.0; 3], |x, y, z| {
            (x, y, z) == (1, 1, 1) || (x, y, z) == (2, 2, 1)
        })
        .unwrap();
        assert_eq!(connected_components(&g, Connectivity::TwentySix).component_count(), 1);
        assert_eq!(connected_components(&g, Connectivity::Six).component_count(), 2);

        // Opposite corners.
        let h = VoxelGrid::from_fn([4, 4, 4], [1.0; 3], [0.0; 3], |x, y, z| {
            (x, y, z) == (0, 0, 0) || (x, y, z) == (3, 3, 3)
        })
        .unwrap();
        let cc = connected_components(&h, Connectivity::TwentySix);
        assert_eq!(cc.component_count(), 2);
        assert_eq!(cc.component_sizes(), &[1, 1]);
    }

    #[test]
    fn labeling_matches_flood_fill_partition() {
        for seed in 0..4u64 {
            let g = random_grid(seed, [16, 16, 16], 0.3);
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                let cc = connected_components(&g, conn);
                // Partition oracle: same-component iff same label, checked via
                // an independent flood fill from each voxel pair is too slow;
                // instead check: sizes sum to foreground, labels contiguous,
                // and every 'conn' edge joins equal labels.
                let total: usize = cc.component_sizes().iter().sum();
                assert_eq!(total, g.foreground_count());
                let k = cc.component_count() as u32;
                assert!(cc.labels().iter().all(|&l| l <= k));
                let [nx, ny, nz] = g.dims();
                let offs: Vec<[isize; 3]> = match conn {
                    Connectivity::Six => vec![[1, 0, 0], [0, 1, 0], [0, 0, 1]],
                    Connectivity::TwentySix => {
                        let mut v = Vec::new();
                        for dz in 0isize..=1 {
                            for dy in -1isize..=1 {
                                for dx in -1isize..=1 {
                                    if dz == 0 && (dy < 0 || (dy == 0 && dx <= 0)) {
                                        continue;
                                    }
                                    v.push([dx, dy, dz]);
                                }
                            }
                        }
                        v
                    }
                };
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            if !g.get(x, y, z) {
                                continue;
                            }
                            for off in &offs {
                                let xx = x as isize + off[0];
                                let yy = y as isize + off[1];
                                let zz = z as isize + off[2];
                                if xx < 0 || yy < 0 || zz < 0 {
                                    continue;
                                }
                                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                                if xx >= nx || yy >= ny || zz >= nz || !g.get(xx, yy, zz) {
                                    continue;
                                }
                                assert_eq!(
                                    cc.label_at(x, y, z),
                                    cc.label_at(xx, yy, zz),
                                    "edge must join identical labels"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn labels_ordered_by_size_then_index() {
        // Component A: 2 voxels near the end; component B: 1 voxel at origin.
        let g = VoxelGrid::from_fn([8, 1, 1], [1.0; 3], [0.0; 3], |x, _, _| {
            x == 0 || x == 5 || x == 6
        })
        .unwrap();
        let cc = connected_components(&g, Connectivity::Six);
        assert_eq!(cc.component_sizes(), &[2, 1]);
        assert_eq!(cc.label_at(5, 0, 0), 1);
        assert_eq!(cc.label_at(0, 0, 0), 2);
    }

    #[test]
    fn extract_defect_trivial_and_fixture_cases() {
        let skull = VoxelGrid::from_fn([16, 16, 16], [1.0; 3], [0.0; 3], |x, y, z| {
            (2..14).contains(&x) && (2..14).contains(&y) && (2..14).contains(&z)
        })
        .unwrap();
        // Ground-truth defect: a 4x4x4 block well above thresholds.
        let gt = VoxelGrid::from_fn([16, 16, 16], [1.0; 3], [0.0; 3], |x, y, z| {
            (5..9).contains(&x) && (5..9).contains(&y) && (10..14).contains(&z)
        })
        .unwrap();
        let defective = skull.subtract(&gt).unwrap();

        // reconstruction == defective input -> empty defect.
        let none = extract_defect(&defective, &defective, 10, 1).unwrap();
        assert!(none.is_empty());

        // reconstruction == defective ∪ gt -> exactly gt.
        let recon = defective.union(&gt).unwrap();
        let got = extract_defect(&recon, &defective, 10, 0).unwrap();
        assert_eq!(got, gt);

        // Scattered single-voxel artifacts are cleaned up.
        let noisy = VoxelGrid::from_fn([16, 16, 16], [1.0; 3], [0.0; 3], |x, y, z| {
            recon.get(x, y, z)
                || (x, y, z) == (0, 0, 0)
                || (x, y, z) == (15, 0, 15)
                || (x, y, z) == (0, 15, 15)
        })
        .unwrap();
        let cleaned = extract_defect(&noisy, &defective, 10, 0).unwrap();
        assert_eq!(cleaned, gt);

        // Output is inside the reconstruction and disjoint from the input.
        let out = extract_defect(&noisy, &defective, 10, 1).unwrap();
        assert!(out.subtract(&noisy).unwrap().is_empty());
        assert!(out.intersect(&defective).unwrap().is_empty());
    }
}
