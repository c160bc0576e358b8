//! Binary voxel grids with physical geometry.
//!
//! [`VoxelGrid`] is the carrier type for every volume in the pipeline:
//! skulls, patch masks, defects, reconstructions. Occupancy is stored as a
//! packed bitset (one bit per voxel, x-fastest linearization) so a 256³
//! volume costs 2 MiB and bulk boolean operations run word-wide.
//!
//! Grids are immutable after construction and all operations return new
//! grids. Two grids may be combined only if dims, spacing, and origin are
//! all equal (exact 64-bit comparison); mismatches are errors, never silent
//! resampling.

mod io;

pub use io::{read_volume, write_volume, RawSidecar};

use crate::error::{Error, Result};

/// Kind of voxelwise boolean combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoolOp {
    Union,
    Intersect,
    Subtract,
}

/// Tight axis-aligned bounding box in voxel indices, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    /// Extent in voxels along each axis (`hi - lo + 1`).
    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }
}

/// Binary occupancy volume with physical spacing (mm) and origin (mm).
///
/// `origin` is the physical position of the center of voxel (0,0,0);
/// voxel (x,y,z) is centered at `origin + (x,y,z) * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    /// Packed occupancy, x-fastest. Bits past `nx*ny*nz` are always zero.
    words: Vec<u64>,
}

fn validate_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::DimensionError(format!(
            "dims must be positive, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::DimensionError(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

impl VoxelGrid {
    /// All-background grid.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            dims,
            spacing,
            origin,
            words: vec![0u64; n.div_ceil(64)],
        })
    }

    /// Builds a grid by evaluating `f` at every voxel, x-fastest.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut g = Self::zeros(dims, spacing, origin)?;
        let mut idx = 0usize;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if f(x, y, z) {
                        g.words[idx >> 6] |= 1u64 << (idx & 63);
                    }
                    idx += 1;
                }
            }
        }
        Ok(g)
    }

    /// Builds a grid from one byte per voxel, x-fastest. Any nonzero byte is
    /// foreground (datasets encode masks variously as 1 or 255).
    pub fn from_bytes(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        bytes: &[u8],
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if bytes.len() != n {
            return Err(Error::DimensionError(format!(
                "payload has {} bytes but dims {:?} require {}",
                bytes.len(),
                dims,
                n
            )));
        }
        let mut g = Self::zeros(dims, spacing, origin)?;
        for (idx, &b) in bytes.iter().enumerate() {
            if b != 0 {
                g.words[idx >> 6] |= 1u64 << (idx & 63);
            }
        }
        Ok(g)
    }

    /// Builds a grid from a flat boolean slice, x-fastest.
    pub fn from_bool_slice(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        bits: &[bool],
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if bits.len() != n {
            return Err(Error::DimensionError(format!(
                "slice has {} entries but dims {:?} require {}",
                bits.len(),
                dims,
                n
            )));
        }
        let mut g = Self::zeros(dims, spacing, origin)?;
        for (idx, &b) in bits.iter().enumerate() {
            if b {
                g.words[idx >> 6] |= 1u64 << (idx & 63);
            }
        }
        Ok(g)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// Total voxel count `nx * ny * nz`.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }

    /// x-fastest linear index of voxel (x,y,z).
    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        let idx = self.linear_index(x, y, z);
        (self.words[idx >> 6] >> (idx & 63)) & 1 == 1
    }

    #[inline]
    pub fn get_linear(&self, idx: usize) -> bool {
        (self.words[idx >> 6] >> (idx & 63)) & 1 == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Iterates foreground voxel coordinates in x-fastest order.
    pub fn iter_foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.dims;
        (0..self.len()).filter_map(move |idx| {
            if self.get_linear(idx) {
                let x = idx % nx;
                let y = (idx / nx) % ny;
                let z = idx / (nx * ny);
                Some([x, y, z])
            } else {
                None
            }
        })
    }

    pub(crate) fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    /// Zeroes any set bits past `len()`; call after word-level mutation.
    pub(crate) fn mask_tail(&mut self) {
        let n = self.len();
        let rem = n & 63;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    fn geometry_string(&self) -> String {
        format!(
            "dims {:?} spacing {:?} origin {:?}",
            self.dims, self.spacing, self.origin
        )
    }

    /// Errors with both geometries unless dims, spacing, and origin all match.
    pub fn ensure_compatible(&self, other: &Self) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch {
                left: self.geometry_string(),
                right: other.geometry_string(),
            })
        }
    }

    /// Voxelwise complement within the grid domain.
    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        for w in out.words.iter_mut() {
            *w = !*w;
        }
        out.mask_tail();
        out
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        boolean_op(self, other, BoolOp::Union)
    }

    pub fn intersect(&self, other: &Self) -> Result<Self> {
        boolean_op(self, other, BoolOp::Intersect)
    }

    pub fn subtract(&self, other: &Self) -> Result<Self> {
        boolean_op(self, other, BoolOp::Subtract)
    }

    /// Tightest axis-aligned box containing all foreground voxels.
    pub fn bounding_box(&self) -> Result<BBox> {
        let [nx, ny, nz] = self.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        let mut idx = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                // Scan whole x-rows word-free only when nonzero bits exist.
                for x in 0..nx {
                    if self.get_linear(idx) {
                        any = true;
                        lo[0] = lo[0].min(x);
                        lo[1] = lo[1].min(y);
                        lo[2] = lo[2].min(z);
                        hi[0] = hi[0].max(x);
                        hi[1] = hi[1].max(y);
                        hi[2] = hi[2].max(z);
                    }
                    idx += 1;
                }
            }
        }
        if !any {
            return Err(Error::EmptyVolume("bounding_box".into()));
        }
        Ok(BBox { lo, hi })
    }
}

/// Voxelwise OR / AND / AND-NOT of two geometry-compatible grids.
/// Geometry is copied from `a`.
pub fn boolean_op(a: &VoxelGrid, b: &VoxelGrid, kind: BoolOp) -> Result<VoxelGrid> {
    a.ensure_compatible(b)?;
    let mut out = a.clone();
    match kind {
        BoolOp::Union => {
            for (w, &v) in out.words.iter_mut().zip(b.words.iter()) {
                *w |= v;
            }
        }
        BoolOp::Intersect => {
            for (w, &v) in out.words.iter_mut().zip(b.words.iter()) {
                *w &= v;
            }
        }
        BoolOp::Subtract => {
            for (w, &v) in out.words.iter_mut().zip(b.words.iter()) {
                *w &= !v;
            }
        }
    }
    out.mask_tail();
    Ok(out)
}
