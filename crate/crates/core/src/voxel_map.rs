//! The learned world model: occupancy and colour voxel grids, sampled with
//! trilinear interpolation.
//!
//! Grid values live on nodes. Node `(i, j, k)` sits at
//! `origin + (i·cx, j·cy, k·cz)` and is stored at `i + nx·(j + ny·k)`
//! (x fastest). Queries outside the node hull are clamped onto it, which
//! replicates the border values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};

/// Ratio σ1/σ2 between the colour and depth Laplace scales.
pub const COLOUR_SCALE_RATIO: f64 = 0.2;

/// Initial depth scale σ2.
pub const INITIAL_DEPTH_SCALE: f64 = 2.4;

const MAGIC: &[u8; 4] = b"VXNM";
const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 3 * 4 + 3 * 8 + 3 * 8 + 8;

/// Placement and resolution of the node lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub cell: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], origin: Vec3, cell: Vec3) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Config(format!("grid needs at least 2 nodes per axis, got {dims:?}")));
        }
        if cell.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::Config(format!("cell sizes must be positive, got {cell:?}")));
        }
        Ok(Self { dims, origin: origin.into(), cell: cell.into() })
    }

    /// Lattice with `dims` nodes spanning `[min, max]` exactly.
    pub fn spanning(min: Vec3, max: Vec3, dims: [usize; 3]) -> Result<Self> {
        let mut cell = Vec3::zeros();
        for a in 0..3 {
            if dims[a] < 2 {
                return Err(Error::Config(format!("grid needs at least 2 nodes per axis, got {dims:?}")));
            }
            cell[a] = (max[a] - min[a]) / (dims[a] - 1) as f64;
        }
        Self::new(dims, min, cell)
    }

    /// Lattice covering `[min, max]` with (at most) the given horizontal and
    /// vertical cell sizes.
    pub fn covering(min: Vec3, max: Vec3, cell_xy: f64, cell_z: f64) -> Result<Self> {
        let n = |extent: f64, c: f64| ((extent / c).ceil() as usize).max(1) + 1;
        let dims = [n(max.x - min.x, cell_xy), n(max.y - min.y, cell_xy), n(max.z - min.z, cell_z)];
        Self::spanning(min, max, dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn cell(&self) -> Vec3 {
        Vec3::from(self.cell)
    }

    /// Position of the last node.
    pub fn max_corner(&self) -> Vec3 {
        self.grid_to_world(&Vec3::new((self.dims[0] - 1) as f64, (self.dims[1] - 1) as f64, (self.dims[2] - 1) as f64))
    }

    /// Continuous node coordinates of a world point.
    pub fn world_to_grid(&self, p: &Vec3) -> Vec3 {
        Vec3::new((p.x - self.origin[0]) / self.cell[0], (p.y - self.origin[1]) / self.cell[1], (p.z - self.origin[2]) / self.cell[2])
    }

    pub fn grid_to_world(&self, v: &Vec3) -> Vec3 {
        Vec3::new(self.origin[0] + v.x * self.cell[0], self.origin[1] + v.y * self.cell[1], self.origin[2] + v.z * self.cell[2])
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.grid_to_world(&Vec3::new(i as f64, j as f64, k as f64))
    }

    /// Enclosing cell and fractional offsets of a (clamped) query point.
    #[inline]
    pub fn cell_of(&self, p: &Vec3) -> CellCoords {
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut inside = [true; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let mut u = (p[a] - self.origin[a]) / self.cell[a];
            if !(u >= 0.0) {
                inside[a] = false;
                u = 0.0;
            } else if u > hi {
                inside[a] = false;
                u = hi;
            }
            let i0 = (u.floor() as usize).min(self.dims[a] - 2);
            base[a] = i0;
            t[a] = u - i0 as f64;
        }
        CellCoords { base: self.index(base[0], base[1], base[2]), t, inside }
    }

    #[inline]
    fn corner_offsets(&self) -> [usize; 8] {
        let sx = 1;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        [0, sx, sy, sx + sy, sz, sx + sz, sy + sz, sx + sy + sz]
    }
}

/// Cell lookup result: base node index, fractional position within the cell,
/// and whether the query lay inside the hull along each axis.
#[derive(Debug, Clone, Copy)]
pub struct CellCoords {
    pub base: usize,
    pub t: [f64; 3],
    pub inside: [bool; 3],
}

impl CellCoords {
    #[inline]
    pub fn weights(&self) -> [f64; 8] {
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        [ux * uy * uz, tx * uy * uz, ux * ty * uz, tx * ty * uz, ux * uy * tz, tx * uy * tz, ux * ty * tz, tx * ty * tz]
    }

    /// Derivatives of the eight weights with respect to the fractional
    /// coordinates (`[∂/∂tx, ∂/∂ty, ∂/∂tz]` per corner).
    #[inline]
    fn weight_derivatives(&self) -> [[f64; 3]; 8] {
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        [
            [-uy * uz, -ux * uz, -ux * uy],
            [uy * uz, -tx * uz, -tx * uy],
            [-ty * uz, ux * uz, -ux * ty],
            [ty * uz, tx * uz, -tx * ty],
            [-uy * tz, -ux * tz, ux * uy],
            [uy * tz, -tx * tz, tx * uy],
            [-ty * tz, ux * tz, ux * ty],
            [ty * tz, tx * tz, tx * ty],
        ]
    }
}

/// Trilinear sample with its derivatives.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearSample {
    pub value: f64,
    /// ∂value/∂p in world units.
    pub gradient: Vec3,
    /// Node indices and their interpolation weights (= ∂value/∂node).
    pub cells: [(usize, f64); 8],
}

/// Colour sample with per-channel spatial gradients.
#[derive(Debug, Clone, Copy)]
pub struct ColourSample {
    pub value: [f64; 3],
    pub gradient: [Vec3; 3],
    pub cells: [(usize, f64); 8],
}

/// Laplace scales of the emission model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionScales {
    /// σ1, per colour channel.
    pub colour: f64,
    /// σ2, depth in meters.
    pub depth: f64,
}

impl EmissionScales {
    /// Scales under the tying rule σ1 = σ2 / 5.
    pub fn tied(depth: f64) -> Self {
        Self { colour: depth * COLOUR_SCALE_RATIO, depth }
    }
}

impl Default for EmissionScales {
    fn default() -> Self {
        Self::tied(INITIAL_DEPTH_SCALE)
    }
}

/// Occupancy and colour grids sharing one lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub geometry: GridGeometry,
    /// Raw occupancy values, one per node.
    pub occ: Vec<f32>,
    /// RGB per node, interleaved.
    pub col: Vec<f32>,
    pub scales: EmissionScales,
}

impl VoxelMap {
    /// Zero occupancy, grey colour, default emission scales.
    pub fn new(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self { geometry, occ: vec![0.0; n], col: vec![0.5; 3 * n], scales: EmissionScales::default() }
    }

    pub fn from_parts(geometry: GridGeometry, occ: Vec<f32>, col: Vec<f32>, scales: EmissionScales) -> Result<Self> {
        let n = geometry.len();
        if occ.len() != n {
            return Err(Error::ShapeMismatch { expected: n, found: occ.len() });
        }
        if col.len() != 3 * n {
            return Err(Error::ShapeMismatch { expected: 3 * n, found: col.len() });
        }
        Ok(Self { geometry, occ, col, scales })
    }

    #[inline]
    pub fn sample_occ(&self, p: &Vec3) -> f64 {
        let c = self.geometry.cell_of(p);
        let w = c.weights();
        let off = self.geometry.corner_offsets();
        let mut v = 0.0;
        for k in 0..8 {
            v += w[k] * self.occ[c.base + off[k]] as f64;
        }
        v
    }

    pub fn sample_col(&self, p: &Vec3) -> [f64; 3] {
        let c = self.geometry.cell_of(p);
        let w = c.weights();
        let off = self.geometry.corner_offsets();
        let mut v = [0.0; 3];
        for k in 0..8 {
            let idx = 3 * (c.base + off[k]);
            for ch in 0..3 {
                v[ch] += w[k] * self.col[idx + ch] as f64;
            }
        }
        v
    }

    pub fn sample_occ_grad(&self, p: &Vec3) -> TrilinearSample {
        let c = self.geometry.cell_of(p);
        let w = c.weights();
        let dw = c.weight_derivatives();
        let off = self.geometry.corner_offsets();
        let mut value = 0.0;
        let mut dt = [0.0; 3];
        let mut cells = [(0usize, 0.0f64); 8];
        for k in 0..8 {
            let idx = c.base + off[k];
            let f = self.occ[idx] as f64;
            value += w[k] * f;
            for a in 0..3 {
                dt[a] += dw[k][a] * f;
            }
            cells[k] = (idx, w[k]);
        }
        TrilinearSample { value, gradient: self.spatial_gradient(&c, dt), cells }
    }

    pub fn sample_col_grad(&self, p: &Vec3) -> ColourSample {
        let c = self.geometry.cell_of(p);
        let w = c.weights();
        let dw = c.weight_derivatives();
        let off = self.geometry.corner_offsets();
        let mut value = [0.0; 3];
        let mut dt = [[0.0; 3]; 3];
        let mut cells = [(0usize, 0.0f64); 8];
        for k in 0..8 {
            let idx = c.base + off[k];
            for ch in 0..3 {
                let f = self.col[3 * idx + ch] as f64;
                value[ch] += w[k] * f;
                for a in 0..3 {
                    dt[ch][a] += dw[k][a] * f;
                }
            }
            cells[k] = (idx, w[k]);
        }
        let gradient = [self.spatial_gradient(&c, dt[0]), self.spatial_gradient(&c, dt[1]), self.spatial_gradient(&c, dt[2])];
        ColourSample { value, gradient, cells }
    }

    fn spatial_gradient(&self, c: &CellCoords, dt: [f64; 3]) -> Vec3 {
        let mut g = Vec3::zeros();
        for a in 0..3 {
            if c.inside[a] {
                g[a] = dt[a] / self.geometry.cell[a];
            }
        }
        g
    }

    /// Horizontal slice of the occupancy grid at `height`.
    pub fn occupancy_slice(&self, height: f64, threshold: f64) -> Result<OccupancySlice> {
        occupancy_slice(self, height, threshold)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_map(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_map(path)
    }
}

/// Boolean obstacle grid on the horizontal node lattice at a fixed height.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancySlice {
    pub dims: [usize; 2],
    pub origin: Vec2,
    pub resolution: Vec2,
    pub height: f64,
    pub occupied: Vec<bool>,
    /// Centers of the occupied cells.
    pub obstacles: Vec<Vec2>,
}

impl OccupancySlice {
    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(self.origin.x + i as f64 * self.resolution.x, self.origin.y + j as f64 * self.resolution.y)
    }

    pub fn is_occupied(&self, i: usize, j: usize) -> bool {
        self.occupied[i + self.dims[0] * j]
    }

    /// Cell containing a world point, if inside the slice.
    pub fn cell_at(&self, p: &Vec2) -> Option<(usize, usize)> {
        let u = ((p.x - self.origin.x) / self.resolution.x).round();
        let v = ((p.y - self.origin.y) / self.resolution.y).round();
        if u < 0.0 || v < 0.0 || u >= self.dims[0] as f64 || v >= self.dims[1] as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    pub fn min_corner(&self) -> Vec2 {
        self.origin
    }

    pub fn max_corner(&self) -> Vec2 {
        self.cell_center(self.dims[0] - 1, self.dims[1] - 1)
    }
}

/// Evaluate occupancy at every horizontal node position at `height`; a cell is
/// occupied iff its value is at least `threshold`.
pub fn occupancy_slice(map: &VoxelMap, height: f64, threshold: f64) -> Result<OccupancySlice> {
    let g = &map.geometry;
    let zmin = g.origin[2];
    let zmax = g.max_corner().z;
    if !(height >= zmin && height <= zmax) {
        return Err(Error::SliceOutOfRange { height, min: zmin, max: zmax });
    }
    let [nx, ny, _] = g.dims;
    let mut occupied = vec![false; nx * ny];
    let mut obstacles = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let p = g.node_position(i, j, 0);
            let q = Vec3::new(p.x, p.y, height);
            if map.sample_occ(&q) >= threshold {
                occupied[i + nx * j] = true;
                obstacles.push(Vec2::new(p.x, p.y));
            }
        }
    }
    Ok(OccupancySlice {
        dims: [nx, ny],
        origin: Vec2::new(g.origin[0], g.origin[1]),
        resolution: Vec2::new(g.cell[0], g.cell[1]),
        height,
        occupied,
        obstacles,
    })
}

/// Serialize in the binary `VXNM` format.
pub fn encode_map(map: &VoxelMap) -> Vec<u8> {
    let n = map.geometry.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * n);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    for &d in &map.geometry.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.geometry.origin.iter().chain(map.geometry.cell.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&map.scales.depth.to_le_bytes());
    for v in map.occ.iter().chain(map.col.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<VoxelMap> {
    if bytes.len() < 5 {
        return Err(Error::MalformedHeader(format!("{} bytes is shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: bytes[4], expected: FORMAT_VERSION });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let dims = [u32_at(5), u32_at(9), u32_at(13)];
    let origin = Vec3::new(f64_at(17), f64_at(25), f64_at(33));
    let cell = Vec3::new(f64_at(41), f64_at(49), f64_at(57));
    let sigma = f64_at(65);
    let geometry = GridGeometry::new(dims, origin, cell).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if !(sigma > 0.0) {
        return Err(Error::MalformedHeader(format!("depth scale {sigma} is not positive")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionMismatch(format!("{dims:?} overflows")))?;
    let expected = HEADER_LEN + 16 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::DimensionMismatch(format!("dims {dims:?} imply {expected} bytes but file has {}", bytes.len())));
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let (occ, col) = floats.split_at(n);
    VoxelMap::from_parts(geometry, occ.to_vec(), col.to_vec(), EmissionScales::tied(sigma))
}

pub fn save_map(map: &VoxelMap, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &encode_map(map))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<VoxelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&bytes)
}
