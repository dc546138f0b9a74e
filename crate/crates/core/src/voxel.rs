//! Binary voxel occupancy over the unit cube.
//!
//! Voxel `(h, w, l)` of a grid with resolution `G` covers the world cube
//! `[h/G, (h+1)/G) x [w/G, (w+1)/G) x [l/G, (l+1)/G)`. World `x, y, z` map to
//! `h, w, l`; `z` is the vertical axis and yaw rotates about it.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const OCC_MAGIC: &[u8; 8] = b"LVGOCC1\0";
const BOUNDS_EPS: f64 = 1e-9;

/// Whether grid coordinates are scene-global or object-canonical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    Scene,
    Canonical,
}

/// A box rotated about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub yaw: f64,
}

impl Cuboid {
    pub fn axis_aligned(min: [f64; 3], max: [f64; 3]) -> Self {
        Cuboid {
            center: [
                0.5 * (min[0] + max[0]),
                0.5 * (min[1] + max[1]),
                0.5 * (min[2] + max[2]),
            ],
            half: [
                0.5 * (max[0] - min[0]),
                0.5 * (max[1] - min[1]),
                0.5 * (max[2] - min[2]),
            ],
            yaw: 0.0,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        // rotate into the box frame by -yaw
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let lz = p[2] - self.center[2];
        lx.abs() <= self.half[0] && ly.abs() <= self.half[1] && lz.abs() <= self.half[2]
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            let lx = sx * self.half[0];
            let ly = sy * self.half[1];
            *corner = [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
                self.center[2] + sz * self.half[2],
            ];
        }
        out
    }

    /// World-space axis-aligned bounds `(min, max)`.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.corners() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// A union of cuboids.
pub type Shape = [Cuboid];

/// Binary occupancy of a `G x G x G` grid, stored in `(h, w, l)` row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OccupancyGrid {
    resolution: usize,
    cells: Vec<bool>,
    frame: Frame,
}

impl OccupancyGrid {
    pub fn empty(resolution: usize, frame: Frame) -> Self {
        OccupancyGrid {
            resolution,
            cells: vec![false; resolution * resolution * resolution],
            frame,
        }
    }

    pub fn full(resolution: usize, frame: Frame) -> Self {
        OccupancyGrid {
            resolution,
            cells: vec![true; resolution * resolution * resolution],
            frame,
        }
    }

    pub fn from_cells(resolution: usize, cells: Vec<bool>, frame: Frame) -> Result<Self> {
        if cells.len() != resolution * resolution * resolution {
            return Err(Error::Shape(format!(
                "{} cells for resolution {resolution}",
                cells.len()
            )));
        }
        Ok(OccupancyGrid {
            resolution,
            cells,
            frame,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, l: usize) -> usize {
        (h * self.resolution + w) * self.resolution + l
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, l: usize) -> bool {
        self.cells[self.index(h, w, l)]
    }

    /// Like [`get`](Self::get) but treats out-of-range coordinates as empty.
    pub fn get_signed(&self, h: isize, w: isize, l: isize) -> bool {
        let g = self.resolution as isize;
        if h < 0 || w < 0 || l < 0 || h >= g || w >= g || l >= g {
            return false;
        }
        self.get(h as usize, w as usize, l as usize)
    }

    pub fn set(&mut self, h: usize, w: usize, l: usize, value: bool) {
        let i = self.index(h, w, l);
        self.cells[i] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// World-space center of voxel `(h, w, l)`.
    pub fn center(&self, h: usize, w: usize, l: usize) -> [f64; 3] {
        let g = self.resolution as f64;
        [
            (h as f64 + 0.5) / g,
            (w as f64 + 0.5) / g,
            (l as f64 + 0.5) / g,
        ]
    }

    pub fn voxel_size(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    /// Occupied positions in row-major order.
    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let g = self.resolution;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(i, _)| [i / (g * g), (i / g) % g, i % g])
    }

    pub fn to_sparse(&self) -> SparseVoxelSet {
        SparseVoxelSet {
            resolution: self.resolution,
            positions: self.occupied().collect(),
        }
    }

    pub fn union(&self, other: &OccupancyGrid) -> Result<OccupancyGrid> {
        check_resolution(self, other)?;
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(OccupancyGrid {
            resolution: self.resolution,
            cells,
            frame: self.frame,
        })
    }

    pub fn intersection_count(&self, other: &OccupancyGrid) -> Result<usize> {
        check_resolution(self, other)?;
        Ok(self
            .cells
            .iter()
            .zip(&other.cells)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    /// Serializes as `LVGOCC1\0`, a `u8` resolution, then alternating run lengths
    /// (`u32` little-endian) starting with a run of empty cells.
    pub fn write_rle<W: Write>(&self, mut w: W) -> Result<()> {
        if self.resolution > u8::MAX as usize {
            return Err(Error::Format(format!(
                "resolution {} does not fit the header",
                self.resolution
            )));
        }
        w.write_all(OCC_MAGIC)?;
        w.write_all(&[self.resolution as u8])?;
        let mut current = false;
        let mut run: u32 = 0;
        for &c in &self.cells {
            if c == current {
                run += 1;
            } else {
                w.write_all(&run.to_le_bytes())?;
                current = c;
                run = 1;
            }
        }
        w.write_all(&run.to_le_bytes())?;
        Ok(())
    }

    pub fn read_rle<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != OCC_MAGIC {
            return Err(Error::Format("bad occupancy magic".into()));
        }
        let mut res = [0u8; 1];
        r.read_exact(&mut res)?;
        let g = res[0] as usize;
        if g == 0 {
            return Err(Error::Format("zero resolution".into()));
        }
        let total = g * g * g;
        let mut cells = Vec::with_capacity(total);
        let mut current = false;
        let mut buf = [0u8; 4];
        while cells.len() < total {
            r.read_exact(&mut buf)?;
            let run = u32::from_le_bytes(buf) as usize;
            if cells.len() + run > total {
                return Err(Error::Format("run exceeds grid size".into()));
            }
            cells.extend(std::iter::repeat_n(current, run));
            current = !current;
        }
        Ok(OccupancyGrid {
            resolution: g,
            cells,
            frame: Frame::Scene,
        })
    }
}

fn check_resolution(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<()> {
    if a.resolution != b.resolution {
        return Err(Error::ResolutionMismatch(a.resolution, b.resolution));
    }
    Ok(())
}

/// Active voxel positions, strictly increasing in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseVoxelSet {
    resolution: usize,
    positions: Vec<[usize; 3]>,
}

impl SparseVoxelSet {
    pub fn new(resolution: usize, mut positions: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(p) = positions.iter().find(|p| p.iter().any(|&c| c >= resolution)) {
            return Err(Error::Invalid(format!(
                "position {p:?} outside grid of resolution {resolution}"
            )));
        }
        positions.sort_unstable();
        positions.dedup();
        Ok(SparseVoxelSet {
            resolution,
            positions,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn positions(&self) -> &[[usize; 3]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        self.positions.binary_search(&p).is_ok()
    }

    pub fn to_grid(&self, frame: Frame) -> OccupancyGrid {
        let mut g = OccupancyGrid::empty(self.resolution, frame);
        for &[h, w, l] in &self.positions {
            g.set(h, w, l, true);
        }
        g
    }
}

/// Points in world units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point cloud construction".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    /// ASCII PLY with one `vertex` element.
    pub fn write_ply<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "end_header")?;
        for p in &self.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// Rasterizes a union of cuboids: a voxel is occupied iff its center lies
/// inside at least one cuboid.
pub fn voxelize(shape: &Shape, resolution: usize) -> Result<OccupancyGrid> {
    if resolution < 2 {
        return Err(Error::Invalid(format!("resolution {resolution} < 2")));
    }
    let mut grid = OccupancyGrid::empty(resolution, Frame::Scene);
    let g = resolution as f64;
    for cuboid in shape {
        let (lo, hi) = cuboid.aabb();
        if lo.iter().any(|&v| v < -BOUNDS_EPS) || hi.iter().any(|&v| v > 1.0 + BOUNDS_EPS) {
            return Err(Error::OutOfBounds(format!(
                "cuboid spans {lo:?}..{hi:?}"
            )));
        }
        let range = |a: usize| {
            let start = ((lo[a] * g - 0.5).floor().max(0.0)) as usize;
            let end = ((hi[a] * g - 0.5).ceil().max(0.0) as usize).min(resolution - 1);
            start..=end
        };
        for h in range(0) {
            for w in range(1) {
                for l in range(2) {
                    if cuboid.contains(grid.center(h, w, l)) {
                        grid.set(h, w, l, true);
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Positions occupied in `after` but not in `before`.
pub fn grid_difference(after: &OccupancyGrid, before: &OccupancyGrid) -> Result<SparseVoxelSet> {
    check_resolution(after, before)?;
    if after.frame != Frame::Scene || before.frame != Frame::Scene {
        return Err(Error::Invalid(
            "grid difference requires scene-frame grids".into(),
        ));
    }
    let g = after.resolution;
    let positions = after
        .cells
        .iter()
        .zip(&before.cells)
        .enumerate()
        .filter(|(_, (&a, &b))| a && !b)
        .map(|(i, _)| [i / (g * g), (i / g) % g, i % g])
        .collect();
    Ok(SparseVoxelSet {
        resolution: g,
        positions,
    })
}

const NEIGHBORS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// True when an occupied voxel has at least one empty (or out-of-grid) 6-neighbor.
pub fn is_surface_voxel(grid: &OccupancyGrid, p: [usize; 3]) -> bool {
    let [h, w, l] = p.map(|c| c as isize);
    NEIGHBORS
        .iter()
        .any(|d| !grid.get_signed(h + d[0], w + d[1], l + d[2]))
}

/// Centers of occupied voxels with at least one unoccupied 6-neighbor.
pub fn surface_points(grid: &OccupancyGrid) -> Result<PointCloud> {
    if grid.is_empty() {
        return Err(Error::Empty("surface extraction on an empty grid"));
    }
    let points = grid
        .occupied()
        .filter(|&p| is_surface_voxel(grid, p))
        .map(|[h, w, l]| grid.center(h, w, l))
        .collect();
    Ok(PointCloud { points })
}

/// Intersection over union; 1 when both grids are empty.
pub fn iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    check_resolution(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
