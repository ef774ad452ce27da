//! Masked regular grids for bounded, possibly non-convex, planar domains.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::shape::Shape;

pub const MIN_RESOLUTION: usize = 8;

/// Axis-aligned neighbor directions, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dir {
    East = 0,
    West = 1,
    North = 2,
    South = 3,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::East, Dir::West, Dir::North, Dir::South];

    pub fn offset(self) -> (isize, isize) {
        match self {
            Dir::East => (1, 0),
            Dir::West => (-1, 0),
            Dir::North => (0, 1),
            Dir::South => (0, -1),
        }
    }

    /// 0 for x, 1 for y.
    pub fn axis(self) -> usize {
        match self {
            Dir::East | Dir::West => 0,
            Dir::North | Dir::South => 1,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Dir::East | Dir::North => 1.0,
            Dir::West | Dir::South => -1.0,
        }
    }

    pub fn opposite(self) -> Dir {
        match self {
            Dir::East => Dir::West,
            Dir::West => Dir::East,
            Dir::North => Dir::South,
            Dir::South => Dir::North,
        }
    }
}

/// A cell face separating an inside cell from the outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    /// Compact index of the inside cell.
    pub cell: usize,
    /// Outward direction of the face as seen from `cell`.
    pub dir: Dir,
    /// Point where the line through the cell center along `dir` meets the boundary.
    pub point: [f64; 2],
    /// Outward unit normal of the analytic boundary at `point`.
    pub normal: [f64; 2],
    /// Boundary length represented by this face.
    pub weight: f64,
}

/// Regular `nx x ny` grid on the unit box with an inside/outside mask.
///
/// Inside cells are numbered compactly in row-major order. Interior faces
/// (both sides inside) carry vector-field unknowns; faces touching the outside
/// carry none, which is how the no-flux condition is imposed.
#[derive(Debug, Clone)]
pub struct DomainGrid {
    nx: usize,
    ny: usize,
    h: f64,
    shape: Option<Shape>,
    mask: Vec<bool>,
    index: Vec<usize>,
    cells: Vec<[usize; 2]>,
    neighbors: Vec<[Option<usize>; 4]>,
    x_faces: Vec<[usize; 2]>,
    y_faces: Vec<[usize; 2]>,
    cell_faces: Vec<[Option<usize>; 4]>,
    boundary_faces: Vec<BoundaryFace>,
}

const OUTSIDE: usize = usize::MAX;

impl DomainGrid {
    /// Rasterizes `shape` at `resolution` cells per side.
    pub fn build(shape: Shape, resolution: usize) -> Result<Self> {
        if resolution < MIN_RESOLUTION {
            return Err(Error::InvalidShape(format!(
                "resolution {resolution} below minimum {MIN_RESOLUTION}"
            )));
        }
        let n = resolution;
        let h = 1.0 / n as f64;
        let mut mask = vec![false; n * n];
        for j in 0..n {
            for i in 0..n {
                let p = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];
                mask[j * n + i] = shape.level(p).0 < 0.0;
            }
        }
        Self::from_mask(n, n, mask, Some(shape))
    }

    /// Builds a grid from a raw mask. Without an analytic shape the boundary
    /// normals fall back to the face axes.
    pub fn from_mask(nx: usize, ny: usize, mask: Vec<bool>, shape: Option<Shape>) -> Result<Self> {
        if nx != ny {
            return Err(Error::InvalidShape(format!(
                "grid spacing must be uniform: nx={nx} ny={ny}"
            )));
        }
        if mask.len() != nx * ny {
            return Err(Error::Format(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                nx * ny
            )));
        }
        let h = 1.0 / nx as f64;
        let mut index = vec![OUTSIDE; nx * ny];
        let mut cells = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if mask[j * nx + i] {
                    index[j * nx + i] = cells.len();
                    cells.push([i, j]);
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::EmptyDomain);
        }
        let mut grid = DomainGrid {
            nx,
            ny,
            h,
            shape,
            mask,
            index,
            cells,
            neighbors: Vec::new(),
            x_faces: Vec::new(),
            y_faces: Vec::new(),
            cell_faces: Vec::new(),
            boundary_faces: Vec::new(),
        };
        grid.check_connected()?;
        grid.link();
        Ok(grid)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.cells.len();
        let mut label = vec![usize::MAX; n];
        let mut sizes = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            label[start] = id;
            while let Some(k) = queue.pop_front() {
                size += 1;
                for dir in Dir::ALL {
                    if let Some(nb) = self.lookup(k, dir) {
                        if label[nb] == usize::MAX {
                            label[nb] = id;
                            queue.push_back(nb);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        if sizes.len() > 1 {
            return Err(Error::Disconnected {
                components: sizes.len(),
                largest: sizes.iter().copied().max().unwrap_or(0),
            });
        }
        Ok(())
    }

    fn lookup(&self, k: usize, dir: Dir) -> Option<usize> {
        let [i, j] = self.cells[k];
        let (di, dj) = dir.offset();
        let ii = i as isize + di;
        let jj = j as isize + dj;
        if ii < 0 || jj < 0 || ii >= self.nx as isize || jj >= self.ny as isize {
            return None;
        }
        let idx = self.index[jj as usize * self.nx + ii as usize];
        (idx != OUTSIDE).then_some(idx)
    }

    fn link(&mut self) {
        let n = self.cells.len();
        self.neighbors = (0..n)
            .map(|k| Dir::ALL.map(|d| self.lookup(k, d)))
            .collect();
        self.cell_faces = vec![[None; 4]; n];
        for k in 0..n {
            if let Some(e) = self.neighbors[k][Dir::East as usize] {
                let f = self.x_faces.len();
                self.x_faces.push([k, e]);
                self.cell_faces[k][Dir::East as usize] = Some(f);
                self.cell_faces[e][Dir::West as usize] = Some(f);
            }
            if let Some(nn) = self.neighbors[k][Dir::North as usize] {
                let f = self.y_faces.len();
                self.y_faces.push([k, nn]);
                self.cell_faces[k][Dir::North as usize] = Some(f);
                self.cell_faces[nn][Dir::South as usize] = Some(f);
            }
        }
        let mut faces = Vec::new();
        for k in 0..n {
            for dir in Dir::ALL {
                if self.neighbors[k][dir as usize].is_none() {
                    faces.push(self.boundary_face(k, dir));
                }
            }
        }
        self.boundary_faces = faces;
    }

    fn boundary_face(&self, k: usize, dir: Dir) -> BoundaryFace {
        let c = self.center(k);
        let (di, dj) = dir.offset();
        let outer = [c[0] + di as f64 * self.h, c[1] + dj as f64 * self.h];
        let (point, normal) = match self.shape {
            Some(shape) => {
                // Bisection for the crossing on [c, outer]; F(c) < 0 by construction.
                let mut lo = 0.0_f64;
                let mut hi = 1.0_f64;
                let at = |t: f64| [c[0] + t * (outer[0] - c[0]), c[1] + t * (outer[1] - c[1])];
                if shape.level(outer).0 < 0.0 {
                    // Neighbor lies beyond the box but inside the level set.
                    hi = 0.5;
                } else {
                    for _ in 0..64 {
                        let mid = 0.5 * (lo + hi);
                        if shape.level(at(mid)).0 < 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                }
                let p = at(0.5 * (lo + hi));
                let g = shape.level(p).1;
                let norm = g[0].hypot(g[1]);
                let n = if norm > 0.0 {
                    [g[0] / norm, g[1] / norm]
                } else {
                    axis_normal(dir)
                };
                (p, n)
            }
            None => {
                let p = [c[0] + 0.5 * di as f64 * self.h, c[1] + 0.5 * dj as f64 * self.h];
                (p, axis_normal(dir))
            }
        };
        // Staircase faces of each orientation cover |n_axis| of the true
        // boundary length, so this weight sums to the perimeter.
        let weight = self.h / (normal[0].abs() + normal[1].abs());
        BoundaryFace {
            cell: k,
            dir,
            point,
            normal,
            weight,
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn shape(&self) -> Option<Shape> {
        self.shape
    }

    /// Row-major mask over all `nx * ny` cells.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn interior_cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, k: usize) -> [usize; 2] {
        self.cells[k]
    }

    pub fn center(&self, k: usize) -> [f64; 2] {
        let [i, j] = self.cells[k];
        [(i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h]
    }

    /// Compact index of raster cell `(i, j)`, if inside.
    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.nx || j >= self.ny {
            return None;
        }
        let idx = self.index[j * self.nx + i];
        (idx != OUTSIDE).then_some(idx)
    }

    pub fn neighbor(&self, k: usize, dir: Dir) -> Option<usize> {
        self.neighbors[k][dir as usize]
    }

    /// Interior x-faces as `[left, right]` cell pairs.
    pub fn x_faces(&self) -> &[[usize; 2]] {
        &self.x_faces
    }

    /// Interior y-faces as `[bottom, top]` cell pairs.
    pub fn y_faces(&self) -> &[[usize; 2]] {
        &self.y_faces
    }

    /// Face indices around cell `k` in [`Dir`] order (x-faces for E/W, y-faces for N/S).
    pub fn cell_faces(&self, k: usize) -> [Option<usize>; 4] {
        self.cell_faces[k]
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary_faces
    }

    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    /// Measure of the rasterized domain.
    pub fn area(&self) -> f64 {
        self.cells.len() as f64 * self.cell_area()
    }

    /// Boundary length estimate from the face weights.
    pub fn perimeter(&self) -> f64 {
        self.boundary_faces.iter().map(|f| f.weight).sum()
    }

    pub fn is_convex(&self) -> bool {
        self.shape.map(|s| s.is_convex()).unwrap_or(true)
    }

    /// A pair of boundary faces `(a, b)` such that the boundary point of `b`
    /// lies strictly outside the tangent half-plane at `a`. Such a pair cannot
    /// exist on a convex domain.
    pub fn nonconvexity_witness(&self) -> Option<(usize, usize)> {
        let tol = 1e-9;
        let faces = &self.boundary_faces;
        let mut best: Option<(f64, usize, usize)> = None;
        for (a, fa) in faces.iter().enumerate() {
            for (b, fb) in faces.iter().enumerate() {
                let d = (fb.point[0] - fa.point[0]) * fa.normal[0]
                    + (fb.point[1] - fa.point[1]) * fa.normal[1];
                if d > tol && best.map(|x| d > x.0).unwrap_or(true) {
                    best = Some((d, a, b));
                }
            }
        }
        best.map(|(_, a, b)| (a, b))
    }

    /// Cells `k`, `k-dir`, `k-2 dir`, ... walking inward, up to `max` cells.
    pub fn inward_line(&self, k: usize, dir: Dir, max: usize) -> Vec<usize> {
        let mut line = vec![k];
        let back = dir.opposite();
        let mut cur = k;
        while line.len() < max {
            match self.neighbor(cur, back) {
                Some(nb) => {
                    line.push(nb);
                    cur = nb;
                }
                None => break,
            }
        }
        line
    }

    /// Minimum number of steps from cell `k` to a cell that touches the outside.
    pub fn depth(&self) -> Vec<usize> {
        let n = self.cells.len();
        let mut depth = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for k in 0..n {
            if self.neighbors[k].iter().any(|nb| nb.is_none()) {
                depth[k] = 0;
                queue.push_back(k);
            }
        }
        while let Some(k) = queue.pop_front() {
            for nb in self.neighbors[k].iter().flatten() {
                if depth[*nb] == usize::MAX {
                    depth[*nb] = depth[k] + 1;
                    queue.push_back(*nb);
                }
            }
        }
        depth
    }

    /// Structural equality: same raster and mask.
    pub fn same_layout(&self, other: &DomainGrid) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.mask == other.mask
    }
}

fn axis_normal(dir: Dir) -> [f64; 2] {
    let (di, dj) = dir.offset();
    [di as f64, dj as f64]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn square_is_full() {
        let g = DomainGrid::build(Shape::Square, 32).unwrap();
        assert_eq!(g.interior_cell_count(), 32 * 32);
        assert_eq!(g.boundary_faces().len(), 4 * 32);
        for f in g.boundary_faces() {
            let c = g.center(f.cell);
            let outward = [f.point[0] - c[0], f.point[1] - c[1]];
            assert!(outward[0] * f.normal[0] + outward[1] * f.normal[1] > 0.0);
            assert!((f.weight - g.h()).abs() < 1e-15);
        }
        assert!((g.perimeter() - 4.0).abs() < 1e-12);
        assert!(g.nonconvexity_witness().is_none());
    }

    #[test]
    fn normals_are_unit() {
        for shape in [Shape::Disc { radius: 0.4 }, Shape::Pacman, Shape::AnnulusSector, Shape::Dumbbell] {
            let g = DomainGrid::build(shape, 48).unwrap();
            for f in g.boundary_faces() {
                let len = f.normal[0].hypot(f.normal[1]);
                assert!((len - 1.0).abs() < 1e-12, "{shape}: {len}");
            }
        }
    }

    #[test]
    fn disc_perimeter_converges() {
        // Oracle: 2 pi r. Errors shrink under refinement.
        let exact = 2.0 * PI * 0.4;
        let errs: Vec<f64> = [16, 32, 64, 128]
            .iter()
            .map(|&n| {
                let g = DomainGrid::build(Shape::Disc { radius: 0.4 }, n).unwrap();
                (g.perimeter() - exact).abs() / exact
            })
            .collect();
        assert!(errs[3] < 0.02, "{errs:?}");
        assert!(errs[3] < errs[0], "{errs:?}");
    }

    #[test]
    fn pacman_is_nonconvex() {
        let g = DomainGrid::build(Shape::Pacman, 64).unwrap();
        assert!(!g.is_convex());
        let (a, b) = g.nonconvexity_witness().expect("witness");
        let fa = g.boundary_faces()[a];
        let fb = g.boundary_faces()[b];
        // The witness must sit near the notch, which opens toward +x.
        assert!(fa.point[0] > 0.5 || fb.point[0] > 0.5);
        let disc = DomainGrid::build(Shape::Disc { radius: 0.4 }, 64).unwrap();
        assert!(disc.nonconvexity_witness().is_none());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(DomainGrid::build(Shape::Square, 4).is_err());
        let mut mask = vec![false; 64];
        mask[0] = true;
        mask[63] = true;
        match DomainGrid::from_mask(8, 8, mask, None) {
            Err(Error::Disconnected { components, .. }) => assert_eq!(components, 2),
            other => panic!("expected disconnected, got {other:?}"),
        }
        assert!(matches!(
            DomainGrid::from_mask(8, 8, vec![false; 64], None),
            Err(Error::EmptyDomain)
        ));
    }

    #[test]
    fn all_shapes_connected_at_moderate_resolution() {
        for shape in [Shape::AnnulusSector, Shape::Dumbbell, Shape::Pacman] {
            for n in [16, 32, 64] {
                DomainGrid::build(shape, n).unwrap();
            }
        }
    }
}
