//! Structured triangulations of the unit square.
//!
//! The base mesh carries the pressure-level spaces; its uniform refinement carries
//! the displacement space. Base node `(i, j)` has index `j * (nx + 1) + i`, and
//! refined node `(2i, 2j)` sits on top of it.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct TriMesh {
    pub nx: usize,
    pub ny: usize,
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn num_nodes(&self) -> usize {
        self.vertices.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|k| self.vertices[k]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    /// Area and constant gradients of the three barycentric basis functions.
    pub fn p1_gradients(&self, t: usize) -> (f64, [[f64; 2]; 3]) {
        let [a, b, c] = self.triangles[t].map(|k| self.vertices[k]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let g = [
            [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
            [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
            [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
        ];
        (0.5 * det, g)
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t].map(|k| self.vertices[k]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Barycentric coordinates of `x` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, x: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|k| self.vertices[k]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let l1 = ((x[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (x[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (x[1] - a[1]) - (x[0] - a[0]) * (b[1] - a[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    fn grid(nx: usize, ny: usize) -> Self {
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([i as f64 / nx as f64, j as f64 / ny as f64]);
            }
        }
        let idx = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        Self {
            nx,
            ny,
            vertices,
            triangles,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StructuredMesh {
    pub nx: usize,
    pub ny: usize,
    pub base: TriMesh,
    pub refined: TriMesh,
    /// Base triangle of every refined triangle.
    pub parent: Vec<usize>,
    /// Subdomain grid `(sx, sy)` the mesh conforms to.
    pub grid: (usize, usize),
}

impl StructuredMesh {
    /// Refined node sitting on base node `n`.
    pub fn refined_of_base(&self, n: usize) -> usize {
        let (i, j) = self.base.node_ij(n);
        self.refined.node_index(2 * i, 2 * j)
    }

    /// Base cell `(i, j)` containing base triangle `t`.
    pub fn cell_of_triangle(&self, t: usize) -> (usize, usize) {
        let c = t / 2;
        (c % self.nx, c / self.nx)
    }

    /// Cells per subdomain along each axis.
    pub fn cells_per_subdomain(&self) -> (usize, usize) {
        (self.nx / self.grid.0, self.ny / self.grid.1)
    }

    pub fn num_subdomains(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Subdomain id `sy * Nx + sx` owning base triangle `t`.
    pub fn subdomain_of_triangle(&self, t: usize) -> usize {
        let (i, j) = self.cell_of_triangle(t);
        let (mx, my) = self.cells_per_subdomain();
        (j / my) * self.grid.0 + i / mx
    }
}

/// Builds the base mesh with `nx × ny` cells and its uniform refinement, checking that
/// the subdomain grid `(sx, sy)` conforms to mesh lines.
pub fn build_mesh(nx: usize, ny: usize, grid: (usize, usize)) -> Result<StructuredMesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::Config("mesh needs at least one cell per axis".into()));
    }
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Config("subdomain grid needs at least one subdomain per axis".into()));
    }
    if !nx.is_multiple_of(grid.0) {
        return Err(Error::Divisibility {
            axis: 'x',
            cells: nx,
            parts: grid.0,
        });
    }
    if !ny.is_multiple_of(grid.1) {
        return Err(Error::Divisibility {
            axis: 'y',
            cells: ny,
            parts: grid.1,
        });
    }
    let base = TriMesh::grid(nx, ny);
    let mut refined = TriMesh::grid(2 * nx, 2 * ny);
    let rnx = 2 * nx;
    let ridx = |i: usize, j: usize| j * (rnx + 1) + i;
    let mut triangles = Vec::with_capacity(4 * base.triangles.len());
    let mut parent = Vec::with_capacity(4 * base.triangles.len());
    for (t, tri) in base.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|k| {
            let (i, j) = base.node_ij(k);
            (2 * i, 2 * j)
        });
        let mid = |p: (usize, usize), q: (usize, usize)| ridx((p.0 + q.0) / 2, (p.1 + q.1) / 2);
        let (va, vb, vc) = (ridx(a.0, a.1), ridx(b.0, b.1), ridx(c.0, c.1));
        let (mab, mbc, mca) = (mid(a, b), mid(b, c), mid(c, a));
        triangles.push([va, mab, mca]);
        triangles.push([mab, vb, mbc]);
        triangles.push([mca, mbc, vc]);
        triangles.push([mab, mbc, mca]);
        parent.extend_from_slice(&[t; 4]);
    }
    refined.triangles = triangles;
    Ok(StructuredMesh {
        nx,
        ny,
        base,
        refined,
        parent,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_orientation() {
        let m = build_mesh(2, 2, (1, 1)).unwrap();
        assert_eq!(m.base.triangles.len(), 8);
        assert_eq!(m.refined.triangles.len(), 32);
        for t in 0..m.base.triangles.len() {
            assert!(m.base.signed_area(t) > 0.0);
        }
        for t in 0..m.refined.triangles.len() {
            assert!(m.refined.signed_area(t) > 0.0);
            let p = m.parent[t];
            assert!((4.0 * m.refined.signed_area(t) - m.base.signed_area(p)).abs() < 1e-15);
        }
    }

    #[test]
    fn refined_nodes_overlay_base_nodes() {
        let m = build_mesh(3, 3, (3, 1)).unwrap();
        for n in 0..m.base.num_nodes() {
            assert_eq!(m.base.vertices[n], m.refined.vertices[m.refined_of_base(n)]);
        }
    }

    #[test]
    fn rejects_nonconforming_grid() {
        assert!(matches!(
            build_mesh(5, 5, (2, 2)),
            Err(Error::Divisibility { axis: 'x', cells: 5, parts: 2 })
        ));
    }

    #[test]
    fn gradients_reproduce_linear_functions() {
        let m = build_mesh(2, 2, (1, 1)).unwrap();
        for t in 0..m.refined.triangles.len() {
            let (_, g) = m.refined.p1_gradients(t);
            let mut gx = [0.0; 2];
            for (k, &n) in m.refined.triangles[t].iter().enumerate() {
                let x = m.refined.vertices[n][0];
                gx[0] += x * g[k][0];
                gx[1] += x * g[k][1];
            }
            assert!((gx[0] - 1.0).abs() < 1e-12 && gx[1].abs() < 1e-12);
        }
    }
}
