//! Uniform triangulation of the unit square with P1 element matrices.

use crate::error::{OedError, Result};

/// Uniform mesh of the unit square: `n` cells per side, each square cell
/// split into two right triangles. The split diagonal alternates on the
/// cell checkerboard so the triangulation is mirror-symmetric in x and y
/// for even `n`. Nodes are numbered row-major: node (i, j) -> j * (n + 1) + i.
#[derive(Debug, Clone)]
pub struct Mesh2D {
    n: usize,
    coords: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
}

impl Mesh2D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(OedError::InvalidParameter(format!(
                "mesh needs at least 2 cells per side, got {n}"
            )));
        }
        let h = 1.0 / n as f64;
        let np = n + 1;
        let mut coords = Vec::with_capacity(np * np);
        for j in 0..np {
            for i in 0..np {
                coords.push([i as f64 * h, j as f64 * h]);
            }
        }
        let idx = |i: usize, j: usize| j * np + i;
        let mut elements = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                if (i + j) % 2 == 0 {
                    // diagonal from (i, j) to (i+1, j+1)
                    elements.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                    elements.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
                } else {
                    // diagonal from (i+1, j) to (i, j+1)
                    elements.push([idx(i, j), idx(i + 1, j), idx(i, j + 1)]);
                    elements.push([idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
                }
            }
        }
        Ok(Mesh2D { n, coords, elements })
    }

    pub fn cells_per_side(&self) -> usize {
        self.n
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn mesh_size(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    /// Lower bandwidth of any P1 operator under the row-major numbering.
    pub fn bandwidth(&self) -> usize {
        self.n + 2
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    /// Nodes on y = 0.
    pub fn bottom_nodes(&self) -> Vec<usize> {
        (0..=self.n).map(|i| self.node_index(i, 0)).collect()
    }

    /// Nodes on y = 1.
    pub fn top_nodes(&self) -> Vec<usize> {
        (0..=self.n).map(|i| self.node_index(i, self.n)).collect()
    }

    /// All boundary nodes.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let n = self.n;
        let mut out = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                if i == 0 || j == 0 || i == n || j == n {
                    out.push(self.node_index(i, j));
                }
            }
        }
        out
    }

    pub fn element_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.elements[e];
        let pa = self.coords[a];
        let pb = self.coords[b];
        let pc = self.coords[c];
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])).abs()
    }

    /// P1 element matrices for element `e`: (area, unit-coefficient stiffness,
    /// consistent mass). The stiffness already includes the area factor.
    pub fn element_matrices(&self, e: usize) -> (f64, [[f64; 3]; 3], [[f64; 3]; 3]) {
        let [a, b, c] = self.elements[e];
        let p = [self.coords[a], self.coords[b], self.coords[c]];
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let area = 0.5 * det.abs();
        // gradients of barycentric coordinates
        let gb = [
            [
                (p[1][1] - p[2][1]) / det,
                (p[2][0] - p[1][0]) / det,
            ],
            [
                (p[2][1] - p[0][1]) / det,
                (p[0][0] - p[2][0]) / det,
            ],
            [
                (p[0][1] - p[1][1]) / det,
                (p[1][0] - p[0][0]) / det,
            ],
        ];
        let mut stiff = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                stiff[i][j] = area * (gb[i][0] * gb[j][0] + gb[i][1] * gb[j][1]);
            }
        }
        let mut mass = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                mass[i][j] = area / 12.0 * if i == j { 2.0 } else { 1.0 };
            }
        }
        (area, stiff, mass)
    }

    /// Locates the element containing `(x, y)` and the barycentric weights
    /// of the point with respect to its three vertices.
    pub fn locate(&self, x: f64, y: f64) -> Result<(usize, [f64; 3])> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(OedError::InvalidParameter(format!(
                "point ({x}, {y}) outside the unit square"
            )));
        }
        let n = self.n;
        let fx = (x * n as f64).floor().min(n as f64 - 1.0).max(0.0);
        let fy = (y * n as f64).floor().min(n as f64 - 1.0).max(0.0);
        let (ci, cj) = (fx as usize, fy as usize);
        let xi = x * n as f64 - fx;
        let eta = y * n as f64 - fy;
        let second = if (ci + cj) % 2 == 0 {
            xi < eta // above the (i,j)-(i+1,j+1) diagonal
        } else {
            xi + eta > 1.0 // above the (i+1,j)-(i,j+1) diagonal
        };
        let e = 2 * (cj * n + ci) + usize::from(second);
        let [a, b, c] = self.elements[e];
        let p = [self.coords[a], self.coords[b], self.coords[c]];
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let l1 = ((p[2][1] - p[0][1]) * (x - p[0][0]) - (p[2][0] - p[0][0]) * (y - p[0][1])) / det;
        let l2 = (-(p[1][1] - p[0][1]) * (x - p[0][0]) + (p[1][0] - p[0][0]) * (y - p[0][1])) / det;
        Ok((e, [1.0 - l1 - l2, l1, l2]))
    }
}
