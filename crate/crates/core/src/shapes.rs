//! Closed, consistently wound test meshes.

use std::collections::HashMap;

use crate::vec3::{normalized, Vec3};

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn translated(mut self, by: Vec3) -> Self {
        for v in &mut self.vertices {
            for a in 0..3 {
                v[a] += by[a];
            }
        }
        self
    }

    /// Disjoint union; indices of `other` are shifted.
    pub fn merged(mut self, other: &TriMesh) -> Self {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
        self
    }

    pub fn faces(&self) -> Vec<Vec<usize>> {
        self.triangles.iter().map(|t| t.to_vec()).collect()
    }

    /// Signed volume by the divergence theorem; positive for outward winding.
    pub fn volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                crate::vec3::dot(a, crate::vec3::cross(b, c)) / 6.0
            })
            .sum()
    }
}

/// Axis-aligned box `[lo, hi]`.
pub fn cuboid(lo: Vec3, hi: Vec3) -> TriMesh {
    let vertices = (0..8)
        .map(|i| [if i & 1 == 0 { lo[0] } else { hi[0] }, if i & 2 == 0 { lo[1] } else { hi[1] }, if i & 4 == 0 { lo[2] } else { hi[2] }])
        .collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    TriMesh { vertices, triangles }
}

pub fn cube(center: Vec3, half: f64) -> TriMesh {
    cuboid(center.map(|c| c - half), center.map(|c| c + half))
}

/// Icosahedron refined `subdivisions` times and projected to the sphere.
pub fn icosphere(center: Vec3, radius: f64, subdivisions: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalized)
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vs: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (p, q) = (vs[a], vs[b]);
                vs.push(normalized([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]));
                vs.len() - 1
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    let vertices = vertices.into_iter().map(|v| [center[0] + radius * v[0], center[1] + radius * v[1], center[2] + radius * v[2]]).collect();
    TriMesh { vertices, triangles }
}

/// Torus around the z axis with tube radius `minor`.
pub fn torus(major: f64, minor: f64, rings: usize, sides: usize) -> TriMesh {
    let tau = std::f64::consts::TAU;
    let mut vertices = Vec::with_capacity(rings * sides);
    for i in 0..rings {
        let u = tau * i as f64 / rings as f64;
        for j in 0..sides {
            let v = tau * j as f64 / sides as f64;
            let rad = major + minor * v.cos();
            vertices.push([rad * u.cos(), rad * u.sin(), minor * v.sin()]);
        }
    }
    let at = |i: usize, j: usize| (i % rings) * sides + (j % sides);
    let mut triangles = Vec::with_capacity(2 * rings * sides);
    for i in 0..rings {
        for j in 0..sides {
            let (a, b, c, d) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    TriMesh { vertices, triangles }
}

/// L-shaped prism: the outline (0,0)-(2,0)-(2,1)-(1,1)-(1,2)-(0,2) scaled by `unit`, extruded
/// over `[0, depth]` in z, then shifted by `offset`.
pub fn l_bracket(unit: f64, depth: f64, offset: Vec3) -> TriMesh {
    let outline = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
    let n = outline.len();
    let mut vertices = Vec::with_capacity(2 * n);
    for z in [0.0, depth] {
        for p in outline {
            vertices.push([p[0] * unit, p[1] * unit, z]);
        }
    }
    let mut triangles = Vec::new();
    // Fan from the reflex corner (index 3) covers the L without overlap.
    for w in [4, 5, 0, 1] {
        let next = (w + 1) % n;
        triangles.push([3, next, w]);
        triangles.push([n + 3, n + w, n + next]);
    }
    for i in 0..n {
        let j = (i + 1) % n;
        triangles.push([i, j, n + j]);
        triangles.push([i, n + j, n + i]);
    }
    TriMesh { vertices, triangles }.translated(offset)
}

/// Single open square in the z = 0 plane.
pub fn quad_sheet(half: f64) -> TriMesh {
    TriMesh {
        vertices: vec![[-half, -half, 0.0], [half, -half, 0.0], [half, half, 0.0], [-half, half, 0.0]],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
    }
}
