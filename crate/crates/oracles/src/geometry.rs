//! Brute-force geometric references: point-in-mesh by winding number, triangle/box overlap by
//! polygon clipping, and point sampling.

pub type P3 = [f64; 3];

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn len(a: P3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Generalized winding number of a closed triangle mesh around `p` (solid angle sum / 4π).
pub fn winding_number(vertices: &[P3], triangles: &[[usize; 3]], p: P3) -> f64 {
    let mut total = 0.0;
    for t in triangles {
        let a = sub(vertices[t[0]], p);
        let b = sub(vertices[t[1]], p);
        let c = sub(vertices[t[2]], p);
        let (la, lb, lc) = (len(a), len(b), len(c));
        let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0]);
        let dab = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let dbc = b[0] * c[0] + b[1] * c[1] + b[2] * c[2];
        let dca = c[0] * a[0] + c[1] * a[1] + c[2] * a[2];
        let denom = la * lb * lc + dab * lc + dbc * la + dca * lb;
        total += 2.0 * det.atan2(denom);
    }
    total / (4.0 * std::f64::consts::PI)
}

pub fn inside_mesh(vertices: &[P3], triangles: &[[usize; 3]], p: P3) -> bool {
    winding_number(vertices, triangles, p) > 0.5
}

/// Clips the triangle against the six slabs of the box (boundaries included) and reports
/// whether anything survives.
pub fn triangle_box_overlap_clip(tri: &[P3; 3], center: P3, half: P3) -> bool {
    let mut poly: Vec<P3> = tri.to_vec();
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let limit = sign * center[axis] + half[axis];
            // Keep points with sign * x ≤ limit.
            let inside = |p: &P3| sign * p[axis] <= limit;
            let mut out = Vec::with_capacity(poly.len() + 2);
            for i in 0..poly.len() {
                let cur = poly[i];
                let next = poly[(i + 1) % poly.len()];
                let (ci, ni) = (inside(&cur), inside(&next));
                if ci {
                    out.push(cur);
                }
                if ci != ni {
                    let dc = sign * cur[axis] - limit;
                    let dn = sign * next[axis] - limit;
                    let t = dc / (dc - dn);
                    let mut q = [0.0; 3];
                    for k in 0..3 {
                        q[k] = cur[k] + t * (next[k] - cur[k]);
                    }
                    q[axis] = sign * limit;
                    out.push(q);
                }
            }
            poly = out;
            if poly.is_empty() {
                return false;
            }
        }
    }
    true
}

/// Barycentric grid samples of a triangle, `n` subdivisions per edge.
pub fn triangle_samples(tri: &[P3; 3], n: usize) -> Vec<P3> {
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=n - i {
            let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
            let w = 1.0 - u - v;
            out.push([0, 1, 2].map(|k| w * tri[0][k] + u * tri[1][k] + v * tri[2][k]));
        }
    }
    out
}

pub fn point_in_box(p: P3, center: P3, half: P3) -> bool {
    (0..3).all(|k| (p[k] - center[k]).abs() <= half[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winding_number_of_tetrahedron() {
        let v = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        assert!((winding_number(&v, &t, [0.1, 0.1, 0.1]) - 1.0).abs() < 1e-12);
        assert!(winding_number(&v, &t, [1.0, 1.0, 1.0]).abs() < 1e-12);
    }

    #[test]
    fn clipping_cases() {
        let tri = [[-1.0, -1.0, 0.5], [1.0, -1.0, 0.5], [0.0, 1.0, 0.5]];
        assert!(triangle_box_overlap_clip(&tri, [0.0; 3], [0.5; 3]));
        let tri = [[-1.0, -1.0, 0.51], [1.0, -1.0, 0.51], [0.0, 1.0, 0.51]];
        assert!(!triangle_box_overlap_clip(&tri, [0.0; 3], [0.5; 3]));
    }
}

/// Index of the closest point by exhaustive search; the first index wins ties.
pub fn nearest_brute(points: &[[f64; 3]], q: [f64; 3]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Solid cells of a regular grid (x-major, then y, then z): cells whose box no triangle touches
/// and whose center has winding number above one half.
pub fn solid_cells(vertices: &[P3], triangles: &[[usize; 3]], origin: P3, dims: [usize; 3], pitch: f64) -> Vec<bool> {
    let index = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
    let center = |i: usize, j: usize, k: usize| {
        [origin[0] + (i as f64 + 0.5) * pitch, origin[1] + (j as f64 + 0.5) * pitch, origin[2] + (k as f64 + 0.5) * pitch]
    };
    let half = [pitch / 2.0; 3];
    let mut surface = vec![false; dims[0] * dims[1] * dims[2]];
    for t in triangles {
        let tri = t.map(|i| vertices[i]);
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let lo = tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let hi = tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            let i0 = ((lo - origin[a]) / pitch).floor() as i64 - 1;
            let i1 = ((hi - origin[a]) / pitch).floor() as i64 + 1;
            range[a] = (i0.max(0) as usize, (i1.max(0) as usize).min(dims[a] - 1));
        }
        for i in range[0].0..=range[0].1 {
            for j in range[1].0..=range[1].1 {
                for k in range[2].0..=range[2].1 {
                    surface[index(i, j, k)] |= triangle_box_overlap_clip(&tri, center(i, j, k), half);
                }
            }
        }
    }
    let mut out = vec![false; surface.len()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let idx = index(i, j, k);
                out[idx] = !surface[idx] && inside_mesh(vertices, triangles, center(i, j, k));
            }
        }
    }
    out
}
