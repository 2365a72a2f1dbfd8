//! Pinhole cameras, feature maps and averaging of multi-view features onto voxels.
//!
//! Camera space follows the OpenCV convention: +z looks forward, +x right, +y down.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vec3::{cross, dot, normalized, sub, Vec3};

/// Rigid world-to-camera transform plus vertical field of view and image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    /// Row-major 4×4 matrix.
    pub world_to_camera: [f64; 16],
    pub fov_y_deg: f64,
    pub width: u32,
    pub height: u32,
}

/// Result of projecting a world point into a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Normalized image coordinates; the image spans `[-1, 1]²`.
    pub uv: [f64; 2],
    /// Camera-space z.
    pub depth: f64,
    pub in_front: bool,
}

impl CameraView {
    pub fn new(world_to_camera: [f64; 16], fov_y_deg: f64, width: u32, height: u32) -> Result<Self> {
        let v = Self { world_to_camera, fov_y_deg, width, height };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(invalid("camera matrix has non-finite entries"));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r[i], r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(invalid("camera rotation block is not orthonormal"));
                }
            }
        }
        let m = &self.world_to_camera;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(invalid("camera matrix last row must be (0, 0, 0, 1)"));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(invalid(format!("vertical field of view must lie in (0, 180) degrees, got {}", self.fov_y_deg)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be positive"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` only needs to be non-parallel to the view direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: u32, height: u32) -> Result<Self> {
        let forward = normalized(sub(target, eye));
        let right = cross(forward, up);
        if dot(right, right) < 1e-24 {
            return Err(invalid("up vector is parallel to the viewing direction"));
        }
        let right = normalized(right);
        let down = cross(forward, right);
        let rows = [right, down, forward];
        let mut m = [0.0; 16];
        for (i, row) in rows.iter().enumerate() {
            m[4 * i..4 * i + 3].copy_from_slice(row);
            m[4 * i + 3] = -dot(*row, eye);
        }
        m[15] = 1.0;
        Self::new(m, fov_y_deg, width, height)
    }

    fn rotation(&self) -> [Vec3; 3] {
        let m = &self.world_to_camera;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let r = self.rotation();
        let m = &self.world_to_camera;
        let t = [m[3], m[7], m[11]];
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = -(r[0][k] * t[0] + r[1][k] * t[1] + r[2][k] * t[2]);
        }
        c
    }

    /// `(f_x, f_y, c_x, c_y)` in pixels for square pixels.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        let fy = self.height as f64 / (2.0 * (self.fov_y_deg.to_radians() / 2.0).tan());
        (fy, fy, self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let m = &self.world_to_camera;
        [
            m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
            m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
            m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
        ]
    }

    pub fn project(&self, p: Vec3) -> Projection {
        let pc = self.to_camera(p);
        let (fx, fy, cx, cy) = self.intrinsics();
        let uv = [fx * pc[0] / pc[2] / cx, fy * pc[1] / pc[2] / cy];
        Projection { uv, depth: pc[2], in_front: pc[2] > 0.0 }
    }

    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        let bits = |v: &Self| {
            let mut k: Vec<u64> = v.world_to_camera.iter().map(|x| x.to_bits()).collect();
            k.extend([v.fov_y_deg.to_bits(), v.width as u64, v.height as u64]);
            k
        };
        bits(self).cmp(&bits(other))
    }
}

/// Evenly spread unit directions (golden-angle spiral).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            [phi.cos() * r, y, phi.sin() * r]
        })
        .collect()
}

/// `n` cameras on a sphere of `radius` around the origin, all aimed at the origin.
pub fn orbit_cameras(n: usize, radius: f64, fov_y_deg: f64, width: u32, height: u32) -> Result<Vec<CameraView>> {
    fibonacci_sphere(n)
        .into_iter()
        .map(|d| {
            let eye = [d[0] * radius, d[1] * radius, d[2] * radius];
            let up = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
            CameraView::look_at(eye, [0.0; 3], up, fov_y_deg, width, height)
        })
        .collect()
}

/// `n × n` grid of `c`-channel features stored (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n: usize,
    c: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(n: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if n < 2 {
            return Err(invalid("feature map side must be at least 2"));
        }
        if c == 0 {
            return Err(invalid("feature map needs at least one channel"));
        }
        if data.len() != n * n * c {
            return Err(invalid(format!("feature map data has {} values, expected {}", data.len(), n * n * c)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map contains non-finite values"));
        }
        Ok(Self { n, c, data })
    }

    pub fn constant(n: usize, value: &[f32]) -> Result<Self> {
        Self::new(n, value.len(), value.iter().copied().cycle().take(n * n * value.len()).collect())
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.n + col) * self.c;
        &self.data[o..o + self.c]
    }

    /// Align-corners bilinear sample; `uv` is clamped to `[-1, 1]²` (u along columns, v along rows).
    pub fn sample(&self, uv: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        self.sample_into(uv, &mut out);
        out
    }

    fn sample_into(&self, uv: [f64; 2], out: &mut [f64]) {
        let last = (self.n - 1) as f64;
        let coord = |t: f64| {
            let x = (t.clamp(-1.0, 1.0) + 1.0) / 2.0 * last;
            let i0 = (x.floor() as usize).min(self.n - 1);
            (i0, (i0 + 1).min(self.n - 1), x - i0 as f64)
        };
        let (c0, c1, fc) = coord(uv[0]);
        let (r0, r1, fr) = coord(uv[1]);
        let (a, b, c, d) = (self.token(r0, c0), self.token(r0, c1), self.token(r1, c0), self.token(r1, c1));
        for k in 0..self.c {
            let top = a[k] as f64 + fc * (b[k] as f64 - a[k] as f64);
            let bottom = c[k] as f64 + fc * (d[k] as f64 - c[k] as f64);
            out[k] = top + fr * (bottom - top);
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"VFMP")?;
        for v in [1u32, self.n as u32, self.c as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |detail: &str| Error::Format { what: "feature map", detail: detail.into() };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VFMP" {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        let mut next = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        if next(&mut r)? != 1 {
            return Err(bad("unsupported version"));
        }
        let n = next(&mut r)? as usize;
        let c = next(&mut r)? as usize;
        let count = n.checked_mul(n).and_then(|v| v.checked_mul(c)).ok_or_else(|| bad("size overflow"))?;
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Self::new(n, c, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// One feature vector per voxel and whether any camera had it in front.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatures {
    pub channels: usize,
    /// Row-major `len × channels`.
    pub data: Vec<f64>,
    pub visible: Vec<bool>,
}

impl VoxelFeatures {
    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// CSV with header `voxel_index,visible,f0,f1,…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["voxel_index".to_string(), "visible".to_string()];
        header.extend((0..self.channels).map(|k| format!("f{k}")));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string(), u8::from(self.visible[i]).to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let channels = rdr.headers()?.len().checked_sub(2).ok_or_else(|| invalid("feature CSV needs voxel_index and visible columns"))?;
        let mut data = Vec::new();
        let mut visible = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| invalid(format!("feature CSV row {}: {e}", line + 1)));
            if parse(&rec[0])? as usize != line {
                return Err(invalid(format!("feature CSV row {}: voxel indices must be 0, 1, 2, …", line + 1)));
            }
            visible.push(parse(&rec[1])? != 0.0);
            for k in 0..channels {
                data.push(parse(&rec[k + 2])?);
            }
        }
        Ok(Self { channels, data, visible })
    }
}

/// Averages bilinear samples from every view that has the point in front of it; points seen
/// by no view get zeros and `visible = false`. The result does not depend on view order.
pub fn lift_features(points: &[Vec3], views: &[(CameraView, FeatureMap)]) -> Result<VoxelFeatures> {
    let first = views.first().ok_or_else(|| invalid("feature lifting needs at least one view"))?;
    let c = first.1.channels();
    if views.iter().any(|(_, m)| m.channels() != c) {
        return Err(invalid("feature maps disagree on channel count"));
    }
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, ma) = &views[a];
        let (vb, mb) = &views[b];
        va.sort_key_cmp(vb)
            .then(ma.n.cmp(&mb.n))
            .then_with(|| ma.data.iter().map(|x| x.to_bits()).cmp(mb.data.iter().map(|x| x.to_bits())))
    });
    let mut data = vec![0.0; points.len() * c];
    let mut visible = vec![false; points.len()];
    let mut sample = vec![0.0; c];
    let mut sum = vec![0.0; c];
    let mut lo = vec![0.0; c];
    let mut hi = vec![0.0; c];
    for (i, p) in points.iter().enumerate() {
        let mut count = 0usize;
        sum.fill(0.0);
        lo.fill(f64::INFINITY);
        hi.fill(f64::NEG_INFINITY);
        for &vi in &order {
            let (view, map) = &views[vi];
            let proj = view.project(*p);
            if !proj.in_front {
                continue;
            }
            map.sample_into(proj.uv, &mut sample);
            for k in 0..c {
                sum[k] += sample[k];
                lo[k] = lo[k].min(sample[k]);
                hi[k] = hi[k].max(sample[k]);
            }
            count += 1;
        }
        if count > 0 {
            visible[i] = true;
            // Clamping keeps the mean inside the sample hull, exact for identical samples.
            for k in 0..c {
                data[i * c + k] = (sum[k] / count as f64).clamp(lo[k], hi[k]);
            }
        }
    }
    Ok(VoxelFeatures { channels: c, data, visible })
}

/// Reads a JSON list of camera objects.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    let views: Vec<CameraView> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for v in &views {
        v.validate()?;
    }
    Ok(views)
}
