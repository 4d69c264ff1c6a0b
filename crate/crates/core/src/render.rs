//! Software rasterizer for one eye of a [`RectifiedRig`].
//!
//! Triangles are transformed into the eye's camera frame, clipped against the
//! near and far planes, projected with the rig's pinhole model and scanned at
//! pixel centres `(i + 0.5, j + 0.5)` with a top-left fill rule. The depth
//! buffer stores OpenGL-style normalised depth
//! `z_gl = 0.5 + (n + f - 2nf/Z) / (2(f - n))`, which is affine in `1/Z` and
//! therefore interpolates exactly in screen space.
//!
//! The image is split into horizontal bands rendered in parallel. Each pixel
//! is computed from scratch against the triangles in index order, so the
//! result does not depend on banding or thread count.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ColorImage, DimensionMismatch};
use crate::mesh::{Rgb, TriangleMesh};
use crate::rig::{Eye, RectifiedRig};
use crate::se3::RigidTransform;

pub const DEFAULT_Z_NEAR: f64 = 1.0;
pub const DEFAULT_Z_FAR: f64 = 1000.0;
pub const DEFAULT_TILE_ROWS: usize = 32;

/// Depth-test tie tolerance in normalised depth.
const DEPTH_TIE: f64 = 1e-12;

/// Colour given to vertices that no texture sample reached.
pub const UNSEEN_COLOR: Rgb = [1.0, 0.0, 1.0];

/// Flat-shading base colour when the mesh carries no vertex colours.
const FLAT_COLOR: Rgb = [0.92, 0.82, 0.72];
const WIRE_COLOR: Rgb = [0.1, 1.0, 0.3];
const POINT_COLOR: Rgb = [1.0, 0.9, 0.1];

const NO_TRIANGLE: u32 = u32::MAX;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error("normalised depth {0} is outside [0, 1]")]
    DepthOutOfRange(f64),
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    #[default]
    Solid,
    Wireframe,
    Points,
}

impl std::str::FromStr for RenderMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "solid" => Ok(RenderMode::Solid),
            "wireframe" | "lines" => Ok(RenderMode::Wireframe),
            "points" => Ok(RenderMode::Points),
            other => Err(format!("unknown render mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub z_near: f64,
    pub z_far: f64,
    pub mode: RenderMode,
    /// Overlay opacity in [0, 1].
    pub alpha: f64,
    /// Rows per parallel band; any value gives identical output.
    pub tile_rows: usize,
    /// Depth slack (mm) when deciding whether a vertex or line is visible.
    pub visibility_tolerance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            z_near: DEFAULT_Z_NEAR,
            z_far: DEFAULT_Z_FAR,
            mode: RenderMode::Solid,
            alpha: 1.0,
            tile_rows: DEFAULT_TILE_ROWS,
            visibility_tolerance: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn with_clip(z_near: f64, z_far: f64) -> Result<Self, RenderError> {
        let c = Self { z_near, z_far, ..Self::default() };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.z_near > 0.0 && self.z_near < self.z_far && self.z_far.is_finite()) {
            return Err(RenderError::InvalidConfig(format!(
                "need 0 < z_near < z_far, got {} and {}",
                self.z_near, self.z_far
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RenderError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.tile_rows == 0 {
            return Err(RenderError::InvalidConfig("tile_rows must be positive".into()));
        }
        if !(self.visibility_tolerance >= 0.0) {
            return Err(RenderError::InvalidConfig("visibility tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Metric depth from normalised depth-buffer value.
pub fn linearize_depth(z_gl: f64, z_near: f64, z_far: f64) -> Result<f64, RenderError> {
    if !(0.0..=1.0).contains(&z_gl) {
        return Err(RenderError::DepthOutOfRange(z_gl));
    }
    Ok(-2.0 * z_near * z_far / (2.0 * (z_gl - 0.5) * (z_far - z_near) - z_near - z_far))
}

/// Normalised depth-buffer value of metric depth `z` (inverse of
/// [`linearize_depth`]).
pub fn normalize_depth(z: f64, z_near: f64, z_far: f64) -> f64 {
    0.5 + (z_near + z_far - 2.0 * z_near * z_far / z) / (2.0 * (z_far - z_near))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    width: u32,
    height: u32,
    z_near: f64,
    z_far: f64,
    z_gl: Vec<f64>,
}

impl DepthBuffer {
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn z_near(&self) -> f64 {
        self.z_near
    }
    pub fn z_far(&self) -> f64 {
        self.z_far
    }
    pub fn z_gl(&self) -> &[f64] {
        &self.z_gl
    }

    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.z_gl[y as usize * self.width as usize + x as usize]
    }

    /// Metric depth at a pixel, `None` on the back plane.
    pub fn depth_at(&self, x: u32, y: u32) -> Option<f64> {
        let z = self.at(x, y);
        (z < 1.0).then(|| linearize_depth(z, self.z_near, self.z_far).unwrap_or(f64::NAN))
    }
}

/// Per-pixel winning fragment.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Fragment {
    z_gl: f64,
    triangle: u32,
    /// Perspective-correct barycentrics against the original triangle.
    bary: [f64; 3],
}

const BACKGROUND: Fragment = Fragment { z_gl: 1.0, triangle: NO_TRIANGLE, bary: [0.0; 3] };

/// A projected, clipped triangle ready for scanning.
#[derive(Debug, Clone, Copy)]
struct ScreenTriangle {
    source: u32,
    xy: [[f64; 2]; 3],
    z_gl: [f64; 3],
    inv_z: [f64; 3],
    /// Barycentrics of each corner w.r.t. the original triangle.
    bary: [[f64; 3]; 3],
    row_min: usize,
    row_max: usize,
    col_min: usize,
    col_max: usize,
}

#[derive(Debug, Clone, Copy)]
struct ClipVertex {
    p: Vector3<f64>,
    bary: [f64; 3],
}

fn lerp_clip(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    ClipVertex {
        p: a.p + (b.p - a.p) * t,
        bary: [0, 1, 2].map(|k| a.bary[k] + (b.bary[k] - a.bary[k]) * t),
    }
}

/// Keep the part of `poly` where `sign * (z - plane) >= 0`.
fn clip_plane(poly: &[ClipVertex], plane: f64, sign: f64) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = &poly[i];
        let b = &poly[(i + 1) % poly.len()];
        let da = sign * (a.p.z - plane);
        let db = sign * (b.p.z - plane);
        if da >= 0.0 {
            out.push(*a);
        }
        if (da >= 0.0) != (db >= 0.0) {
            let t = da / (da - db);
            let mut v = lerp_clip(a, b, t);
            v.p.z = plane;
            out.push(v);
        }
    }
    out
}

/// Point in the eye's own camera frame.
pub fn to_eye_frame(rig: &RectifiedRig, eye: Eye, pose: &RigidTransform, p: &Point3<f64>) -> Vector3<f64> {
    let c = pose.apply(p).coords;
    Vector3::new(c.x - rig.eye_offset(eye), c.y, c.z)
}

struct Projector<'a> {
    rig: &'a RectifiedRig,
    eye: Eye,
    config: &'a RenderConfig,
}

impl Projector<'_> {
    fn screen(&self, p: &Vector3<f64>) -> [f64; 2] {
        let (cx, cy) = self.rig.principal_point(self.eye);
        [self.rig.f() * p.x / p.z + cx, self.rig.f() * p.y / p.z + cy]
    }

    fn z_gl(&self, z: f64) -> f64 {
        normalize_depth(z, self.config.z_near, self.config.z_far).clamp(0.0, 1.0)
    }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top or left edge for counter-clockwise (positive-area) winding in y-down
/// screen space.
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

fn project_triangles(
    mesh: &TriangleMesh,
    rig: &RectifiedRig,
    eye: Eye,
    pose: &RigidTransform,
    config: &RenderConfig,
) -> Vec<ScreenTriangle> {
    let proj = Projector { rig, eye, config };
    let cam: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| to_eye_frame(rig, eye, pose, v)).collect();
    let (w, h) = (rig.width() as f64, rig.height() as f64);
    let mut out = Vec::new();
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let corners = [0, 1, 2].map(|k| {
            let mut bary = [0.0; 3];
            bary[k] = 1.0;
            ClipVertex { p: cam[tri[k] as usize], bary }
        });
        let poly = clip_plane(&corners, config.z_near, 1.0);
        let poly = clip_plane(&poly, config.z_far, -1.0);
        if poly.len() < 3 {
            continue;
        }
        let xy: Vec<[f64; 2]> = poly.iter().map(|v| proj.screen(&v.p)).collect();
        for k in 1..poly.len() - 1 {
            let idx = [0, k, k + 1];
            let mut st = ScreenTriangle {
                source: t as u32,
                xy: idx.map(|i| xy[i]),
                z_gl: idx.map(|i| proj.z_gl(poly[i].p.z)),
                inv_z: idx.map(|i| 1.0 / poly[i].p.z),
                bary: idx.map(|i| poly[i].bary),
                row_min: 0,
                row_max: 0,
                col_min: 0,
                col_max: 0,
            };
            let area = edge(st.xy[0], st.xy[1], st.xy[2]);
            if area == 0.0 || !area.is_finite() {
                continue;
            }
            if area < 0.0 {
                st.xy.swap(1, 2);
                st.z_gl.swap(1, 2);
                st.inv_z.swap(1, 2);
                st.bary.swap(1, 2);
            }
            let min_x = st.xy.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let max_x = st.xy.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let min_y = st.xy.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let max_y = st.xy.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            // Pixel centres i + 0.5 inside [min, max].
            let lo = |v: f64| (v - 0.5).ceil().max(0.0);
            let hi = |v: f64, limit: f64| (v - 0.5).floor().min(limit - 1.0);
            let (c0, c1, r0, r1) = (lo(min_x), hi(max_x, w), lo(min_y), hi(max_y, h));
            if c0 > c1 || r0 > r1 {
                continue;
            }
            st.col_min = c0 as usize;
            st.col_max = c1 as usize;
            st.row_min = r0 as usize;
            st.row_max = r1 as usize;
            out.push(st);
        }
    }
    out
}

/// Scan one screen triangle at a pixel centre.
fn shade_pixel(st: &ScreenTriangle, px: [f64; 2]) -> Option<Fragment> {
    let [a, b, c] = st.xy;
    let e0 = edge(b, c, px);
    let e1 = edge(c, a, px);
    let e2 = edge(a, b, px);
    let inside = |e: f64, p: [f64; 2], q: [f64; 2]| e > 0.0 || (e == 0.0 && is_top_left(p, q));
    if !(inside(e0, b, c) && inside(e1, c, a) && inside(e2, a, b)) {
        return None;
    }
    let area = e0 + e1 + e2;
    let l = [e0 / area, e1 / area, e2 / area];
    let z_gl = l[0] * st.z_gl[0] + l[1] * st.z_gl[1] + l[2] * st.z_gl[2];
    let persp = [l[0] * st.inv_z[0], l[1] * st.inv_z[1], l[2] * st.inv_z[2]];
    let norm = persp[0] + persp[1] + persp[2];
    let mut bary = [0.0; 3];
    for (k, out) in bary.iter_mut().enumerate() {
        *out = (persp[0] * st.bary[0][k] + persp[1] * st.bary[1][k] + persp[2] * st.bary[2][k]) / norm;
    }
    Some(Fragment { z_gl: z_gl.clamp(0.0, 1.0), triangle: st.source, bary })
}

fn closer(candidate: &Fragment, current: &Fragment) -> bool {
    if (candidate.z_gl - current.z_gl).abs() <= DEPTH_TIE {
        candidate.triangle < current.triangle
    } else {
        candidate.z_gl < current.z_gl
    }
}

fn rasterize(
    mesh: &TriangleMesh,
    rig: &RectifiedRig,
    eye: Eye,
    pose: &RigidTransform,
    config: &RenderConfig,
) -> Result<Vec<Fragment>, RenderError> {
    config.validate()?;
    let (w, h) = (rig.width() as usize, rig.height() as usize);
    let mut frags = vec![BACKGROUND; w * h];
    let tris = project_triangles(mesh, rig, eye, pose, config);
    let band = config.tile_rows;
    frags.par_chunks_mut(band * w).enumerate().for_each(|(bi, chunk)| {
        let row0 = bi * band;
        let row1 = row0 + chunk.len() / w;
        for st in tris.iter().filter(|st| st.row_max >= row0 && st.row_min < row1) {
            for row in st.row_min.max(row0)..=st.row_max.min(row1 - 1) {
                let line = &mut chunk[(row - row0) * w..(row - row0 + 1) * w];
                for col in st.col_min..=st.col_max {
                    let px = [col as f64 + 0.5, row as f64 + 0.5];
                    if let Some(f) = shade_pixel(st, px) {
                        if f.z_gl < 1.0 && closer(&f, &line[col]) {
                            line[col] = f;
                        }
                    }
                }
            }
        }
    });
    Ok(frags)
}

/// Normalised depth buffer of `mesh` seen by one eye at `pose`.
pub fn rasterize_depth(
    mesh: &TriangleMesh,
    rig: &RectifiedRig,
    eye: Eye,
    pose: &RigidTransform,
    config: &RenderConfig,
) -> Result<DepthBuffer, RenderError> {
    let frags = rasterize(mesh, rig, eye, pose, config)?;
    Ok(DepthBuffer {
        width: rig.width(),
        height: rig.height(),
        z_near: config.z_near,
        z_far: config.z_far,
        z_gl: frags.iter().map(|f| f.z_gl).collect(),
    })
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn blend(fg: Rgb, bg: [u8; 3], alpha: f64) -> [u8; 3] {
    [0, 1, 2].map(|c| (alpha * fg[c] as f64 * 255.0 + (1.0 - alpha) * bg[c] as f64).round().clamp(0.0, 255.0) as u8)
}

fn solid_color(mesh: &TriangleMesh, normals: &[Vector3<f64>], frag: &Fragment) -> Rgb {
    let tri = mesh.triangles()[frag.triangle as usize];
    match mesh.colors() {
        Some(colors) => {
            let mut c = [0.0f32; 3];
            for k in 0..3 {
                let vc = colors[tri[k] as usize];
                for ch in 0..3 {
                    c[ch] += (frag.bary[k] as f32) * vc[ch];
                }
            }
            c.map(|v| v.clamp(0.0, 1.0))
        }
        None => {
            let shade = 0.25 + 0.75 * normals[frag.triangle as usize].z.abs();
            FLAT_COLOR.map(|v| v * shade as f32)
        }
    }
}

/// Render `mesh` in `config.mode` and alpha-blend it over `background`.
pub fn render_overlay(
    mesh: &TriangleMesh,
    rig: &RectifiedRig,
    eye: Eye,
    pose: &RigidTransform,
    config: &RenderConfig,
    background: &ColorImage,
) -> Result<ColorImage, RenderError> {
    background.check_size(rig.width(), rig.height())?;
    config.validate()?;
    let mut out = background.clone();
    if config.alpha == 0.0 || mesh.is_empty() {
        return Ok(out);
    }
    let frags = rasterize(mesh, rig, eye, pose, config)?;
    let w = rig.width() as usize;
    match config.mode {
        RenderMode::Solid => {
            let normals: Vec<Vector3<f64>> = mesh
                .triangles()
                .iter()
                .map(|t| {
                    let [a, b, c] = t.map(|i| to_eye_frame(rig, eye, pose, &mesh.vertices()[i as usize]));
                    (b - a).cross(&(c - a)).normalize()
                })
                .collect();
            for (px, frag) in out.pixels_mut().iter_mut().zip(&frags) {
                if frag.triangle != NO_TRIANGLE {
                    *px = blend(solid_color(mesh, &normals, frag), *px, config.alpha);
                }
            }
        }
        RenderMode::Wireframe | RenderMode::Points => {
            let marks = visible_marks(mesh, rig, eye, pose, config, &frags);
            for idx in marks {
                let color = if config.mode == RenderMode::Points { POINT_COLOR } else { WIRE_COLOR };
                let (x, y) = ((idx % w) as u32, (idx / w) as u32);
                out.set(x, y, blend(color, background.get(x, y), config.alpha));
            }
        }
    }
    Ok(out)
}

/// Pixels touched by visible edges (wireframe) or vertices (points), sorted
/// and deduplicated.
fn visible_marks(
    mesh: &TriangleMesh,
    rig: &RectifiedRig,
    eye: Eye,
    pose: &RigidTransform,
    config: &RenderConfig,
    frags: &[Fragment],
) -> Vec<usize> {
    let proj = Projector { rig, eye, config };
    let (w, h) = (rig.width() as usize, rig.height() as usize);
    let visible = |sx: f64, sy: f64, z: f64| -> Option<usize> {
        if !(sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64) {
            return None;
        }
        let idx = sy as usize * w + sx as usize;
        let buf = frags[idx].z_gl;
        let surface = if buf < 1.0 { linearize_depth(buf, config.z_near, config.z_far).ok()? } else { f64::INFINITY };
        (z <= surface + config.visibility_tolerance.max(0.02 * surface.min(config.z_far))).then_some(idx)
    };
    let cam: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| to_eye_frame(rig, eye, pose, v)).collect();
    let in_range = |p: &Vector3<f64>| p.z >= config.z_near && p.z <= config.z_far;
    let mut marks = Vec::new();
    match config.mode {
        RenderMode::Points => {
            for p in cam.iter().filter(|p| in_range(p)) {
                let [sx, sy] = proj.screen(p);
                marks.extend(visible(sx, sy, p.z));
            }
        }
        _ => {
            for tri in mesh.triangles() {
                for k in 0..3 {
                    let a = ClipVertex { p: cam[tri[k] as usize], bary: [0.0; 3] };
                    let b = ClipVertex { p: cam[tri[(k + 1) % 3] as usize], bary: [0.0; 3] };
                    // Clip the segment to the depth range.
                    let seg = clip_plane(&clip_plane(&[a, b], config.z_near, 1.0), config.z_far, -1.0);
                    if seg.len() < 2 {
                        continue;
                    }
                    let (pa, pb) = (seg[0].p, seg[seg.len() - 1].p);
                    let (sa, sb) = (proj.screen(&pa), proj.screen(&pb));
                    let len = ((sb[0] - sa[0]).powi(2) + (sb[1] - sa[1]).powi(2)).sqrt();
                    let steps = (len * 2.0).ceil().clamp(1.0, 1e5) as usize;
                    for s in 0..=steps {
                        let t = s as f64 / steps as f64;
                        // Screen-space interpolation of 1/Z for the depth.
                        let inv_z = (1.0 - t) / pa.z + t / pb.z;
                        let sx = sa[0] + (sb[0] - sa[0]) * t;
                        let sy = sa[1] + (sb[1] - sa[1]) * t;
                        marks.extend(visible(sx, sy, 1.0 / inv_z));
                    }
                }
            }
        }
    }
    marks.sort_unstable();
    marks.dedup();
    marks
}

/// Colour each vertex visible from the eye with the bilinear sample of
/// `image` at its projection. Hidden or out-of-view vertices get
/// [`UNSEEN_COLOR`].
pub fn project_texture(
    image: &ColorImage,
    rig: &RectifiedRig,
    eye: Eye,
    pose: &RigidTransform,
    mesh: &TriangleMesh,
    config: &RenderConfig,
) -> Result<TriangleMesh, RenderError> {
    image.check_size(rig.width(), rig.height())?;
    let depth = rasterize_depth(mesh, rig, eye, pose, config)?;
    let proj = Projector { rig, eye, config };
    let colors = mesh
        .vertices()
        .iter()
        .map(|v| {
            let p = to_eye_frame(rig, eye, pose, v);
            if !(p.z > config.z_near && p.z < config.z_far) {
                return UNSEEN_COLOR;
            }
            let [sx, sy] = proj.screen(&p);
            if !(sx >= 0.0 && sy >= 0.0 && sx < rig.width() as f64 && sy < rig.height() as f64) {
                return UNSEEN_COLOR;
            }
            let surface = depth.depth_at(sx as u32, sy as u32).unwrap_or(f64::INFINITY);
            if p.z > surface + config.visibility_tolerance {
                return UNSEEN_COLOR;
            }
            let x = (sx - 0.5).clamp(0.0, rig.width() as f64 - 1.0);
            let y = (sy - 0.5).clamp(0.0, rig.height() as f64 - 1.0);
            match image.sample_bilinear(x, y) {
                Some(s) => s.map(|c| (c / 255.0) as f32),
                None => UNSEEN_COLOR,
            }
        })
        .collect();
    Ok(mesh.clone().with_colors(colors).expect("one colour per vertex"))
}

/// Convert a colour in [0, 1] to bytes.
pub fn rgb_to_bytes(c: Rgb) -> [u8; 3] {
    c.map(|v| to_byte(v as f64))
}
