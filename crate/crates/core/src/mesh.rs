//! Triangle surface model and PLY/STL loading.
//!
//! PLY input (ASCII, binary little- or big-endian) needs a `vertex` element
//! with `x`, `y`, `z` (float or double) and optionally `red`, `green`, `blue`
//! (uchar in 0..=255, or float/double in [0, 1]), followed by a `face`
//! element with a `vertex_indices` (or `vertex_index`) list. Polygons with
//! more than three corners are fan-triangulated. STL (ASCII or binary) is
//! accepted without colour.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};
use thiserror::Error;

/// Twice-area threshold below which a triangle counts as degenerate, mm².
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum MeshError {
    #[error("triangle {triangle} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange { triangle: usize, index: usize, count: usize },
    #[error("triangle {0} has (near) zero area")]
    DegenerateTriangle(usize),
    #[error("{count} colours for {vertices} vertices")]
    ColorCount { count: usize, vertices: usize },
    #[error("non-finite vertex {0}")]
    NonFinite(usize),
    #[error("unsupported mesh file extension: {0}")]
    UnsupportedFormat(String),
    #[error("malformed mesh {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[u32; 3]>,
    colors: Option<Vec<Rgb>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[u32; 3]>, colors: Option<Vec<Rgb>>) -> Result<Self, MeshError> {
        if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(MeshError::NonFinite(i));
        }
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(MeshError::ColorCount { count: c.len(), vertices: vertices.len() });
            }
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i as usize >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange { triangle: t, index: i as usize, count: vertices.len() });
                }
            }
            let [a, b, c] = tri.map(|i| vertices[i as usize]);
            if (b - a).cross(&(c - a)).norm() <= DEGENERATE_AREA {
                return Err(MeshError::DegenerateTriangle(t));
            }
        }
        Ok(Self { vertices, triangles, colors: colors.map(|c| c.into_iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect()) })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn with_colors(mut self, colors: Vec<Rgb>) -> Result<Self, MeshError> {
        if colors.len() != self.vertices.len() {
            return Err(MeshError::ColorCount { count: colors.len(), vertices: self.vertices.len() });
        }
        self.colors = Some(colors);
        Ok(self)
    }

    /// Concatenate two meshes.
    pub fn merged(&self, other: &TriangleMesh) -> TriangleMesh {
        let offset = self.vertices.len() as u32;
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut triangles = self.triangles.clone();
        triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + offset)));
        let colors = match (&self.colors, &other.colors) {
            (None, None) => None,
            (a, b) => {
                let grey = |n: usize| vec![[0.5f32; 3]; n];
                let mut c = a.clone().unwrap_or_else(|| grey(self.vertices.len()));
                c.extend(b.clone().unwrap_or_else(|| grey(other.vertices.len())));
                Some(c)
            }
        };
        TriangleMesh { vertices, triangles, colors }
    }

    /// Axis-aligned rectangle at constant `z`, split into `nx × ny` cells.
    pub fn plane_z(x0: f64, x1: f64, y0: f64, y1: f64, z: f64, nx: usize, ny: usize) -> TriangleMesh {
        Self::grid(nx, ny, |s, t| Point3::new(x0 + (x1 - x0) * s, y0 + (y1 - y0) * t, z))
    }

    /// Regular grid surface `(s, t) ∈ [0,1]² → point`, two triangles per cell.
    pub fn grid(nx: usize, ny: usize, point: impl Fn(f64, f64) -> Point3<f64>) -> TriangleMesh {
        let (nx, ny) = (nx.max(1), ny.max(1));
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(point(i as f64 / nx as f64, j as f64 / ny as f64));
            }
        }
        let idx = |i: usize, j: usize| (j * (nx + 1) + i) as u32;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        TriangleMesh { vertices, triangles, colors: None }
    }

    /// Geodesic sphere built by subdividing an icosahedron.
    pub fn icosphere(center: Point3<f64>, radius: f64, subdivisions: usize) -> TriangleMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<nalgebra::Vector3<f64>> = [
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|v| nalgebra::Vector3::new(v[0], v[1], v[2]).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut cache = std::collections::HashMap::new();
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<nalgebra::Vector3<f64>>| -> u32 {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                    (verts.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let vertices = verts.into_iter().map(|v| center + v * radius).collect();
        TriangleMesh { vertices, triangles: faces, colors: None }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MeshError + '_ {
    move |source| MeshError::Io { path: path.display().to_string(), source }
}

fn malformed(path: &Path, reason: impl Into<String>) -> MeshError {
    MeshError::Malformed { path: path.display().to_string(), reason: reason.into() }
}

/// Load a PLY or STL file, chosen by extension.
pub fn load_mesh(path: &Path) -> Result<TriangleMesh, MeshError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "ply" => load_ply(path),
        "stl" => load_stl(path),
        other => Err(MeshError::UnsupportedFormat(other.to_string())),
    }
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn color_channel(p: &Property) -> Option<f32> {
    match *p {
        Property::Float(v) => Some(v),
        Property::Double(v) => Some(v as f32),
        ref other => scalar(other).map(|v| (v / 255.0) as f32),
    }
}

fn index_list(p: &Property) -> Option<Vec<i64>> {
    Some(match p {
        Property::ListChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListInt(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUInt(v) => v.iter().map(|&x| x as i64).collect(),
        _ => return None,
    })
}

pub fn load_ply(path: &Path) -> Result<TriangleMesh, MeshError> {
    let mut reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let ply = Parser::<DefaultElement>::new()
        .read_ply(&mut reader)
        .map_err(|e| malformed(path, e.to_string()))?;
    let raw_vertices = ply.payload.get("vertex").ok_or_else(|| malformed(path, "no vertex element"))?;

    let mut vertices = Vec::with_capacity(raw_vertices.len());
    let mut colors = Vec::with_capacity(raw_vertices.len());
    let mut has_color = true;
    for (i, v) in raw_vertices.iter().enumerate() {
        let coord = |k: &str| {
            v.get(k).and_then(scalar).ok_or_else(|| malformed(path, format!("vertex {i} lacks numeric '{k}'")))
        };
        vertices.push(Point3::new(coord("x")?, coord("y")?, coord("z")?));
        match (v.get("red"), v.get("green"), v.get("blue")) {
            (Some(r), Some(g), Some(b)) if has_color => {
                let c = [color_channel(r), color_channel(g), color_channel(b)];
                match c {
                    [Some(r), Some(g), Some(b)] => colors.push([r, g, b]),
                    _ => has_color = false,
                }
            }
            _ => has_color = false,
        }
    }

    let mut triangles = Vec::new();
    if let Some(faces) = ply.payload.get("face") {
        for (fi, face) in faces.iter().enumerate() {
            let list = face
                .get("vertex_indices")
                .or_else(|| face.get("vertex_index"))
                .and_then(index_list)
                .ok_or_else(|| malformed(path, format!("face {fi} lacks a vertex_indices list")))?;
            if list.len() < 3 {
                return Err(malformed(path, format!("face {fi} has {} corners", list.len())));
            }
            if list.iter().any(|&i| i < 0 || i > u32::MAX as i64) {
                return Err(malformed(path, format!("face {fi} has a negative or oversized index")));
            }
            for k in 1..list.len() - 1 {
                triangles.push([list[0] as u32, list[k] as u32, list[k + 1] as u32]);
            }
        }
    }
    let colors = (has_color && !vertices.is_empty()).then_some(colors);
    TriangleMesh::new(vertices, triangles, colors)
}

pub fn load_stl(path: &Path) -> Result<TriangleMesh, MeshError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let stl = stl_io::read_stl(&mut file).map_err(|e| malformed(path, e.to_string()))?;
    let vertices = stl.vertices.iter().map(|v| Point3::new(v[0] as f64, v[1] as f64, v[2] as f64)).collect();
    let triangles = stl.faces.iter().map(|f| f.vertices.map(|i| i as u32)).collect();
    TriangleMesh::new(vertices, triangles, None)
}

/// Write a PLY file (`x y z` as double, optional `red green blue` uchar,
/// `vertex_indices` as uchar-counted uint list).
pub fn save_ply(mesh: &TriangleMesh, path: &Path, binary: bool) -> Result<(), MeshError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_ply(mesh, &mut out, binary).and_then(|_| out.flush()).map_err(io_err(path))
}

fn write_ply(mesh: &TriangleMesh, out: &mut impl Write, binary: bool) -> std::io::Result<()> {
    let format = if binary { "binary_little_endian" } else { "ascii" };
    writeln!(out, "ply\nformat {format} 1.0")?;
    writeln!(out, "element vertex {}", mesh.vertices.len())?;
    writeln!(out, "property double x\nproperty double y\nproperty double z")?;
    if mesh.colors.is_some() {
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(out, "element face {}", mesh.triangles.len())?;
    writeln!(out, "property list uchar uint vertex_indices\nend_header")?;
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in mesh.vertices.iter().enumerate() {
        let rgb = mesh.colors.as_ref().map(|c| c[i].map(byte));
        if binary {
            for c in [p.x, p.y, p.z] {
                out.write_all(&c.to_le_bytes())?;
            }
            if let Some(rgb) = rgb {
                out.write_all(&rgb)?;
            }
        } else {
            write!(out, "{:?} {:?} {:?}", p.x, p.y, p.z)?;
            if let Some([r, g, b]) = rgb {
                write!(out, " {r} {g} {b}")?;
            }
            writeln!(out)?;
        }
    }
    for t in &mesh.triangles {
        if binary {
            out.write_all(&[3])?;
            for i in t {
                out.write_all(&i.to_le_bytes())?;
            }
        } else {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
    }
    Ok(())
}
