//! Textured triangle meshes and their OBJ/MTL/PNG file triplet.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("failed to parse OBJ {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("texture: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Triangle mesh with an optional texture atlas.
///
/// Texture coordinates are indexed per triangle corner (`uv_triangles`) so a
/// vertex can carry different UVs in different charts, as in OBJ. UVs follow
/// the OBJ convention: `v = 0` is the bottom row of the texture image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TexturedMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub uvs: Vec<[f64; 2]>,
    pub uv_triangles: Vec<[u32; 3]>,
    pub texture: Option<RgbaImage>,
}

impl TexturedMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn has_uvs(&self) -> bool {
        !self.uv_triangles.is_empty()
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let nv = self.vertices.len() as u32;
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(MeshError::Invalid("non-finite vertex".into()));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= nv)) {
            return Err(MeshError::Invalid(format!(
                "triangle {t:?} out of range for {nv} vertices"
            )));
        }
        if self.has_uvs() {
            if self.uv_triangles.len() != self.triangles.len() {
                return Err(MeshError::Invalid(format!(
                    "{} uv triangles for {} triangles",
                    self.uv_triangles.len(),
                    self.triangles.len()
                )));
            }
            let nt = self.uvs.len() as u32;
            if self.uv_triangles.iter().flatten().any(|&i| i >= nt) {
                return Err(MeshError::Invalid("uv index out of range".into()));
            }
            if self.uvs.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(MeshError::Invalid("uv outside [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the vertices, `None` when there are none.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    pub fn triangle_points(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Unnormalized face normal (counter-clockwise winding).
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle_points(t);
        (b - a).cross(&(c - a))
    }

    /// Undirected edges with the number of triangles using each.
    pub fn edge_valence(&self) -> std::collections::BTreeMap<(u32, u32), usize> {
        let mut m = std::collections::BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Axis-aligned cube of side `size` centered at the origin, outward wound,
    /// with one texture chart per face over a solid-colored texture.
    pub fn cube(size: f64, color: [u8; 4]) -> Self {
        let h = 0.5 * size;
        let mut mesh = TexturedMesh {
            uvs: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            texture: Some(RgbaImage::from_pixel(4, 4, Rgba(color))),
            ..Default::default()
        };
        // (normal axis, sign); the quad is built counter-clockwise seen from outside
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let n = Vec3::ith(axis, sign);
                let u = Vec3::ith((axis + 1) % 3, 1.0);
                let v = n.cross(&u);
                let base = mesh.vertices.len() as u32;
                for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    mesh.vertices.push(h * (n + a * u + b * v));
                }
                mesh.triangles.push([base, base + 1, base + 2]);
                mesh.triangles.push([base, base + 2, base + 3]);
                mesh.uv_triangles.push([0, 1, 2]);
                mesh.uv_triangles.push([0, 2, 3]);
            }
        }
        mesh
    }
}

/// Paths of the OBJ/MTL/PNG triplet for an output stem such as `out/model`.
pub fn triplet_paths(stem: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        stem.with_extension("obj"),
        stem.with_extension("mtl"),
        stem.with_extension("png"),
    )
}

/// Writes `<stem>.obj`, `<stem>.mtl` and (when textured) `<stem>.png`.
pub fn save_obj(stem: impl AsRef<Path>, mesh: &TexturedMesh) -> Result<(), MeshError> {
    mesh.validate()?;
    let (obj_path, mtl_path, png_path) = triplet_paths(stem.as_ref());
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();

    let mut obj = String::new();
    writeln!(obj, "mtllib {}", name(&mtl_path)).unwrap();
    for v in &mesh.vertices {
        writeln!(obj, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for t in &mesh.uvs {
        writeln!(obj, "vt {} {}", t[0], t[1]).unwrap();
    }
    writeln!(obj, "usemtl material0").unwrap();
    for (i, t) in mesh.triangles.iter().enumerate() {
        if mesh.has_uvs() {
            let u = mesh.uv_triangles[i];
            writeln!(
                obj,
                "f {}/{} {}/{} {}/{}",
                t[0] + 1,
                u[0] + 1,
                t[1] + 1,
                u[1] + 1,
                t[2] + 1,
                u[2] + 1
            )
            .unwrap();
        } else {
            writeln!(obj, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
        }
    }
    fs::write(&obj_path, obj)?;

    let mut mtl = String::from("newmtl material0\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\n");
    if let Some(tex) = &mesh.texture {
        writeln!(mtl, "map_Kd {}", name(&png_path)).unwrap();
        tex.save_with_format(&png_path, image::ImageFormat::Png)?;
    }
    fs::write(&mtl_path, mtl)?;
    Ok(())
}

/// Reads an OBJ file (triangulating polygons) and the diffuse texture named by its MTL.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TexturedMesh, MeshError> {
    let path = path.as_ref();
    let parse_err = |message: String| MeshError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let options = tobj::LoadOptions {
        triangulate: true,
        single_index: false,
        ..Default::default()
    };
    let (models, materials) = tobj::load_obj(path, &options).map_err(|e| parse_err(e.to_string()))?;
    let mut mesh = TexturedMesh::default();
    for m in &models {
        let m = &m.mesh;
        let v0 = mesh.vertices.len() as u32;
        let t0 = mesh.uvs.len() as u32;
        mesh.vertices
            .extend(m.positions.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])));
        mesh.uvs.extend(m.texcoords.chunks_exact(2).map(|t| [t[0], t[1]]));
        for t in m.indices.chunks_exact(3) {
            mesh.triangles.push([t[0] + v0, t[1] + v0, t[2] + v0]);
        }
        if !m.texcoord_indices.is_empty() {
            for t in m.texcoord_indices.chunks_exact(3) {
                mesh.uv_triangles.push([t[0] + t0, t[1] + t0, t[2] + t0]);
            }
        }
    }
    if mesh.has_uvs() && mesh.uv_triangles.len() != mesh.triangles.len() {
        return Err(parse_err("texture coordinates on only some faces".into()));
    }
    if let Ok(materials) = materials {
        if let Some(tex) = materials.iter().find_map(|m| m.diffuse_texture.clone()) {
            let tex_path = path.parent().unwrap_or(Path::new(".")).join(tex);
            mesh.texture = Some(image::open(&tex_path)?.to_rgba8());
        }
    }
    mesh.validate()?;
    Ok(mesh)
}
