//! Gaussian-splat assets: loading, density field, meshing and texture baking.

mod bake;
mod field;
mod marching;
mod render;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType, ScalarType};
use ply_rs::writer::Writer;
use thiserror::Error;

use crate::geometry::Vec3;

pub use bake::{bake_texture, BakeOptions};
pub use field::{weighted_opacity_field, GridSpec, ScalarGrid};
pub use marching::{marching_cubes, radial_deviation};
pub use render::{render_splats, SplatImage};

/// Zeroth-order spherical-harmonics constant.
pub const SH_C0: f64 = 0.28209479177387814;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("missing PLY vertex property `{0}`")]
    MissingField(String),
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("malformed PLY payload: {0}")]
    MalformedPayload(String),
    #[error("splat {index} has a scale component below 1e-9")]
    DegenerateScale { index: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("at least one bake view is required")]
    NoViews,
    #[error("cannot bake an empty mesh")]
    EmptyMesh,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    /// Linear standard deviations along the local axes.
    pub scale: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    /// Base RGB in `[0,1]`.
    pub color: Vec3,
}

impl Gaussian {
    pub fn isotropic(mean: Vec3, sigma: f64, opacity: f64, color: Vec3) -> Self {
        Self {
            mean,
            scale: Vec3::repeat(sigma),
            rotation: UnitQuaternion::identity(),
            opacity,
            color,
        }
    }

    /// `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        r * Matrix3::from_diagonal(&self.scale.component_mul(&self.scale)) * r.transpose()
    }

    /// Inverse covariance built from the factors, avoiding a general inverse.
    pub fn precision(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let inv = self.scale.map(|s| 1.0 / (s * s));
        r * Matrix3::from_diagonal(&inv) * r.transpose()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub splats: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(splats: Vec<Gaussian>) -> Self {
        Self { splats }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

const FIELDS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

pub fn load_gaussians(path: impl AsRef<Path>) -> Result<GaussianCloud, SplatError> {
    decode_gaussians(&mut BufReader::new(File::open(path)?))
}

/// Decodes a splat PLY (`rot_0` is the quaternion's real part).
pub fn decode_gaussians(reader: &mut impl Read) -> Result<GaussianCloud, SplatError> {
    let mut reader = BufReader::new(reader);
    let parser = Parser::<DefaultElement>::new();
    let header = parser
        .read_header(&mut reader)
        .map_err(|e| SplatError::MalformedHeader(e.to_string()))?;
    let vertex = header
        .elements
        .get("vertex")
        .ok_or_else(|| SplatError::MalformedHeader("no `vertex` element".into()))?;
    for f in FIELDS {
        match vertex.properties.get(f) {
            None => return Err(SplatError::MissingField(f.to_string())),
            Some(p) if matches!(p.data_type, PropertyType::List(..)) => {
                return Err(SplatError::MalformedHeader(format!("`{f}` is a list property")))
            }
            Some(_) => {}
        }
    }
    let mut splats = Vec::with_capacity(vertex.count);
    for (name, element) in &header.elements {
        let rows = parser
            .read_payload_for_element(&mut reader, element, &header)
            .map_err(|e| SplatError::MalformedPayload(e.to_string()))?;
        if name != "vertex" {
            continue;
        }
        for row in rows {
            let get = |k: &str| row.get(k).and_then(scalar).unwrap_or(f64::NAN);
            let v = |a: &str, b: &str, c: &str| Vec3::new(get(a), get(b), get(c));
            let q = Quaternion::new(get("rot_0"), get("rot_1"), get("rot_2"), get("rot_3"));
            let rotation = if q.norm() > 0.0 {
                UnitQuaternion::from_quaternion(q)
            } else {
                UnitQuaternion::identity()
            };
            let dc = v("f_dc_0", "f_dc_1", "f_dc_2");
            splats.push(Gaussian {
                mean: v("x", "y", "z"),
                scale: v("scale_0", "scale_1", "scale_2").map(f64::exp),
                rotation,
                opacity: sigmoid(get("opacity")),
                color: dc.map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0)),
            });
        }
    }
    Ok(GaussianCloud { splats })
}

pub fn save_gaussians(path: impl AsRef<Path>, cloud: &GaussianCloud) -> Result<(), SplatError> {
    let mut out = BufWriter::new(File::create(path)?);
    encode_gaussians(&mut out, cloud)?;
    out.flush()?;
    Ok(())
}

/// Binary little-endian PLY with float properties, inverting the load activations.
pub fn encode_gaussians(out: &mut impl Write, cloud: &GaussianCloud) -> Result<(), SplatError> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut vertex = ElementDef::new("vertex".into());
    for f in FIELDS {
        vertex.properties.insert(
            f.to_string(),
            PropertyDef::new(f.to_string(), PropertyType::Scalar(ScalarType::Float)),
        );
    }
    vertex.count = cloud.len();
    ply.header.elements.insert("vertex".into(), vertex);
    let rows = cloud
        .splats
        .iter()
        .map(|g| {
            let q = g.rotation.quaternion();
            let logit = (g.opacity / (1.0 - g.opacity)).ln();
            let dc = g.color.map(|c| (c - 0.5) / SH_C0);
            let values = [
                g.mean.x,
                g.mean.y,
                g.mean.z,
                dc.x,
                dc.y,
                dc.z,
                logit,
                g.scale.x.ln(),
                g.scale.y.ln(),
                g.scale.z.ln(),
                q.w,
                q.i,
                q.j,
                q.k,
            ];
            let mut row = DefaultElement::new();
            for (f, v) in FIELDS.iter().zip(values) {
                row.insert(f.to_string(), Property::Float(v as f32));
            }
            row
        })
        .collect();
    ply.payload.insert("vertex".into(), rows);
    Writer::new().write_ply(out, &mut ply)?;
    Ok(())
}
