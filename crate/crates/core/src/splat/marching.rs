//! Marching cubes by face walking.
//!
//! Instead of a precomputed case table, each cube's contour is assembled from
//! the iso segments on its six faces. Ambiguous faces (alternating corners)
//! are resolved with the asymptotic decider, which depends only on the face's
//! four samples, so neighbouring cubes always agree and the surface is crack
//! free. Segments are oriented so that the high (inside) region lies to their
//! right when the face is viewed from outside the cube; the resulting loops
//! give triangles whose normals point down the field gradient.

use std::collections::HashMap;

use super::ScalarGrid;
use crate::geometry::Vec3;
use crate::mesh::TexturedMesh;

const CORNER: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

fn corner_index(c: [usize; 3]) -> usize {
    c[0] + 2 * c[1] + 4 * c[2]
}

/// Cube topology derived once: the 12 edges and the 6 faces as CCW corner cycles.
struct Topology {
    /// (lower corner, axis) of each edge.
    edges: [(usize, usize); 12],
    /// Edge id between two corners.
    edge_of: [[usize; 8]; 8],
    faces: [[usize; 4]; 6],
}

impl Topology {
    fn new() -> Self {
        let mut edges = [(0, 0); 12];
        let mut edge_of = [[usize::MAX; 8]; 8];
        let mut n = 0;
        for axis in 0..3 {
            for (c, pos) in CORNER.iter().enumerate() {
                if pos[axis] == 0 {
                    let mut other = *pos;
                    other[axis] = 1;
                    let o = corner_index(other);
                    edges[n] = (c, axis);
                    edge_of[c][o] = n;
                    edge_of[o][c] = n;
                    n += 1;
                }
            }
        }
        let mut faces = [[0; 4]; 6];
        for axis in 0..3 {
            for side in 0..2 {
                // local axes with e1 x e2 along the outward normal
                let (e1, e2) = if side == 1 {
                    ((axis + 1) % 3, (axis + 2) % 3)
                } else {
                    ((axis + 2) % 3, (axis + 1) % 3)
                };
                for (m, (a, b)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
                    let mut c = [0; 3];
                    c[axis] = side;
                    c[e1] = a;
                    c[e2] = b;
                    faces[2 * axis + side][m] = corner_index(c);
                }
            }
        }
        Self { edges, edge_of, faces }
    }
}

/// Whether the two high corners of an ambiguous face are joined through the
/// face interior. `a, c` and `b, d` are the diagonal pairs.
fn saddle_connects_high(a: f64, b: f64, c: f64, d: f64, iso: f64) -> bool {
    let den = (a + c) - (b + d);
    if den == 0.0 {
        return false;
    }
    let saddle = (a * c - b * d) / den;
    saddle > iso
}

/// Extracts the `iso` level set of `field`. Samples strictly above `iso` are
/// inside. An empty mesh is returned (with a warning) when nothing crosses.
pub fn marching_cubes(field: &ScalarGrid, iso: f64) -> TexturedMesh {
    let topo = Topology::new();
    let [nx, ny, nz] = field.resolution;
    let mut mesh = TexturedMesh::default();
    let mut vertex_of: HashMap<usize, u32> = HashMap::new();
    let lin = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let pos = CORNER.map(|o| [i + o[0], j + o[1], k + o[2]]);
                let vals = pos.map(|p| field.get(p[0], p[1], p[2]));
                let inside = vals.map(|v| v > iso);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }

                let mut next = [usize::MAX; 12];
                for face in &topo.faces {
                    let mut entering = Vec::with_capacity(2);
                    let mut leaving = Vec::with_capacity(2);
                    for m in 0..4 {
                        let (p, q) = (face[m], face[(m + 1) % 4]);
                        if inside[p] != inside[q] {
                            let e = topo.edge_of[p][q];
                            if inside[q] {
                                entering.push((m, e));
                            } else {
                                leaving.push((m, e));
                            }
                        }
                    }
                    match entering.len() {
                        0 => {}
                        1 => next[entering[0].1] = leaving[0].1,
                        _ => {
                            let v = face.map(|c| vals[c]);
                            let joined = saddle_connects_high(v[0], v[1], v[2], v[3], iso);
                            for &(m, e) in &entering {
                                let partner = if joined { (m + 3) % 4 } else { (m + 1) % 4 };
                                let l = leaving.iter().find(|(lm, _)| *lm == partner).unwrap();
                                next[e] = l.1;
                            }
                        }
                    }
                }

                let mut global = [u32::MAX; 12];
                for (e, &(c, axis)) in topo.edges.iter().enumerate() {
                    if next[e] == usize::MAX {
                        continue;
                    }
                    let p = pos[c];
                    let key = 3 * lin(p[0], p[1], p[2]) + axis;
                    global[e] = *vertex_of.entry(key).or_insert_with(|| {
                        let mut q = p;
                        q[axis] += 1;
                        let (v0, v1) = (field.get(p[0], p[1], p[2]), field.get(q[0], q[1], q[2]));
                        let t = (iso - v0) / (v1 - v0);
                        let a = field.point(p[0], p[1], p[2]);
                        let b = field.point(q[0], q[1], q[2]);
                        mesh.vertices.push(a + t * (b - a));
                        (mesh.vertices.len() - 1) as u32
                    });
                }

                let mut visited = [false; 12];
                for start in 0..12 {
                    if next[start] == usize::MAX || visited[start] {
                        continue;
                    }
                    let mut ring = Vec::with_capacity(12);
                    let mut e = start;
                    while !visited[e] {
                        visited[e] = true;
                        ring.push(global[e]);
                        e = next[e];
                    }
                    for w in 1..ring.len() - 1 {
                        mesh.triangles.push([ring[0], ring[w], ring[w + 1]]);
                    }
                }
            }
        }
    }
    if mesh.is_empty() {
        log::warn!("no lattice cell crosses iso level {iso}; returning an empty mesh");
    }
    mesh
}

/// Largest deviation of vertex distances from `r` around `center`.
pub fn radial_deviation(mesh: &TexturedMesh, center: &Vec3, r: f64) -> f64 {
    mesh.vertices
        .iter()
        .map(|v| ((v - center).norm() - r).abs())
        .fold(0.0, f64::max)
}
