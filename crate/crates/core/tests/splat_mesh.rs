use nalgebra::UnitQuaternion;
use placekit_core::geometry::Vec3;
use placekit_core::mesh::TexturedMesh;
use placekit_core::splat::{
    bake_texture, load_gaussians, marching_cubes, radial_deviation, save_gaussians, weighted_opacity_field,
    BakeOptions, Gaussian, GaussianCloud, GridSpec,
};
use proptest::prelude::*;

const SIGMA: f64 = 0.1;

fn level_radius() -> f64 {
    SIGMA * (2.0 * 2f64.ln()).sqrt()
}

fn unit_box(n: usize) -> GridSpec {
    GridSpec::cubic(n).with_bounds(Vec3::repeat(-0.5), Vec3::repeat(0.5))
}

fn single_splat() -> GaussianCloud {
    GaussianCloud::new(vec![Gaussian::isotropic(Vec3::zeros(), SIGMA, 1.0, Vec3::repeat(0.5))])
}

fn sphere_mesh(n: usize, cloud: &GaussianCloud) -> TexturedMesh {
    marching_cubes(&weighted_opacity_field(cloud, &unit_box(n)).unwrap(), 0.5)
}

fn is_closed_genus_zero(m: &TexturedMesh) -> bool {
    let edges = m.edge_valence();
    let euler = m.vertices.len() as i64 - edges.len() as i64 + m.triangles.len() as i64;
    edges.values().all(|&n| n == 2) && euler == 2
}

/// Texel colors of the occupied (chart) texels, with the 3D point they map to.
fn chart_texels(m: &TexturedMesh) -> Vec<(Vec3, [f64; 3])> {
    let tex = m.texture.as_ref().unwrap();
    let (w, h) = (tex.width() as f64, tex.height() as f64);
    let mut out = Vec::new();
    for (t, uvt) in m.uv_triangles.iter().enumerate() {
        let uv = uvt.map(|i| m.uvs[i as usize]);
        let px = uv.map(|[u, v]| (u * w - 0.5, (1.0 - v) * h - 0.5));
        let (x0, y0) = (px[0].0.round() as i64, px[0].1.round() as i64);
        let side = (px[1].0 - px[0].0).round() as i64;
        let pts = m.triangle_points(t);
        for dy in 0..=side {
            for dx in 0..=side - dy {
                let (s, r) = (dx as f64 / side as f64, dy as f64 / side as f64);
                let p = (1.0 - s - r) * pts[0] + s * pts[1] + r * pts[2];
                let c = tex.get_pixel((x0 + dx) as u32, (y0 + dy) as u32).0;
                out.push((p, [c[0], c[1], c[2]].map(|v| v as f64 / 255.0)));
            }
        }
    }
    out
}

#[test]
fn single_splat_sphere_at_64() {
    let m = sphere_mesh(64, &single_splat());
    assert!(is_closed_genus_zero(&m));
    let r = level_radius();
    let dev = radial_deviation(&m, &Vec3::zeros(), r);
    assert!(dev <= 0.05 * r, "deviation {dev} vs radius {r}");
}

#[test]
fn deviation_decreases_with_resolution() {
    let cloud = single_splat();
    let r = level_radius();
    let devs: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| radial_deviation(&sphere_mesh(n, &cloud), &Vec3::zeros(), r))
        .collect();
    assert!(devs[0] > devs[1] && devs[1] > devs[2], "{devs:?}");
}

#[test]
fn anisotropic_splat_gives_closed_ellipsoid() {
    let mut g = Gaussian::isotropic(Vec3::new(0.02, -0.01, 0.03), SIGMA, 0.9, Vec3::zeros());
    g.scale = Vec3::new(0.12, 0.06, 0.09);
    g.rotation = UnitQuaternion::from_euler_angles(0.3, -0.5, 1.1);
    let m = sphere_mesh(64, &GaussianCloud::new(vec![g.clone()]));
    assert!(is_closed_genus_zero(&m));
    // every vertex lies on the analytic level set m = 2 ln(α / iso)
    let target = 2.0 * (0.9f64 / 0.5).ln();
    let p = g.precision();
    for v in &m.vertices {
        let d = v - g.mean;
        let maha = d.dot(&(p * d));
        assert!((maha.sqrt() - target.sqrt()).abs() < 0.05 * target.sqrt());
    }
}

#[test]
fn below_iso_field_is_empty() {
    let cloud = GaussianCloud::new(vec![Gaussian::isotropic(Vec3::zeros(), SIGMA, 0.4, Vec3::zeros())]);
    assert!(sphere_mesh(32, &cloud).is_empty());
}

#[test]
fn constant_color_bake() {
    let splats = [
        Vec3::new(-0.04, 0.0, 0.0),
        Vec3::new(0.04, 0.02, 0.0),
        Vec3::new(0.0, -0.02, 0.03),
    ]
    .iter()
    .map(|&c| Gaussian::isotropic(c, SIGMA, 0.95, Vec3::repeat(0.5)))
    .collect();
    let cloud = GaussianCloud::new(splats);
    let mesh = sphere_mesh(48, &cloud);
    let baked = bake_texture(&mesh, &cloud, &BakeOptions::default()).unwrap();
    baked.validate().unwrap();
    let texels = chart_texels(&baked);
    let good = texels
        .iter()
        .filter(|(_, c)| c.iter().all(|v| (v - 0.5).abs() <= 0.05))
        .count();
    let frac = good as f64 / texels.len() as f64;
    assert!(frac >= 0.99, "{frac}");
}

#[test]
fn two_color_bake_splits_hemispheres() {
    let cloud = GaussianCloud::new(vec![
        Gaussian::isotropic(Vec3::new(-0.1, 0.0, 0.0), SIGMA, 0.95, Vec3::new(1.0, 0.0, 0.0)),
        Gaussian::isotropic(Vec3::new(0.1, 0.0, 0.0), SIGMA, 0.95, Vec3::new(0.0, 0.0, 1.0)),
    ]);
    let mesh = sphere_mesh(64, &cloud);
    assert!(is_closed_genus_zero(&mesh));
    let baked = bake_texture(&mesh, &cloud, &BakeOptions::default()).unwrap();
    let texels = chart_texels(&baked);
    let correct = texels.iter().filter(|(p, c)| (p.x < 0.0) == (c[0] > c[2])).count();
    let frac = correct as f64 / texels.len() as f64;
    assert!(frac >= 0.90, "{frac}");
}

#[test]
fn baked_mesh_survives_obj_round_trip() {
    let cloud = single_splat();
    let mesh = sphere_mesh(24, &cloud);
    let opts = BakeOptions {
        n_views: 4,
        tex_size: 128,
        render_size: 128,
        ..Default::default()
    };
    let baked = bake_texture(&mesh, &cloud, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    placekit_core::mesh::save_obj(dir.path().join("m"), &baked).unwrap();
    let back = placekit_core::mesh::load_obj(dir.path().join("m.obj")).unwrap();
    // the loader renumbers vertices in first-use order; compare per corner
    assert_eq!(back.triangles.len(), baked.triangles.len());
    for t in 0..baked.triangles.len() {
        assert_eq!(back.triangle_points(t), baked.triangle_points(t));
        let uv = |m: &TexturedMesh| m.uv_triangles[t].map(|i| m.uvs[i as usize]);
        assert_eq!(uv(&back), uv(&baked));
    }
    assert_eq!(back.texture, baked.texture);
}

#[test]
fn ply_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.ply");
    save_gaussians(&path, &single_splat()).unwrap();
    let back = load_gaussians(&path).unwrap();
    let (a, b) = (&single_splat().splats[0], &back.splats[0]);
    assert!((a.scale - b.scale).amax() < 1e-6 && (a.opacity - b.opacity).abs() < 1e-6);
}

fn splat_strategy() -> impl Strategy<Value = Gaussian> {
    (
        prop::array::uniform3(-0.2f64..0.2),
        prop::array::uniform3(0.03f64..0.12),
        prop::array::uniform3(-3.0f64..3.0),
        0.05f64..1.0,
    )
        .prop_map(|(m, s, e, a)| {
            let mut g = Gaussian::isotropic(Vec3::from(m), 0.1, a, Vec3::repeat(0.5));
            g.scale = Vec3::from(s);
            g.rotation = UnitQuaternion::from_euler_angles(e[0], e[1], e[2]);
            g
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn field_is_additive_over_disjoint_clouds(
        a in prop::collection::vec(splat_strategy(), 1..6),
        b in prop::collection::vec(splat_strategy(), 1..6),
    ) {
        let spec = unit_box(20);
        let fa = weighted_opacity_field(&GaussianCloud::new(a.clone()), &spec).unwrap();
        let fb = weighted_opacity_field(&GaussianCloud::new(b.clone()), &spec).unwrap();
        let fab = weighted_opacity_field(&GaussianCloud::new([a, b].concat()), &spec).unwrap();
        for i in 0..fab.values.len() {
            prop_assert_eq!(fab.values[i], fa.values[i] + fb.values[i]);
        }
    }

    #[test]
    fn isotropic_surface_is_rotation_invariant(e in prop::array::uniform3(-3.0f64..3.0)) {
        let base = sphere_mesh(32, &single_splat());
        let mut g = single_splat().splats[0].clone();
        g.rotation = UnitQuaternion::from_euler_angles(e[0], e[1], e[2]);
        let rotated = sphere_mesh(32, &GaussianCloud::new(vec![g]));
        prop_assert_eq!(base.vertices.len(), rotated.vertices.len());
        for (p, q) in base.vertices.iter().zip(&rotated.vertices) {
            prop_assert!((p.norm() - q.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn surface_separates_inside_from_outside(mean in prop::array::uniform3(-0.15f64..0.15)) {
        let cloud = GaussianCloud::new(vec![Gaussian::isotropic(Vec3::from(mean), SIGMA, 1.0, Vec3::zeros())]);
        let m = sphere_mesh(32, &cloud);
        prop_assert!(is_closed_genus_zero(&m));
        for t in 0..m.triangles.len() {
            let c = m.triangle_points(t).iter().sum::<Vec3>() / 3.0;
            prop_assert!(m.face_normal(t).dot(&(c - Vec3::from(mean))) > 0.0);
        }
    }
}
