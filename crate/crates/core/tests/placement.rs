use nalgebra::{Matrix3, UnitQuaternion};
use placekit_core::geometry::{se3_exp, Pose, Twist, Vec3};
use placekit_core::mesh::TexturedMesh;
use placekit_core::placement::{
    backproject_region, plane_frame, ransac_plane, solve_placement, Adjustment, PlaneModel, RansacOptions, Region,
    RegionSelection, MAX_REGION_POINTS,
};
use placekit_core::synthetic::{OrbitScene, Surface};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const FLOOR_BOX: [f64; 4] = [200.0, 380.0, 440.0, 470.0];

fn floor_selection() -> RegionSelection {
    RegionSelection {
        frame: 0,
        region: Region::Box(FLOOR_BOX),
    }
}

fn floor_points(scene: &OrbitScene) -> Vec<Vec3> {
    let depth = scene.depth_map(0);
    backproject_region(
        &floor_selection(),
        &depth,
        &scene.poses()[0],
        &scene.intr,
        MAX_REGION_POINTS,
    )
    .unwrap()
}

/// 80% of the points on `plane_n · x = d` with Gaussian noise, 20% uniform in a box.
fn noisy_plane(seed: u64, n: usize, normal: &Vec3, d: f64) -> (Vec<Vec3>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.002).unwrap();
    let n_hat = normal.normalize();
    let a = n_hat.cross(&Vec3::new(0.3, 1.0, 0.2)).normalize();
    let b = n_hat.cross(&a);
    let mut pts = Vec::new();
    let mut on = Vec::new();
    for i in 0..n {
        if i % 5 == 4 {
            pts.push(Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..3.0),
            ));
            on.push(false);
        } else {
            let (s, t): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            pts.push(d * n_hat + s * a + t * b + noise.sample(&mut rng) * n_hat);
            on.push(true);
        }
    }
    (pts, on)
}

#[test]
fn floor_region_lies_on_the_floor() {
    let scene = OrbitScene::standard();
    let floor = scene.floor_plane();
    let pts = floor_points(&scene);
    assert!(pts.len() > 1000 && pts.len() <= MAX_REGION_POINTS);
    for p in &pts {
        assert!(floor.distance(p).abs() < 1e-6);
    }
    // the box sees only floor
    let [u0, v0, u1, v1] = FLOOR_BOX;
    for (u, v) in [(u0, v0), (u1, v1), (u0, v1), (u1, v0)] {
        assert!(matches!(
            scene.cast(&scene.scene_poses()[0], u, v),
            Some((_, Surface::Floor, _))
        ));
    }
}

#[test]
fn ransac_with_outliers() {
    let normal = Vec3::new(0.1, -1.0, -0.3).normalize();
    let (pts, on) = noisy_plane(11, 1000, &normal, -1.5);
    let opts = RansacOptions {
        seed: 3,
        ..Default::default()
    };
    let plane = ransac_plane(&pts, &Pose::identity(), &opts).unwrap();
    let cos = plane.normal.dot(&normal).abs().min(1.0);
    assert!(cos.acos().to_degrees() < 1.0);
    let found = plane.inliers.iter().filter(|&&i| on[i]).count();
    let recall = found as f64 / on.iter().filter(|&&b| b).count() as f64;
    assert!(recall >= 0.95, "{recall}");
    assert_eq!(ransac_plane(&pts, &Pose::identity(), &opts).unwrap(), plane);
}

#[test]
fn plane_invariants_hold_on_the_fixture() {
    let scene = OrbitScene::standard();
    let pts = floor_points(&scene);
    let cam = scene.poses()[0];
    let plane = ransac_plane(&pts, &cam, &RansacOptions::default()).unwrap();
    assert!((plane.normal.norm() - 1.0).abs() < 1e-9);
    assert!(plane.normal.dot(&(cam.center() - plane.anchor)) > 0.0);
    let floor = scene.floor_plane();
    assert!((plane.normal - floor.normal).norm() < 1e-6);
    assert!(plane.distance(&plane.anchor).abs() < 1e-12);
    assert_eq!(plane.inliers.len(), pts.len());
}

#[test]
fn cube_stands_on_the_fixture_floor() {
    let scene = OrbitScene::standard();
    let pts = floor_points(&scene);
    let cam = scene.poses()[0];
    let plane = ransac_plane(&pts, &cam, &RansacOptions::default()).unwrap();
    let cube = TexturedMesh::cube(1.0, [200, 200, 200, 255]);
    let place = solve_placement(&plane, &pts, &cube, &cam, &Adjustment::default()).unwrap();

    let bottom = place.rotation.inverse().transform_vector(&plane.normal).normalize();
    let n = plane.normal;
    let mut n_bottom = 0;
    for v in &cube.vertices {
        let w = place.apply(v);
        let h = n.dot(&w) - plane.offset;
        assert!(h > -1e-6);
        if v.dot(&bottom) < 0.0 {
            assert!(h.abs() < 1e-6, "bottom vertex {h}");
            n_bottom += 1;
        }
    }
    assert!(n_bottom >= 4);
    assert!(place.up().cross(&n).norm() < 1e-9);

    let f = plane_frame(&n, &cam);
    let ext = |a: &Vec3| {
        let d: Vec<f64> = plane.inliers.iter().map(|&i| pts[i].dot(a)).collect();
        d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let expected = 0.5 * ext(&f.x).min(ext(&f.z));
    assert!((place.scale - expected).abs() < 1e-9 * expected);
}

fn random_normal() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-1.0f64..1.0)
        .prop_filter("non-zero", |v| Vec3::from(*v).norm() > 0.1)
        .prop_map(|v| Vec3::from(v).normalize())
}

fn random_pose() -> impl Strategy<Value = Pose> {
    prop::array::uniform6(-1.5f64..1.5).prop_map(|x| se3_exp(&Twist::from_row_slice(&x)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn plane_frame_is_orthonormal(n in random_normal(), cam in random_pose()) {
        let f = plane_frame(&n, &cam);
        prop_assert!(f.x.dot(&f.y).abs() < 1e-9 && f.y.dot(&f.z).abs() < 1e-9 && f.x.dot(&f.z).abs() < 1e-9);
        prop_assert!((Matrix3::from_columns(&[f.x, f.y, f.z]).determinant() - 1.0).abs() < 1e-9);
        prop_assert!((f.y - n).norm() < 1e-12);
    }

    #[test]
    fn degenerate_frame_falls_back(ang in -3.0f64..3.0) {
        let cam = Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, ang), Vec3::zeros());
        let right = cam.rotation_matrix().column(0).into_owned();
        let f = plane_frame(&right, &cam);
        prop_assert!((Matrix3::from_columns(&[f.x, f.y, f.z]).determinant() - 1.0).abs() < 1e-9);
        prop_assert!(f.x.dot(&right).abs() < 1e-9);
    }

    #[test]
    fn placed_up_axis_follows_the_normal(n in random_normal(), yaw in -360.0f64..360.0, cam in random_pose()) {
        let plane = PlaneModel { normal: n, offset: 0.3, inliers: vec![0, 1, 2], anchor: 0.3 * n };
        let f = plane_frame(&n, &cam);
        let pts = [plane.anchor, plane.anchor + f.x, plane.anchor + 0.5 * f.z];
        let adj = Adjustment { yaw_deg: yaw, ..Default::default() };
        let p = solve_placement(&plane, &pts, &TexturedMesh::cube(1.0, [0; 4]), &cam, &adj).unwrap();
        prop_assert!(p.up().cross(&n).norm() < 1e-9);
        prop_assert!(p.up().dot(&n) > 0.0);
        prop_assert!(p.scale > 0.0);
    }

    #[test]
    fn ransac_is_rigidly_covariant(g in random_pose(), seed in 0u64..1000) {
        let (pts, _) = noisy_plane(seed, 300, &Vec3::new(0.0, -1.0, -0.2), -1.0);
        let opts = RansacOptions { seed, tolerance: Some(0.01), ..Default::default() };
        let a = ransac_plane(&pts, &Pose::identity(), &opts).unwrap();
        let moved: Vec<Vec3> = pts.iter().map(|p| g.apply(p)).collect();
        let b = ransac_plane(&moved, &g, &opts).unwrap();
        prop_assert!((g.rotation * a.normal - b.normal).norm() < 1e-6);
        prop_assert!((g.apply(&a.anchor) - b.anchor).norm() < 1e-6);
    }
}
