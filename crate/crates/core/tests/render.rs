use image::RgbImage;
use nalgebra::UnitQuaternion;
use placekit_core::depth::DepthMap;
use placekit_core::geometry::{project, Intrinsics, Pose, Vec3};
use placekit_core::mesh::TexturedMesh;
use placekit_core::placement::Placement;
use placekit_core::render::{
    composite, fragment_visible, rasterize, render_sequence, FrameRenderJob, RenderError, DEFAULT_EPS_REL,
};
use placekit_core::synthetic::OrbitScene;
use proptest::prelude::*;

fn covered_bbox(depth: &[f64], w: usize) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for (i, d) in depth.iter().enumerate() {
        if d.is_finite() {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            b = [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)];
        }
    }
    b
}

fn projected_bbox(pts: &[Vec3], intr: &Intrinsics) -> [f64; 4] {
    pts.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, p| {
            let px = project(p, intr).unwrap();
            [b[0].min(px.u), b[1].min(px.v), b[2].max(px.u), b[3].max(px.v)]
        },
    )
}

fn cube_corners(p: &Placement) -> Vec<Vec3> {
    let mut out = Vec::new();
    for i in 0..8 {
        let c = Vec3::new(
            (i & 1) as f64 - 0.5,
            ((i >> 1) & 1) as f64 - 0.5,
            ((i >> 2) & 1) as f64 - 0.5,
        );
        out.push(p.apply(&c));
    }
    out
}

/// Pixel coverage spans [first - 1/2, last + 1/2] in continuous coordinates.
fn bbox_error(covered: [f64; 4], projected: [f64; 4], axes: &[usize]) -> f64 {
    axes.iter()
        .map(|&a| {
            let lo = ((covered[a] - 0.5) - projected[a]).abs();
            let hi = ((covered[a + 2] + 0.5) - projected[a + 2]).abs();
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

#[test]
fn cube_silhouette_matches_pinhole_corners() {
    let intr = Intrinsics::new(400.0, 410.0, 160.3, 121.7, 320, 240).unwrap();
    let cube = TexturedMesh::cube(1.0, [180, 120, 60, 255]);

    // axis-aligned, off-center: silhouette extremes are straight edges
    let mut p = Placement::identity();
    p.translation = Vec3::new(0.37, -0.21, 4.3);
    let layer = rasterize(&cube, &p, &Pose::identity(), &intr);
    let err = bbox_error(
        covered_bbox(&layer.depth, 320),
        projected_bbox(&cube_corners(&p), &intr),
        &[0, 1],
    );
    assert!(err <= 0.5 + 1e-9, "{err}");

    // yawed about the vertical: left/right extremes are vertical edges
    p.rotation = UnitQuaternion::from_euler_angles(0.0, 0.6, 0.0);
    let layer = rasterize(&cube, &p, &Pose::identity(), &intr);
    let err = bbox_error(
        covered_bbox(&layer.depth, 320),
        projected_bbox(&cube_corners(&p), &intr),
        &[0],
    );
    assert!(err <= 0.5 + 1e-9, "{err}");

    // rendering is deterministic
    assert_eq!(rasterize(&cube, &p, &Pose::identity(), &intr), layer);
}

/// Ray/plane intersection of a triangle: (camera depth, barycentrics), inside or not.
fn ray_plane(dir: &Vec3, tri: &[Vec3; 3]) -> Option<(f64, [f64; 3])> {
    let (e1, e2) = (tri[1] - tri[0], tri[2] - tri[0]);
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = -tri[0];
    let u = s.dot(&p) / det;
    let q = s.cross(&e1);
    let v = dir.dot(&q) / det;
    let t = e2.dot(&q) / det;
    (t > 0.0).then_some((t * dir.z, [1.0 - u - v, u, v]))
}

fn ray_hit(dir: &Vec3, tri: &[Vec3; 3]) -> Option<(f64, [f64; 3])> {
    ray_plane(dir, tri).filter(|(_, b)| b.iter().all(|&c| c >= 0.0))
}

#[test]
fn z_buffer_matches_ray_oracle() {
    let intr = Intrinsics::centered(60.0, 64, 64).unwrap();
    let tris = [
        [
            Vec3::new(-1.0, -0.8, 2.0),
            Vec3::new(1.0, -0.7, 4.0),
            Vec3::new(0.0, 0.9, 3.0),
        ],
        [
            Vec3::new(-0.9, 0.6, 4.2),
            Vec3::new(1.1, 0.7, 2.2),
            Vec3::new(0.1, -0.9, 2.6),
        ],
    ];
    let mesh = TexturedMesh {
        vertices: tris.iter().flatten().copied().collect(),
        triangles: vec![[0, 1, 2], [3, 4, 5]],
        ..Default::default()
    };
    let layer = rasterize(&mesh, &Placement::identity(), &Pose::identity(), &intr);
    let mut checked = 0;
    for y in 0..64 {
        for x in 0..64 {
            let dir = Vec3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
            let hits: Vec<(f64, [f64; 3])> = tris.iter().filter_map(|t| ray_hit(&dir, t)).collect();
            let on_edge = tris
                .iter()
                .any(|t| ray_plane(&dir, t).is_some_and(|(_, b)| b.iter().any(|&c| c.abs() < 1e-9)));
            if on_edge {
                continue;
            }
            let got = layer.depth[y * 64 + x];
            match hits.iter().map(|h| h.0).reduce(f64::min) {
                Some(z) => {
                    assert!((got - z).abs() < 1e-9 * z, "({x},{y}) {got} vs {z}");
                    checked += 1;
                }
                None => assert!(got.is_infinite(), "({x},{y})"),
            }
        }
    }
    // interior pixels of both triangles were compared
    assert!(checked > 500);
}

fn fixture_cube(scene: &OrbitScene, center_scene: Vec3, size: f64) -> Placement {
    let g = scene.scene_to_reference();
    Placement {
        rotation: g.rotation,
        scale: size,
        translation: g.apply(&center_scene),
        ..Placement::identity()
    }
}

fn suppressed_fraction(scene: &OrbitScene, place: &Placement, frame: usize) -> f64 {
    let cube = TexturedMesh::cube(1.0, [255, 0, 0, 255]);
    let layer = rasterize(&cube, place, &scene.poses()[frame], &scene.intr);
    let depth = scene.depth_map(frame);
    let covered: Vec<usize> = (0..layer.depth.len()).filter(|&i| layer.depth[i].is_finite()).collect();
    assert!(covered.len() > 100);
    let hidden = covered
        .iter()
        .filter(|&&i| !fragment_visible(&layer, &depth, i, DEFAULT_EPS_REL))
        .count();
    hidden as f64 / covered.len() as f64
}

#[test]
fn wall_occludes_objects_behind_it() {
    let scene = OrbitScene::standard();
    let behind = fixture_cube(&scene, Vec3::new(0.2, -0.15, 4.6), 0.3);
    let front = fixture_cube(&scene, Vec3::new(0.2, -0.15, 2.5), 0.3);
    for frame in [0, 11, 23] {
        assert!(suppressed_fraction(&scene, &behind, frame) >= 0.99);
        assert_eq!(suppressed_fraction(&scene, &front, frame), 0.0);
    }
}

#[test]
fn straddling_object_matches_analytic_visibility() {
    let scene = OrbitScene::standard();
    // tall box behind the wall: its top rises above the wall into the sky
    let place = fixture_cube(&scene, Vec3::new(0.0, -0.7, 4.6), 0.6);
    let cube = TexturedMesh::cube(1.0, [0, 255, 0, 255]);
    let frame = 5;
    let pose_scene = scene.scene_poses()[frame];
    let layer = rasterize(&cube, &place, &scene.poses()[frame], &scene.intr);
    let depth = scene.depth_map(frame);
    let (lo, hi) = (Vec3::new(-0.3, -1.0, 4.3), Vec3::new(0.3, -0.4, 4.9));
    let (w, h) = (640, 480);
    let (mut agree, mut total, mut visible) = (0, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let k = &scene.intr;
            let d = pose_scene.rotation * Vec3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let o = pose_scene.translation;
            // slab test against the box in scene coordinates
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for a in 0..3 {
                let (ta, tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
            let box_hit = (t0 <= t1).then_some(t0);
            let i = y * w + x;
            if box_hit.is_none() && layer.depth[i].is_infinite() {
                continue;
            }
            let oracle = box_hit.is_some_and(|t| match scene.cast(&pose_scene, x as f64, y as f64) {
                Some((z, _, _)) => t <= z * (1.0 + DEFAULT_EPS_REL),
                None => true,
            });
            let got = fragment_visible(&layer, &depth, i, DEFAULT_EPS_REL);
            total += 1;
            agree += (oracle == got) as usize;
            visible += got as usize;
        }
    }
    assert!(visible > 100 && visible < total - 100);
    assert!(agree as f64 / total as f64 >= 0.99, "{agree}/{total}");
}

#[test]
fn full_occlusion_returns_background() {
    let intr = Intrinsics::centered(100.0, 48, 48).unwrap();
    let mut p = Placement::identity();
    p.translation = Vec3::new(0.0, 0.0, 5.0);
    let layer = rasterize(&TexturedMesh::cube(1.0, [255; 4]), &p, &Pose::identity(), &intr);
    let bg = RgbImage::from_fn(48, 48, |x, y| image::Rgb([x as u8, y as u8, 7]));
    let near = DepthMap::constant(48, 48, 1.0);
    let out = composite(&layer, &bg, &near, DEFAULT_EPS_REL).unwrap();
    for (a, b) in out.pixels().zip(bg.pixels()) {
        assert_eq!(&a.0[..3], &b.0[..]);
    }
    let far = DepthMap::constant(48, 48, 100.0);
    let out = composite(&layer, &bg, &far, DEFAULT_EPS_REL).unwrap();
    for (i, (a, l)) in out.pixels().zip(layer.image.pixels()).enumerate() {
        if l.0[3] == 255 {
            assert_eq!(a.0, l.0, "pixel {i}");
        }
    }
    assert!(matches!(
        composite(&layer, &RgbImage::new(10, 10), &far, 0.02),
        Err(RenderError::DimensionMismatch(_))
    ));
}

#[test]
fn sequence_is_independent_of_parallelism() {
    let scene = OrbitScene::standard();
    let poses = scene.poses();
    let depths: Vec<DepthMap> = (0..scene.n_frames).map(|i| scene.depth_map(i)).collect();
    let frames: Vec<RgbImage> = (0..scene.n_frames).map(|i| scene.render_frame(i)).collect();
    let cube = TexturedMesh::cube(1.0, [30, 200, 90, 255]);
    let place = fixture_cube(&scene, Vec3::new(0.0, -0.2, 3.0), 0.4);
    let jobs: Vec<FrameRenderJob> = (0..scene.n_frames)
        .map(|i| FrameRenderJob {
            frame_index: i,
            pose: poses[i],
            intr: scene.intr,
            scene_depth: &depths[i],
            background: &frames[i],
            mesh: &cube,
            placement: &place,
            supersample: 1,
        })
        .collect();
    let count = std::sync::atomic::AtomicUsize::new(0);
    let serial = render_sequence(&jobs, DEFAULT_EPS_REL, 1, |_| {
        count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    })
    .unwrap();
    assert_eq!(count.into_inner(), scene.n_frames);
    let parallel = render_sequence(&jobs, DEFAULT_EPS_REL, 8, |_| {}).unwrap();
    assert_eq!(serial, parallel);

    assert!(render_sequence(&[], DEFAULT_EPS_REL, 4, |_| {}).unwrap().is_empty());

    let small = RgbImage::new(10, 10);
    let mut bad = jobs[..5].to_vec();
    bad[3].background = &small;
    match render_sequence(&bad, DEFAULT_EPS_REL, 4, |_| {}) {
        Err(RenderError::Frame { frame: 3, .. }) => {}
        other => panic!("{:?}", other.map(|v| v.len())),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn larger_eps_never_hides_more(e1 in 0.0f64..0.2, de in 0.0f64..0.2, seed in 0u32..1000) {
        let intr = Intrinsics::centered(80.0, 40, 40).unwrap();
        let mut p = Placement::identity();
        p.translation = Vec3::new(0.1, 0.0, 3.0);
        p.rotation = UnitQuaternion::from_euler_angles(0.4, 0.7, 0.1);
        let layer = rasterize(&TexturedMesh::cube(1.0, [255; 4]), &p, &Pose::identity(), &intr);
        let mut scene = DepthMap::invalid(40, 40);
        for i in 0..1600u32 {
            let h = (i.wrapping_mul(2654435761) ^ seed.wrapping_mul(40503)) % 1000;
            if h < 900 {
                scene.set((i % 40) as usize, (i / 40) as usize, 2.2 + h as f32 / 600.0);
            }
        }
        for i in 0..1600 {
            if fragment_visible(&layer, &scene, i, e1) {
                prop_assert!(fragment_visible(&layer, &scene, i, e1 + de));
            }
        }
        let bg = RgbImage::new(40, 40);
        let out = composite(&layer, &bg, &scene, e1).unwrap();
        prop_assert_eq!(out.dimensions(), (40, 40));
    }
}

fn square_job<'a>(
    intr: Intrinsics,
    scene: &'a DepthMap,
    bg: &'a RgbImage,
    cube: &'a TexturedMesh,
    place: &'a Placement,
    s: u32,
) -> FrameRenderJob<'a> {
    FrameRenderJob {
        frame_index: 0,
        pose: Pose::identity(),
        intr,
        scene_depth: scene,
        background: bg,
        mesh: cube,
        placement: place,
        supersample: s,
    }
}

#[test]
fn supersampled_coverage_counts_sample_centers_inside_the_silhouette() {
    // cube on the optical axis: its silhouette is the front face rectangle
    let intr = Intrinsics::new(173.3, 173.3, 31.37, 23.61, 64, 48).unwrap();
    let cube = TexturedMesh::cube(1.0, [200, 50, 50, 255]);
    let mut place = Placement::identity();
    place.translation = Vec3::new(0.0, 0.0, 6.1);
    let half = intr.fx * 0.5 / (6.1 - 0.5);
    let (u0, u1, v0, v1) = (intr.cx - half, intr.cx + half, intr.cy - half, intr.cy + half);
    let scene = DepthMap::invalid(64, 48);
    let bg = RgbImage::new(64, 48);
    for s in [2u32, 3, 4] {
        let out = square_job(intr, &scene, &bg, &cube, &place, s)
            .render(DEFAULT_EPS_REL)
            .unwrap();
        let mut partial = 0;
        for y in 0..48u32 {
            for x in 0..64u32 {
                let inside = (0..s * s)
                    .filter(|j| {
                        let u = x as f64 - 0.5 + ((j % s) as f64 + 0.5) / s as f64;
                        let v = y as f64 - 0.5 + ((j / s) as f64 + 0.5) / s as f64;
                        u > u0 && u < u1 && v > v0 && v < v1
                    })
                    .count();
                let expected = (255.0 * inside as f64 / (s * s) as f64).round() as u8;
                assert_eq!(out.layer.image.get_pixel(x, y)[3], expected, "s={s} pixel ({x},{y})");
                partial += usize::from(inside > 0 && inside < (s * s) as usize);
            }
        }
        assert!(partial > 50, "s={s}: only {partial} edge pixels");
    }
}

#[test]
fn supersampling_only_changes_edges() {
    let intr = Intrinsics::new(173.3, 173.3, 31.37, 23.61, 64, 48).unwrap();
    let cube = TexturedMesh::cube(1.0, [200, 50, 50, 255]);
    let mut place = Placement::identity();
    place.translation = Vec3::new(0.1, -0.05, 6.1);
    place.rotation = UnitQuaternion::from_euler_angles(0.3, 0.5, 0.1);
    let scene = DepthMap::invalid(64, 48);
    let bg = RgbImage::from_fn(64, 48, |x, y| image::Rgb([(4 * x) as u8, (5 * y) as u8, 90]));
    let one = square_job(intr, &scene, &bg, &cube, &place, 1)
        .render(DEFAULT_EPS_REL)
        .unwrap();
    let two = square_job(intr, &scene, &bg, &cube, &place, 2)
        .render(DEFAULT_EPS_REL)
        .unwrap();
    let mut edges = 0;
    for y in 1..47u32 {
        for x in 1..63u32 {
            let covered =
                |dx: i32, dy: i32| one.layer.depth[((y as i32 + dy) * 64 + x as i32 + dx) as usize].is_finite();
            let at = |dx: i32, dy: i32| {
                one.composite
                    .get_pixel((x as i32 + dx) as u32, (y as i32 + dy) as u32)
                    .0
            };
            // covered and away from silhouettes and face creases
            let flat = (-1..=1)
                .all(|dy| (-1..=1).all(|dx| (0..3).all(|c| (at(dx, dy)[c] as i32 - at(0, 0)[c] as i32).abs() <= 3)));
            let all = flat && (-1..=1).all(|dy| (-1..=1).all(|dx| covered(dx, dy)));
            let none = (-1..=1).all(|dy| (-1..=1).all(|dx| !covered(dx, dy)));
            let (a, b) = (one.composite.get_pixel(x, y).0, two.composite.get_pixel(x, y).0);
            if none {
                assert_eq!(a, b, "background pixel ({x},{y}) changed");
            } else if all {
                let d = (0..3).map(|c| (a[c] as i32 - b[c] as i32).abs()).max().unwrap();
                assert!(d <= 3, "interior pixel ({x},{y}) moved by {d}");
            } else {
                edges += usize::from(a != b);
            }
        }
    }
    assert!(edges > 20, "anti-aliasing changed only {edges} edge pixels");
}

#[test]
fn supersampled_samples_are_depth_tested() {
    let intr = Intrinsics::new(173.3, 173.3, 31.37, 23.61, 64, 48).unwrap();
    let cube = TexturedMesh::cube(1.0, [200, 50, 50, 255]);
    let mut place = Placement::identity();
    place.translation = Vec3::new(0.0, 0.0, 6.1);
    let bg = RgbImage::from_fn(64, 48, |x, y| image::Rgb([x as u8, y as u8, 7]));
    let wall = DepthMap::constant(64, 48, 2.0);
    let hidden = square_job(intr, &wall, &bg, &cube, &place, 2)
        .render(DEFAULT_EPS_REL)
        .unwrap();
    for (x, y, p) in hidden.composite.enumerate_pixels() {
        let b = bg.get_pixel(x, y).0;
        assert_eq!(p.0, [b[0], b[1], b[2], 255]);
    }
    let far = DepthMap::constant(64, 48, 50.0);
    let open = DepthMap::invalid(64, 48);
    let behind = square_job(intr, &far, &bg, &cube, &place, 2)
        .render(DEFAULT_EPS_REL)
        .unwrap();
    let free = square_job(intr, &open, &bg, &cube, &place, 2)
        .render(DEFAULT_EPS_REL)
        .unwrap();
    assert!(behind.composite == free.composite);
    assert!(behind.composite != hidden.composite);
}

#[test]
fn supersampled_sequence_is_thread_count_independent() {
    let scene = OrbitScene::standard();
    let poses = scene.poses();
    let cube = TexturedMesh::cube(1.0, [30, 160, 90, 255]);
    let place = fixture_cube(&scene, Vec3::new(0.0, -0.2, 3.0), 0.4);
    let frames: Vec<RgbImage> = (0..6).map(|i| scene.render_frame(i)).collect();
    let depths: Vec<DepthMap> = (0..6).map(|i| scene.depth_map(i)).collect();
    let jobs: Vec<FrameRenderJob> = (0..6)
        .map(|i| FrameRenderJob {
            frame_index: i,
            pose: poses[i],
            intr: scene.intr,
            scene_depth: &depths[i],
            background: &frames[i],
            mesh: &cube,
            placement: &place,
            supersample: 2,
        })
        .collect();
    let serial = render_sequence(&jobs, DEFAULT_EPS_REL, 1, |_| {}).unwrap();
    let parallel = render_sequence(&jobs, DEFAULT_EPS_REL, 6, |_| {}).unwrap();
    assert!(serial == parallel);
}
