use std::path::Path;
use std::process::{Command, Output};

use placekit::artifacts::{load_json, PlacementFile, ReconFile};
use placekit::pipeline::FixtureTruth;
use placekit_core::geometry::Vec3;
use placekit_core::mesh::load_obj;

fn placekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_placekit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run placekit")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(dir: &Path, frames: usize) {
    let out = placekit(&["fixture", p(dir), "--frames", &frames.to_string()]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn empty_frames_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, flow) = (dir.path().join("frames"), dir.path().join("flow"));
    std::fs::create_dir_all(&frames).unwrap();
    std::fs::create_dir_all(&flow).unwrap();
    let out = placekit(&["reconstruct", p(&frames), p(&flow), "-p", p(&dir.path().join("proj"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing input"), "{}", stderr(&out));
}

#[test]
fn missing_consecutive_flow_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 4);
    std::fs::remove_file(dir.path().join("flow/000001_000002.pafw")).unwrap();
    let out = placekit(&[
        "reconstruct",
        p(&dir.path().join("frames")),
        p(&dir.path().join("flow")),
        "-p",
        p(&dir.path().join("proj")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("000001_000002.pafw"), "{}", stderr(&out));
}

#[test]
fn non_finite_flow_exits_2_naming_file_and_pixel() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 4);
    let path = dir.path().join("flow/000002_000003.pafw");
    let mut bytes = std::fs::read(&path).unwrap();
    // dx of pixel (5, 0): 12-byte header, 12-byte records
    bytes[12 + 12 * 5..12 + 12 * 5 + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let out = placekit(&[
        "reconstruct",
        p(&dir.path().join("frames")),
        p(&dir.path().join("flow")),
        "-p",
        p(&dir.path().join("proj")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("000002_000003.pafw") && err.contains("(5, 0)"), "{err}");
    assert!(!dir.path().join("proj/recon.json").exists());
}

#[test]
fn ply_without_opacity_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("bad.ply");
    let fields = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
        "rot_3",
    ];
    let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n".to_vec();
    for f in fields {
        bytes.extend(format!("property float {f}\n").as_bytes());
    }
    bytes.extend(b"end_header\n");
    for v in [0.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, -2.3, -2.3, -2.3, 1.0, 0.0, 0.0, 0.0] {
        bytes.extend(v.to_le_bytes());
    }
    std::fs::write(&ply, bytes).unwrap();
    let out = placekit(&["extract-mesh", p(&ply), "-o", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("opacity"), "{}", stderr(&out));
}

#[test]
fn default_mesh_flags_equal_explicit_ones() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let ply = dir.path().join("splat.ply");
    let (a, b) = (dir.path().join("default/m"), dir.path().join("explicit/m"));
    let out = placekit(&["extract-mesh", p(&ply), "-o", p(&a)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = placekit(&["extract-mesh", p(&ply), "-o", p(&b), "--grid", "128", "--iso", "0.5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for ext in ["obj", "mtl", "png"] {
        let (x, y) = (
            std::fs::read(a.with_extension(ext)).unwrap(),
            std::fs::read(b.with_extension(ext)).unwrap(),
        );
        assert!(!x.is_empty());
        assert!(x == y, "{ext} differs");
    }
    assert!(!load_obj(a.with_extension("obj")).unwrap().is_empty());
}

#[test]
fn fixture_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 24);
    let truth: FixtureTruth = load_json(&dir.path().join("truth.json")).unwrap();
    let (frames, flow, proj) = (
        dir.path().join("frames"),
        dir.path().join("flow"),
        dir.path().join("proj"),
    );
    let cube = dir.path().join("cube.obj");

    // place before any reconstruction is a usage error
    let out = placekit(&["place", "-p", p(&proj), "--mesh", p(&cube), "--box", "200,380,440,470"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let reconstruct = || placekit(&["reconstruct", p(&frames), p(&flow), "-p", p(&proj)]);
    let out = reconstruct();
    assert!(out.status.success(), "{}", stderr(&out));
    let first = std::fs::read(proj.join("recon.json")).unwrap();
    let recon: ReconFile = serde_json::from_slice(&first).unwrap();
    let f = recon.intrinsics[0];
    assert!(
        (f - truth.intrinsics[0]).abs() < 0.01 * truth.intrinsics[0],
        "focal {f}"
    );
    assert_eq!(recon.frames.len(), 24);
    assert!(reconstruct().status.success());
    assert!(
        std::fs::read(proj.join("recon.json")).unwrap() == first,
        "rerun changed recon.json"
    );

    // only the top rows of sky stay outside the hole fill
    let out = placekit(&["place", "-p", p(&proj), "--mesh", p(&cube), "--box", "100,0,500,12"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("visible surface"), "{}", stderr(&out));
    assert!(!proj.join("placement.json").exists());

    let out = placekit(&["place", "-p", p(&proj), "--mesh", p(&cube), "--box", "200,380,440,470"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let placed: PlacementFile = load_json(&proj.join("placement.json")).unwrap();
    let n = Vec3::from(placed.plane.normal);
    let truth_n = Vec3::from(truth.floor_normal);
    assert!(n.dot(&truth_n).min(1.0).acos().to_degrees() < 1.0);
    let transform = placed.placement();
    let mesh = load_obj(&cube).unwrap();
    let heights: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|v| n.dot(&transform.apply(v)) - placed.plane.offset)
        .collect();
    let bottom = heights.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(bottom.abs() < 1e-6, "bottom {bottom}");
    assert!(transform.up().cross(&n).norm() < 1e-9);

    let render = |jobs: &str, samples: &str| {
        let out = placekit(&["render", "-p", p(&proj), "--jobs", jobs, "--supersample", samples]);
        assert!(out.status.success(), "{}", stderr(&out));
        (0..24)
            .map(|k| std::fs::read(proj.join(format!("out/{k:06}.png"))).unwrap())
            .collect::<Vec<_>>()
    };
    let serial = render("1", "1");
    let parallel = render("8", "1");
    assert!(serial == parallel, "frames depend on --jobs");
    let first = image::load_from_memory(&serial[0]).unwrap();
    assert_eq!(first.color(), image::ColorType::Rgba8);
    assert_eq!((first.width(), first.height()), (640, 480));
    let smooth = render("4", "2");
    assert!(smooth[0] != serial[0], "supersampling left frame 0 untouched");

    // re-placing rewinds the project: the renders of the old placement go away
    let out = placekit(&[
        "place",
        "-p",
        p(&proj),
        "--mesh",
        p(&cube),
        "--point",
        "200,380",
        "--point",
        "440,380",
        "--point",
        "320,470",
        "--yaw-deg",
        "-30",
        "--offset",
        "-0.05,0.02",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!proj.join("out").exists());
    let moved: PlacementFile = load_json(&proj.join("placement.json")).unwrap();
    assert_eq!(moved.yaw_deg, -30.0);
    assert_eq!(moved.planar_offset, [-0.05, 0.02]);
    assert_eq!(moved.region.points.as_ref().map(Vec::len), Some(3));
}

#[test]
fn settings_reach_the_artifacts_with_flag_over_file_over_default() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 6);
    let config = dir.path().join("placekit.toml");
    std::fs::write(&config, "tau = 9.0\nwindow = 3\n").unwrap();
    let (frames, flow) = (dir.path().join("frames"), dir.path().join("flow"));
    let meta = |extra: &[&str], name: &str| {
        let proj = dir.path().join(name);
        let mut args = vec!["reconstruct", p(&frames), p(&flow), "-p", p(&proj)];
        args.extend_from_slice(extra);
        let out = placekit(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        load_json::<ReconFile>(&proj.join("recon.json")).unwrap().meta
    };
    let default = meta(&[], "a");
    assert_eq!((default.tau, default.window), (16.0, 0));
    let file = meta(&["--config", p(&config)], "b");
    assert_eq!((file.tau, file.window), (9.0, 3));
    let flag = meta(&["--config", p(&config), "--tau", "11"], "c");
    assert_eq!((flag.tau, flag.window), (11.0, 3));
}

#[test]
fn bad_config_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "tua = 1.0\n").unwrap();
    let out = placekit(&[
        "--config",
        p(&config),
        "fixture",
        p(&dir.path().join("fx")),
        "--frames",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tua"), "{}", stderr(&out));
    let out = placekit(&[
        "--config",
        p(&dir.path().join("absent.toml")),
        "fixture",
        p(&dir.path().join("fx")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = placekit(&["--tau", "0", "fixture", p(&dir.path().join("fx"))]);
    assert_eq!(out.status.code(), Some(2));
}
