//! The stages behind both the command-line tool and the service.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use placekit_core::depth::{load_pfm, save_pfm, DepthMap};
use placekit_core::flow::{load_flow, save_flow, FlowField};
use placekit_core::geometry::{Intrinsics, Pose, Vec3};
use placekit_core::mesh::{load_obj, save_obj, TexturedMesh};
use placekit_core::placement::{
    backproject_region, plane_frame, ransac_plane, solve_placement, PlaneModel, RegionSelection,
};
use placekit_core::recon::{reconstruct as run_recon, FlowSet, Reconstruction};
use placekit_core::render::{render_sequence, FrameRenderJob};
use placekit_core::splat::{
    bake_texture, load_gaussians, marching_cubes, save_gaussians, weighted_opacity_field, Gaussian, GaussianCloud,
};
use placekit_core::synthetic::OrbitScene;
use serde::{Deserialize, Serialize};

use crate::artifacts::{load_json, save_json, PlacementFile, PlaneSummary, ReconFile, RegionFile, RegionSpec};
use crate::config::Settings;
use crate::error::{PipelineError, Result};
use crate::project::{Project, State};

/// Overall progress callback: stage name and fraction in `[0, 1]`.
pub type Progress<'a> = &'a (dyn Fn(&str, f64) + Sync);

pub fn no_progress(_: &str, _: f64) {}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

fn numbered_files(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::MissingInput(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    Ok(out)
}

/// PNG frames named by a frame number, in numeric order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<(u64, PathBuf)> = numbered_files(dir, "png")?
        .into_iter()
        .filter_map(|(stem, p)| stem.parse::<u64>().ok().map(|n| (n, p)))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(PipelineError::MissingInput(format!(
            "no numbered PNG frames in {}",
            dir.display()
        )));
    }
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

pub fn flow_name(a: usize, b: usize) -> String {
    format!("{a:06}_{b:06}.pafw")
}

/// Loads `<a>_<b>.pafw` flows for `n` frames. Every consecutive forward flow
/// is required; backward flows are used when all are present.
pub fn load_flows(dir: &Path, n: usize, width: u32, height: u32) -> Result<FlowSet> {
    if n < 2 {
        return Err(PipelineError::MissingInput(format!("{n} frame(s), need at least 2")));
    }
    let mut found: BTreeMap<(usize, usize), PathBuf> = BTreeMap::new();
    for (stem, path) in numbered_files(dir, "pafw")? {
        let parsed = stem
            .split_once('_')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
        match parsed {
            Some((a, b)) if a < n && b < n && a != b => {
                found.insert((a, b), path);
            }
            _ => log::warn!("ignoring flow file {}", path.display()),
        }
    }
    let read = |path: &Path| -> Result<FlowField> {
        let f = load_flow(path).map_err(|e| PipelineError::parse(path, e))?;
        if (f.width, f.height) != (width as usize, height as usize) {
            return Err(PipelineError::parse(
                path,
                format!("flow is {}x{}, frames are {width}x{height}", f.width, f.height),
            ));
        }
        Ok(f)
    };
    let mut forward = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let path = found
            .remove(&(i, i + 1))
            .ok_or_else(|| PipelineError::MissingInput(format!("flow {}", dir.join(flow_name(i, i + 1)).display())))?;
        forward.push(read(&path)?);
    }
    let backward = if (0..n - 1).all(|i| found.contains_key(&(i + 1, i))) {
        Some(
            (0..n - 1)
                .map(|i| read(&found.remove(&(i + 1, i)).unwrap()))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let pairs = found
        .into_iter()
        .map(|(k, p)| Ok((k, read(&p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(FlowSet {
        forward,
        backward,
        pairs,
    })
}

pub fn load_frame(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Creates (or resets) the project at `root` and checks its inputs.
pub fn create_project(root: &Path, name: &str, frames_dir: &Path, flow_dir: &Path) -> Result<Project> {
    let frames = list_frames(frames_dir)?;
    if !flow_dir.is_dir() {
        return Err(PipelineError::MissingInput(format!(
            "flow directory {}",
            flow_dir.display()
        )));
    }
    let mut project = Project::create(root, name, frames_dir, flow_dir)?;
    let _lock = project.lock()?;
    load_frame(&frames[0])?;
    project.advance(State::FramesLoaded)?;
    Ok(project)
}

/// Keyframes, SC-BA, tracking and depth; writes `recon.json` and `depth/`.
pub fn reconstruct(project: &mut Project, settings: &Settings, progress: Progress<'_>) -> Result<ReconFile> {
    project.require(State::FramesLoaded)?;
    let _lock = project.lock()?;
    project.advance(State::FramesLoaded)?;
    let frames = list_frames(&project.meta.frames_dir)?;
    let (w, h) = load_frame(&frames[0])?.dimensions();
    let flows = load_flows(&project.meta.flow_dir, frames.len(), w, h)?;
    let opts = settings.recon_options();
    log::info!("reconstructing {} frames at {w}x{h}", frames.len());
    let recon: Reconstruction = pool(settings.jobs)?.install(|| run_recon(&flows, w, h, &opts, progress))?;
    log::info!(
        "focal {:.3} after {} iterations, keyframes {:?}",
        recon.intr.fx,
        recon.iterations,
        recon.keyframes
    );
    std::fs::create_dir_all(project.root.join("depth"))?;
    for (k, d) in recon.depths.iter().enumerate() {
        save_pfm(project.depth_path(k), d)?;
    }
    let file = ReconFile::from_reconstruction(&recon, settings.tau, settings.window);
    save_json(&project.recon_path(), &file)?;
    project.advance(State::Reconstructed)?;
    progress("done", 1.0);
    Ok(file)
}

struct Scene {
    recon: ReconFile,
    intr: Intrinsics,
    poses: Vec<Pose>,
}

fn load_scene(project: &Project) -> Result<Scene> {
    project.require(State::Reconstructed)?;
    let path = project.recon_path();
    let recon: ReconFile = load_json(&path)?;
    let intr = recon.intrinsics(&path)?;
    let poses = recon.poses(&path)?;
    Ok(Scene { recon, intr, poses })
}

fn frame_depth(project: &Project, scene: &Scene, frame: usize) -> Result<DepthMap> {
    if frame >= scene.recon.frames.len() {
        return Err(PipelineError::MissingInput(format!("frame {frame} is out of range")));
    }
    Ok(load_pfm(project.depth_path(frame))?)
}

struct Fit {
    selection: RegionSelection,
    camera: Pose,
    points: Vec<Vec3>,
    plane: PlaneModel,
}

fn fit_region(project: &Project, scene: &Scene, settings: &Settings, spec: &RegionSpec) -> Result<Fit> {
    let selection = spec.selection()?;
    let depth = frame_depth(project, scene, selection.frame)?;
    let camera = scene.poses[selection.frame];
    let points = backproject_region(&selection, &depth, &camera, &scene.intr, settings.max_region_points)?;
    let plane = ransac_plane(&points, &camera, &settings.ransac_options())?;
    Ok(Fit {
        selection,
        camera,
        points,
        plane,
    })
}

fn inlier_extents(fit: &Fit) -> [f64; 2] {
    let frame = plane_frame(&fit.plane.normal, &fit.camera);
    let span = |axis: &Vec3| {
        let (lo, hi) = fit
            .plane
            .inliers
            .iter()
            .map(|&i| fit.points[i].dot(axis))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    [span(&frame.x), span(&frame.z)]
}

/// Fits the support plane of a region and commits it to `region.json`.
pub fn select_region(project: &mut Project, settings: &Settings, spec: &RegionSpec) -> Result<PlaneSummary> {
    let scene = load_scene(project)?;
    let _lock = project.lock()?;
    let fit = fit_region(project, &scene, settings, spec)?;
    let summary = PlaneSummary::new(&fit.plane, Some(inlier_extents(&fit)));
    log::debug!(
        "region on frame {}: {} inliers",
        fit.selection.frame,
        fit.plane.inliers.len()
    );
    project.advance(State::Reconstructed)?;
    save_json(
        &project.region_path(),
        &RegionFile {
            region: spec.clone(),
            plane: summary.clone(),
        },
    )?;
    project.advance(State::RegionSet)?;
    Ok(summary)
}

/// User adjustments for a placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceParams {
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default = "one")]
    pub scale_mult: f64,
    #[serde(default)]
    pub planar_offset: [f64; 2],
    pub mesh_path: PathBuf,
}

fn one() -> f64 {
    1.0
}

/// Solves the placement on the committed region and writes `placement.json`.
pub fn place(project: &mut Project, settings: &Settings, params: &PlaceParams) -> Result<PlacementFile> {
    project.require(State::RegionSet)?;
    let scene = load_scene(project)?;
    let _lock = project.lock()?;
    let region: RegionFile = load_json(&project.region_path())?;
    let mesh = load_mesh(&params.mesh_path)?;
    let fit = fit_region(project, &scene, settings, &region.region)?;
    let adjust = settings.adjustment(params.yaw_deg, params.scale_mult, params.planar_offset);
    let placement = solve_placement(&fit.plane, &fit.points, &mesh, &fit.camera, &adjust)?;
    let file = PlacementFile::new(region.region, &fit.plane, &placement);
    project.advance(State::RegionSet)?;
    save_json(&project.placement_path(), &file)?;
    project.meta.mesh = Some(std::path::absolute(&params.mesh_path)?);
    project.save()?;
    Ok(file)
}

/// Region plus placement in one step, as the command-line tool does it.
pub fn select_and_place(
    project: &mut Project,
    settings: &Settings,
    spec: &RegionSpec,
    params: &PlaceParams,
) -> Result<PlacementFile> {
    select_region(project, settings, spec)?;
    place(project, settings, params)
}

pub fn load_mesh(path: &Path) -> Result<TexturedMesh> {
    if !path.is_file() {
        return Err(PipelineError::MissingInput(format!("mesh {}", path.display())));
    }
    let mesh = load_obj(path)?;
    if mesh.is_empty() {
        return Err(PipelineError::Mesh(placekit_core::mesh::MeshError::Invalid(format!(
            "{} has no triangles",
            path.display()
        ))));
    }
    Ok(mesh)
}

struct Committed {
    scene: Scene,
    frames: Vec<PathBuf>,
    mesh: TexturedMesh,
    placement: placekit_core::placement::Placement,
}

fn load_committed(project: &Project) -> Result<Committed> {
    project.require(State::RegionSet)?;
    let scene = load_scene(project)?;
    let path = project.placement_path();
    if !path.is_file() {
        return Err(PipelineError::Conflict("no placement has been committed yet".into()));
    }
    let file: PlacementFile = load_json(&path)?;
    let mesh_path = project
        .meta
        .mesh
        .clone()
        .ok_or_else(|| PipelineError::Conflict("project has no mesh".into()))?;
    Ok(Committed {
        scene,
        frames: list_frames(&project.meta.frames_dir)?,
        mesh: load_mesh(&mesh_path)?,
        placement: file.placement(),
    })
}

pub fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Composites a single frame with the committed placement; returns PNG bytes.
pub fn preview(project: &Project, settings: &Settings, frame: usize) -> Result<Vec<u8>> {
    let c = load_committed(project)?;
    let depth = frame_depth(project, &c.scene, frame)?;
    let background = load_frame(&c.frames[frame])?;
    let job = FrameRenderJob {
        frame_index: frame,
        pose: c.scene.poses[frame],
        intr: c.scene.intr,
        scene_depth: &depth,
        background: &background,
        mesh: &c.mesh,
        placement: &c.placement,
        supersample: settings.supersample,
    };
    let out = job.render(settings.eps_rel)?;
    encode_png(&image::DynamicImage::ImageRgba8(out.composite))
}

/// Renders every frame to `out/` (and the object layers to `layers/`).
pub fn render(project: &mut Project, settings: &Settings, layers: bool, progress: Progress<'_>) -> Result<usize> {
    let c = load_committed(project)?;
    let _lock = project.lock()?;
    project.advance(State::RegionSet)?;
    let n = c.scene.recon.frames.len();
    if c.frames.len() != n {
        return Err(PipelineError::Conflict(format!(
            "{} frames on disk but {n} reconstructed; re-run reconstruct",
            c.frames.len()
        )));
    }
    let depths = (0..n)
        .map(|k| frame_depth(project, &c.scene, k))
        .collect::<Result<Vec<_>>>()?;
    let backgrounds = c.frames.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<FrameRenderJob> = (0..n)
        .map(|k| FrameRenderJob {
            frame_index: k,
            pose: c.scene.poses[k],
            intr: c.scene.intr,
            scene_depth: &depths[k],
            background: &backgrounds[k],
            mesh: &c.mesh,
            placement: &c.placement,
            supersample: settings.supersample,
        })
        .collect();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let outputs = render_sequence(&jobs, settings.eps_rel, settings.jobs, |_| {
        let k = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        progress("render", 0.9 * k as f64 / n as f64);
    })?;
    std::fs::create_dir_all(project.root.join("out"))?;
    if layers {
        std::fs::create_dir_all(project.root.join("layers"))?;
    }
    for (k, out) in outputs.into_iter().enumerate() {
        out.composite.save(project.out_path(k))?;
        if layers {
            out.layer.image.save(project.layer_path(k))?;
        }
    }
    project.advance(State::Rendered)?;
    progress("done", 1.0);
    Ok(n)
}

/// Gaussians to a textured OBJ/MTL/PNG triplet at `out_stem`.
pub fn extract_mesh(ply: &Path, out_stem: &Path, settings: &Settings) -> Result<TexturedMesh> {
    if !ply.is_file() {
        return Err(PipelineError::MissingInput(format!("gaussians {}", ply.display())));
    }
    let cloud = load_gaussians(ply)?;
    let mesh = pool(settings.jobs)?.install(|| -> Result<TexturedMesh> {
        let field = weighted_opacity_field(&cloud, &settings.grid_spec())?;
        let mesh = marching_cubes(&field, settings.iso);
        log::info!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
        Ok(bake_texture(&mesh, &cloud, &settings.bake_options())?)
    })?;
    if let Some(parent) = out_stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_obj(out_stem.with_extension(""), &mesh)?;
    Ok(mesh)
}

/// Ground truth shipped alongside the synthetic fixture, in the frame of the
/// first camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub intrinsics: [f64; 6],
    pub poses: Vec<[f64; 7]>,
    pub floor_normal: [f64; 3],
    pub floor_offset: f64,
    pub wall_normal: [f64; 3],
    pub wall_offset: f64,
    /// A box on frame 0 that sees only floor.
    pub floor_box: [f64; 4],
}

pub struct FixturePaths {
    pub frames: PathBuf,
    pub flow: PathBuf,
    pub cube: PathBuf,
    pub splat: PathBuf,
    pub truth: PathBuf,
}

impl FixturePaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            frames: dir.join("frames"),
            flow: dir.join("flow"),
            cube: dir.join("cube.obj"),
            splat: dir.join("splat.ply"),
            truth: dir.join("truth.json"),
        }
    }
}

/// Writes the synthetic orbit fixture: frames, forward and backward flows, a
/// unit cube, a single-splat cloud and the ground truth.
pub fn write_fixture(dir: &Path, n_frames: usize) -> Result<FixtureTruth> {
    let scene = OrbitScene::with_frames(n_frames);
    let paths = FixturePaths::new(dir);
    std::fs::create_dir_all(&paths.frames)?;
    std::fs::create_dir_all(&paths.flow)?;
    for k in 0..n_frames {
        scene.render_frame(k).save(paths.frames.join(format!("{k:06}.png")))?;
    }
    for k in 0..n_frames.saturating_sub(1) {
        save_flow(paths.flow.join(flow_name(k, k + 1)), &scene.flow(k, k + 1))?;
        save_flow(paths.flow.join(flow_name(k + 1, k)), &scene.flow(k + 1, k))?;
    }
    save_obj(
        paths.cube.with_extension(""),
        &TexturedMesh::cube(1.0, [200, 60, 40, 255]),
    )?;
    let splat = Gaussian::isotropic(Vec3::zeros(), 0.1, 1.0, Vec3::new(0.8, 0.3, 0.2));
    save_gaussians(&paths.splat, &GaussianCloud::new(vec![splat]))?;
    let (floor, wall) = (scene.floor_plane(), scene.wall_plane());
    let truth = FixtureTruth {
        intrinsics: scene.intr.to_array(),
        poses: scene.poses().iter().map(Pose::to_array).collect(),
        floor_normal: floor.normal.into(),
        floor_offset: floor.offset,
        wall_normal: wall.normal.into(),
        wall_offset: wall.offset,
        floor_box: [200.0, 380.0, 440.0, 470.0],
    };
    save_json(&paths.truth, &truth)?;
    Ok(truth)
}
