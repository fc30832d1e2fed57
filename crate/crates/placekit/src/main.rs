use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use placekit::api::AppState;
use placekit::artifacts::RegionSpec;
use placekit::config::{PartialConfig, Settings};
use placekit::pipeline::{self, PlaceParams};
use placekit::project::Project;
use placekit::PipelineError;

#[derive(Debug, Parser)]
#[command(
    name = "placekit",
    version,
    about = "Reconstruct a video, place a 3D object in it and render the composite"
)]
struct Cli {
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: PartialConfig,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate intrinsics, poses and depth from frames and flows.
    Reconstruct {
        frames: PathBuf,
        flow: PathBuf,
        #[arg(long, short)]
        project: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    /// Convert a Gaussian PLY into a textured OBJ/MTL/PNG triplet.
    ExtractMesh {
        gaussians: PathBuf,
        /// Output stem: `<out>.obj`, `<out>.mtl`, `<out>.png`.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit the support plane of a region and place a mesh on it.
    Place {
        #[arg(long, short)]
        project: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Pixel box `u0,v0,u1,v1`.
        #[arg(long = "box", value_parser = parse_box, conflicts_with = "point", required_unless_present = "point")]
        bbox: Option<[f64; 4]>,
        /// Polygon vertex `u,v`; repeat for each vertex.
        #[arg(long, value_parser = parse_pair)]
        point: Vec<[f64; 2]>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        yaw_deg: f64,
        #[arg(long, default_value_t = 1.0)]
        scale_mult: f64,
        /// Offset `dx,dz` along the plane.
        #[arg(long, value_parser = parse_pair, default_value = "0,0", allow_hyphen_values = true)]
        offset: [f64; 2],
    },
    /// Composite the placed object into every frame.
    Render {
        #[arg(long, short)]
        project: PathBuf,
        /// Also write the object-only RGBA layers.
        #[arg(long)]
        layers: bool,
    },
    /// Serve the HTTP API over a directory of projects.
    Serve {
        #[arg(long, default_value = "projects")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write the synthetic orbit fixture.
    Fixture {
        dir: PathBuf,
        #[arg(long, default_value_t = 24)]
        frames: usize,
    },
}

fn parse_numbers<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    parse_numbers(s)
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    parse_numbers(s)
}

fn progress(stage: &str, f: f64) {
    log::info!("{stage}: {:.0}%", 100.0 * f);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::resolve(cli.config.as_deref(), &cli.settings)?;
    match cli.command {
        Command::Reconstruct {
            frames,
            flow,
            project,
            name,
        } => {
            let name = name.unwrap_or_else(|| {
                project
                    .file_name()
                    .map_or("project".into(), |n| n.to_string_lossy().into())
            });
            let mut p = pipeline::create_project(&project, &name, &frames, &flow)?;
            let recon = pipeline::reconstruct(&mut p, &settings, &progress)?;
            let keyframes = recon.frames.iter().filter(|f| f.keyframe).count();
            println!(
                "{}: focal {:.3}, {} frames, {keyframes} keyframes",
                p.recon_path().display(),
                recon.intrinsics[0],
                recon.frames.len()
            );
        }
        Command::ExtractMesh { gaussians, out } => {
            let mesh = pipeline::extract_mesh(&gaussians, &out, &settings)?;
            println!(
                "{}: {} vertices, {} triangles",
                out.with_extension("obj").display(),
                mesh.vertices.len(),
                mesh.triangles.len()
            );
        }
        Command::Place {
            project,
            mesh,
            frame,
            bbox,
            point,
            yaw_deg,
            scale_mult,
            offset,
        } => {
            let mut p = Project::open(&project)?;
            let spec = RegionSpec {
                frame,
                bbox,
                points: bbox.is_none().then_some(point),
            };
            let params = PlaceParams {
                yaw_deg,
                scale_mult,
                planar_offset: offset,
                mesh_path: mesh,
            };
            let placed = pipeline::select_and_place(&mut p, &settings, &spec, &params)?;
            println!(
                "{}: scale {:.4}, normal {:?}",
                p.placement_path().display(),
                placed.transform.scale,
                placed.plane.normal
            );
        }
        Command::Render { project, layers } => {
            let mut p = Project::open(&project)?;
            let n = pipeline::render(&mut p, &settings, layers, &progress)?;
            println!("{}: {n} frames", project.join("out").display());
        }
        Command::Serve { root, addr } => {
            let app = AppState::new(&root, settings).with_context(|| format!("project root {}", root.display()))?;
            tokio::runtime::Runtime::new()?.block_on(placekit::api::serve(app, addr))?;
        }
        Command::Fixture { dir, frames } => {
            pipeline::write_fixture(&dir, frames)?;
            println!("{}: {frames} frames", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
