//! Tunable settings, resolved as command-line flag > config file > default.
//!
//! The config file is TOML with the same keys as the long flags, using
//! underscores (`grid_factor = 8`, `eps_rel = 0.02`). Unknown keys are errors.

use std::path::Path;

use clap::Args;
use placekit_core::placement::{Adjustment, RansacOptions};
use placekit_core::recon::ReconOptions;
use placekit_core::scba::SolverOptions;
use placekit_core::splat::{BakeOptions, GridSpec};
use serde::Deserialize;

use crate::error::{PipelineError, Result};

/// Every option as optional, shared by the flag parser and the config file.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[command(next_help_heading = "Settings")]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    /// Keyframe threshold on accumulated mean flow (px).
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Sliding-window size in keyframes (0 solves the whole graph).
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Neighbouring keyframes connected in the BA graph.
    #[arg(long, global = true)]
    pub edge_radius: Option<usize>,
    /// Grid downsample factor for bundle adjustment.
    #[arg(long, global = true)]
    pub grid_factor: Option<usize>,
    /// Huber threshold in grid pixels (0 disables).
    #[arg(long, global = true)]
    pub huber: Option<f64>,
    /// Levenberg-Marquardt iteration cap.
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// Initial focal length in pixels (default: 60° horizontal field of view).
    #[arg(long, global = true)]
    pub init_focal: Option<f64>,
    /// Fraction of the region extent the placed object spans.
    #[arg(long, global = true)]
    pub fill_ratio: Option<f64>,
    /// RANSAC hypotheses per plane fit.
    #[arg(long, global = true)]
    pub ransac_iters: Option<usize>,
    /// RANSAC random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Region points kept for plane fitting.
    #[arg(long, global = true)]
    pub max_region_points: Option<usize>,
    /// Opacity level extracted as the mesh surface.
    #[arg(long, global = true)]
    pub iso: Option<f64>,
    /// Lattice resolution per axis for mesh extraction.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Number of bake views.
    #[arg(long, global = true)]
    pub views: Option<usize>,
    /// Texture atlas side in pixels.
    #[arg(long, global = true)]
    pub tex_size: Option<usize>,
    /// Relative depth tolerance for occlusion.
    #[arg(long, global = true)]
    pub eps_rel: Option<f64>,
    /// Render samples per pixel along each axis (1 disables anti-aliasing).
    #[arg(long, global = true)]
    pub supersample: Option<u32>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub tau: f64,
    pub window: usize,
    pub edge_radius: usize,
    pub grid_factor: usize,
    pub huber: f64,
    pub max_iters: usize,
    pub init_focal: Option<f64>,
    pub fill_ratio: f64,
    pub ransac_iters: usize,
    pub seed: u64,
    pub max_region_points: usize,
    pub iso: f64,
    pub grid: usize,
    pub views: usize,
    pub tex_size: usize,
    pub eps_rel: f64,
    pub supersample: u32,
    pub jobs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            tau: 16.0,
            window: 0,
            edge_radius: 2,
            grid_factor: 8,
            huber: 4.0,
            max_iters: 100,
            init_focal: None,
            fill_ratio: 0.5,
            ransac_iters: 1000,
            seed: 0,
            max_region_points: placekit_core::placement::MAX_REGION_POINTS,
            iso: 0.5,
            grid: 128,
            views: 16,
            tex_size: 1024,
            eps_rel: placekit_core::render::DEFAULT_EPS_REL,
            supersample: 1,
            jobs: 0,
        }
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr, [$($f:ident),*], [$($o:ident),*]) => {
        $(if let Some(v) = $src.$f { $dst.$f = v; })*
        $(if $src.$o.is_some() { $dst.$o = $src.$o; })*
    };
}

impl Settings {
    pub fn apply(&mut self, p: &PartialConfig) {
        overlay!(
            self,
            p,
            [
                tau,
                window,
                edge_radius,
                grid_factor,
                huber,
                max_iters,
                fill_ratio,
                ransac_iters,
                seed,
                max_region_points,
                iso,
                grid,
                views,
                tex_size,
                eps_rel,
                supersample,
                jobs
            ],
            [init_focal]
        );
    }

    /// Defaults, then the optional config file, then flags.
    pub fn resolve(file: Option<&Path>, flags: &PartialConfig) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::MissingInput(format!("config {}: {e}", path.display())))?;
            let parsed: PartialConfig = toml::from_str(&text).map_err(|e| PipelineError::parse(path, e))?;
            s.apply(&parsed);
        }
        s.apply(flags);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(PipelineError::Config(what.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.grid_factor == 0 {
            return bad("grid_factor must be at least 1");
        }
        if self.edge_radius == 0 {
            return bad("edge_radius must be at least 1");
        }
        if !(self.fill_ratio > 0.0) {
            return bad("fill_ratio must be positive");
        }
        if self.grid < 2 {
            return bad("grid must be at least 2");
        }
        if !(self.eps_rel >= 0.0) {
            return bad("eps_rel must be non-negative");
        }
        if !(1..=4).contains(&self.supersample) {
            return bad("supersample must be between 1 and 4");
        }
        if self.init_focal.is_some_and(|f| !(f > 0.0)) {
            return bad("init_focal must be positive");
        }
        Ok(())
    }

    pub fn recon_options(&self) -> ReconOptions {
        ReconOptions {
            tau: self.tau,
            edge_radius: self.edge_radius,
            init_focal: self.init_focal,
            solver: SolverOptions {
                max_iters: self.max_iters,
                huber_delta: self.huber,
                grid_stride: self.grid_factor,
                window: (self.window > 0).then_some(self.window),
                ..SolverOptions::default()
            },
            ..ReconOptions::default()
        }
    }

    pub fn ransac_options(&self) -> RansacOptions {
        RansacOptions {
            iterations: self.ransac_iters,
            tolerance: None,
            seed: self.seed,
        }
    }

    pub fn adjustment(&self, yaw_deg: f64, scale_mult: f64, planar_offset: [f64; 2]) -> Adjustment {
        Adjustment {
            yaw_deg,
            scale_mult,
            planar_offset,
            fill_ratio: self.fill_ratio,
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::cubic(self.grid)
    }

    pub fn bake_options(&self) -> BakeOptions {
        BakeOptions {
            n_views: self.views,
            tex_size: self.tex_size,
            ..BakeOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("placekit.toml");
        std::fs::write(&path, "tau = 12.0\niso = 0.4\njobs = 3\n").unwrap();
        let flags = PartialConfig {
            iso: Some(0.3),
            ..Default::default()
        };
        let s = Settings::resolve(Some(&path), &flags).unwrap();
        assert_eq!(s.iso, 0.3);
        assert_eq!(s.tau, 12.0);
        assert_eq!(s.jobs, 3);
        assert_eq!(s.grid, 128);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "tua = 1.0\n").unwrap();
        assert!(matches!(
            Settings::resolve(Some(&path), &PartialConfig::default()),
            Err(PipelineError::Parse { .. })
        ));
    }
}
