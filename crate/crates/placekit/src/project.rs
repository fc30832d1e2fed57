//! On-disk project store and its forward-only state machine.
//!
//! ```text
//! <root>/project.json
//!        recon.json            state >= Reconstructed
//!        depth/%06d.pfm
//!        region.json           state >= RegionSet
//!        placement.json
//!        out/%06d.png          state == Rendered
//!        layers/%06d.png
//! ```

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{load_json, save_json};
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum State {
    Created,
    FramesLoaded,
    Reconstructed,
    RegionSet,
    Rendered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub name: String,
    pub frames_dir: PathBuf,
    pub flow_dir: PathBuf,
    pub state: State,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Project {
    pub root: PathBuf,
    pub meta: ProjectMeta,
}

const META: &str = "project.json";
const LOCK: &str = ".lock";

impl Project {
    pub fn create(root: &Path, name: &str, frames_dir: &Path, flow_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let project = Project {
            root: root.to_path_buf(),
            meta: ProjectMeta {
                name: name.to_string(),
                frames_dir: frames_dir.to_path_buf(),
                flow_dir: flow_dir.to_path_buf(),
                state: State::Created,
                mesh: None,
            },
        };
        project.clear_after(State::Created)?;
        project.save()?;
        Ok(project)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let meta = load_json(&root.join(META))?;
        Ok(Project {
            root: root.to_path_buf(),
            meta,
        })
    }

    pub fn exists(root: &Path) -> bool {
        root.join(META).is_file()
    }

    pub fn save(&self) -> Result<()> {
        save_json(&self.root.join(META), &self.meta)
    }

    pub fn state(&self) -> State {
        self.meta.state
    }

    pub fn require(&self, required: State) -> Result<()> {
        if self.meta.state < required {
            return Err(PipelineError::State {
                current: self.meta.state,
                required,
            });
        }
        Ok(())
    }

    /// Moves to `state`, deleting every artifact that belongs to a later one.
    /// Re-running a stage therefore rewinds the project to that stage.
    pub fn advance(&mut self, state: State) -> Result<()> {
        self.clear_after(state)?;
        self.meta.state = state;
        self.save()
    }

    fn clear_after(&self, state: State) -> Result<()> {
        let mut doomed: Vec<PathBuf> = Vec::new();
        if state < State::Reconstructed {
            doomed.extend([self.recon_path(), self.root.join("depth")]);
        }
        if state < State::RegionSet {
            doomed.extend([self.region_path(), self.placement_path()]);
        }
        if state < State::Rendered {
            doomed.extend([self.root.join("out"), self.root.join("layers")]);
        }
        for p in doomed {
            let res = if p.is_dir() {
                std::fs::remove_dir_all(&p)
            } else {
                std::fs::remove_file(&p)
            };
            match res {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn recon_path(&self) -> PathBuf {
        self.root.join("recon.json")
    }

    pub fn depth_path(&self, frame: usize) -> PathBuf {
        self.root.join("depth").join(format!("{frame:06}.pfm"))
    }

    pub fn region_path(&self) -> PathBuf {
        self.root.join("region.json")
    }

    pub fn placement_path(&self) -> PathBuf {
        self.root.join("placement.json")
    }

    pub fn out_path(&self, frame: usize) -> PathBuf {
        self.root.join("out").join(format!("{frame:06}.png"))
    }

    pub fn layer_path(&self, frame: usize) -> PathBuf {
        self.root.join("layers").join(format!("{frame:06}.png"))
    }

    /// Takes the single-writer lock, held until the guard drops.
    pub fn lock(&self) -> Result<ProjectLock> {
        let path = self.root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(ProjectLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(self.root.clone())),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        if let Err(e) = std::fs::remove_file(&self.path) {
            log::warn!("could not release {}: {e}", self.path.display());
        }
    }
}
