use std::path::Path;

use clap::Parser;
use placekit::config::{PartialConfig, Settings};
use placekit::project::{Project, State};
use proptest::prelude::*;

#[derive(Debug, Parser)]
struct Flags {
    #[command(flatten)]
    settings: PartialConfig,
}

/// Where a key's value comes from in one draw.
#[derive(Debug, Clone, Copy)]
enum Source {
    Default,
    File,
    Flag,
    Both,
}

fn source() -> impl Strategy<Value = Source> {
    prop_oneof![
        Just(Source::Default),
        Just(Source::File),
        Just(Source::Flag),
        Just(Source::Both)
    ]
}

struct Layers {
    toml: String,
    argv: Vec<String>,
}

impl Layers {
    fn put(&mut self, key: &str, src: Source, file: String, flag: String) {
        if matches!(src, Source::File | Source::Both) {
            self.toml.push_str(&format!("{key} = {file}\n"));
        }
        if matches!(src, Source::Flag | Source::Both) {
            self.argv.push(format!("--{}", key.replace('_', "-")));
            self.argv.push(flag);
        }
    }
}

fn expect<T: Copy>(src: Source, default: T, file: T, flag: T) -> T {
    match src {
        Source::Default => default,
        Source::File => file,
        Source::Flag | Source::Both => flag,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_key_resolves_flag_over_file_over_default(
        tau in (source(), 1.0f64..50.0, 1.0f64..50.0),
        window in (source(), 0usize..12, 0usize..12),
        fill in (source(), 0.05f64..1.0, 0.05f64..1.0),
        iso in (source(), 0.05f64..0.95, 0.05f64..0.95),
        grid in (source(), 2usize..300, 2usize..300),
        eps in (source(), 0.0f64..0.2, 0.0f64..0.2),
        jobs in (source(), 0usize..16, 0usize..16),
        seed in (source(), any::<u64>(), any::<u64>()),
        focal in (source(), 10.0f64..2000.0, 10.0f64..2000.0),
    ) {
        let mut l = Layers { toml: String::new(), argv: vec!["placekit".into()] };
        l.put("tau", tau.0, format!("{:?}", tau.1), format!("{:?}", tau.2));
        l.put("window", window.0, window.1.to_string(), window.2.to_string());
        l.put("fill_ratio", fill.0, format!("{:?}", fill.1), format!("{:?}", fill.2));
        l.put("iso", iso.0, format!("{:?}", iso.1), format!("{:?}", iso.2));
        l.put("grid", grid.0, grid.1.to_string(), grid.2.to_string());
        l.put("eps_rel", eps.0, format!("{:?}", eps.1), format!("{:?}", eps.2));
        l.put("jobs", jobs.0, jobs.1.to_string(), jobs.2.to_string());
        // TOML integers are signed 64-bit, so large seeds only travel by flag
        let file_seed = seed.1 >> 1;
        l.put("seed", seed.0, file_seed.to_string(), seed.2.to_string());
        l.put("init_focal", focal.0, format!("{:?}", focal.1), format!("{:?}", focal.2));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("placekit.toml");
        std::fs::write(&path, &l.toml).unwrap();
        let flags = Flags::try_parse_from(&l.argv).unwrap();
        let s = Settings::resolve(Some(&path), &flags.settings).unwrap();

        let d = Settings::default();
        prop_assert_eq!(s.tau, expect(tau.0, d.tau, tau.1, tau.2));
        prop_assert_eq!(s.window, expect(window.0, d.window, window.1, window.2));
        prop_assert_eq!(s.fill_ratio, expect(fill.0, d.fill_ratio, fill.1, fill.2));
        prop_assert_eq!(s.iso, expect(iso.0, d.iso, iso.1, iso.2));
        prop_assert_eq!(s.grid, expect(grid.0, d.grid, grid.1, grid.2));
        prop_assert_eq!(s.eps_rel, expect(eps.0, d.eps_rel, eps.1, eps.2));
        prop_assert_eq!(s.jobs, expect(jobs.0, d.jobs, jobs.1, jobs.2));
        prop_assert_eq!(s.seed, expect(seed.0, d.seed, file_seed, seed.2));
        prop_assert_eq!(s.init_focal, expect(focal.0, d.init_focal, Some(focal.1), Some(focal.2)));
        // keys never mentioned keep their defaults
        prop_assert_eq!((s.huber, s.views, s.tex_size), (d.huber, d.views, d.tex_size));
    }
}

const STATES: [State; 5] = [
    State::Created,
    State::FramesLoaded,
    State::Reconstructed,
    State::RegionSet,
    State::Rendered,
];

/// Every artifact with the state that produces it.
fn artifacts(p: &Project) -> Vec<(State, std::path::PathBuf)> {
    vec![
        (State::Reconstructed, p.recon_path()),
        (State::Reconstructed, p.depth_path(0)),
        (State::RegionSet, p.region_path()),
        (State::RegionSet, p.placement_path()),
        (State::Rendered, p.out_path(0)),
        (State::Rendered, p.layer_path(0)),
    ]
}

fn touch(path: &Path) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, b"x").unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn no_artifact_outlives_its_state(steps in prop::collection::vec(0usize..5, 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("p");
        let mut project = Project::create(&root, "p", Path::new("frames"), Path::new("flow")).unwrap();
        for &i in &steps {
            let target = STATES[i];
            let before: Vec<_> = artifacts(&project).into_iter().filter(|(_, f)| f.exists()).collect();
            project.advance(target).unwrap();
            // a stage writes its outputs after reaching its state
            for (owner, file) in artifacts(&project) {
                if owner == target {
                    touch(&file);
                }
            }
            let reopened = Project::open(&root).unwrap();
            prop_assert_eq!(reopened.state(), target);
            for (owner, file) in artifacts(&project) {
                if owner > target {
                    prop_assert!(!file.exists(), "{} survived a move to {:?}", file.display(), target);
                }
            }
            for (owner, file) in before {
                if owner <= target {
                    prop_assert!(file.exists(), "{} lost on a move to {:?}", file.display(), target);
                }
            }
        }
    }
}
