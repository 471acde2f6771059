#![allow(dead_code)]

use std::path::Path;

use comprf::config::RunConfig;
use comprf::fields::{GeneratorArch, PartGenerator};
use comprf::pipeline::{BlendNet, ModelDir};
use comprf::renderer::SeededRng;
use comprf::workflow::Workspace;
use rand::SeedableRng;

pub fn fixture_arch() -> GeneratorArch {
    GeneratorArch {
        latent_dim: 4,
        mapping_layers: 1,
        width: 4,
        backbone_layers: 1,
        omega_first: 1.0,
        omega_hidden: 1.0,
        density_bias: 2.0,
        density_prior: [8.0, 0.4],
    }
}

/// Two hand-set parts: an opaque reddish ball pushed toward +z and a
/// bluish one pushed toward +y. Latents only tint the colors.
pub fn fixture_parts() -> Vec<PartGenerator> {
    let arch = fixture_arch();
    let mut rng = SeededRng::seed_from_u64(5);
    let (d, dz) = (arch.width, arch.latent_dim);
    [("skin", 2usize, [2.0, -1.0, -1.0]), ("hair", 1usize, [-1.0, -1.0, 2.0])]
        .into_iter()
        .map(|(name, axis, color)| {
            let mut g = PartGenerator::new(name, arch.clone(), &mut rng).unwrap();
            let p = g.backbone_params_mut();
            for t in p.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            // layer 0: W [3, d], b, Gw [dz, d], gb, Bw [dz, d], bb
            p[0].data_mut()[axis * d] = 1.0;
            for j in 0..dz {
                for u in 1..d {
                    p[4].data_mut()[j * d + u] = 0.5 * ((j + u) % 3) as f64 - 0.5;
                }
            }
            // density head [d, 1] then bias
            p[6].data_mut()[0] = 6.0;
            p[7].data_mut()[0] = arch.density_bias;
            // color head [d, 3] then bias
            for u in 1..d {
                for c in 0..3 {
                    p[8].data_mut()[u * 3 + c] = 0.3;
                }
            }
            p[9].data_mut().copy_from_slice(&color);
            g
        })
        .collect()
}

pub fn fixture_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.render.samples = 24;
    cfg.inversion.steps = 6;
    cfg.inversion.samples_per_ray = 12;
    cfg.inversion.mean_samples = 16;
    cfg
}

/// Workspace at `root` with fixture parts (and an identity blend net)
/// under `models/`.
pub fn fixture_workspace(root: &Path) -> Workspace {
    let ws = Workspace::new(root, fixture_config()).unwrap();
    let md: ModelDir = ws.models();
    std::fs::create_dir_all(&md.root).unwrap();
    let parts = fixture_parts();
    md.save_parts(&parts, &ws.hash).unwrap();
    let bn = BlendNet::new(parts.len(), fixture_arch().latent_dim, 8, &mut SeededRng::seed_from_u64(1)).unwrap();
    md.save_blend(&bn, &ws.hash).unwrap();
    ws
}

/// A run configuration small enough for every stage to finish in seconds.
pub fn tiny_run_config() -> RunConfig {
    use comprf::critic::CriticConfig;
    let mut cfg = RunConfig::default();
    let t = &mut cfg.train;
    t.seed = 11;
    t.arch = GeneratorArch {
        latent_dim: 8,
        mapping_layers: 2,
        width: 16,
        backbone_layers: 2,
        ..t.arch.clone()
    };
    t.critic = CriticConfig {
        resolution: 4,
        channels: vec![4, 4],
    };
    t.cameras.lens.resolution = 8;
    t.gan_resolution = 4;
    t.samples_per_ray = 8;
    t.global.steps = 4;
    t.global.batch = 2;
    t.decouple.steps = 3;
    t.decouple.batch = 2;
    t.decouple.pixels = 12;
    t.blend.steps = 3;
    t.blend.batch = 2;
    t.blend.hidden = 8;
    t.baseline = t.global.clone();
    cfg.data.records = 6;
    cfg.data.samples = 12;
    cfg.distill.records = 4;
    cfg.distill.heldout = 2;
    cfg.distill.samples = 8;
    cfg.render.samples = 8;
    cfg.inversion.steps = 4;
    cfg.inversion.samples_per_ray = 8;
    cfg.inversion.mean_samples = 8;
    cfg.eval.critic_samples = 3;
    cfg.eval.white_samples = 3;
    cfg
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn comprf(workdir: &Path, args: &[&str]) -> Run {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_comprf"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn comprf_ok(workdir: &Path, args: &[&str]) -> String {
    let r = comprf(workdir, args);
    assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
    r.stdout
}

/// Every stage of the tiny configuration through the binary, followed by
/// sampling, inversion, editing and a turntable.
pub fn tiny_pipeline(workdir: &Path) {
    std::fs::write(workdir.join("run.toml"), tiny_run_config().to_toml()).unwrap();
    let c = ["--config", "run.toml"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let steps: &[&[&str]] = &[
        &["gen-data"],
        &["train-global"],
        &["distill"],
        &["train-parts"],
        &["train-blend"],
        &["train-ind-baseline"],
        &["sample", "--seed", "7", "--latents-out", "out/s7.json", "out/s7.png"],
        &["sample", "--tie-latents", "--seed", "7", "--pose", "-0.2,0.1", "out/tied.png"],
        &["sample", "--baseline", "--seed", "7", "out/base.png"],
        &["invert", "out/s7.png", "--steps", "3", "--render-out", "out/inv.png", "out/inv.json"],
        &["edit", "out/s7.json", "--part", "1", "--seed", "3", "--latents-out", "out/edit.json", "out/edit.png"],
        &["turntable", "out/s7.json", "--frames", "3", "out/turn"],
    ];
    for s in steps {
        let args = with(s);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        comprf_ok(workdir, &refs);
    }
}

/// Relative path and contents of every file under `root`, sorted.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
