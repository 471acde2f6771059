//! Command-line front end. Paths are relative to `--workdir`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::compositor::RenderMode;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::workflow::{read_latents, EditSource, ModelKind, Pose, Workspace};

#[derive(Debug, Parser)]
#[command(name = "comprf", version, about = "Compositional generative radiance fields")]
pub struct Cli {
    /// Directory all relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// TOML run configuration; built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides `train.seed`.
    #[arg(long = "train-seed", global = true)]
    pub train_seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with ground-truth part masks.
    GenData {
        /// Number of records; `data.records` otherwise.
        #[arg(long)]
        n: Option<usize>,
        /// Output directory; `paths.data` otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the whole-object generator.
    TrainGlobal,
    /// Render and segment a dataset from the global generator.
    Distill,
    /// Fine-tune one copy of the global generator per part.
    TrainParts,
    /// Train the latent blending network.
    TrainBlend,
    /// Train one generator per part from scratch on segmented images.
    TrainIndBaseline,
    /// Render a composite from sampled latents.
    Sample(SampleArgs),
    /// Fit latents to an image.
    Invert(InvertArgs),
    /// Swap one part's latent and re-render.
    Edit(EditArgs),
    /// Azimuth sweep of a latents file.
    Turntable(TurntableArgs),
    /// Evaluate trained models and print the statistics as JSON.
    Report,
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Serve the HTTP API.
    #[cfg(feature = "server")]
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// One latent shared by every part.
    #[arg(long, conflicts_with = "independent")]
    pub tie_latents: bool,
    /// A separate latent per part (the default).
    #[arg(long)]
    pub independent: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Azimuth,elevation in radians.
    #[arg(long, default_value = "0,0", allow_hyphen_values = true)]
    pub pose: Pose,
    /// Skip the blend net.
    #[arg(long)]
    pub no_blend: bool,
    /// Use the independently trained baseline parts.
    #[arg(long)]
    pub baseline: bool,
    /// Render with every part but this one painted white.
    #[arg(long)]
    pub whiteout: Option<String>,
    pub out: PathBuf,
    /// Also write the sampled latents.
    #[arg(long)]
    pub latents_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    pub image: PathBuf,
    /// One mask PNG per part, in part order.
    #[arg(long, value_delimiter = ',')]
    pub masks: Vec<PathBuf>,
    /// Camera pose of the target.
    #[arg(long, default_value = "0,0", allow_hyphen_values = true)]
    pub pose: Pose,
    #[arg(long)]
    pub no_blend: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `inversion.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    pub out: PathBuf,
    /// Also write the reconstruction.
    #[arg(long)]
    pub render_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    pub latents: PathBuf,
    /// Part name or index.
    #[arg(long)]
    pub part: String,
    /// Take the part's latent from this file.
    #[arg(long = "ref", conflicts_with = "seed")]
    pub reference: Option<PathBuf>,
    /// Sample the part's latent from this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    pub out: PathBuf,
    #[arg(long)]
    pub latents_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TurntableArgs {
    pub latents: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    /// Half-width of the azimuth sweep in radians.
    #[arg(long, default_value_t = 0.6)]
    pub span: f64,
    pub out: PathBuf,
}

impl Cli {
    pub fn workspace(&self) -> Result<Workspace> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(&self.workdir.join(p))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.train_seed {
            cfg.train.seed = s;
        }
        Workspace::new(&self.workdir, cfg)
    }
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Runs one command; the returned string is printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    let ws = cli.workspace()?;
    let out = |p: &Path| -> Result<PathBuf> {
        let p = ws.path(p);
        parent_dir(&p)?;
        Ok(p)
    };
    match &cli.command {
        Command::GenData { n, out: dir } => {
            let mut cfg = ws.cfg.clone();
            if let Some(n) = n {
                cfg.data.records = *n;
            }
            if let Some(d) = dir {
                cfg.paths.data = d.to_string_lossy().into_owned();
            }
            let ws = Workspace::new(&ws.root, cfg)?;
            let m = ws.gen_data()?;
            Ok(format!("wrote {} records to {}", m.records.len(), ws.path(&ws.cfg.paths.data).display()))
        }
        Command::TrainGlobal => {
            ws.train_global()?;
            Ok(format!("global generator saved to {}", ws.models().global().display()))
        }
        Command::Distill => {
            let m = ws.distill()?;
            Ok(format!("distilled {} records", m.records.len()))
        }
        Command::TrainParts => {
            ws.train_parts()?;
            Ok("part generators saved".into())
        }
        Command::TrainBlend => {
            ws.train_blend()?;
            Ok(format!("blend net saved to {}", ws.models().blend().display()))
        }
        Command::TrainIndBaseline => {
            ws.train_baseline()?;
            Ok(format!("baseline parts saved to {}", ws.baseline().root.display()))
        }
        Command::Sample(a) => {
            let kind = if a.baseline { ModelKind::Baseline } else { ModelKind::Parts };
            let model = ws.load_model(kind)?;
            let (file, mut img) = ws.sample(&model, a.tie_latents, a.seed, a.pose, !a.no_blend)?;
            if let Some(part) = &a.whiteout {
                let i = model.part_index(part)?;
                img = ws.render_file(&model, &file, None, RenderMode::Whiteout(i))?.image;
            }
            ws.write_png(&out(&a.out)?, &img)?;
            if let Some(p) = &a.latents_out {
                ws.write_json(&out(p)?, &file)?;
            }
            Ok(format!("wrote {}", a.out.display()))
        }
        Command::Invert(a) => {
            let model = ws.load_model(ModelKind::Parts)?;
            let target = Image::load_png(&ws.path(&a.image))?;
            let masks = if a.masks.is_empty() {
                None
            } else {
                Some(a.masks.iter().map(|m| Mask::load_png(&ws.path(m))).collect::<Result<Vec<_>>>()?)
            };
            let cam = ws.camera(a.pose)?.with_resolution(target.width, target.height);
            let tuned;
            let ws = match a.steps {
                Some(s) => {
                    let mut cfg = ws.cfg.clone();
                    cfg.inversion.steps = s;
                    tuned = Workspace::new(&ws.root, cfg)?;
                    &tuned
                }
                None => &ws,
            };
            let file = ws.invert(&model, &target, masks, cam, !a.no_blend, a.seed)?;
            ws.write_json(&out(&a.out)?, &file)?;
            if let Some(p) = &a.render_out {
                let img = ws.render_file(&model, &file, None, RenderMode::Composite)?.image;
                ws.write_png(&out(p)?, &img)?;
            }
            let last = file.losses.last().copied().unwrap_or(f64::NAN);
            Ok(format!("inverted in {} steps, final loss {last:.6}", file.losses.len().saturating_sub(1)))
        }
        Command::Edit(a) => {
            let model = ws.load_model(ModelKind::Parts)?;
            let file = read_latents(&ws.path(&a.latents))?;
            let part = model.part_index(&a.part)?;
            let reference;
            let source = match (&a.reference, a.seed) {
                (Some(r), _) => {
                    reference = read_latents(&ws.path(r))?;
                    EditSource::Latents(&reference)
                }
                (None, Some(s)) => EditSource::Seed(s),
                (None, None) => return Err(Error::InvalidArgument("edit needs --ref or --seed".into())),
            };
            let (edited, img) = ws.edit(&model, &file, part, source)?;
            ws.write_png(&out(&a.out)?, &img)?;
            if let Some(p) = &a.latents_out {
                ws.write_json(&out(p)?, &edited)?;
            }
            Ok(format!("wrote {}", a.out.display()))
        }
        Command::Turntable(a) => {
            let model = ws.load_model(ModelKind::Parts)?;
            let file = read_latents(&ws.path(&a.latents))?;
            let frames = ws.turntable(&model, &file, a.frames, a.span)?;
            let dir = ws.path(&a.out);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, f) in frames.iter().enumerate() {
                ws.write_png(&dir.join(format!("frame_{i:03}.png")), f)?;
            }
            Ok(format!("wrote {} frames to {}", frames.len(), dir.display()))
        }
        Command::Report => Ok(serde_json::to_string_pretty(&ws.report()?).expect("report serializes")),
        Command::ShowConfig => Ok(ws.cfg.to_toml()),
        #[cfg(feature = "server")]
        Command::Serve { port, host } => {
            crate::server::serve(ws, host, *port)?;
            Ok("server stopped".into())
        }
    }
}

/// Parses `args`, runs, prints, and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
