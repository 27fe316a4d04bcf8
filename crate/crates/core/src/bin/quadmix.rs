use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use quadmix::field::FieldOptions;
use quadmix::io::{export_mesh, load_grid, load_manifest, load_primitives, save_grid, save_primitives, PrimitiveFile, GRID_MAGIC};
use quadmix::metrics::evaluate;
use quadmix::optimizer::{fit_with, predict, FitConfig, FitResult};
use quadmix::primitives::{ExponentBounds, PrimitiveKind};
use quadmix::rasterizer::{OccupancyGrid, DEFAULT_CUTOFF_F};
use quadmix::scenegen::{class, SceneManifest, PRESETS};
use quadmix::{Error, Result, SINGLE_THREAD_ENV};

/// `println!` that exits quietly when stdout is closed (e.g. piped into `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        if writeln!(std::io::stdout().lock(), $($t)*).is_err() {
            std::process::exit(0);
        }
    }};
}

/// Failure reported on stderr as a single `error kind=... message="..."` line.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn existing(path: &Path) -> std::result::Result<&Path, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure {
            kind: "usage",
            message: format!("input file `{}` does not exist", path.display()),
        })
    }
}

#[derive(Parser)]
#[command(name = "quadmix", version, about = "Fit superquadric or Gaussian mixtures to semantic occupancy grids")]
struct Cli {
    /// Force single-threaded, deterministic evaluation (same as setting QUADMIX_SINGLE_THREAD=1).
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic scene and write it as a binary grid.
    Generate {
        /// Preset name (single-box, box-grid, street, random-<k>).
        #[arg(long, conflicts_with = "manifest")]
        preset: Option<String>,
        /// JSON scene manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a primitive set to a scene.
    Fit {
        #[command(flatten)]
        scene: SceneArg,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 1600)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write a checkpoint every N iterations (0 disables).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Directory for checkpoint files (defaults to the output's directory).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Score a prediction (grid or primitive file) against a ground-truth grid.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Sweep primitive kinds and counts on one scene with paired seeds.
    Compare {
        #[command(flatten)]
        scene: SceneArg,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, value_delimiter = ',', default_value = "200,400,800,1600")]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "quadric,gaussian")]
        kinds: Vec<String>,
    },
    /// Write a primitive file as an OBJ mesh.
    Export {
        #[arg(long)]
        primitives: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// Sweep superquadric exponent ranges on one scene.
    AblateEps {
        #[command(flatten)]
        scene: SceneArg,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 400)]
        count: usize,
        /// Comma-separated `lo:hi` pairs.
        #[arg(long, value_delimiter = ',', default_value = "0.01:2,0.01:5,0.1:2,0.1:5")]
        ranges: Vec<String>,
    },
}

#[derive(Args)]
struct SceneArg {
    /// Grid file, scene manifest (JSON) or preset name.
    #[arg(long)]
    scene: String,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value = "superquadric")]
    kind: String,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long)]
    eps_lo: Option<f64>,
    #[arg(long)]
    eps_hi: Option<f64>,
    /// Primitives pruned and split once during fitting (default: half the count).
    #[arg(long)]
    prune_split: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    /// Voxels sampled per step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

impl FitArgs {
    fn config(&self, count: usize) -> Result<FitConfig> {
        let d = FitConfig::default();
        let bounds = ExponentBounds::new(self.eps_lo.unwrap_or(d.eps_bounds.lo), self.eps_hi.unwrap_or(d.eps_bounds.hi))?;
        let cfg = FitConfig {
            primitive_count: count,
            kind: self.kind.parse()?,
            iterations: self.iters,
            eps_bounds: bounds,
            prune_split_count: self.prune_split,
            rng_seed: self.seed,
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            batch_points: self.batch.unwrap_or(d.batch_points),
            tau: self.tau,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn is_grid_file(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut magic = [0u8; 4];
    let n = std::fs::File::open(path)?.read(&mut magic)?;
    Ok(n == 4 && magic == GRID_MAGIC)
}

fn load_scene(arg: &str) -> std::result::Result<OccupancyGrid, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        if is_grid_file(path)? {
            Ok(load_grid(path)?)
        } else {
            Ok(load_manifest(path)?.build()?)
        }
    } else if PRESETS.contains(&arg) || arg.starts_with("random-") {
        Ok(SceneManifest::Preset {
            preset: arg.to_string(),
            seed: 0,
        }
        .build()?)
    } else {
        Err(Failure {
            kind: "usage",
            message: format!("scene `{arg}` is neither an existing file nor a preset"),
        })
    }
}

fn run_fit(scene: &OccupancyGrid, cfg: &FitConfig, checkpoints: Option<(usize, &Path, &str)>) -> Result<FitResult> {
    fit_with(scene, cfg, |p| {
        if let Some((every, dir, stem)) = checkpoints {
            if every > 0 && p.iteration % every == 0 {
                let mut f = PrimitiveFile::new(p.params.to_set());
                f.eps_bounds = cfg.eps_bounds;
                f.fit_config = Some(cfg.clone());
                save_primitives(dir.join(format!("{stem}.iter{:06}.json", p.iteration)), &f)?;
            }
        }
        Ok(())
    })
}

fn class_label(k: usize, classes: usize) -> String {
    if classes == class::NAMES.len() {
        class::NAMES[k].to_string()
    } else {
        format!("class_{}", k + 1)
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Generate {
            preset,
            manifest,
            seed,
            out,
        } => {
            let m = match (preset, manifest) {
                (Some(p), None) => SceneManifest::Preset { preset: p, seed },
                (None, Some(path)) => load_manifest(existing(&path)?)?,
                _ => {
                    return Err(Failure {
                        kind: "usage",
                        message: "exactly one of --preset or --manifest is required".into(),
                    })
                }
            };
            let grid = m.build()?;
            save_grid(&out, &grid)?;
            let d = grid.spec.dims;
            out!("dims={}x{}x{}", d[0], d[1], d[2]);
            out!("occupied={}", grid.occupied_count());
            out!("out={}", out.display());
        }
        Command::Fit {
            scene,
            fit,
            count,
            out,
            checkpoint_every,
            checkpoint_dir,
        } => {
            let grid = load_scene(&scene.scene)?;
            let cfg = fit.config(count)?;
            out!("kind={}", cfg.kind);
            out!("count={}", cfg.primitive_count);
            out!("eps_bounds=({}, {})", cfg.eps_bounds.lo, cfg.eps_bounds.hi);
            out!("prune_split={}", cfg.prune_split_count());
            let dir = checkpoint_dir.unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("primitives").to_string();
            if checkpoint_every > 0 {
                std::fs::create_dir_all(&dir).map_err(Error::from)?;
            }
            let t = Instant::now();
            let r = run_fit(&grid, &cfg, Some((checkpoint_every, &dir, &stem)))?;
            let last = r.checkpoints.last().expect("final checkpoint");
            let mut f = PrimitiveFile::new(r.primitives);
            f.eps_bounds = cfg.eps_bounds;
            f.fit_config = Some(cfg);
            save_primitives(&out, &f)?;
            out!("loss={}", last.loss);
            out!("iou={}", last.iou);
            out!("miou={}", last.miou);
            out!("seconds={:.2}", t.elapsed().as_secs_f64());
            out!("out={}", out.display());
        }
        Command::Eval { pred, gt, tau } => {
            let gt = load_grid(existing(&gt)?)?;
            let pred = existing(&pred)?;
            let pred = if is_grid_file(pred)? {
                load_grid(pred)?
            } else {
                let f = load_primitives(pred)?;
                let opts = FieldOptions {
                    form: f.form,
                    cutoff_f: DEFAULT_CUTOFF_F,
                    ..FieldOptions::default()
                };
                predict(&f.primitives, &gt.spec, opts, tau)?
            };
            let e = evaluate(&pred, &gt)?;
            out!("iou={}", e.iou);
            out!("miou={}", e.miou);
            for (k, v) in e.per_class.iter().enumerate() {
                let name = class_label(k, gt.classes.max(pred.classes));
                match v {
                    Some(x) => out!("iou.{name}={x}"),
                    None => out!("iou.{name}=nan"),
                }
            }
        }
        Command::Compare {
            scene,
            fit,
            counts,
            kinds,
        } => {
            let grid = load_scene(&scene.scene)?;
            let kinds = kinds.iter().map(|k| k.parse()).collect::<Result<Vec<PrimitiveKind>>>()?;
            out!("kind,count,seed,iou,miou,loss,seconds");
            for kind in &kinds {
                for &count in &counts {
                    let cfg = FitConfig {
                        kind: *kind,
                        ..fit.config(count)?
                    };
                    let t = Instant::now();
                    let r = run_fit(&grid, &cfg, None)?;
                    let c = r.checkpoints.last().expect("final checkpoint");
                    out!(
                        "{},{},{},{:.6},{:.6},{:.6},{:.2}",
                        kind,
                        count,
                        cfg.rng_seed,
                        c.iou,
                        c.miou,
                        c.loss,
                        t.elapsed().as_secs_f64()
                    );
                }
            }
        }
        Command::Export {
            primitives,
            out,
            resolution,
        } => {
            let f = load_primitives(existing(&primitives)?)?;
            export_mesh(&f.primitives, &out, f.form, resolution)?;
            out!("primitives={}", f.primitives.len());
            out!("out={}", out.display());
        }
        Command::AblateEps {
            scene,
            fit,
            count,
            ranges,
        } => {
            let grid = load_scene(&scene.scene)?;
            let ranges = ranges.iter().map(|r| parse_range(r)).collect::<Result<Vec<ExponentBounds>>>()?;
            out!("eps_lo,eps_hi,iou,miou,loss");
            for b in ranges {
                let cfg = FitConfig {
                    kind: PrimitiveKind::Superquadric,
                    eps_bounds: b,
                    ..fit.config(count)?
                };
                let r = run_fit(&grid, &cfg, None)?;
                let c = r.checkpoints.last().expect("final checkpoint");
                out!("{},{},{:.6},{:.6},{:.6}", b.lo, b.hi, c.iou, c.miou, c.loss);
            }
        }
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<ExponentBounds> {
    let bad = || Error::InvalidArgument(format!("range `{s}` is not of the form lo:hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    ExponentBounds::new(lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=usage message=\"{}\"", one_line(first));
            return ExitCode::from(2);
        }
    };
    if cli.single_thread {
        std::env::set_var(SINGLE_THREAD_ENV, "1");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message=\"{}\"", e.kind, one_line(&e.message));
            ExitCode::from(if e.kind == "usage" { 2 } else { 1 })
        }
    }
}
