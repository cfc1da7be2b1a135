use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use facefit::io::{self, RunConfig, SceneBundle};
use facefit::synth::{self, SceneSpec, ToyHeadSpec};
use facefit::{
    compute_attention_masks, eval, finetune_model, fit_joint, retarget, track_with_trace,
    AttentionMaskSet, Camera, RetargetOptions, TemplateFaceModel,
};

#[derive(Parser)]
#[command(
    name = "facefit",
    version,
    about = "Fit, track and retarget personalized face models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute attention masks of a template
    Masks {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mask resolution; defaults to the template's UV resolution
        #[arg(long)]
        uv_res: Option<usize>,
    },
    /// Render a synthetic scene with known parameters
    Synth(SynthArgs),
    /// Fit a personalized model and per-frame parameters to a scene
    Fit {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Refine the model with tracking parameters frozen after the joint fit
        #[arg(long)]
        stage2: bool,
    },
    /// Track a scene with a fixed model
    Track {
        /// Model container
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render frames from a model container and parameters
    Render {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Drive a target model with source expression coefficients
    Retarget {
        /// Target model container
        #[arg(long)]
        template: PathBuf,
        /// Source parameters (JSON lines)
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        transfer_pose: bool,
        #[arg(long)]
        transfer_lighting: bool,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Score parameters against a scene
    Eval {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth parameters; without a value, the scene's gt_params.jsonl
        #[arg(long, value_name = "FILE")]
        gt: Option<Option<PathBuf>>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Template container; a toy head is generated into OUT/template when omitted
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// UV resolution of a generated toy head
    #[arg(long, default_value_t = 64)]
    uv_res: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Blendshapes active per frame
    #[arg(long, default_value_t = 3)]
    active: usize,
    /// Bound on each rotation angle in degrees
    #[arg(long, default_value_t = 20.0)]
    max_rotation: f64,
    /// Scale of ground-truth corrections; nonzero values also write OUT/gt_model
    #[arg(long, default_value_t = 0.0)]
    correction_scale: f64,
}

/// Camera selection: a scene's camera, else the config's, else the default.
#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(h), parse(w)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(format!("expected positive HxW, got `{s}`")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn masks_for(template: &TemplateFaceModel) -> Result<AttentionMaskSet> {
    let res = template.uv_resolution();
    Ok(compute_attention_masks(
        template,
        res,
        template.manifest.blur_sigma,
    )?)
}

fn with_resolution(camera: Camera, resolution: Option<(usize, usize)>) -> Camera {
    match resolution {
        Some((h, w)) => camera.resized(w, h),
        None => camera,
    }
}

impl ViewArgs {
    fn camera(&self) -> Result<Camera> {
        let base = match (&self.scene, &self.config) {
            (Some(scene), _) => io::read_camera(scene.join("camera.toml"))?,
            (None, Some(cfg)) => load_config(Some(cfg))?.camera.unwrap_or_default(),
            (None, None) => Camera::default(),
        };
        Ok(with_resolution(base, self.resolution))
    }
}

fn load_scene_for(template: &TemplateFaceModel, dir: &Path) -> Result<SceneBundle> {
    let classes = template
        .parse_map
        .as_ref()
        .map(|p| p.channels())
        .context("template has no parse_T.png")?;
    io::load_scene(dir, classes).with_context(|| format!("loading scene {}", dir.display()))
}

fn write_frames(dir: &Path, frames: &[facefit::Image]) -> Result<()> {
    let dir = dir.join("frames");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (n, f) in frames.iter().enumerate() {
        io::write_png16(dir.join(format!("{n:04}.png")), f)?;
    }
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    create_out(&a.out)?;
    let template_dir = match &a.template {
        Some(t) => t.clone(),
        None => {
            let dir = a.out.join("template");
            let toy = synth::toy_head(&ToyHeadSpec {
                uv_resolution: a.uv_res,
                seed: a.seed,
                ..ToyHeadSpec::default()
            })?;
            io::save_template(&dir, &toy)?;
            info!("wrote toy template to {}", dir.display());
            dir
        }
    };
    // Render from the stored template so the scene matches what `render` sees.
    let template = io::load_template(&template_dir)
        .with_context(|| format!("loading {}", template_dir.display()))?;
    let masks = masks_for(&template)?;
    let camera = load_config(a.config.as_deref())?.camera.unwrap_or_default();
    let spec = SceneSpec {
        frames: a.frames,
        seed: a.seed,
        camera: with_resolution(camera, a.resolution),
        active_blendshapes: a.active,
        max_rotation_deg: a.max_rotation,
        correction_scale: a.correction_scale,
        ..SceneSpec::default()
    };
    let scene = synth::synth_scene(&template, &masks, &spec)?;
    if a.correction_scale != 0.0 {
        io::save_model(a.out.join("gt_model"), &template, &scene.corrections)?;
    }
    io::save_scene(
        &a.out,
        &SceneBundle {
            camera: scene.camera,
            frames: scene.frames,
            gt_params: Some(scene.params),
        },
    )?;
    info!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Masks {
            template,
            out,
            uv_res,
        } => {
            let t = io::load_template(&template)?;
            let masks = compute_attention_masks(
                &t,
                uv_res.unwrap_or(t.uv_resolution()),
                t.manifest.blur_sigma,
            )?;
            io::save_masks(&out, &masks)?;
            info!(
                "wrote {} masks to {}",
                masks.len(),
                out.join("masks").display()
            );
        }
        Command::Synth(a) => run_synth(&a)?,
        Command::Fit {
            template,
            scene,
            out,
            config,
            seed,
            stage2,
        } => {
            let t = io::load_template(&template)?;
            let masks = masks_for(&t)?;
            let bundle = load_scene_for(&t, &scene)?;
            let mut cfg = load_config(config.as_deref())?.fit_config();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            info!("fitting {} frames", bundle.frames.len());
            let mut fit = fit_joint(&bundle.frames, &t, &masks, &bundle.camera, &cfg)?;
            if stage2 {
                fit = finetune_model(&bundle.frames, &t, &masks, &bundle.camera, &fit, &cfg)?;
            }
            io::save_model(&out, &t, &fit.corrections)?;
            io::write_params(out.join("params.jsonl"), &fit.params)?;
            io::write_trace(out.join("trace.csv"), &fit.trace)?;
            if let Some(last) = fit.trace.last() {
                info!("final loss {:.6}", last.total);
            }
        }
        Command::Track {
            template,
            scene,
            out,
            config,
        } => {
            let (t, corrections) = io::load_model(&template)?;
            let masks = masks_for(&t)?;
            let bundle = load_scene_for(&t, &scene)?;
            let cfg = load_config(config.as_deref())?.fit_config();
            let (params, trace) = track_with_trace(
                &bundle.frames,
                &t,
                &masks,
                &corrections,
                &bundle.camera,
                &cfg,
                None,
            )?;
            create_out(&out)?;
            io::write_params(out.join("params.jsonl"), &params)?;
            io::write_trace(out.join("trace.csv"), &trace)?;
        }
        Command::Render {
            template,
            params,
            out,
            view,
        } => {
            let (t, corrections) = io::load_model(&template)?;
            let masks = masks_for(&t)?;
            let params = io::read_params(&params)?;
            let camera = view.camera()?;
            let frames = params
                .iter()
                .map(|p| {
                    Ok(facefit::reconstruct(&t, &corrections, &masks, p, &camera)?
                        .render
                        .color)
                })
                .collect::<Result<Vec<_>>>()?;
            write_frames(&out, &frames)?;
            info!("rendered {} frames", frames.len());
        }
        Command::Retarget {
            template,
            params,
            out,
            transfer_pose,
            transfer_lighting,
            view,
        } => {
            let (t, corrections) = io::load_model(&template)?;
            let masks = masks_for(&t)?;
            let source = io::read_params(&params)?;
            let options = RetargetOptions {
                transfer_pose,
                transfer_lighting,
                ..RetargetOptions::default()
            };
            let r = retarget(&source, &t, &corrections, &masks, &view.camera()?, &options)?;
            write_frames(&out, &r.frames)?;
            io::write_params(out.join("params.jsonl"), &r.params)?;
        }
        Command::Eval {
            template,
            scene,
            params,
            out,
            gt,
            config,
        } => {
            let (t, corrections) = io::load_model(&template)?;
            let masks = masks_for(&t)?;
            let bundle = load_scene_for(&t, &scene)?;
            let params = io::read_params(&params)?;
            if params.len() != bundle.frames.len() {
                bail!(
                    "{} parameter sets for {} frames",
                    params.len(),
                    bundle.frames.len()
                );
            }
            let gt = match gt {
                Some(Some(path)) => Some(io::read_params(&path)?),
                Some(None) => Some(
                    bundle
                        .gt_params
                        .clone()
                        .context("scene has no gt_params.jsonl")?,
                ),
                None => None,
            };
            let weights = load_config(config.as_deref())?.weights;
            let report = eval::evaluate(
                &t,
                &masks,
                &corrections,
                &bundle.frames,
                &params,
                &bundle.camera,
                &weights,
                gt.as_deref(),
            )?;
            create_out(&out)?;
            io::write_json(out.join("eval.json"), &report.to_json())?;
            info!(
                "total {:.6} photometric error {:.6} nme {:.6} coefficient mae {:?}",
                report.loss.total, report.photometric_error, report.nme, report.coefficient_mae
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
