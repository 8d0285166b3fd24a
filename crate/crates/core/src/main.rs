//! Command-line driver: generate, resume, render, selftest.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tetsculpt::denoiser::AttnScale;
use tetsculpt::material::EnvMap;
use tetsculpt::pipeline::{self, PipelineError, RunConfig, RunSink, RunState};
use tetsculpt::render::CameraPose;
use tetsculpt::{io, selftest};

#[derive(Parser)]
#[command(name = "tetsculpt", version, about = "Text-driven 3D shape and material optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both optimization stages from scratch and export artifacts.
    Generate {
        /// JSON config; defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Continue a checkpointed run to completion.
    Resume {
        /// Checkpoint manifest (`checkpoint.json`) or its stem.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one shaded view of a checkpointed state.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment preset for relighting.
        #[arg(long, default_value = "uniform")]
        env: String,
        #[arg(long, default_value_t = 0.0)]
        yaw: f64,
        #[arg(long, default_value_t = 15.0)]
        pitch: f64,
        #[arg(long, default_value_t = 35.0)]
        fov: f64,
        #[arg(long)]
        res: Option<usize>,
        /// Output PPM path.
        #[arg(long, default_value = "render.ppm")]
        out: PathBuf,
    },
    /// Run the quick oracle suites and report pass/fail per suite.
    Selftest,
}

/// Per-field command-line overrides of the JSON config.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (config `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    grid_resolution: Option<usize>,
    #[arg(long)]
    render_res: Option<usize>,
    #[arg(long)]
    denoiser_res: Option<usize>,
    #[arg(long)]
    denoiser_dim: Option<usize>,
    #[arg(long)]
    denoiser_heads: Option<usize>,
    #[arg(long)]
    denoiser_layers: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    cam_dim: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    gen_rank: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    geometry_iters: Option<usize>,
    #[arg(long)]
    appearance_iters: Option<usize>,
    #[arg(long)]
    init_iters: Option<usize>,
    #[arg(long)]
    init_samples: Option<usize>,
    /// Comma-separated `rx,ry,rz`.
    #[arg(long)]
    ellipsoid_radii: Option<String>,
    #[arg(long)]
    sds_weight: Option<f64>,
    #[arg(long)]
    ama_weight: Option<f64>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_fields: Option<f64>,
    #[arg(long)]
    lr_lora: Option<f64>,
    /// Comma-separated `lo,hi` in degrees.
    #[arg(long)]
    pitch_range: Option<String>,
    /// Comma-separated `lo,hi` in degrees.
    #[arg(long)]
    yaw_range: Option<String>,
    /// Comma-separated `lo,hi` in degrees.
    #[arg(long)]
    fov_range: Option<String>,
    #[arg(long)]
    camera_radius: Option<f64>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    env_samples: Option<usize>,
    #[arg(long)]
    env_path: Option<PathBuf>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// `sqrt_dim` or `sqrt_dim_per_head`.
    #[arg(long)]
    attn_scale: Option<String>,
    #[arg(long)]
    denoiser_seed: Option<u64>,
    #[arg(long)]
    ama_full_path: Option<bool>,
    #[arg(long)]
    reset_lora_between_stages: Option<bool>,
    #[arg(long)]
    dump_interval: Option<usize>,
}

fn parse_pair(text: &str, what: &str) -> Result<[f64; 2], PipelineError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::Config(format!("{what}: {e}")))?;
    if parts.len() != 2 {
        return Err(PipelineError::Config(format!("{what}: expected 'lo,hi'")));
    }
    Ok([parts[0], parts[1]])
}

impl Overrides {
    fn apply(self, mut config: RunConfig) -> Result<RunConfig, PipelineError> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    config.$field = v;
                }
            };
        }
        set!(prompt);
        set!(seed);
        set!(grid_resolution);
        set!(render_res);
        set!(denoiser_res);
        set!(denoiser_dim);
        set!(denoiser_heads);
        set!(denoiser_layers);
        set!(text_dim);
        set!(cam_dim);
        set!(rank);
        set!(gen_rank);
        set!(batch_size);
        set!(geometry_iters);
        set!(appearance_iters);
        set!(init_iters);
        set!(init_samples);
        set!(sds_weight);
        set!(ama_weight);
        set!(lr_init);
        set!(lr_fields);
        set!(lr_lora);
        set!(env);
        set!(env_samples);
        set!(timesteps);
        set!(denoiser_seed);
        set!(ama_full_path);
        set!(reset_lora_between_stages);
        set!(dump_interval);
        if let Some(v) = self.out {
            config.out_dir = v;
        }
        if let Some(v) = self.env_path {
            config.env_path = Some(v);
        }
        if let Some(v) = self.camera_radius {
            config.camera.radius = v;
        }
        if let Some(t) = self.pitch_range {
            config.camera.pitch_deg = parse_pair(&t, "pitch_range")?;
        }
        if let Some(t) = self.yaw_range {
            config.camera.yaw_deg = parse_pair(&t, "yaw_range")?;
        }
        if let Some(t) = self.fov_range {
            config.camera.fov_deg = parse_pair(&t, "fov_range")?;
        }
        if let Some(t) = self.ellipsoid_radii {
            let parts: Vec<f64> = t
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| PipelineError::Config(format!("ellipsoid_radii: {e}")))?;
            if parts.len() != 3 {
                return Err(PipelineError::Config("ellipsoid_radii: expected 'rx,ry,rz'".into()));
            }
            config.ellipsoid_radii = [parts[0], parts[1], parts[2]];
        }
        if let Some(t) = self.attn_scale {
            config.attn_scale = match t.as_str() {
                "sqrt_dim" => AttnScale::SqrtDim,
                "sqrt_dim_per_head" => AttnScale::SqrtDimPerHead,
                other => {
                    return Err(PipelineError::Config(format!(
                        "attn_scale '{other}' (expected sqrt_dim or sqrt_dim_per_head)"
                    )))
                }
            };
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                PipelineError::NonFinite { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, PipelineError> {
    match cli.command {
        Command::Generate { config, overrides } => {
            let base = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let config = overrides.apply(base)?;
            let out_dir = config.out_dir.clone();
            let mut state = RunState::new(config)?;
            let mut sink = RunSink::files(&out_dir)?;
            sink.echo = true;
            drive(&mut state, &mut sink, &out_dir)
        }
        Command::Resume { checkpoint, out } => {
            let mut state = pipeline::load_state(&checkpoint)?;
            let out_dir = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(|p| p.to_path_buf())
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let mut sink = RunSink::files(&out_dir)?;
            sink.echo = true;
            drive(&mut state, &mut sink, &out_dir)
        }
        Command::Render { checkpoint, env, yaw, pitch, fov, res, out } => {
            let state = pipeline::load_state(&checkpoint)?;
            let res = res.unwrap_or(state.config.render_res);
            let env = EnvMap::preset(&env, state.config.env_samples)?;
            let deg = std::f64::consts::PI / 180.0;
            let pose =
                CameraPose::orbit(state.config.camera.radius, yaw * deg, pitch * deg, fov * deg);
            let (image, _) = pipeline::render_view(&state, &pose, res, &env)?;
            io::write_ppm(&out, &image, res, res, true)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            if selftest::run() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}

/// Run to completion with a crash checkpoint on non-finite losses.
fn drive(
    state: &mut RunState,
    sink: &mut RunSink,
    out_dir: &std::path::Path,
) -> Result<ExitCode, PipelineError> {
    match pipeline::run_to_completion(state, sink) {
        Ok(()) => {
            pipeline::export(state, out_dir)?;
            println!("done: artifacts in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(err @ PipelineError::NonFinite { .. }) => {
            let stem = out_dir.join("crash_checkpoint");
            pipeline::save_checkpoint(state, &stem)?;
            eprintln!("error: {err}");
            eprintln!("state dumped to {}", stem.with_extension("json").display());
            Ok(ExitCode::from(2))
        }
        Err(other) => Err(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tetsculpt::pipeline::Stage;

    #[test]
    fn stage_names_match_csv_vocabulary() {
        assert_eq!(Stage::Geometry.to_string(), "geometry");
        assert_eq!(Stage::Appearance.to_string(), "appearance");
    }

    #[test]
    fn override_pairs_parse() {
        assert_eq!(parse_pair("1.5, -2", "x").unwrap(), [1.5, -2.0]);
        assert!(parse_pair("1", "x").is_err());
        assert!(parse_pair("a,b", "x").is_err());
    }
}
