//! Command-line front end: configuration loading, subcommand execution,
//! and artifact emission.
//!
//! Exit codes are pinned for scripting: 0 success, 2 invalid
//! configuration / missing paths / state-hash mismatch, 3 non-finite loss
//! abort, 1 anything else.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attack::{self, AttackError, AttackState};
use crate::baselines::{self, DeConfig};
use crate::compositor::ObjectSample;
use crate::depthmodel::{DisparityModel, Surrogate};
use crate::evalrobust::{self, RobustnessParams};
use crate::imaging::{self, Rgb8Image};
use crate::losses::Palette;
use crate::ndgrad::Tensor;
pub use config::{ConfigError, ExperimentConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NAN: u8 = 3;
pub const EXIT_OTHER: u8 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "svpatch",
    about = "Shape-varying adversarial patch synthesis against disparity models",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration (strict JSON).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory override.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Attack seed override.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the optimization loop and emit all training artifacts.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from a state file.
        #[arg(long, value_name = "PATH")]
        state: Option<PathBuf>,
    },
    /// Evaluate a saved state on the held-out seeded batch.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        state: PathBuf,
    },
    /// Robustness grid: every defense transform at every strength.
    Robust {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        state: PathBuf,
    },
    /// Render benign and adversarial disparity maps as 16-bit PGM.
    Render {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        state: PathBuf,
    },
    /// Two-stage differential-evolution shape baseline.
    BaselineDe {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Gaussian-aggregation per-pixel mask baseline.
    BaselineGaussian {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// One full attack per patch-area budget.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated budgets in (0, 1].
        #[arg(long, value_name = "LIST")]
        budgets: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => EXIT_CONFIG,
            CliError::Attack(AttackError::NonFiniteLoss { .. })
            | CliError::Attack(AttackError::NonFiniteGrad { .. }) => EXIT_NAN,
            CliError::Attack(AttackError::ConfigHashMismatch { .. })
            | CliError::Attack(AttackError::BadMagic { .. })
            | CliError::Attack(AttackError::Truncated { .. })
            | CliError::Attack(AttackError::InvalidParameter(_)) => EXIT_CONFIG,
            _ => EXIT_OTHER,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn codec_err(e: imaging::CodecError) -> CliError {
    CliError::Invalid(e.to_string())
}

/// Everything a subcommand needs, loaded and validated.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub object: ObjectSample,
    pub scenes: Vec<Tensor>,
    pub model: Box<dyn DisparityModel>,
    pub palette: Palette,
    pub out_dir: PathBuf,
}

impl Workspace {
    pub fn load(
        config_path: &Path,
        out_override: Option<&Path>,
        seed_override: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::load(config_path)?;
        if let Some(seed) = seed_override {
            cfg.attack.seed = seed;
        }
        let out_dir = out_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.output.directory.clone());

        let object = load_object(&cfg)?;
        let scenes = load_scenes(&cfg)?;
        let scene_dims = (scenes[0].shape()[0], scenes[0].shape()[1]);
        if scene_dims.0 % 8 != 0 || scene_dims.1 % 8 != 0 {
            return Err(CliError::Invalid(format!(
                "scene dims {}x{} must be divisible by 8",
                scene_dims.0, scene_dims.1
            )));
        }
        let (oh, ow) = object.dims();
        if oh > scene_dims.0 || ow > scene_dims.1 {
            return Err(CliError::Invalid(format!(
                "object {}x{} does not fit in scene {}x{}",
                oh, ow, scene_dims.0, scene_dims.1
            )));
        }

        let model: Box<dyn DisparityModel> = match (&cfg.model.surrogate_seed, &cfg.model.weights)
        {
            (Some(seed), None) => Box::new(Surrogate::seeded(*seed)),
            (None, Some(path)) => {
                Box::new(Surrogate::load_weights(path).map_err(|e| CliError::Invalid(e.to_string()))?)
            }
            _ => unreachable!("validated at load"),
        };
        let palette = match &cfg.attack.palette {
            Some(p) => Palette::load(p).map_err(|e| CliError::Invalid(e.to_string()))?,
            None => Palette::default_printable(),
        };
        std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
        Ok(Workspace {
            cfg,
            object,
            scenes,
            model,
            palette,
            out_dir,
        })
    }

    fn attack_config(&self) -> attack::AttackConfig {
        self.cfg.attack_config()
    }

    fn load_state(&self, path: &Path) -> Result<AttackState, CliError> {
        Ok(attack::load_state(path, self.cfg.state_hash())?)
    }
}

fn load_object(cfg: &ExperimentConfig) -> Result<ObjectSample, CliError> {
    let img = imaging::read_ppm(&cfg.object.image).map_err(codec_err)?;
    let (mh, mw, samples) = imaging::read_pgm8(&cfg.object.mask).map_err(codec_err)?;
    if (mh, mw) != (img.height, img.width) {
        return Err(CliError::Invalid(format!(
            "object mask {}x{} does not match image {}x{}",
            mh, mw, img.height, img.width
        )));
    }
    let mask: Vec<f64> = samples
        .iter()
        .map(|&s| if s >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(ObjectSample::new(
        img.to_tensor(),
        Tensor::from_vec(&[mh, mw], mask),
    ))
}

fn load_scenes(cfg: &ExperimentConfig) -> Result<Vec<Tensor>, CliError> {
    let dir = &cfg.scenes.directory;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir.as_path()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    // lexicographic order defines scene indices
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Invalid(format!(
            "no .ppm scenes found in {}",
            dir.display()
        )));
    }
    let mut scenes = Vec::with_capacity(paths.len());
    let mut dims: Option<(usize, usize)> = None;
    for p in &paths {
        let img = imaging::read_ppm(p).map_err(codec_err)?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) => {
                if d != (img.height, img.width) {
                    return Err(CliError::Invalid(format!(
                        "scene {} has dims {}x{}, expected {}x{}",
                        p.display(),
                        img.height,
                        img.width,
                        d.0,
                        d.1
                    )));
                }
            }
        }
        scenes.push(img.to_tensor());
    }
    Ok(scenes)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_mask_pgm(mask: &Tensor, path: &Path) -> Result<(), CliError> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let samples: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    imaging::write_pgm8(h, w, &samples, path).map_err(codec_err)
}

pub const METRICS_CSV_HEADER: &str = "scenario,MSE_t,MSE_b,alpha,eps_disp,eps_depth";

fn metrics_csv(records: &[evalrobust::MetricsRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    let mut sum = evalrobust::MetricsRecord::zero();
    for (i, r) in records.iter().enumerate() {
        sum.accumulate(r);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, r.mse_t, r.mse_b, r.alpha, r.eps_disp, r.eps_depth
        ));
    }
    let mean = sum.scaled(1.0 / records.len().max(1) as f64);
    out.push_str(&format!(
        "mean,{},{},{},{},{}\n",
        mean.mse_t, mean.mse_b, mean.alpha, mean.eps_disp, mean.eps_depth
    ));
    out
}

/// `attack`: runs the loop, then writes the training log, final patch,
/// final mask, state file, and held-out metrics.
pub fn cmd_attack(ws: &Workspace, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = ws.attack_config();
    let resume_state = match resume {
        Some(p) => Some(ws.load_state(p)?),
        None => None,
    };
    let run = attack::run_attack(
        &cfg,
        &ws.object,
        &ws.scenes,
        ws.model.as_ref(),
        &ws.palette,
        resume_state,
    )?;

    write_text(
        &ws.out_dir.join("train_log.csv"),
        &attack::write_log_csv(&run.log),
    )?;
    imaging::write_ppm(
        &Rgb8Image::from_tensor(&run.state.patch),
        ws.out_dir.join("patch.ppm"),
    )
    .map_err(codec_err)?;
    let (h_o, w_o) = ws.object.dims();
    let final_mask = run.state.params.mask(h_o, w_o).grid.mul(&ws.object.mask);
    write_mask_pgm(&final_mask.ste_round(), &ws.out_dir.join("mask.pgm"))?;
    attack::save_state(&run.state, ws.cfg.state_hash(), ws.out_dir.join("state.svps"))?;

    let records = evalrobust::held_out_records(
        &cfg,
        &run.state,
        &ws.object,
        &ws.scenes,
        ws.model.as_ref(),
        ws.cfg.eval.batch,
    )?;
    write_text(&ws.out_dir.join("metrics.csv"), &metrics_csv(&records))?;
    Ok(())
}

/// `eval`: held-out metrics for a saved state.
pub fn cmd_eval(ws: &Workspace, state_path: &Path) -> Result<(), CliError> {
    let state = ws.load_state(state_path)?;
    let records = evalrobust::held_out_records(
        &ws.attack_config(),
        &state,
        &ws.object,
        &ws.scenes,
        ws.model.as_ref(),
        ws.cfg.eval.batch,
    )?;
    write_text(&ws.out_dir.join("eval_metrics.csv"), &metrics_csv(&records))?;
    Ok(())
}

/// `robust`: metric rows for every transform at every strength.
pub fn cmd_robust(ws: &Workspace, state_path: &Path) -> Result<(), CliError> {
    let state = ws.load_state(state_path)?;
    let params = RobustnessParams {
        jpeg_qualities: ws.cfg.eval.jpeg_qualities.clone(),
        bit_depths: ws.cfg.eval.bit_depths.clone(),
        noise_sigmas: ws.cfg.eval.noise_sigmas.clone(),
        median_kernels: ws.cfg.eval.median_kernels.clone(),
    };
    let rows = evalrobust::robustness_grid(
        &ws.attack_config(),
        &state,
        &ws.object,
        &ws.scenes,
        ws.model.as_ref(),
        &params,
        ws.cfg.eval.batch,
    )?;
    let mut csv = String::from(evalrobust::ROBUST_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&ws.out_dir.join("robustness.csv"), &csv)?;
    Ok(())
}

/// `render`: one seeded scenario rendered to composited PPMs and 16-bit
/// disparity PGMs for the benign and adversarial branches.
pub fn cmd_render(ws: &Workspace, state_path: &Path) -> Result<(), CliError> {
    let state = ws.load_state(state_path)?;
    let cfg = ws.attack_config();
    let (h_o, w_o) = ws.object.dims();
    let mut rng = imaging::Rng::new(cfg.seed ^ 0x8CB9_2BA7_2F3D_8DD7);
    let m_p_eff = state.params.mask(h_o, w_o).grid.mul(&ws.object.mask);
    let o_adv = crate::compositor::apply_patch(&ws.object.image, &m_p_eff, &state.patch);
    let batch =
        crate::compositor::build_batch(&ws.object, &o_adv, &m_p_eff, &ws.scenes, &mut rng, 1);
    let sc = &batch[0];
    let d_b = ws.model.forward(&sc.x_b);
    let d_adv = ws.model.forward(&sc.x_adv);
    imaging::write_pgm16(&d_b, 1.0, ws.out_dir.join("disp_benign.pgm")).map_err(codec_err)?;
    imaging::write_pgm16(&d_adv, 1.0, ws.out_dir.join("disp_adv.pgm")).map_err(codec_err)?;
    imaging::write_ppm(
        &Rgb8Image::from_tensor(&sc.x_b),
        ws.out_dir.join("scene_benign.ppm"),
    )
    .map_err(codec_err)?;
    imaging::write_ppm(
        &Rgb8Image::from_tensor(&sc.x_adv),
        ws.out_dir.join("scene_adv.ppm"),
    )
    .map_err(codec_err)?;
    Ok(())
}

/// `baseline-de`: stage one trains a full-object patch texture, stage two
/// searches shapes with differential evolution.
pub fn cmd_baseline_de(ws: &Workspace) -> Result<(), CliError> {
    let mut stage1 = ws.attack_config();
    stage1.budget = 1.0;
    stage1.weights.lambda4 = 0.0; // the full-object stage must not shrink
    stage1.family = crate::maskgen::ShapeFamily::Rect;
    stage1.optimize_shape = false;
    if let Some(steps) = ws.cfg.baseline.de_stage1_steps {
        stage1.steps = steps;
    }
    // mask fixed to the full grid: the effective patch covers the whole
    // object silhouette while the texture trains
    let (h_o, w_o) = ws.object.dims();
    let mut init = AttackState::init(&stage1, &ws.object);
    init.params.theta1 = [0.0, w_o as f64, h_o as f64, 0.0];
    init.best.params = init.params;
    let run = attack::run_attack(
        &stage1,
        &ws.object,
        &ws.scenes,
        ws.model.as_ref(),
        &ws.palette,
        Some(init),
    )?;

    let de = DeConfig {
        control_points: ws.cfg.baseline.de_control_points,
        population: ws.cfg.baseline.de_population,
        generations: ws.cfg.baseline.de_generations,
        seed: ws.cfg.attack.seed ^ 0x00DE_00DE_00DE_00DE,
        fitness_batch: ws.cfg.baseline.de_fitness_batch,
        max_evals: ws.cfg.baseline.de_max_evals,
        ..DeConfig::default()
    };
    let cfg = ws.attack_config();
    let result = baselines::de_optimize(
        &ws.object,
        &run.state.patch,
        &ws.scenes,
        ws.model.as_ref(),
        &cfg,
        &de,
    );

    write_text(&ws.out_dir.join("de_points.txt"), &result.best.to_text())?;
    let mask = baselines::rasterize_spline(&result.best, h_o, w_o).mul(&ws.object.mask);
    write_mask_pgm(&mask, &ws.out_dir.join("de_mask.pgm"))?;
    let mut csv = String::from("generation,best_fitness\n");
    for (g, f) in result.history.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", g, f));
    }
    write_text(&ws.out_dir.join("de_history.csv"), &csv)?;
    Ok(())
}

/// `baseline-gaussian`: per-pixel mask optimization plus aggregation.
pub fn cmd_baseline_gaussian(ws: &Workspace) -> Result<(), CliError> {
    let cfg = ws.attack_config();
    let (mask, patch) = baselines::gaussian_aggregate(
        &ws.object,
        &ws.scenes,
        ws.model.as_ref(),
        &ws.palette,
        &cfg,
    )?;
    write_mask_pgm(&mask, &ws.out_dir.join("gaussian_mask.pgm"))?;
    imaging::write_ppm(
        &Rgb8Image::from_tensor(&patch),
        ws.out_dir.join("gaussian_patch.ppm"),
    )
    .map_err(codec_err)?;
    Ok(())
}

/// `sweep`: one full attack per budget with shared seeds.
pub fn cmd_sweep(ws: &Workspace, budgets: &[f64]) -> Result<(), CliError> {
    if budgets.is_empty() {
        return Err(CliError::Invalid("sweep: no budgets given".into()));
    }
    if budgets.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
        return Err(CliError::Invalid(
            "sweep: budgets must lie in (0, 1]".into(),
        ));
    }
    let rows = evalrobust::sweep_patch_size(
        budgets,
        &ws.attack_config(),
        &ws.object,
        &ws.scenes,
        ws.model.as_ref(),
        &ws.palette,
        ws.cfg.eval.batch,
    )?;
    let mut csv = String::from(evalrobust::SWEEP_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&ws.out_dir.join("sweep.csv"), &csv)?;
    Ok(())
}

fn parse_budgets(list: &str) -> Result<Vec<f64>, CliError> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Invalid(format!("bad budget `{}`", s)))
        })
        .collect()
}

/// Executes a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = (|| -> Result<(), CliError> {
        match &cli.command {
            Command::Attack { common, state } => {
                let ws = Workspace::load(&common.config, common.out.as_deref(), common.seed)?;
                cmd_attack(&ws, state.as_deref())
            }
            Command::Eval { common, state } => {
                let ws = Workspace::load(&common.config, common.out.as_deref(), common.seed)?;
                cmd_eval(&ws, state)
            }
            Command::Robust { common, state } => {
                let ws = Workspace::load(&common.config, common.out.as_deref(), common.seed)?;
                cmd_robust(&ws, state)
            }
            Command::Render { common, state } => {
                let ws = Workspace::load(&common.config, common.out.as_deref(), common.seed)?;
                cmd_render(&ws, state)
            }
            Command::BaselineDe { common } => {
                let ws = Workspace::load(&common.config, common.out.as_deref(), common.seed)?;
                cmd_baseline_de(&ws)
            }
            Command::BaselineGaussian { common } => {
                let ws = Workspace::load(&common.config, common.out.as_deref(), common.seed)?;
                cmd_baseline_gaussian(&ws)
            }
            Command::Sweep { common, budgets } => {
                let ws = Workspace::load(&common.config, common.out.as_deref(), common.seed)?;
                let budgets = parse_budgets(budgets)?;
                cmd_sweep(&ws, &budgets)
            }
        }
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
