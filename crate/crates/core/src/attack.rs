//! The patch optimization loop: target construction per attack mode,
//! Adam updates of patch pixels and shape parameters on separate learning
//! rates, schedule, logging, and resumable checkpoints.
//!
//! Determinism contract: every stochastic draw comes from a generator
//! seeded by `(master seed, step index)`, so resuming from a checkpoint at
//! step k replays exactly the trajectory of an uninterrupted run.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::{self, ObjectSample, Scenario};
use crate::depthmodel::{DepthConversion, DisparityModel};
use crate::evalrobust::{self, AlphaReference};
use crate::imaging::Rng;
use crate::losses::{self, LossComponents, LossWeights, Palette};
use crate::maskgen::{self, MaskParams, ShapeFamily};
use crate::ndgrad::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "offset")]
pub enum AttackMode {
    Further,
    Disappear,
    Closer,
    Offset(f64),
    Nontargeted,
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Further => "further",
            AttackMode::Disappear => "disappear",
            AttackMode::Closer => "closer",
            AttackMode::Offset(_) => "offset",
            AttackMode::Nontargeted => "nontargeted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub family: ShapeFamily,
    pub steps: u64,
    pub batch: usize,
    pub weights: LossWeights,
    /// Patch-area budget as a fraction of the object-mask area; drives
    /// the mask initialization and the logged area ratio. Enforcement is
    /// soft, through `lambda4 * L_area`.
    pub budget: f64,
    pub lr_patch: f64,
    pub lr_shape: f64,
    pub decay_factor: f64,
    /// Steps between decays of the patch learning rate; `None` means a
    /// fifth of the run.
    pub decay_period: Option<u64>,
    pub seed: u64,
    pub log_every: u64,
    pub alpha_reference: AlphaReference,
    pub conversion: DepthConversion,
    /// When false the shape parameters stay at their initial values and
    /// only the texture trains (stage one of the DE baseline).
    pub optimize_shape: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: AttackMode::Further,
            family: ShapeFamily::Rect,
            steps: 10_000,
            batch: 4,
            weights: LossWeights::default(),
            budget: 0.11,
            lr_patch: 1.0,
            lr_shape: 0.01,
            decay_factor: 0.2,
            decay_period: None,
            seed: 42,
            log_every: 10,
            alpha_reference: AlphaReference::Benign,
            conversion: DepthConversion::default(),
            optimize_shape: true,
        }
    }
}

impl AttackConfig {
    pub fn effective_decay_period(&self) -> u64 {
        self.decay_period.unwrap_or((self.steps / 5).max(1)).max(1)
    }
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("gradient of group `{group}` became non-finite at step {step}")]
    NonFiniteGrad { step: u64, group: String },
    #[error("state io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected SVPS1)")]
    BadMagic { path: String },
    #[error("{path}: truncated state file")]
    Truncated { path: String },
    #[error("{path}: config hash mismatch (state {found:#018x}, config {expected:#018x})")]
    ConfigHashMismatch {
        path: String,
        expected: u64,
        found: u64,
    },
    #[error("metrics failure: {0}")]
    Metrics(#[from] evalrobust::MetricsError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second-moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Fails on non-finite gradients.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), ()> {
    assert_eq!(params.len(), grads.len(), "adam: shape mismatch");
    assert_eq!(params.len(), state.m.len(), "adam: state shape mismatch");
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(());
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Stepped exponential decay: `base * factor^floor(step / period)`.
pub fn lr_schedule(step: u64, base_lr: f64, decay_factor: f64, period: u64) -> f64 {
    assert!(period >= 1, "decay period must be >= 1");
    base_lr * decay_factor.powi((step / period) as i32)
}

/// Builds the target disparity map for one scenario.
///
/// Further zeroes the object region, Closer saturates it to 1, Offset
/// shifts the benign values, all copying the benign map elsewhere;
/// Disappear targets the scene-only disparity everywhere.
pub fn build_target(
    mode: AttackMode,
    d_b: &Tensor,
    scene_disparity: Option<&Tensor>,
    m_o: &Tensor,
) -> Tensor {
    let keep = m_o.rsub_s(1.0).mul(d_b);
    match mode {
        AttackMode::Further => keep,
        AttackMode::Closer => keep.add(m_o),
        AttackMode::Disappear => scene_disparity
            .expect("disappear mode needs the scene-only disparity")
            .clone(),
        AttackMode::Offset(delta) => {
            let shifted = d_b.add_s(delta).clamp(0.0, 1.0);
            keep.add(&shifted.mul(m_o))
        }
        // metrics degenerate to the benign reference
        AttackMode::Nontargeted => d_b.clone(),
    }
}

/// Initial mask parameters: a centered shape whose binarized area matches
/// `budget` times the object-mask area.
pub fn init_mask_params(family: ShapeFamily, object: &ObjectSample, budget: f64) -> MaskParams {
    let (h, w) = object.dims();
    let (hf, wf) = (h as f64, w as f64);
    let target = (budget * object.mask_area()).max(4.0);
    let mut p = MaskParams::new(family);
    match family {
        ShapeFamily::Rect | ShapeFamily::Quad => {
            let ph = (target * hf / wf).sqrt();
            let pw = target / ph;
            let (cx, cy) = ((hf - 1.0) / 2.0, (wf - 1.0) / 2.0);
            p.theta1 = [cy - pw / 2.0, cy + pw / 2.0, cx + ph / 2.0, cx - ph / 2.0];
        }
        ShapeFamily::Circle | ShapeFamily::Ellipse => {
            p.center = [(hf - 1.0) / 2.0, (wf - 1.0) / 2.0];
            p.radius = (target / std::f64::consts::PI).sqrt();
        }
        ShapeFamily::Oval => {
            p.center = [(hf - 1.0) / 2.0, (wf - 1.0) / 2.0];
            let r = (target / std::f64::consts::PI).sqrt();
            p.axes = [r, r];
        }
    }
    maskgen::clamp_params(&p, h, w)
}

/// Canonical optimizable groups for a family, in a fixed order shared by
/// the tape leaves, the Adam states, and the checkpoint format.
pub fn param_groups(params: &MaskParams) -> Vec<(&'static str, Vec<f64>)> {
    match params.family {
        ShapeFamily::Rect => vec![("theta1", params.theta1.to_vec())],
        ShapeFamily::Quad => vec![
            ("theta1", params.theta1.to_vec()),
            ("slopes", params.slopes.to_vec()),
        ],
        ShapeFamily::Circle => vec![
            ("center", params.center.to_vec()),
            ("radius", vec![params.radius]),
        ],
        ShapeFamily::Ellipse => vec![
            ("center", params.center.to_vec()),
            ("radius", vec![params.radius]),
            ("shear", params.shear.to_vec()),
        ],
        ShapeFamily::Oval => vec![
            ("center", params.center.to_vec()),
            ("axes", params.axes.to_vec()),
        ],
    }
}

/// Writes updated group values back into a `MaskParams`.
pub fn apply_param_groups(params: &MaskParams, groups: &[Vec<f64>]) -> MaskParams {
    let mut p = *params;
    let mut it = groups.iter();
    match params.family {
        ShapeFamily::Rect => {
            p.theta1 = it.next().unwrap()[..].try_into().unwrap();
        }
        ShapeFamily::Quad => {
            p.theta1 = it.next().unwrap()[..].try_into().unwrap();
            p.slopes = it.next().unwrap()[..].try_into().unwrap();
        }
        ShapeFamily::Circle => {
            p.center = it.next().unwrap()[..].try_into().unwrap();
            p.radius = it.next().unwrap()[0];
        }
        ShapeFamily::Ellipse => {
            p.center = it.next().unwrap()[..].try_into().unwrap();
            p.radius = it.next().unwrap()[0];
            p.shear = it.next().unwrap()[..].try_into().unwrap();
        }
        ShapeFamily::Oval => {
            p.center = it.next().unwrap()[..].try_into().unwrap();
            p.axes = it.next().unwrap()[..].try_into().unwrap();
        }
    }
    p
}

fn scalar_at(t: &Tensor, i: usize) -> Tensor {
    t.slice(&[i], &[1])
}

/// Builds the patch mask on the object grid from leaf tensors in the
/// canonical group order. `binarize = false` keeps the smooth
/// pre-binarization response of the circle family — used by gradient
/// checks, since finite differences cannot see through a step function.
pub fn mask_from_leaves(
    family: ShapeFamily,
    leaves: &[Tensor],
    h: usize,
    w: usize,
    binarize: bool,
) -> Tensor {
    match family {
        ShapeFamily::Rect => {
            let th = &leaves[0];
            maskgen::rect_mask(
                &scalar_at(th, 0),
                &scalar_at(th, 1),
                &scalar_at(th, 2),
                &scalar_at(th, 3),
                h,
                w,
            )
            .grid
        }
        ShapeFamily::Quad => {
            let th = &leaves[0];
            let sl = &leaves[1];
            let t1 = [
                scalar_at(th, 0),
                scalar_at(th, 1),
                scalar_at(th, 2),
                scalar_at(th, 3),
            ];
            let s1 = [
                scalar_at(sl, 0),
                scalar_at(sl, 1),
                scalar_at(sl, 2),
                scalar_at(sl, 3),
            ];
            maskgen::quad_mask(
                &[&t1[0], &t1[1], &t1[2], &t1[3]],
                &[&s1[0], &s1[1], &s1[2], &s1[3]],
                h,
                w,
            )
            .grid
        }
        ShapeFamily::Circle => {
            let c = &leaves[0];
            let soft = maskgen::circle_soft(&scalar_at(c, 0), &scalar_at(c, 1), &leaves[1], h, w);
            if binarize {
                soft.ste_round()
            } else {
                soft
            }
        }
        ShapeFamily::Ellipse => {
            let c = &leaves[0];
            let sh = &leaves[2];
            let soft = maskgen::ellipse_soft(
                &scalar_at(c, 0),
                &scalar_at(c, 1),
                &leaves[1],
                &scalar_at(sh, 0),
                &scalar_at(sh, 1),
                h,
                w,
            );
            if binarize {
                soft.ste_round()
            } else {
                soft
            }
        }
        ShapeFamily::Oval => {
            let c = &leaves[0];
            let ax = &leaves[1];
            let soft = maskgen::oval_soft(
                &scalar_at(c, 0),
                &scalar_at(c, 1),
                &scalar_at(ax, 0),
                &scalar_at(ax, 1),
                h,
                w,
            );
            if binarize {
                soft.ste_round()
            } else {
                soft
            }
        }
    }
}

/// Best-so-far snapshot by total loss.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub loss: f64,
    pub step: u64,
    pub patch: Tensor,
    pub params: MaskParams,
}

/// Full resumable optimizer state.
#[derive(Debug, Clone)]
pub struct AttackState {
    pub patch: Tensor,
    pub params: MaskParams,
    pub adam_patch: AdamState,
    pub adam_shape: Vec<AdamState>,
    /// Next step index to execute.
    pub step: u64,
    pub best: BestSnapshot,
}

impl AttackState {
    /// Fresh state: seeded uniform-noise patch and the centered
    /// budget-area mask.
    pub fn init(cfg: &AttackConfig, object: &ObjectSample) -> Self {
        let (h, w) = object.dims();
        let mut rng = Rng::new(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
        let patch = Tensor::from_vec(&[h, w, 3], data);
        let params = init_mask_params(cfg.family, object, cfg.budget);
        let adam_shape = param_groups(&params)
            .iter()
            .map(|(_, v)| AdamState::new(v.len()))
            .collect();
        AttackState {
            adam_patch: AdamState::new(h * w * 3),
            adam_shape,
            best: BestSnapshot {
                loss: f64::INFINITY,
                step: 0,
                patch: patch.clone(),
                params,
            },
            patch,
            params,
            step: 0,
        }
    }
}

/// One training-log record. The CSV columns are the pinned external
/// interface; `masked_mean_disp` is an extra in-process observable used by
/// the acceptance suite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr_patch: f64,
    pub l_total: f64,
    pub l_depth: f64,
    pub l1: f64,
    pub l2: f64,
    pub l_tv: f64,
    pub l_nps: f64,
    pub l_area: f64,
    pub area_ratio: f64,
    pub mse_t: f64,
    pub mse_b: f64,
    pub alpha: f64,
    pub eps_disp: f64,
    pub eps_depth: f64,
    pub masked_mean_disp: f64,
}

pub const LOG_CSV_HEADER: &str = "step,lr_patch,L_total,L_depth,L1,L2,L_TV,L_NPS,L_area,area_ratio,MSE_t,MSE_b,alpha,eps_disp,eps_depth";

impl LogRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr_patch,
            self.l_total,
            self.l_depth,
            self.l1,
            self.l2,
            self.l_tv,
            self.l_nps,
            self.l_area,
            self.area_ratio,
            self.mse_t,
            self.mse_b,
            self.alpha,
            self.eps_disp,
            self.eps_depth
        )
    }
}

pub fn write_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Per-step RNG derivation; resuming at step k reproduces the stream.
pub fn step_seed(master: u64, step: u64) -> u64 {
    master ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct AttackRun {
    pub state: AttackState,
    pub log: Vec<LogRow>,
}

/// Scene-only disparity maps, computed once per scene (used by the
/// Disappear target).
fn scene_disparities(
    mode: AttackMode,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
) -> HashMap<usize, Tensor> {
    let mut map = HashMap::new();
    if matches!(mode, AttackMode::Disappear) {
        for (i, s) in scenes.iter().enumerate() {
            map.insert(i, model.forward(s));
        }
    }
    map
}

/// Runs (or resumes) the optimization loop.
pub fn run_attack(
    cfg: &AttackConfig,
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    palette: &Palette,
    resume: Option<AttackState>,
) -> Result<AttackRun, AttackError> {
    run_attack_observed(cfg, object, scenes, model, palette, resume, &mut |_| {})
}

/// [`run_attack`] with a per-scenario observer, letting callers audit
/// every composited sample of a run (scenario invariants, debugging).
#[allow(clippy::too_many_arguments)]
pub fn run_attack_observed(
    cfg: &AttackConfig,
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    palette: &Palette,
    resume: Option<AttackState>,
    observe: &mut dyn FnMut(&Scenario),
) -> Result<AttackRun, AttackError> {
    assert!(cfg.steps >= 1, "steps must be >= 1");
    assert!(cfg.batch >= 1, "batch must be >= 1");
    assert!(
        cfg.budget > 0.0 && cfg.budget <= 1.0,
        "budget must lie in (0, 1]"
    );
    assert!(cfg.lr_patch > 0.0 && cfg.lr_shape > 0.0, "lrs must be > 0");
    assert!(!scenes.is_empty(), "scene list must be nonempty");

    let (h_o, w_o) = object.dims();
    let object_area = object.mask_area();
    let period = cfg.effective_decay_period();
    let rs_disp = scene_disparities(cfg.mode, scenes, model);

    let mut state = resume.unwrap_or_else(|| AttackState::init(cfg, object));
    let mut log: Vec<LogRow> = Vec::new();

    for step in state.step..cfg.steps {
        let mut rng = Rng::new(step_seed(cfg.seed, step));
        let lr_patch = lr_schedule(step, cfg.lr_patch, cfg.decay_factor, period);

        let tape = Tape::new();
        let patch_leaf = tape.param(&state.patch);
        let groups = param_groups(&state.params);
        let leaves: Vec<Tensor> = groups
            .iter()
            .map(|(_, v)| tape.param(&Tensor::from_vec(&[v.len()], v.clone())))
            .collect();

        let m_p_obj = mask_from_leaves(cfg.family, &leaves, h_o, w_o, true);
        let m_p_eff = m_p_obj.mul(&object.mask);
        let area = maskgen::mask_area(&m_p_eff);
        let o_adv = compositor::apply_patch(&object.image, &m_p_eff, &patch_leaf);
        let tv = losses::loss_tv(&patch_leaf);
        let nps = losses::loss_nps(&patch_leaf, palette);

        let batch = compositor::build_batch(object, &o_adv, &m_p_eff, scenes, &mut rng, cfg.batch);
        let mut depth_sum: Option<Tensor> = None;
        let mut per_scenario: Vec<(Tensor, Tensor, Tensor, Scenario)> = Vec::new();
        let mut l1_sum = 0.0;
        let mut l2_sum = 0.0;
        for sc in batch {
            observe(&sc);
            let d_adv = model.forward(&sc.x_adv);
            let d_b = model.forward(&sc.x_b);
            let d_t = build_target(cfg.mode, &d_b, rs_disp.get(&sc.scene_index), &sc.m_o);
            let term = match cfg.mode {
                AttackMode::Nontargeted => {
                    losses::loss_nontargeted(&d_adv, &d_b, &sc.m_o).mul_s(-1.0)
                }
                _ => {
                    let l1 = losses::loss_l1(&d_adv, &d_t, &sc.m_p);
                    let l2 = losses::loss_l2(&d_adv, &d_t, &sc.m_o, &sc.m_p);
                    l1_sum += l1.item();
                    l2_sum += l2.item();
                    l1.add(&l2)
                }
            };
            depth_sum = Some(match depth_sum {
                None => term,
                Some(acc) => acc.add(&term),
            });
            per_scenario.push((d_adv, d_b, d_t, sc));
        }
        let b_f = cfg.batch as f64;
        let depth_mean = depth_sum.unwrap().div_s(b_f);
        let comps = LossComponents {
            depth: depth_mean,
            tv,
            nps,
            area,
        };
        let total = losses::loss_total(&comps, &cfg.weights);
        let total_val = total.item();
        if !total_val.is_finite() {
            return Err(AttackError::NonFiniteLoss { step });
        }

        if total_val < state.best.loss {
            state.best = BestSnapshot {
                loss: total_val,
                step,
                patch: state.patch.clone(),
                params: state.params,
            };
        }

        let log_this = step % cfg.log_every == 0 || step + 1 == cfg.steps;
        if log_this {
            let area_val = comps.area.item();
            let mut rec_sum = evalrobust::MetricsRecord::zero();
            let mut disp_sum = 0.0;
            for (d_adv, d_b, d_t, sc) in &per_scenario {
                let rec = evalrobust::metrics(
                    &d_adv.detach(),
                    d_b,
                    d_t,
                    &sc.m_o,
                    &cfg.conversion,
                    cfg.alpha_reference,
                )?;
                rec_sum.accumulate(&rec);
                let mask_sum: f64 = sc.m_o.data().iter().sum();
                disp_sum +=
                    d_adv.detach().mul(&sc.m_o).sum().item() / mask_sum.max(1.0);
            }
            let rec = rec_sum.scaled(1.0 / b_f);
            log.push(LogRow {
                step,
                lr_patch,
                l_total: total_val,
                l_depth: (l1_sum + l2_sum) / b_f,
                l1: l1_sum / b_f,
                l2: l2_sum / b_f,
                l_tv: comps.tv.item(),
                l_nps: comps.nps.item(),
                l_area: area_val,
                area_ratio: area_val / object_area.max(1.0),
                mse_t: rec.mse_t,
                mse_b: rec.mse_b,
                alpha: rec.alpha,
                eps_disp: rec.eps_disp,
                eps_depth: rec.eps_depth,
                masked_mean_disp: disp_sum / b_f,
            });
        }

        total.backward().expect("fresh tape per step");

        // patch group
        let gp = patch_leaf.grad().expect("patch gradient");
        let mut patch_data = state.patch.data().to_vec();
        adam_step(&mut patch_data, gp.data(), &mut state.adam_patch, lr_patch).map_err(|_| {
            AttackError::NonFiniteGrad {
                step,
                group: "patch".into(),
            }
        })?;
        for v in patch_data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        state.patch = Tensor::from_vec(&[h_o, w_o, 3], patch_data);

        // shape group
        if cfg.optimize_shape {
            let mut new_groups = Vec::with_capacity(groups.len());
            for (gi, ((name, values), leaf)) in groups.iter().zip(&leaves).enumerate() {
                let g = leaf.grad().expect("shape gradient");
                let mut vals = values.clone();
                adam_step(&mut vals, g.data(), &mut state.adam_shape[gi], cfg.lr_shape)
                    .map_err(|_| AttackError::NonFiniteGrad {
                        step,
                        group: (*name).into(),
                    })?;
                new_groups.push(vals);
            }
            state.params = maskgen::clamp_params(
                &apply_param_groups(&state.params, &new_groups),
                h_o,
                w_o,
            );
        }
        state.step = step + 1;
    }

    Ok(AttackRun { state, log })
}

// ---- SVPS1 checkpoint format ----------------------------------------------

const STATE_MAGIC: &[u8; 5] = b"SVPS1";

fn family_tag(f: ShapeFamily) -> u8 {
    match f {
        ShapeFamily::Rect => 0,
        ShapeFamily::Quad => 1,
        ShapeFamily::Circle => 2,
        ShapeFamily::Ellipse => 3,
        ShapeFamily::Oval => 4,
    }
}

fn family_from_tag(t: u8) -> Option<ShapeFamily> {
    Some(match t {
        0 => ShapeFamily::Rect,
        1 => ShapeFamily::Quad,
        2 => ShapeFamily::Circle,
        3 => ShapeFamily::Ellipse,
        4 => ShapeFamily::Oval,
        _ => return None,
    })
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_params(buf: &mut Vec<u8>, p: &MaskParams) {
    buf.push(family_tag(p.family));
    let fields: Vec<f64> = p
        .theta1
        .iter()
        .chain(p.slopes.iter())
        .chain(p.center.iter())
        .chain(std::iter::once(&p.radius))
        .chain(p.shear.iter())
        .chain(p.axes.iter())
        .copied()
        .collect();
    for v in fields {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_adam(buf: &mut Vec<u8>, a: &AdamState) {
    buf.extend_from_slice(&a.t.to_le_bytes());
    buf.extend_from_slice(&(a.m.len() as u32).to_le_bytes());
    for &v in &a.m {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &a.v {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AttackError> {
        if self.pos + n > self.bytes.len() {
            return Err(AttackError::Truncated {
                path: self.path.clone(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, AttackError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, AttackError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AttackError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, AttackError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor, AttackError> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_vec(&shape, data))
    }

    fn params(&mut self) -> Result<MaskParams, AttackError> {
        let tag = self.u8()?;
        let family = family_from_tag(tag).ok_or_else(|| AttackError::BadMagic {
            path: self.path.clone(),
        })?;
        let mut p = MaskParams::new(family);
        for i in 0..4 {
            p.theta1[i] = self.f64()?;
        }
        for i in 0..4 {
            p.slopes[i] = self.f64()?;
        }
        for i in 0..2 {
            p.center[i] = self.f64()?;
        }
        p.radius = self.f64()?;
        for i in 0..2 {
            p.shear[i] = self.f64()?;
        }
        for i in 0..2 {
            p.axes[i] = self.f64()?;
        }
        Ok(p)
    }

    fn adam(&mut self) -> Result<AdamState, AttackError> {
        let t = self.u64()?;
        let n = self.u32()? as usize;
        let mut m = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(self.f64()?);
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(AdamState { m, v, t })
    }
}

/// Serializes the full state; `config_hash` ties the file to the
/// generating configuration.
pub fn save_state(
    state: &AttackState,
    config_hash: u64,
    path: impl AsRef<Path>,
) -> Result<(), AttackError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&config_hash.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    push_tensor(&mut buf, &state.patch);
    push_params(&mut buf, &state.params);
    push_adam(&mut buf, &state.adam_patch);
    buf.extend_from_slice(&(state.adam_shape.len() as u32).to_le_bytes());
    for a in &state.adam_shape {
        push_adam(&mut buf, a);
    }
    buf.extend_from_slice(&state.best.loss.to_le_bytes());
    buf.extend_from_slice(&state.best.step.to_le_bytes());
    push_tensor(&mut buf, &state.best.patch);
    push_params(&mut buf, &state.best.params);

    let mut f = fs::File::create(path).map_err(|e| AttackError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&buf).map_err(|e| AttackError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads a state file, verifying the magic and the config hash.
pub fn load_state(path: impl AsRef<Path>, expected_hash: u64) -> Result<AttackState, AttackError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| AttackError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    if bytes.len() < 5 || &bytes[..5] != STATE_MAGIC {
        return Err(AttackError::BadMagic { path: p });
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 5,
        path: p.clone(),
    };
    let found = r.u64()?;
    if found != expected_hash {
        return Err(AttackError::ConfigHashMismatch {
            path: p,
            expected: expected_hash,
            found,
        });
    }
    let step = r.u64()?;
    let patch = r.tensor()?;
    let params = r.params()?;
    let adam_patch = r.adam()?;
    let n_groups = r.u32()? as usize;
    let mut adam_shape = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        adam_shape.push(r.adam()?);
    }
    let best_loss = r.f64()?;
    let best_step = r.u64()?;
    let best_patch = r.tensor()?;
    let best_params = r.params()?;
    Ok(AttackState {
        patch,
        params,
        adam_patch,
        adam_shape,
        step,
        best: BestSnapshot {
            loss: best_loss,
            step: best_step,
            patch: best_patch,
            params: best_params,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthmodel::Surrogate;
    use crate::synth;

    fn tiny_setup() -> (AttackConfig, ObjectSample, Vec<Tensor>, Surrogate, Palette) {
        let cfg = AttackConfig {
            steps: 6,
            batch: 1,
            seed: 7,
            log_every: 2,
            family: ShapeFamily::Rect,
            ..AttackConfig::default()
        };
        let (object, _) = synth::make_object(16, 24, 3);
        let scenes = synth::make_scenes(2, 32, 48, 5);
        let model = Surrogate::seeded(11);
        let palette = Palette::default_printable();
        (cfg, object, scenes, model, palette)
    }

    #[test]
    fn build_target_modes() {
        let d_b = Tensor::from_vec(&[2, 2], vec![0.3, 0.95, 0.5, 0.1]);
        let m_o = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]);

        let further = build_target(AttackMode::Further, &d_b, None, &m_o);
        assert_eq!(further.data(), &[0.0, 0.0, 0.5, 0.1]);

        let closer = build_target(AttackMode::Closer, &d_b, None, &m_o);
        assert_eq!(closer.data(), &[1.0, 1.0, 0.5, 0.1]);

        let offset = build_target(AttackMode::Offset(0.2), &d_b, None, &m_o);
        assert!((offset.data()[0] - 0.5).abs() < 1e-12);
        assert!((offset.data()[1] - 1.0).abs() < 1e-12, "clamped at 1");
        assert_eq!(offset.data()[2], 0.5);

        let rs = Tensor::from_vec(&[2, 2], vec![0.9, 0.8, 0.7, 0.6]);
        let dis = build_target(AttackMode::Disappear, &d_b, Some(&rs), &m_o);
        assert_eq!(dis.data(), rs.data());
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let mut params = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut params, &[0.5], &mut st, 1.0).unwrap();
        assert!((params[0] - 0.0).abs() < 1e-6, "got {}", params[0]);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut params = vec![0.3, -0.7];
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut params, &[0.0, 0.0], &mut st, 1.0).unwrap();
        }
        assert_eq!(params, vec![0.3, -0.7]);
    }

    #[test]
    fn adam_groups_are_independent() {
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        let mut sa = AdamState::new(1);
        let mut sb = AdamState::new(1);
        adam_step(&mut a, &[1.0], &mut sa, 1.0).unwrap();
        adam_step(&mut b, &[1.0], &mut sb, 0.01).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-6);
        assert!((b[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_nan_grad() {
        let mut params = vec![0.0];
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut params, &[f64::NAN], &mut st, 1.0).is_err());
    }

    #[test]
    fn lr_schedule_cases() {
        assert_eq!(lr_schedule(0, 1.0, 0.2, 2000), 1.0);
        assert!((lr_schedule(2000, 1.0, 0.2, 2000) - 0.2).abs() < 1e-15);
        assert!((lr_schedule(9999, 1.0, 0.2, 2000) - 0.0016).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_freeze_parameters() {
        let (mut cfg, object, scenes, model, palette) = tiny_setup();
        cfg.weights = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        };
        let init = AttackState::init(&cfg, &object);
        let run = run_attack(&cfg, &object, &scenes, &model, &palette, None).unwrap();
        assert_eq!(run.state.patch.data(), init.patch.data());
        assert_eq!(run.state.params, init.params);
    }

    #[test]
    fn rerun_is_bit_identical() {
        let (cfg, object, scenes, model, palette) = tiny_setup();
        let a = run_attack(&cfg, &object, &scenes, &model, &palette, None).unwrap();
        let b = run_attack(&cfg, &object, &scenes, &model, &palette, None).unwrap();
        assert_eq!(write_log_csv(&a.log), write_log_csv(&b.log));
        assert_eq!(a.state.patch.data(), b.state.patch.data());
    }

    #[test]
    fn params_stay_clamped_and_patch_in_range() {
        let (cfg, object, scenes, model, palette) = tiny_setup();
        let run = run_attack(&cfg, &object, &scenes, &model, &palette, None).unwrap();
        assert!(run
            .state
            .patch
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        let (h, w) = object.dims();
        let clamped = maskgen::clamp_params(&run.state.params, h, w);
        assert_eq!(run.state.params, clamped);
    }

    #[test]
    fn shape_gradients_flow_at_step_zero() {
        let (cfg, object, scenes, model, palette) = tiny_setup();
        // replicate step 0 and inspect leaf gradients directly
        let state = AttackState::init(&cfg, &object);
        let (h_o, w_o) = object.dims();
        let mut rng = Rng::new(step_seed(cfg.seed, 0));
        let tape = Tape::new();
        let patch_leaf = tape.param(&state.patch);
        let groups = param_groups(&state.params);
        let leaves: Vec<Tensor> = groups
            .iter()
            .map(|(_, v)| tape.param(&Tensor::from_vec(&[v.len()], v.clone())))
            .collect();
        let m_p_obj = mask_from_leaves(cfg.family, &leaves, h_o, w_o, true);
        let m_p_eff = m_p_obj.mul(&object.mask);
        let area = maskgen::mask_area(&m_p_eff);
        let o_adv = compositor::apply_patch(&object.image, &m_p_eff, &patch_leaf);
        let batch = compositor::build_batch(&object, &o_adv, &m_p_eff, &scenes, &mut rng, 1);
        let sc = &batch[0];
        let d_adv = model.forward(&sc.x_adv);
        let d_b = model.forward(&sc.x_b);
        let d_t = build_target(cfg.mode, &d_b, None, &sc.m_o);
        let depth = losses::loss_depth(&d_adv, &d_t, &sc.m_o, &sc.m_p);
        let comps = LossComponents {
            depth,
            tv: losses::loss_tv(&patch_leaf),
            nps: losses::loss_nps(&patch_leaf, &palette),
            area,
        };
        losses::loss_total(&comps, &cfg.weights).backward().unwrap();
        let theta_grad = leaves[0].grad().unwrap();
        let norm: f64 = theta_grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 0.0, "boundary parameters receive gradient");

        // circle family: radius gradient is nonzero too
        let mut ccfg = cfg.clone();
        ccfg.family = ShapeFamily::Circle;
        let cstate = AttackState::init(&ccfg, &object);
        let tape = Tape::new();
        let patch_leaf = tape.param(&cstate.patch);
        let groups = param_groups(&cstate.params);
        let leaves: Vec<Tensor> = groups
            .iter()
            .map(|(_, v)| tape.param(&Tensor::from_vec(&[v.len()], v.clone())))
            .collect();
        let m_p_obj = mask_from_leaves(ccfg.family, &leaves, h_o, w_o, true);
        let m_p_eff = m_p_obj.mul(&object.mask);
        let mut rng = Rng::new(step_seed(ccfg.seed, 0));
        let o_adv = compositor::apply_patch(&object.image, &m_p_eff, &patch_leaf);
        let batch = compositor::build_batch(&object, &o_adv, &m_p_eff, &scenes, &mut rng, 1);
        let sc = &batch[0];
        let d_adv = model.forward(&sc.x_adv);
        let d_b = model.forward(&sc.x_b);
        let d_t = build_target(ccfg.mode, &d_b, None, &sc.m_o);
        let comps = LossComponents {
            depth: losses::loss_depth(&d_adv, &d_t, &sc.m_o, &sc.m_p),
            tv: losses::loss_tv(&patch_leaf),
            nps: losses::loss_nps(&patch_leaf, &palette),
            area: maskgen::mask_area(&m_p_eff),
        };
        losses::loss_total(&comps, &ccfg.weights).backward().unwrap();
        let r_grad = leaves[1].grad().unwrap().item();
        assert!(r_grad.abs() > 0.0, "radius receives gradient, got {}", r_grad);
    }

    #[test]
    fn best_snapshot_tracks_minimum() {
        let (cfg, object, scenes, model, palette) = tiny_setup();
        let run = run_attack(&cfg, &object, &scenes, &model, &palette, None).unwrap();
        let min_logged = run
            .log
            .iter()
            .map(|r| r.l_total)
            .fold(f64::INFINITY, f64::min);
        assert!(run.state.best.loss <= min_logged + 1e-12);
    }

    #[test]
    fn save_load_resume_matches_uninterrupted() {
        let (mut cfg, object, scenes, model, palette) = tiny_setup();
        cfg.steps = 4;
        let partial = run_attack(&cfg, &object, &scenes, &model, &palette, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.svps");
        save_state(&partial.state, 0xABCD, &path).unwrap();
        let loaded = load_state(&path, 0xABCD).unwrap();
        assert_eq!(loaded.patch.data(), partial.state.patch.data());
        assert_eq!(loaded.step, 4);

        let mut full_cfg = cfg.clone();
        full_cfg.steps = 8;
        let full = run_attack(&full_cfg, &object, &scenes, &model, &palette, None).unwrap();
        let resumed =
            run_attack(&full_cfg, &object, &scenes, &model, &palette, Some(loaded)).unwrap();
        assert_eq!(full.state.patch.data(), resumed.state.patch.data());
        assert_eq!(full.state.params, resumed.state.params);
        assert_eq!(full.state.best.loss, resumed.state.best.loss);
    }

    #[test]
    fn state_hash_mismatch_and_corrupt_magic() {
        let (cfg, object, _, _, _) = tiny_setup();
        let state = AttackState::init(&cfg, &object);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.svps");
        save_state(&state, 1, &path).unwrap();
        assert!(matches!(
            load_state(&path, 2),
            Err(AttackError::ConfigHashMismatch { .. })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_state(&path, 1),
            Err(AttackError::BadMagic { .. })
        ));

        // round trip preserves patch bytes
        let path2 = dir.path().join("state2.svps");
        save_state(&state, 7, &path2).unwrap();
        let back = load_state(&path2, 7).unwrap();
        assert_eq!(back.patch.data(), state.patch.data());
    }
}
