//! Ablation baselines: two-stage differential-evolution shape search over
//! closed spline masks, and Gaussian-kernel aggregation of a per-pixel
//! mask.
//!
//! DE settings are the canonical rand/1/bin defaults (F = 0.5, CR = 0.9,
//! P = 30); the spline is a periodic natural cubic through k control
//! points sampled 64 times per segment. Fitness uses a fixed seeded
//! scenario batch so selection is noise-free and best-so-far fitness is
//! provably non-increasing.

use crate::attack::{self, AttackConfig, AttackError};
use crate::compositor::{self, ObjectSample, TransformParams};
use crate::depthmodel::DisparityModel;
use crate::imaging::Rng;
use crate::losses::{self, Palette};
use crate::maskgen;
use crate::ndgrad::{Tape, Tensor};

/// Closed shape: k ordered control points in object-grid (row, col)
/// coordinates, interpolated periodically.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineShape {
    pub points: Vec<[f64; 2]>,
}

impl SplineShape {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        assert!(points.len() >= 4, "spline needs at least 4 control points");
        SplineShape { points }
    }

    /// Serializes as one `row col` line per control point.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            s.push_str(&format!("{} {}\n", p[0], p[1]));
        }
        s
    }
}

/// Samples per spline segment; dense enough that the polyline error is
/// far below one pixel at desk scales.
pub const SPLINE_SAMPLES_PER_SEGMENT: usize = 64;

/// Solves the cyclic system for periodic cubic-spline second derivatives
/// with uniform knots: `M[k-1] + 4 M[k] + M[k+1] = 6 (y[k+1] - 2 y[k] + y[k-1])`.
fn periodic_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    // dense Gaussian elimination; n is small (control-point count)
    let mut a = vec![vec![0.0; n + 1]; n];
    for k in 0..n {
        a[k][(k + n - 1) % n] += 1.0;
        a[k][k] += 4.0;
        a[k][(k + 1) % n] += 1.0;
        a[k][n] = 6.0 * (y[(k + 1) % n] - 2.0 * y[k] + y[(k + n - 1) % n]);
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let pv = a[col][col];
        for j in col..=n {
            a[col][j] /= pv;
        }
        for row in 0..n {
            if row != col && a[row][col] != 0.0 {
                let factor = a[row][col];
                for j in col..=n {
                    a[row][j] -= factor * a[col][j];
                }
            }
        }
    }
    (0..n).map(|k| a[k][n]).collect()
}

/// Dense closed polyline through the control points.
pub fn sample_spline(shape: &SplineShape) -> Vec<[f64; 2]> {
    let k = shape.points.len();
    let rows: Vec<f64> = shape.points.iter().map(|p| p[0]).collect();
    let cols: Vec<f64> = shape.points.iter().map(|p| p[1]).collect();
    let mr = periodic_second_derivatives(&rows);
    let mc = periodic_second_derivatives(&cols);
    let eval = |y: &[f64], m: &[f64], seg: usize, u: f64| -> f64 {
        let y0 = y[seg];
        let y1 = y[(seg + 1) % k];
        let m0 = m[seg];
        let m1 = m[(seg + 1) % k];
        let v = 1.0 - u;
        m0 * v * v * v / 6.0 + m1 * u * u * u / 6.0 + (y0 - m0 / 6.0) * v + (y1 - m1 / 6.0) * u
    };
    let mut out = Vec::with_capacity(k * SPLINE_SAMPLES_PER_SEGMENT);
    for seg in 0..k {
        for s in 0..SPLINE_SAMPLES_PER_SEGMENT {
            let u = s as f64 / SPLINE_SAMPLES_PER_SEGMENT as f64;
            out.push([eval(&rows, &mr, seg, u), eval(&cols, &mc, seg, u)]);
        }
    }
    out
}

/// Even-odd crossing set of a closed polyline with the horizontal line
/// `row = i`: columns where a segment crosses, under the half-open rule
/// `(r1 > i) != (r2 > i)`.
fn row_crossings(polyline: &[[f64; 2]], i: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = polyline.len();
    for s in 0..n {
        let [r1, c1] = polyline[s];
        let [r2, c2] = polyline[(s + 1) % n];
        if (r1 > i) != (r2 > i) {
            out.push(c1 + (i - r1) * (c2 - c1) / (r2 - r1));
        }
    }
}

/// Rasterizes the spline interior with the even-odd scanline rule: pixel
/// `(i, j)` is inside iff an odd number of crossings on its row lie
/// strictly right of `j`. Degenerate shapes yield an empty mask.
pub fn rasterize_spline(shape: &SplineShape, h: usize, w: usize) -> Tensor {
    let polyline = sample_spline(shape);
    let mut data = vec![0.0; h * w];
    let mut crossings = Vec::new();
    for i in 0..h {
        row_crossings(&polyline, i as f64, &mut crossings);
        if crossings.is_empty() {
            continue;
        }
        for j in 0..w {
            let count = crossings.iter().filter(|&&c| c > j as f64).count();
            if count % 2 == 1 {
                data[i * w + j] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[h, w], data)
}

/// DE/rand/1/bin hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DeConfig {
    pub control_points: usize,
    pub population: usize,
    pub generations: usize,
    pub differential_weight: f64,
    pub crossover_rate: f64,
    pub seed: u64,
    /// Scenarios in the fixed fitness batch.
    pub fitness_batch: usize,
    /// Optional cap on total fitness evaluations.
    pub max_evals: Option<usize>,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            control_points: 8,
            population: 30,
            generations: 10,
            differential_weight: 0.5,
            crossover_rate: 0.9,
            seed: 1,
            fitness_batch: 2,
            max_evals: None,
        }
    }
}

/// Generation-by-generation log of the elitist best fitness.
#[derive(Debug, Clone)]
pub struct DeRun {
    pub best: SplineShape,
    pub best_fitness: f64,
    pub history: Vec<f64>,
    pub evaluations: usize,
}

/// Fixed seeded scenario contexts for noise-free fitness evaluation.
struct FitnessBatch {
    items: Vec<(usize, TransformParams)>,
}

impl FitnessBatch {
    fn sample(rng: &mut Rng, scenes: &[Tensor], object: &ObjectSample, n: usize) -> Self {
        let items = (0..n)
            .map(|_| {
                let idx = rng.uniform_index(scenes.len());
                let tp = compositor::sample_transform(
                    rng,
                    (scenes[idx].shape()[0], scenes[idx].shape()[1]),
                    object.dims(),
                );
                (idx, tp)
            })
            .collect();
        FitnessBatch { items }
    }
}

/// Mean `L_depth + lambda4 * L_area` of a candidate mask under the frozen
/// patch, on the fixed batch; no gradients involved.
#[allow(clippy::too_many_arguments)]
fn shape_fitness(
    mask: &Tensor,
    frozen_patch: &Tensor,
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    cfg: &AttackConfig,
    batch: &FitnessBatch,
    rs_disp: &std::collections::HashMap<usize, Tensor>,
) -> f64 {
    let m_p_eff = mask.mul(&object.mask);
    let area = maskgen::mask_area(&m_p_eff).item();
    let o_adv = compositor::apply_patch(&object.image, &m_p_eff, frozen_patch);
    let mut depth_sum = 0.0;
    for (idx, tp) in &batch.items {
        let sc = compositor::build_scenario(object, &o_adv, &m_p_eff, &scenes[*idx], *idx, *tp);
        let d_adv = model.forward(&sc.x_adv);
        let d_b = model.forward(&sc.x_b);
        let d_t = attack::build_target(cfg.mode, &d_b, rs_disp.get(idx), &sc.m_o);
        depth_sum += losses::loss_depth(&d_adv, &d_t, &sc.m_o, &sc.m_p).item();
    }
    depth_sum / batch.items.len() as f64 + cfg.weights.lambda4 * area
}

/// Stage-two DE search for the best patch shape given a frozen patch
/// texture (stage one optimizes the texture with a full-object mask).
pub fn de_optimize(
    object: &ObjectSample,
    frozen_patch: &Tensor,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    attack_cfg: &AttackConfig,
    de: &DeConfig,
) -> DeRun {
    assert!(de.population >= 4, "DE needs at least 4 candidates");
    let (h, w) = object.dims();
    let dim = de.control_points * 2;
    let mut rng = Rng::new(de.seed);
    let batch = FitnessBatch::sample(&mut rng, scenes, object, de.fitness_batch);
    let rs_disp: std::collections::HashMap<usize, Tensor> =
        if matches!(attack_cfg.mode, attack::AttackMode::Disappear) {
            scenes
                .iter()
                .enumerate()
                .map(|(i, s)| (i, model.forward(s)))
                .collect()
        } else {
            Default::default()
        };

    let bounds = [(0.0, (h - 1) as f64), (0.0, (w - 1) as f64)];
    let clamp_vec = |v: &mut [f64]| {
        for (i, x) in v.iter_mut().enumerate() {
            let (lo, hi) = bounds[i % 2];
            *x = x.clamp(lo, hi);
        }
    };
    let to_shape = |v: &[f64]| {
        SplineShape::new(v.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
    };

    let mut evals = 0usize;
    let budget = de.max_evals.unwrap_or(usize::MAX);
    let eval_fitness = |v: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let mask = rasterize_spline(&to_shape(v), h, w);
        shape_fitness(
            &mask,
            frozen_patch,
            object,
            scenes,
            model,
            attack_cfg,
            &batch,
            &rs_disp,
        )
    };

    // seeded initial population
    let mut pop: Vec<Vec<f64>> = (0..de.population)
        .map(|_| {
            (0..dim)
                .map(|i| {
                    let (lo, hi) = bounds[i % 2];
                    rng.uniform(lo, hi)
                })
                .collect()
        })
        .collect();
    let mut fit: Vec<f64> = pop
        .iter()
        .map(|v| eval_fitness(v, &mut evals))
        .collect();

    let mut best_idx = (0..de.population)
        .min_by(|&i, &j| fit[i].partial_cmp(&fit[j]).unwrap())
        .unwrap();
    let mut best = pop[best_idx].clone();
    let mut best_fitness = fit[best_idx];
    let mut history = vec![best_fitness];

    'generations: for _ in 0..de.generations {
        for i in 0..de.population {
            if evals >= budget {
                break 'generations;
            }
            // pick distinct a, b, c != i
            let mut pick = || loop {
                let r = rng.uniform_index(de.population);
                if r != i {
                    return r;
                }
            };
            let a = pick();
            let b = loop {
                let r = pick();
                if r != a {
                    break r;
                }
            };
            let c = loop {
                let r = pick();
                if r != a && r != b {
                    break r;
                }
            };
            let mut trial = pop[i].clone();
            let j_rand = rng.uniform_index(dim);
            for j in 0..dim {
                if rng.next_f64() < de.crossover_rate || j == j_rand {
                    trial[j] =
                        pop[a][j] + de.differential_weight * (pop[b][j] - pop[c][j]);
                }
            }
            clamp_vec(&mut trial);
            let f_trial = eval_fitness(&trial, &mut evals);
            if f_trial <= fit[i] {
                pop[i] = trial;
                fit[i] = f_trial;
                if f_trial < best_fitness {
                    best_fitness = f_trial;
                    best = pop[i].clone();
                    best_idx = i;
                }
            }
        }
        history.push(best_fitness);
    }
    let _ = best_idx;

    DeRun {
        best: to_shape(&best),
        best_fitness,
        history,
        evaluations: evals,
    }
}

/// Normalized Gaussian kernel as a conv2d-ready `(k, k, 1, 1)` tensor.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Tensor {
    assert!(size % 2 == 1, "kernel size must be odd");
    let half = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for i in 0..size {
        for j in 0..size {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            data.push(v);
            sum += v;
        }
    }
    for v in data.iter_mut() {
        *v /= sum;
    }
    Tensor::from_vec(&[size, size, 1, 1], data)
}

pub const GAUSSIAN_KERNEL_SIZE: usize = 11;
pub const GAUSSIAN_KERNEL_SIGMA: f64 = 3.0;

fn binarize(t: &Tensor, threshold: f64) -> Tensor {
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(t.shape(), data)
}

/// Post-processing of the per-pixel mask: binarize at 0.5, blur with the
/// 11 x 11 sigma-3 Gaussian, binarize again. Deletes isolated pixels (the
/// blurred peak of a singleton is ~0.02, far below threshold) and leaves
/// smooth shapes essentially unchanged.
pub fn aggregate_mask(theta: &Tensor) -> Tensor {
    let (h, w) = (theta.shape()[0], theta.shape()[1]);
    let hard = binarize(theta, 0.5);
    let kernel = gaussian_kernel(GAUSSIAN_KERNEL_SIZE, GAUSSIAN_KERNEL_SIGMA);
    let blurred = hard
        .expand_channels(1)
        .conv2d(&kernel, 1, GAUSSIAN_KERNEL_SIZE / 2)
        .channel(0);
    let out = binarize(&blurred, 0.5);
    assert_eq!(out.shape(), &[h, w]);
    out
}

/// Per-pixel mask optimization: the standard attack step with the mask
/// grid as a straight-through-binarized parameter field, then
/// [`aggregate_mask`] post-processing. Returns `(mask, final_patch)`.
pub fn gaussian_aggregate(
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    palette: &Palette,
    cfg: &AttackConfig,
) -> Result<(Tensor, Tensor), AttackError> {
    let (h_o, w_o) = object.dims();
    let mut init_rng = Rng::new(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut patch =
        Tensor::from_vec(&[h_o, w_o, 3], (0..h_o * w_o * 3).map(|_| init_rng.uniform(0.0, 1.0)).collect());
    let mut theta = Tensor::from_vec(
        &[h_o, w_o],
        (0..h_o * w_o).map(|_| init_rng.uniform(0.0, 1.0)).collect(),
    );
    let mut adam_patch = attack::AdamState::new(h_o * w_o * 3);
    let mut adam_theta = attack::AdamState::new(h_o * w_o);
    let period = cfg.effective_decay_period();

    for step in 0..cfg.steps {
        let mut rng = Rng::new(attack::step_seed(cfg.seed, step));
        let tape = Tape::new();
        let patch_leaf = tape.param(&patch);
        let theta_leaf = tape.param(&theta);
        let m_p_obj = theta_leaf.ste_round();
        let m_p_eff = m_p_obj.mul(&object.mask);
        let area = maskgen::mask_area(&m_p_eff);
        let o_adv = compositor::apply_patch(&object.image, &m_p_eff, &patch_leaf);
        let batch = compositor::build_batch(object, &o_adv, &m_p_eff, scenes, &mut rng, cfg.batch);
        let mut depth_sum: Option<Tensor> = None;
        for sc in batch {
            let d_adv = model.forward(&sc.x_adv);
            let d_b = model.forward(&sc.x_b);
            let d_t = attack::build_target(cfg.mode, &d_b, None, &sc.m_o);
            let l = losses::loss_depth(&d_adv, &d_t, &sc.m_o, &sc.m_p);
            depth_sum = Some(match depth_sum {
                None => l,
                Some(acc) => acc.add(&l),
            });
        }
        let comps = losses::LossComponents {
            depth: depth_sum.unwrap().div_s(cfg.batch as f64),
            tv: losses::loss_tv(&patch_leaf),
            nps: losses::loss_nps(&patch_leaf, palette),
            area,
        };
        let total = losses::loss_total(&comps, &cfg.weights);
        if !total.item().is_finite() {
            return Err(AttackError::NonFiniteLoss { step });
        }
        total.backward().expect("fresh tape per step");

        let lr_patch = attack::lr_schedule(step, cfg.lr_patch, cfg.decay_factor, period);
        let mut pdata = patch.data().to_vec();
        attack::adam_step(
            &mut pdata,
            patch_leaf.grad().unwrap().data(),
            &mut adam_patch,
            lr_patch,
        )
        .map_err(|_| AttackError::NonFiniteGrad {
            step,
            group: "patch".into(),
        })?;
        for v in pdata.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        patch = Tensor::from_vec(&[h_o, w_o, 3], pdata);

        let mut tdata = theta.data().to_vec();
        attack::adam_step(
            &mut tdata,
            theta_leaf.grad().unwrap().data(),
            &mut adam_theta,
            cfg.lr_shape,
        )
        .map_err(|_| AttackError::NonFiniteGrad {
            step,
            group: "mask_grid".into(),
        })?;
        for v in tdata.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        theta = Tensor::from_vec(&[h_o, w_o], tdata);
    }

    Ok((aggregate_mask(&theta), patch))
}

/// True if the binary mask has an 8-connected singleton: a 1-pixel whose
/// eight neighbors (missing neighbors count as 0) are all 0.
pub fn has_isolated_singleton(mask: &Tensor) -> bool {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            mask.at(&[i as usize, j as usize])
        }
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            if at(i, j) != 1.0 {
                continue;
            }
            let mut isolated = true;
            for di in -1..=1 {
                for dj in -1..=1 {
                    if (di != 0 || dj != 0) && at(i + di, j + dj) == 1.0 {
                        isolated = false;
                    }
                }
            }
            if isolated {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthmodel::Surrogate;
    use crate::maskgen::ShapeFamily;
    use crate::synth;

    fn square_shape(center: [f64; 2], side: f64) -> SplineShape {
        let h = side / 2.0;
        SplineShape::new(vec![
            [center[0] - h, center[1] - h],
            [center[0] - h, center[1] + h],
            [center[0] + h, center[1] + h],
            [center[0] + h, center[1] - h],
        ])
    }

    #[test]
    fn square_spline_area_matches_analytic_bulge() {
        // A periodic C2 cubic through the 4 corners of a side-d square bows
        // each side outward by (3d/2) u(1-u) / 2, adding d^2/8 of area per
        // side: expected area = d^2 + 4 d^2/8 = 1.5 d^2 = 600 for d = 20.
        let shape = square_shape([32.0, 32.0], 20.0);
        let mask = rasterize_spline(&shape, 64, 64);
        let area: f64 = mask.data().iter().sum();
        assert!(
            (area - 600.0).abs() / 600.0 < 0.05,
            "area {} not within 5% of the analytic 600",
            area
        );
    }

    #[test]
    fn rasterization_matches_pointwise_oracle() {
        let shapes = [
            square_shape([30.0, 28.0], 22.0),
            SplineShape::new(vec![
                [10.0, 10.0],
                [12.0, 40.0],
                [30.0, 55.0],
                [50.0, 44.0],
                [55.0, 20.0],
                [33.0, 5.0],
            ]),
        ];
        for shape in &shapes {
            let mask = rasterize_spline(shape, 64, 64);
            let polyline = sample_spline(shape);
            let n = polyline.len();
            for i in 0..64 {
                for j in 0..64 {
                    // independent even-odd ray cast to +col
                    let (fi, fj) = (i as f64, j as f64);
                    let mut count = 0;
                    for s in 0..n {
                        let [r1, c1] = polyline[s];
                        let [r2, c2] = polyline[(s + 1) % n];
                        if (r1 > fi) != (r2 > fi) {
                            let cx = c1 + (fi - r1) * (c2 - c1) / (r2 - r1);
                            if cx > fj {
                                count += 1;
                            }
                        }
                    }
                    let want = if count % 2 == 1 { 1.0 } else { 0.0 };
                    assert_eq!(mask.at(&[i, j]), want, "pixel ({}, {})", i, j);
                }
            }
        }
    }

    #[test]
    fn degenerate_spline_is_empty_not_error() {
        let shape = SplineShape::new(vec![[20.0, 20.0]; 5]);
        let mask = rasterize_spline(&shape, 64, 64);
        assert_eq!(mask.data().iter().sum::<f64>(), 0.0);
    }

    fn de_setup() -> (AttackConfig, ObjectSample, Vec<Tensor>, Surrogate, Tensor) {
        let cfg = AttackConfig {
            steps: 2,
            batch: 1,
            seed: 3,
            family: ShapeFamily::Rect,
            ..AttackConfig::default()
        };
        let (object, _) = synth::make_object(16, 16, 5);
        let scenes = synth::make_scenes(2, 32, 32, 6);
        let model = Surrogate::seeded(4);
        let mut rng = Rng::new(8);
        let patch = Tensor::from_vec(
            &[16, 16, 3],
            (0..16 * 16 * 3).map(|_| rng.uniform(0.0, 1.0)).collect(),
        );
        (cfg, object, scenes, model, patch)
    }

    #[test]
    fn de_zero_generations_returns_initial_best() {
        let (cfg, object, scenes, model, patch) = de_setup();
        let de = DeConfig {
            generations: 0,
            population: 6,
            fitness_batch: 1,
            ..DeConfig::default()
        };
        let run = de_optimize(&object, &patch, &scenes, &model, &cfg, &de);
        assert_eq!(run.history.len(), 1);
        assert_eq!(run.evaluations, 6);
        assert!(run.best_fitness.is_finite());
    }

    #[test]
    fn de_fitness_monotone_and_deterministic() {
        let (cfg, object, scenes, model, patch) = de_setup();
        let de = DeConfig {
            generations: 3,
            population: 6,
            fitness_batch: 1,
            seed: 11,
            ..DeConfig::default()
        };
        let a = de_optimize(&object, &patch, &scenes, &model, &cfg, &de);
        for pair in a.history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "best fitness increased");
        }
        assert!(a.history.last().unwrap() <= a.history.first().unwrap());

        let b = de_optimize(&object, &patch, &scenes, &model, &cfg, &de);
        assert_eq!(a.best, b.best);
        assert_eq!(a.best_fitness, b.best_fitness);
    }

    #[test]
    fn de_respects_eval_budget() {
        let (cfg, object, scenes, model, patch) = de_setup();
        let de = DeConfig {
            generations: 50,
            population: 6,
            fitness_batch: 1,
            max_evals: Some(10),
            ..DeConfig::default()
        };
        let run = de_optimize(&object, &patch, &scenes, &model, &cfg, &de);
        assert!(run.evaluations <= 10);
    }

    #[test]
    fn aggregation_keeps_smooth_disk_and_deletes_singletons() {
        // smooth disk passes through nearly unchanged
        let mut disk = vec![0.0; 64 * 64];
        for i in 0..64 {
            for j in 0..64 {
                if ((i as f64 - 32.0).powi(2) + (j as f64 - 32.0).powi(2)).sqrt() <= 14.0 {
                    disk[i * 64 + j] = 1.0;
                }
            }
        }
        let input = Tensor::from_vec(&[64, 64], disk.clone());
        let out = aggregate_mask(&input);
        let mut boundary_mismatches = 0;
        for i in 0..64usize {
            for j in 0..64usize {
                if out.at(&[i, j]) != input.at(&[i, j]) {
                    boundary_mismatches += 1;
                    let d = ((i as f64 - 32.0).powi(2) + (j as f64 - 32.0).powi(2)).sqrt();
                    assert!(
                        (d - 14.0).abs() <= 1.5,
                        "mismatch away from boundary at ({}, {})",
                        i,
                        j
                    );
                }
            }
        }
        assert!(boundary_mismatches < 160, "disk substantially preserved");

        // isolated pixel removed: its blurred peak is ~1/(sum of kernel) << 0.5
        let mut field = vec![0.0; 64 * 64];
        field[32 * 64 + 32] = 1.0;
        let out = aggregate_mask(&Tensor::from_vec(&[64, 64], field));
        assert_eq!(out.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn gaussian_kernel_center_weight_below_half() {
        let k = gaussian_kernel(GAUSSIAN_KERNEL_SIZE, GAUSSIAN_KERNEL_SIGMA);
        let center = k.at(&[5, 5, 0, 0]);
        assert!(center < 0.5, "singleton deletion argument: center {}", center);
        let sum: f64 = k.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "kernel normalized");
    }

    #[test]
    fn gaussian_aggregate_binary_without_singletons() {
        let (mut cfg, object, scenes, model, _) = de_setup();
        cfg.steps = 4;
        let palette = crate::losses::Palette::default_printable();
        let (mask, patch) =
            gaussian_aggregate(&object, &scenes, &model, &palette, &cfg).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(!has_isolated_singleton(&mask));
        assert!(patch.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
