//! The five evaluation metrics, input-defense transforms, and the
//! patch-size sweep harness.
//!
//! The affected-pixel ratio `alpha` defaults to the benign reference: with
//! the target reference a perfect attack would drive alpha to zero, which
//! contradicts treating larger alpha as better. Both references are
//! selectable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{self, AttackConfig, AttackError};
use crate::compositor::ObjectSample;
use crate::depthmodel::{DepthConversion, DisparityModel};
use crate::imaging::Rng;
use crate::losses::Palette;
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaReference {
    Benign,
    Target,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("object mask is empty")]
    EmptyMask,
    #[error("benign disparity is zero under the object mask at pixel {index}")]
    ZeroBenign { index: usize },
    #[error("metric input shapes differ")]
    ShapeMismatch,
}

/// Threshold on |D_adv - D_ref| above which a pixel counts as affected.
pub const ALPHA_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub mse_t: f64,
    pub mse_b: f64,
    pub alpha: f64,
    pub eps_disp: f64,
    pub eps_depth: f64,
}

impl MetricsRecord {
    pub fn zero() -> Self {
        MetricsRecord {
            mse_t: 0.0,
            mse_b: 0.0,
            alpha: 0.0,
            eps_disp: 0.0,
            eps_depth: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &MetricsRecord) {
        self.mse_t += other.mse_t;
        self.mse_b += other.mse_b;
        self.alpha += other.alpha;
        self.eps_disp += other.eps_disp;
        self.eps_depth += other.eps_depth;
    }

    pub fn scaled(&self, k: f64) -> MetricsRecord {
        MetricsRecord {
            mse_t: self.mse_t * k,
            mse_b: self.mse_b * k,
            alpha: self.alpha * k,
            eps_disp: self.eps_disp * k,
            eps_depth: self.eps_depth * k,
        }
    }
}

/// Computes all five metrics over the object-mask support.
pub fn metrics(
    d_adv: &Tensor,
    d_b: &Tensor,
    d_t: &Tensor,
    m_o: &Tensor,
    conversion: &DepthConversion,
    alpha_reference: AlphaReference,
) -> Result<MetricsRecord, MetricsError> {
    if d_adv.shape() != d_b.shape() || d_adv.shape() != d_t.shape() || d_adv.shape() != m_o.shape()
    {
        return Err(MetricsError::ShapeMismatch);
    }
    let mask_sum: f64 = m_o.data().iter().sum();
    if mask_sum <= 0.0 {
        return Err(MetricsError::EmptyMask);
    }
    let n = d_adv.numel();
    let (adv, ben, tgt, mask) = (d_adv.data(), d_b.data(), d_t.data(), m_o.data());

    let mut mse_t = 0.0;
    let mut mse_b = 0.0;
    let mut affected = 0.0;
    let mut eps_disp = 0.0;
    let mut eps_depth = 0.0;
    for i in 0..n {
        if mask[i] == 0.0 {
            continue;
        }
        if ben[i] == 0.0 {
            return Err(MetricsError::ZeroBenign { index: i });
        }
        let m = mask[i];
        mse_t += (tgt[i] - adv[i]).powi(2) * m;
        mse_b += (ben[i] - adv[i]).powi(2) * m;
        let reference = match alpha_reference {
            AlphaReference::Benign => ben[i],
            AlphaReference::Target => tgt[i],
        };
        if (adv[i] - reference).abs() * m >= ALPHA_THRESHOLD {
            affected += 1.0;
        }
        eps_disp += ((adv[i] - ben[i]).abs() / ben[i]) * m;
        let za = conversion.depth_scalar(adv[i]);
        let zb = conversion.depth_scalar(ben[i]);
        eps_depth += ((za - zb).abs() / zb) * m;
    }
    Ok(MetricsRecord {
        mse_t: mse_t / mask_sum,
        mse_b: mse_b / mask_sum,
        alpha: affected / mask_sum,
        eps_disp: eps_disp / mask_sum,
        eps_depth: eps_depth / mask_sum,
    })
}

// ---- input-defense transforms ----------------------------------------------

/// Quantizes to `n` bits per channel: `round(v (2^n - 1)) / (2^n - 1)`.
pub fn bit_depth_reduce(image: &Tensor, n_bits: u32) -> Tensor {
    assert!((1..=8).contains(&n_bits), "bit depth must be in 1..=8");
    let levels = (2u32.pow(n_bits) - 1) as f64;
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| (v * levels + 0.5).floor() / levels)
        .collect();
    Tensor::from_vec(image.shape(), data)
}

/// Adds clamped Gaussian noise.
pub fn gaussian_noise(image: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| (v + rng.normal(0.0, sigma)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(image.shape(), data)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransformError {
    #[error("median kernel must be odd and >= 3, got {0}")]
    BadKernel(usize),
}

/// Per-channel k x k median with edge replication.
pub fn median_blur(image: &Tensor, k: usize) -> Result<Tensor, TransformError> {
    if k % 2 == 0 || k < 3 {
        return Err(TransformError::BadKernel(k));
    }
    let shape = image.shape().to_vec();
    let (h, w, c) = match shape.len() {
        2 => (shape[0], shape[1], 1),
        3 => (shape[0], shape[1], shape[2]),
        r => panic!("median_blur expects rank 2 or 3, got {}", r),
    };
    let half = (k / 2) as isize;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    let mut window = Vec::with_capacity(k * k);
    for ch in 0..c {
        for i in 0..h as isize {
            for j in 0..w as isize {
                window.clear();
                for di in -half..=half {
                    let si = (i + di).clamp(0, h as isize - 1) as usize;
                    for dj in -half..=half {
                        let sj = (j + dj).clamp(0, w as isize - 1) as usize;
                        window.push(src[(si * w + sj) * c + ch]);
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out[(i as usize * w + j as usize) * c + ch] = window[window.len() / 2];
            }
        }
    }
    Ok(Tensor::from_vec(&shape, out))
}

/// Standard JPEG luminance quantization table (Annex K).
const JPEG_LUMA_Q: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quantizer table for a libjpeg-law quality in [1, 100].
fn jpeg_quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (i, &base) in JPEG_LUMA_Q.iter().enumerate() {
        t[i] = (base * scale / 100.0 + 0.5).floor().max(1.0);
    }
    t
}

fn dct_cos_table() -> [[f64; 8]; 8] {
    let mut t = [[0.0; 8]; 8];
    for (x, row) in t.iter_mut().enumerate() {
        for (u, v) in row.iter_mut().enumerate() {
            *v = (((2 * x + 1) as f64) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    t
}

fn dct_c(u: usize) -> f64 {
    if u == 0 {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// In-memory JPEG approximation: per channel, 8 x 8 DCT-II on a
/// [-128, 127] scale, quantization with the quality-scaled luminance
/// table, dequantization, inverse DCT. No subsampling, no entropy coding.
/// Dimensions not divisible by 8 are reflect-padded and cropped back.
pub fn jpeg_approx(image: &Tensor, quality: u32) -> Tensor {
    assert!((1..=100).contains(&quality), "quality must be in 1..=100");
    let shape = image.shape().to_vec();
    let (h, w, c) = match shape.len() {
        2 => (shape[0], shape[1], 1),
        3 => (shape[0], shape[1], shape[2]),
        r => panic!("jpeg_approx expects rank 2 or 3, got {}", r),
    };
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let qt = jpeg_quant_table(quality);
    let cos = dct_cos_table();
    let src = image.data();
    let mut out = vec![0.0; src.len()];

    // reflect index into [0, n)
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            2 * n - 2 - i.min(2 * n - 2)
        }
    };

    let mut plane = vec![0.0; ph * pw];
    let mut coef = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for i in 0..ph {
            let si = reflect(i, h);
            for j in 0..pw {
                let sj = reflect(j, w);
                plane[i * pw + j] = src[(si * w + sj) * c + ch] * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                // forward DCT-II
                for (u, crow) in coef.iter_mut().enumerate() {
                    for (v, cval) in crow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for x in 0..8 {
                            for y in 0..8 {
                                acc += plane[(by + x) * pw + bx + y] * cos[x][u] * cos[y][v];
                            }
                        }
                        *cval = 0.25 * dct_c(u) * dct_c(v) * acc;
                    }
                }
                // quantize / dequantize (round-half-up)
                for u in 0..8 {
                    for v in 0..8 {
                        let q = qt[u * 8 + v];
                        coef[u][v] = (coef[u][v] / q + 0.5).floor() * q;
                    }
                }
                // inverse DCT
                for x in 0..8 {
                    for y in 0..8 {
                        let mut acc = 0.0;
                        for (u, crow) in coef.iter().enumerate() {
                            for (v, cval) in crow.iter().enumerate() {
                                acc += dct_c(u) * dct_c(v) * cval * cos[x][u] * cos[y][v];
                            }
                        }
                        plane[(by + x) * pw + bx + y] = 0.25 * acc;
                    }
                }
            }
        }
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j) * c + ch] = ((plane[i * pw + j] + 128.0) / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&shape, out)
}

// ---- robustness grid ---------------------------------------------------------

/// Strength grids for the four input defenses.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessParams {
    pub jpeg_qualities: Vec<u32>,
    pub bit_depths: Vec<u32>,
    pub noise_sigmas: Vec<f64>,
    pub median_kernels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RobustRow {
    pub transform: &'static str,
    pub strength: f64,
    /// Attack metrics of the defended adversarial input.
    pub metrics: MetricsRecord,
    /// Depth error the defense itself inflicts on benign inputs.
    pub benign_eps_depth: f64,
}

pub const ROBUST_CSV_HEADER: &str =
    "transform,strength,MSE_t,MSE_b,alpha,eps_disp,eps_depth,benign_eps_depth";

impl RobustRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.transform,
            self.strength,
            self.metrics.mse_t,
            self.metrics.mse_b,
            self.metrics.alpha,
            self.metrics.eps_disp,
            self.metrics.eps_depth,
            self.benign_eps_depth
        )
    }
}

/// Evaluates every transform at every strength on the held-out batch:
/// one row per (transform, strength), metrics averaged over scenarios.
pub fn robustness_grid(
    cfg: &AttackConfig,
    state: &attack::AttackState,
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    params: &RobustnessParams,
    eval_batch: usize,
) -> Result<Vec<RobustRow>, AttackError> {
    for &k in &params.median_kernels {
        if k % 2 == 0 || k < 3 {
            return Err(AttackError::InvalidParameter(format!(
                "median kernel must be odd and >= 3, got {}",
                k
            )));
        }
    }
    let (h_o, w_o) = object.dims();
    let mut rng = Rng::new(cfg.seed ^ 0x8CB9_2BA7_2F3D_8DD7);
    let m_p_obj = state.params.mask(h_o, w_o).grid;
    let m_p_eff = m_p_obj.mul(&object.mask);
    let o_adv = crate::compositor::apply_patch(&object.image, &m_p_eff, &state.patch);
    let rs_disp: std::collections::HashMap<usize, Tensor> =
        if matches!(cfg.mode, attack::AttackMode::Disappear) {
            scenes
                .iter()
                .enumerate()
                .map(|(i, s)| (i, model.forward(s)))
                .collect()
        } else {
            Default::default()
        };
    let batch =
        crate::compositor::build_batch(object, &o_adv, &m_p_eff, scenes, &mut rng, eval_batch);
    // benign maps and targets are shared across all transforms
    let mut context = Vec::with_capacity(batch.len());
    for sc in &batch {
        let d_b = model.forward(&sc.x_b);
        let d_t = attack::build_target(cfg.mode, &d_b, rs_disp.get(&sc.scene_index), &sc.m_o);
        context.push((d_b, d_t));
    }

    enum Kind {
        Jpeg(u32),
        BitDepth(u32),
        Noise(f64),
        Median(usize),
    }
    let mut grid: Vec<(&'static str, f64, Kind)> = Vec::new();
    for &q in &params.jpeg_qualities {
        grid.push(("jpeg", q as f64, Kind::Jpeg(q)));
    }
    for &n in &params.bit_depths {
        grid.push(("bit_depth", n as f64, Kind::BitDepth(n)));
    }
    for &s in &params.noise_sigmas {
        grid.push(("gaussian_noise", s, Kind::Noise(s)));
    }
    for &k in &params.median_kernels {
        grid.push(("median_blur", k as f64, Kind::Median(k)));
    }

    let mut rows = Vec::with_capacity(grid.len());
    for (gi, (name, strength, kind)) in grid.iter().enumerate() {
        let mut sum = MetricsRecord::zero();
        let mut benign_sum = 0.0;
        for (si, sc) in batch.iter().enumerate() {
            let noise_seed = cfg.seed ^ ((gi as u64) << 32) ^ (si as u64 + 1);
            let apply = |img: &Tensor, salt: u64| -> Tensor {
                match kind {
                    Kind::Jpeg(q) => jpeg_approx(img, *q),
                    Kind::BitDepth(n) => bit_depth_reduce(img, *n),
                    Kind::Noise(s) => {
                        let mut nrng = Rng::new(noise_seed ^ salt);
                        gaussian_noise(img, *s, &mut nrng)
                    }
                    Kind::Median(k) => median_blur(img, *k).expect("kernel validated above"),
                }
            };
            let (d_b, d_t) = &context[si];
            let d_adv_t = model.forward(&apply(&sc.x_adv, 0));
            sum.accumulate(&metrics(
                &d_adv_t,
                d_b,
                d_t,
                &sc.m_o,
                &cfg.conversion,
                cfg.alpha_reference,
            )?);
            let d_b_t = model.forward(&apply(&sc.x_b, 1));
            benign_sum += metrics(
                &d_b_t,
                d_b,
                d_b,
                &sc.m_o,
                &cfg.conversion,
                cfg.alpha_reference,
            )?
            .eps_depth;
        }
        let k = 1.0 / batch.len() as f64;
        rows.push(RobustRow {
            transform: name,
            strength: *strength,
            metrics: sum.scaled(k),
            benign_eps_depth: benign_sum * k,
        });
    }
    Ok(rows)
}

// ---- patch-size sweep --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub budget: f64,
    pub final_l_total: f64,
    pub metrics: MetricsRecord,
}

pub const SWEEP_CSV_HEADER: &str = "budget,L_total,MSE_t,MSE_b,alpha,eps_disp,eps_depth";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.budget,
            self.final_l_total,
            self.metrics.mse_t,
            self.metrics.mse_b,
            self.metrics.alpha,
            self.metrics.eps_disp,
            self.metrics.eps_depth
        )
    }
}

/// Runs one full attack per budget with shared seeds and evaluates each
/// final state on the held-out seeded batch.
#[allow(clippy::too_many_arguments)]
pub fn sweep_patch_size(
    budgets: &[f64],
    cfg: &AttackConfig,
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    palette: &Palette,
    eval_batch: usize,
) -> Result<Vec<SweepRow>, AttackError> {
    assert!(
        budgets.iter().all(|b| *b > 0.0 && *b <= 1.0),
        "budgets must lie in (0, 1]"
    );
    let mut rows = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let mut run_cfg = cfg.clone();
        run_cfg.budget = budget;
        let run = attack::run_attack(&run_cfg, object, scenes, model, palette, None)?;
        let rec = held_out_metrics(&run_cfg, &run.state, object, scenes, model, eval_batch)?;
        rows.push(SweepRow {
            budget,
            final_l_total: run.log.last().map(|r| r.l_total).unwrap_or(f64::NAN),
            metrics: rec,
        });
    }
    Ok(rows)
}

/// Evaluates a state's patch on a freshly seeded held-out batch and
/// returns the batch-mean metrics.
pub fn held_out_metrics(
    cfg: &AttackConfig,
    state: &attack::AttackState,
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    eval_batch: usize,
) -> Result<MetricsRecord, AttackError> {
    let records = held_out_records(cfg, state, object, scenes, model, eval_batch)?;
    let mut sum = MetricsRecord::zero();
    for r in &records {
        sum.accumulate(r);
    }
    Ok(sum.scaled(1.0 / records.len() as f64))
}

/// Per-scenario metric records on the held-out seeded batch.
pub fn held_out_records(
    cfg: &AttackConfig,
    state: &attack::AttackState,
    object: &ObjectSample,
    scenes: &[Tensor],
    model: &dyn DisparityModel,
    eval_batch: usize,
) -> Result<Vec<MetricsRecord>, AttackError> {
    let (h_o, w_o) = object.dims();
    let mut rng = Rng::new(cfg.seed ^ 0x8CB9_2BA7_2F3D_8DD7);
    let m_p_obj = state.params.mask(h_o, w_o).grid;
    let m_p_eff = m_p_obj.mul(&object.mask);
    let o_adv = crate::compositor::apply_patch(&object.image, &m_p_eff, &state.patch);
    let rs_disp: std::collections::HashMap<usize, Tensor> =
        if matches!(cfg.mode, attack::AttackMode::Disappear) {
            scenes
                .iter()
                .enumerate()
                .map(|(i, s)| (i, model.forward(s)))
                .collect()
        } else {
            Default::default()
        };
    let batch =
        crate::compositor::build_batch(object, &o_adv, &m_p_eff, scenes, &mut rng, eval_batch);
    let mut out = Vec::with_capacity(batch.len());
    for sc in &batch {
        let d_adv = model.forward(&sc.x_adv);
        let d_b = model.forward(&sc.x_b);
        let d_t = attack::build_target(cfg.mode, &d_b, rs_disp.get(&sc.scene_index), &sc.m_o);
        out.push(metrics(
            &d_adv,
            &d_b,
            &d_t,
            &sc.m_o,
            &cfg.conversion,
            cfg.alpha_reference,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Rng;

    fn uniform_mask(h: usize, w: usize) -> Tensor {
        Tensor::full(&[h, w], 1.0)
    }

    #[test]
    fn metrics_identity_case() {
        let d = Tensor::full(&[4, 4], 0.5);
        let rec = metrics(
            &d,
            &d,
            &d,
            &uniform_mask(4, 4),
            &DepthConversion::default(),
            AlphaReference::Benign,
        )
        .unwrap();
        assert_eq!(rec.mse_t, 0.0);
        assert_eq!(rec.mse_b, 0.0);
        assert_eq!(rec.alpha, 0.0);
        assert_eq!(rec.eps_disp, 0.0);
        assert_eq!(rec.eps_depth, 0.0);
    }

    #[test]
    fn metrics_doubling_and_threshold() {
        let d_b = Tensor::full(&[4, 4], 0.3);
        let d_adv = Tensor::full(&[4, 4], 0.6);
        let rec = metrics(
            &d_adv,
            &d_b,
            &d_b,
            &uniform_mask(4, 4),
            &DepthConversion::default(),
            AlphaReference::Benign,
        )
        .unwrap();
        assert!((rec.eps_disp - 1.0).abs() < 1e-12, "doubling gives 1.0");

        // sub-threshold shift leaves alpha at zero
        let d_adv = Tensor::full(&[4, 4], 0.305);
        let rec = metrics(
            &d_adv,
            &d_b,
            &d_b,
            &uniform_mask(4, 4),
            &DepthConversion::default(),
            AlphaReference::Benign,
        )
        .unwrap();
        assert_eq!(rec.alpha, 0.0);

        // exactly at threshold counts
        let d_adv = Tensor::full(&[4, 4], 0.31);
        let rec = metrics(
            &d_adv,
            &d_b,
            &d_b,
            &uniform_mask(4, 4),
            &DepthConversion::default(),
            AlphaReference::Benign,
        )
        .unwrap();
        assert_eq!(rec.alpha, 1.0);
    }

    #[test]
    fn metrics_mse_target_zero_when_on_target() {
        let d_t = Tensor::full(&[2, 2], 0.9);
        let d_b = Tensor::full(&[2, 2], 0.4);
        let rec = metrics(
            &d_t,
            &d_b,
            &d_t,
            &uniform_mask(2, 2),
            &DepthConversion::default(),
            AlphaReference::Benign,
        )
        .unwrap();
        assert_eq!(rec.mse_t, 0.0);
        assert!(rec.mse_b > 0.0);
    }

    #[test]
    fn alpha_ignores_pixels_outside_mask() {
        let mut mask = vec![0.0; 16];
        mask[5] = 1.0;
        let m_o = Tensor::from_vec(&[4, 4], mask);
        let d_b = Tensor::full(&[4, 4], 0.5);
        let mut adv = vec![0.9; 16]; // wildly different outside the mask
        adv[5] = 0.5; // identical on the single masked pixel
        let d_adv = Tensor::from_vec(&[4, 4], adv);
        let rec = metrics(
            &d_adv,
            &d_b,
            &d_b,
            &m_o,
            &DepthConversion::default(),
            AlphaReference::Benign,
        )
        .unwrap();
        assert_eq!(rec.alpha, 0.0);
    }

    #[test]
    fn metrics_errors() {
        let d = Tensor::full(&[2, 2], 0.5);
        assert_eq!(
            metrics(
                &d,
                &d,
                &d,
                &Tensor::zeros(&[2, 2]),
                &DepthConversion::default(),
                AlphaReference::Benign
            ),
            Err(MetricsError::EmptyMask)
        );
        let zero_b = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            metrics(
                &d,
                &zero_b,
                &d,
                &uniform_mask(2, 2),
                &DepthConversion::default(),
                AlphaReference::Benign
            ),
            Err(MetricsError::ZeroBenign { .. })
        ));
    }

    #[test]
    fn bit_depth_cases() {
        // n = 8 is identity on 8-bit-derived values
        let vals: Vec<f64> = (0..=255).map(|k| k as f64 / 255.0).collect();
        let t = Tensor::from_vec(&[256], vals.clone());
        assert_eq!(bit_depth_reduce(&t, 8).data(), t.data());

        let t = Tensor::from_vec(&[2], vec![0.4, 0.5]);
        let out = bit_depth_reduce(&t, 1);
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[1], 1.0);

        let t = Tensor::from_vec(&[1], vec![0.5]);
        let out = bit_depth_reduce(&t, 3);
        assert!((out.data()[0] - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_noise_cases() {
        let img = Tensor::full(&[10, 10], 0.5);
        let mut rng = Rng::new(4);
        let same = gaussian_noise(&img, 0.0, &mut rng);
        assert_eq!(same.data(), img.data());

        let mut rng = Rng::new(5);
        let big = Tensor::full(&[100, 100, 3], 0.5);
        let noisy = gaussian_noise(&big, 0.1, &mut rng);
        assert!(noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean_shift: f64 =
            noisy.data().iter().zip(big.data()).map(|(a, b)| a - b).sum::<f64>()
                / big.numel() as f64;
        assert!(mean_shift.abs() < 0.005, "mean shift {}", mean_shift);
    }

    #[test]
    fn median_blur_cases() {
        let img = Tensor::full(&[6, 6], 0.25);
        assert_eq!(median_blur(&img, 3).unwrap().data(), img.data());

        // single impulse removed
        let mut data = vec![0.0; 49];
        data[24] = 1.0;
        let img = Tensor::from_vec(&[7, 7], data);
        let out = median_blur(&img, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            median_blur(&img, 4),
            Err(TransformError::BadKernel(4))
        ));

        // agreement with a brute-force oracle on random images
        let mut rng = Rng::new(77);
        for _ in 0..3 {
            let data: Vec<f64> = (0..16 * 16).map(|_| rng.uniform(0.0, 1.0)).collect();
            let img = Tensor::from_vec(&[16, 16], data.clone());
            let out = median_blur(&img, 3).unwrap();
            for i in 0..16i64 {
                for j in 0..16i64 {
                    let mut window = Vec::new();
                    for di in -1..=1 {
                        for dj in -1..=1 {
                            let si = (i + di).clamp(0, 15) as usize;
                            let sj = (j + dj).clamp(0, 15) as usize;
                            window.push(data[si * 16 + sj]);
                        }
                    }
                    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert_eq!(out.at(&[i as usize, j as usize]), window[4]);
                }
            }
        }
    }

    #[test]
    fn jpeg_quality_100_nearly_lossless() {
        let mut rng = Rng::new(31);
        let data: Vec<f64> = (0..32 * 32 * 3)
            .map(|_| {
                // smooth-ish natural content: gradient plus mild noise
                rng.uniform(0.2, 0.8)
            })
            .collect();
        let img = Tensor::from_vec(&[32, 32, 3], data);
        let out = jpeg_approx(&img, 100);
        let max_err = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 2.0 / 255.0, "max err {} > 2/255", max_err);

        // idempotence within 1/255 at fixed quality
        let twice = jpeg_approx(&out, 100);
        let drift = out
            .data()
            .iter()
            .zip(twice.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1.0 / 255.0, "drift {}", drift);
    }

    #[test]
    fn jpeg_quality_1_flattens_checkerboard() {
        let mut data = vec![0.0; 32 * 32];
        for i in 0..32 {
            for j in 0..32 {
                data[i * 32 + j] = ((i + j) % 2) as f64;
            }
        }
        let img = Tensor::from_vec(&[32, 32], data);
        let out = jpeg_approx(&img, 1);
        for by in (0..32).step_by(8) {
            for bx in (0..32).step_by(8) {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for x in 0..8 {
                    for y in 0..8 {
                        let v = out.at(&[by + x, bx + y]);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                assert!(hi - lo < 1e-9, "block not constant: {} vs {}", lo, hi);
            }
        }
    }

    #[test]
    fn jpeg_pads_odd_dims_and_stays_in_range() {
        let mut rng = Rng::new(8);
        let data: Vec<f64> = (0..13 * 19 * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
        let img = Tensor::from_vec(&[13, 19, 3], data);
        for q in [1, 35, 80, 100] {
            let out = jpeg_approx(&img, q);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn transforms_preserve_unit_range() {
        let mut rng = Rng::new(41);
        let data: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
        let img = Tensor::from_vec(&[16, 16, 3], data);
        for n in [1, 3, 5, 8] {
            assert!(bit_depth_reduce(&img, n)
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
        let mut nrng = Rng::new(42);
        assert!(gaussian_noise(&img, 0.3, &mut nrng)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert!(median_blur(&img, 3)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert!(jpeg_approx(&img, 42)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}
