//! The training objective: symmetric normalized local cross-correlation,
//! closed-form KL to the unit Gaussian prior, and the multi-scale total loss.
//!
//! The similarity term warps both images toward each other by half the
//! velocity field, `M* = M o exp(v/2)` and `F* = F o exp(-v/2)`, and scores
//! local windows by the squared correlation ratio
//!
//! ```text
//! (sum_i (F*_i - mean_F)(M*_i - mean_M))^2
//! ----------------------------------------------------  in [0, 1],
//! (sum_i (F*_i - mean_F)^2)(sum_i (M*_i - mean_M)^2) + tau
//! ```
//!
//! averaged over all pixels and shifted by -1, so the result lives in
//! `[-1, 0]` and is invariant to affine intensity rescaling.  Window sums use
//! count-renormalized mean filters, so border pixels participate with their
//! in-bounds windows.  Swapping the images while negating the velocity swaps
//! the two warped images and the two variance terms, which leaves every
//! floating-point operation intact: the symmetry `D(F,M,v) = D(M,F,-v)` holds
//! bitwise.

use serde::{Deserialize, Serialize};

use crate::diffeo::{exponentiate_on, ScalarImage, VectorField};
use crate::error::{DregError, Result};
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Hyperparameters of the loss.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Similarity weight (the Boltzmann temperature of the likelihood).
    pub lambda: f64,
    /// LCC mean-filter window size, odd.
    pub lcc_window: usize,
    /// Numerical-stability constant added to the correlation denominator.
    pub tau: f64,
    /// Scale indices entering the loss; scale 1 is full resolution.
    pub scales: Vec<u32>,
    /// Per-scale weights, same length as `scales`.
    pub scale_weights: Vec<f64>,
    /// Squaring steps of the exponentiation layer used inside the loss.
    pub squaring_steps: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 5000.0,
            lcc_window: 9,
            tau: 1e-15,
            scales: vec![1, 2, 3],
            scale_weights: vec![1.0, 1.0, 1.0],
            squaring_steps: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 || self.tau <= 0.0 {
            return Err(DregError::Config(
                "loss: lambda and tau must be positive".into(),
            ));
        }
        if self.lcc_window.is_multiple_of(2) {
            return Err(DregError::Config(format!(
                "loss: lcc_window {} must be odd",
                self.lcc_window
            )));
        }
        if self.scales.is_empty()
            || self.scales.contains(&0)
            || self.scale_weights.len() != self.scales.len()
        {
            return Err(DregError::Config(
                "loss: scales must be non-empty, 1-based, and match scale_weights".into(),
            ));
        }
        Ok(())
    }
}

/// Diagonal Gaussian encoder output `q(z | F, M) = N(mu, diag(exp(logvar)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDistribution {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl EncoderDistribution {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Per-pixel product of in-bounds window extents of a k x k filter.
fn window_counts(h: usize, w: usize, k: usize) -> Tensor {
    let r = (k - 1) / 2;
    let count_1d = |i: usize, len: usize| -> f64 {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(len - 1);
        (hi - lo + 1) as f64
    };
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let cy = count_1d(y, h);
        for x in 0..w {
            data.push(cy * count_1d(x, w));
        }
    }
    Tensor::new(vec![h, w], data).expect("shape")
}

/// Symmetric LCC on the tape.  `f` and `m` are `[H, W]` images, `v` a
/// `[H, W, 2]` velocity; the result is a scalar in `[-1, 0]`.
pub fn lcc_symmetric_on(
    tape: &mut Tape,
    f: Value,
    m: Value,
    v: Value,
    cfg: &LossConfig,
) -> Result<Value> {
    cfg.validate()?;
    let fs = tape.value(f).shape().to_vec();
    let vs = tape.value(v).shape().to_vec();
    if fs.len() != 2 || tape.value(m).shape() != fs || vs != [fs[0], fs[1], 2] {
        return Err(DregError::shape(
            "lcc_symmetric",
            format!(
                "f {:?}, m {:?}, v {:?}",
                fs,
                tape.value(m).shape(),
                vs
            ),
        ));
    }
    let (h, w, k) = (fs[0], fs[1], cfg.lcc_window);

    let v_pos = tape.scale(v, 0.5)?;
    let v_neg = tape.scale(v, -0.5)?;
    let phi_pos = exponentiate_on(tape, v_pos, cfg.squaring_steps)?;
    let phi_neg = exponentiate_on(tape, v_neg, cfg.squaring_steps)?;
    let m_star = tape.warp(m, phi_pos.phi)?;
    let f_star = tape.warp(f, phi_neg.phi)?;

    let mean_f = tape.mean_filter(f_star, k)?;
    let mean_m = tape.mean_filter(m_star, k)?;
    let fm = tape.mul(f_star, m_star)?;
    let ff = tape.mul(f_star, f_star)?;
    let mm = tape.mul(m_star, m_star)?;
    let mean_fm = tape.mean_filter(fm, k)?;
    let mean_ff = tape.mean_filter(ff, k)?;
    let mean_mm = tape.mean_filter(mm, k)?;

    let prod_means = tape.mul(mean_f, mean_m)?;
    let cov = tape.sub(mean_fm, prod_means)?;
    let sq_f = tape.mul(mean_f, mean_f)?;
    let sq_m = tape.mul(mean_m, mean_m)?;
    let var_f_raw = tape.sub(mean_ff, sq_f)?;
    let var_m_raw = tape.sub(mean_mm, sq_m)?;
    // round-off can push the variance estimate a hair below zero
    let var_f = tape.relu(var_f_raw)?;
    let var_m = tape.relu(var_m_raw)?;

    // back to window sums (the mean filters divide by the counts)
    let counts = tape.constant(window_counts(h, w, k));
    let cov_sum = tape.mul(cov, counts)?;
    let var_f_sum = tape.mul(var_f, counts)?;
    let var_m_sum = tape.mul(var_m, counts)?;

    let num = tape.mul(cov_sum, cov_sum)?;
    let den_prod = tape.mul(var_f_sum, var_m_sum)?;
    let den = tape.add_scalar(den_prod, cfg.tau)?;
    let ratio = tape.div(num, den)?;
    // clamp the ratio at 1 (Cauchy-Schwarz holds exactly; round-off may not)
    let neg = tape.scale(ratio, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let deficit = tape.relu(one_minus)?;
    let neg_deficit = tape.scale(deficit, -1.0)?;
    let clamped = tape.add_scalar(neg_deficit, 1.0)?;

    let mean_ratio = tape.reduce_mean(clamped)?;
    tape.add_scalar(mean_ratio, -1.0)
}

/// Symmetric LCC of an image pair under a velocity field.
pub fn lcc_symmetric(
    f: &ScalarImage,
    m: &ScalarImage,
    v: &VectorField,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.tensor().clone());
    let mv = tape.constant(m.tensor().clone());
    let vv = tape.constant(v.tensor().clone());
    let d = lcc_symmetric_on(&mut tape, fv, mv, vv, cfg)?;
    Ok(tape.value(d).item())
}

/// KL divergence of a diagonal Gaussian from N(0, I) on the tape:
/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)`.
pub fn kl_standard_normal_on(tape: &mut Tape, mu: Value, logvar: Value) -> Result<Value> {
    if tape.value(mu).shape() != tape.value(logvar).shape() {
        return Err(DregError::shape(
            "kl_standard_normal",
            format!(
                "mu {:?} vs logvar {:?}",
                tape.value(mu).shape(),
                tape.value(logvar).shape()
            ),
        ));
    }
    let var = tape.exp(logvar)?;
    let musq = tape.mul(mu, mu)?;
    let s = tape.add(var, musq)?;
    let s1 = tape.add_scalar(s, -1.0)?;
    let s2 = tape.sub(s1, logvar)?;
    let total = tape.reduce_sum(s2)?;
    tape.scale(total, 0.5)
}

/// Closed-form KL divergence `KL(q || N(0, I))`; non-negative, zero only at
/// the prior itself.
pub fn kl_standard_normal(q: &EncoderDistribution) -> f64 {
    let s: f64 = q
        .mu
        .iter()
        .zip(&q.logvar)
        .map(|(&m, &lv)| ((lv.exp() + m * m) - 1.0) - lv)
        .sum();
    0.5 * s
}

/// Values of the assembled multi-scale loss.
pub struct LossTerms {
    pub total: Value,
    pub kl: Value,
    /// One LCC value per configured scale, in `cfg.scales` order.
    pub lcc: Vec<Value>,
}

/// Builds the loss `KL(q || N(0,I)) - lambda * sum_s w_s D_LCC(F^s, M^s, v^s)`
/// on the tape.  `f` and `m` are full-resolution `[H, W]` values; coarser
/// scales are factor-2 linear downsamples computed here.  `velocities[i]`
/// must already be smoothed and live on the grid of `cfg.scales[i]`.
pub fn total_loss_on(
    tape: &mut Tape,
    f: Value,
    m: Value,
    mu: Value,
    logvar: Value,
    velocities: &[Value],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if velocities.len() != cfg.scales.len() {
        return Err(DregError::shape(
            "total_loss",
            format!(
                "{} velocity fields for {} scales",
                velocities.len(),
                cfg.scales.len()
            ),
        ));
    }
    let (h, w) = (tape.value(f).shape()[0], tape.value(f).shape()[1]);
    let max_scale = *cfg.scales.iter().max().expect("non-empty");
    // pyramid[s-1] is the scale-s image
    let mut pyr_f = vec![f];
    let mut pyr_m = vec![m];
    for _ in 1..max_scale {
        let pf = *pyr_f.last().expect("non-empty");
        let pm = *pyr_m.last().expect("non-empty");
        pyr_f.push(tape.spatial_downsample(pf)?);
        pyr_m.push(tape.spatial_downsample(pm)?);
    }

    let kl = kl_standard_normal_on(tape, mu, logvar)?;
    let mut lcc = Vec::with_capacity(velocities.len());
    let mut total = kl;
    for (i, (&s, &v)) in cfg.scales.iter().zip(velocities).enumerate() {
        let div = 1usize << (s - 1);
        let expect = [h / div, w / div, 2];
        if tape.value(v).shape() != expect {
            return Err(DregError::shape(
                "total_loss",
                format!(
                    "scale {s} velocity has shape {:?}, expected {expect:?}",
                    tape.value(v).shape()
                ),
            ));
        }
        let d = lcc_symmetric_on(tape, pyr_f[s as usize - 1], pyr_m[s as usize - 1], v, cfg)?;
        let weighted = tape.scale(d, -cfg.lambda * cfg.scale_weights[i])?;
        total = tape.add(total, weighted)?;
        lcc.push(d);
    }
    Ok(LossTerms { total, kl, lcc })
}

/// Evaluates the multi-scale loss on domain types (no gradients).
pub fn total_loss(
    f: &ScalarImage,
    m: &ScalarImage,
    q: &EncoderDistribution,
    velocities: &[VectorField],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.tensor().clone());
    let mv = tape.constant(m.tensor().clone());
    let muv = tape.constant(Tensor::from_vec(q.mu.clone()));
    let lvv = tape.constant(Tensor::from_vec(q.logvar.clone()));
    let vels: Vec<Value> = velocities
        .iter()
        .map(|v| tape.constant(v.tensor().clone()))
        .collect();
    let terms = total_loss_on(&mut tape, fv, mv, muv, lvv, &vels, cfg)?;
    Ok(tape.value(terms.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(h: usize, w: usize) -> ScalarImage {
        let data: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (x as f64 + 0.5 * y as f64) / (w as f64 + 0.5 * h as f64)
            })
            .collect();
        ScalarImage::from_grid(h, w, data, 1.0).unwrap()
    }

    fn noise_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ScalarImage {
        let data: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        ScalarImage::from_grid(h, w, data, 1.0).unwrap()
    }

    #[test]
    fn identical_ramps_give_zero() {
        let img = ramp_image(16, 16);
        let v = VectorField::zeros(16, 16);
        let d = lcc_symmetric(&img, &img, &v, &LossConfig::default()).unwrap();
        assert!(d <= 0.0 && d > -1e-6, "{d}");
    }

    #[test]
    fn symmetry_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let f = noise_image(16, 16, &mut rng);
            let m = noise_image(16, 16, &mut rng);
            let v = crate::diffeo::random_smooth_field(16, 16, 1.5, rng.random());
            let neg =
                VectorField::new(Tensor::new(
                    vec![16, 16, 2],
                    v.tensor().data().iter().map(|x| -x).collect(),
                ).unwrap())
                .unwrap();
            let cfg = LossConfig::default();
            let a = lcc_symmetric(&f, &m, &v, &cfg).unwrap();
            let b = lcc_symmetric(&m, &f, &neg, &cfg).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn independent_noise_scores_near_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = noise_image(32, 32, &mut rng);
        let m = noise_image(32, 32, &mut rng);
        let v = VectorField::zeros(32, 32);
        let d = lcc_symmetric(&f, &m, &v, &LossConfig::default()).unwrap();
        assert!((-1.0..=-0.8).contains(&d), "{d}");
    }

    #[test]
    fn lcc_stays_in_range_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = LossConfig::default();
        for _ in 0..25 {
            let f = noise_image(16, 16, &mut rng);
            let m = noise_image(16, 16, &mut rng);
            let v = crate::diffeo::random_smooth_field(16, 16, 2.0, rng.random());
            let d = lcc_symmetric(&f, &m, &v, &cfg).unwrap();
            assert!((-1.0..=0.0).contains(&d), "{d}");
        }
    }

    #[test]
    fn lcc_invariant_to_joint_affine_intensity_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let f = noise_image(16, 16, &mut rng);
        let m = noise_image(16, 16, &mut rng);
        let v = crate::diffeo::random_smooth_field(16, 16, 1.0, 99);
        let cfg = LossConfig::default();
        let base = lcc_symmetric(&f, &m, &v, &cfg).unwrap();
        let rescale = |img: &ScalarImage| {
            ScalarImage::from_grid(
                16,
                16,
                img.tensor().data().iter().map(|p| 2.5 * p + 0.4).collect(),
                1.0,
            )
            .unwrap()
        };
        let scaled = lcc_symmetric(&rescale(&f), &rescale(&m), &v, &cfg).unwrap();
        assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
    }

    #[test]
    fn kl_closed_form_values() {
        let zero = EncoderDistribution {
            mu: vec![0.0; 4],
            logvar: vec![0.0; 4],
        };
        assert_eq!(kl_standard_normal(&zero), 0.0);

        let unit_mean = EncoderDistribution {
            mu: vec![1.0, 0.0, 0.0],
            logvar: vec![0.0; 3],
        };
        assert!((kl_standard_normal(&unit_mean) - 0.5).abs() < 1e-15);

        let wide = EncoderDistribution {
            mu: vec![0.0],
            logvar: vec![1.0],
        };
        let expect = (std::f64::consts::E - 2.0) / 2.0;
        assert!((kl_standard_normal(&wide) - expect).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.random_range(1..6);
            let q = EncoderDistribution {
                mu: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                logvar: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            };
            let kl = kl_standard_normal(&q);
            assert!(kl >= 0.0);
            let off_prior = q.mu.iter().any(|&m| m != 0.0) || q.logvar.iter().any(|&v| v != 0.0);
            if off_prior {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn taped_and_closed_form_kl_agree() {
        let q = EncoderDistribution {
            mu: vec![0.3, -1.1, 0.7],
            logvar: vec![0.2, -0.4, 1.3],
        };
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::from_vec(q.mu.clone()));
        let lv = tape.constant(Tensor::from_vec(q.logvar.clone()));
        let kl = kl_standard_normal_on(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.value(kl).item().to_bits(), kl_standard_normal(&q).to_bits());
    }

    #[test]
    fn total_loss_vanishes_at_prior_with_identical_images() {
        let img = ramp_image(16, 16);
        let q = EncoderDistribution {
            mu: vec![0.0; 8],
            logvar: vec![0.0; 8],
        };
        let cfg = LossConfig {
            scales: vec![1, 2],
            scale_weights: vec![1.0, 1.0],
            ..LossConfig::default()
        };
        let vels = vec![VectorField::zeros(16, 16), VectorField::zeros(8, 8)];
        let loss = total_loss(&img, &img, &q, &vels, &cfg).unwrap();
        assert!(loss.abs() < 1e-5, "{loss}");
    }

    #[test]
    fn total_loss_sign_structure_for_distinct_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = noise_image(16, 16, &mut rng);
        let m = noise_image(16, 16, &mut rng);
        let q = EncoderDistribution {
            mu: vec![0.0; 4],
            logvar: vec![0.0; 4],
        };
        let cfg = LossConfig {
            scales: vec![1],
            scale_weights: vec![1.0],
            ..LossConfig::default()
        };
        let vels = vec![VectorField::zeros(16, 16)];
        let loss = total_loss(&f, &m, &q, &vels, &cfg).unwrap();
        assert!(loss >= 0.0, "{loss}");
    }

    #[test]
    fn total_loss_rejects_scale_mismatch() {
        let img = ramp_image(16, 16);
        let q = EncoderDistribution {
            mu: vec![0.0; 2],
            logvar: vec![0.0; 2],
        };
        let cfg = LossConfig {
            scales: vec![1, 2],
            scale_weights: vec![1.0, 1.0],
            ..LossConfig::default()
        };
        let vels = vec![VectorField::zeros(16, 16), VectorField::zeros(16, 16)];
        assert!(total_loss(&img, &img, &q, &vels, &cfg).is_err());
    }

    #[test]
    fn one_gradient_step_reduces_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = LossConfig {
            scales: vec![1],
            scale_weights: vec![1.0],
            lcc_window: 5,
            ..LossConfig::default()
        };
        for rep in 0..10 {
            let f = noise_image(12, 12, &mut rng);
            let m = noise_image(12, 12, &mut rng);
            let mut params = vec![
                Parameter::new("mu", Tensor::from_vec(vec![0.2, -0.1])),
                Parameter::new("logvar", Tensor::from_vec(vec![0.1, 0.3])),
                Parameter::new(
                    "v",
                    crate::diffeo::random_smooth_field(12, 12, 0.5, 500 + rep)
                        .into_tensor(),
                ),
            ];
            let build = |tape: &mut Tape, vals: &[Value]| -> Result<Value> {
                let fv = tape.constant(f.tensor().clone());
                let mv = tape.constant(m.tensor().clone());
                let terms = total_loss_on(tape, fv, mv, vals[0], vals[1], &vals[2..], &cfg)?;
                Ok(terms.total)
            };
            let eval = |params: &[Parameter]| -> f64 {
                let mut tape = Tape::new();
                let vals: Vec<Value> = params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| tape.param(i, p))
                    .collect();
                let loss = build(&mut tape, &vals).unwrap();
                tape.value(loss).item()
            };
            let before = eval(&params);
            let mut tape = Tape::new();
            let vals: Vec<Value> = params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p))
                .collect();
            let loss = build(&mut tape, &vals).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut params);
            for p in &mut params {
                let g: Vec<f64> = p.grad().data().to_vec();
                for (v, gi) in p.value_mut().data_mut().iter_mut().zip(g) {
                    *v -= 1e-4 * gi;
                }
            }
            let after = eval(&params);
            assert!(after < before, "rep {rep}: {after} !< {before}");
        }
    }

    #[test]
    fn full_loss_gradient_check_on_small_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let f = noise_image(8, 8, &mut rng);
        let m = noise_image(8, 8, &mut rng);
        let cfg = LossConfig {
            scales: vec![1, 2],
            scale_weights: vec![1.0, 1.0],
            lcc_window: 5,
            ..LossConfig::default()
        };
        let mut params = vec![
            Parameter::new("mu", Tensor::from_vec(vec![0.4, -0.2])),
            Parameter::new("logvar", Tensor::from_vec(vec![-0.3, 0.2])),
            Parameter::new(
                "v1",
                crate::diffeo::random_smooth_field(8, 8, 1.0, 4).into_tensor(),
            ),
            Parameter::new(
                "v2",
                crate::diffeo::random_smooth_field(4, 4, 0.5, 5).into_tensor(),
            ),
        ];
        let check = crate::tape::GradCheck {
            tol: 1e-3,
            ..Default::default()
        };
        let report = crate::tape::gradient_check(&mut params, &check, |tape, vals| {
            let fv = tape.constant(f.tensor().clone());
            let mv = tape.constant(m.tensor().clone());
            let terms = total_loss_on(tape, fv, mv, vals[0], vals[1], &vals[2..], &cfg)?;
            Ok(terms.total)
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
