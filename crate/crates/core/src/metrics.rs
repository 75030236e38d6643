//! Registration quality metrics: intensity RMSE, Dice overlap, 95th-percentile
//! Hausdorff distance, Jacobian-determinant regularity, an area-based
//! ejection-fraction surrogate, and a paired Wilcoxon signed-rank utility.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffeo::{
    jacobian_determinant, warp_mask_nearest, BinaryMask, DeformationField, ScalarImage,
};
use crate::error::{DregError, Result};
use crate::model::RegistrationResult;

/// Dice overlap `2|A n B| / (|A| + |B|)`; two empty masks count as a perfect
/// match.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.h(), a.w()) != (b.h(), b.w()) {
        return Err(DregError::shape(
            "dice",
            format!("{}x{} vs {}x{}", a.h(), a.w(), b.h(), b.w()),
        ));
    }
    let inter = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| **x && **y)
        .count();
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mask pixels with a 4-neighbor outside the mask (image borders count as
/// outside).
fn boundary_pixels(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.h(), m.w());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.at(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !m.at(y - 1, x)
                || !m.at(y + 1, x)
                || !m.at(y, x - 1)
                || !m.at(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Linear-interpolation percentile of sorted values, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn directed_hd95(from: &[(usize, usize)], to: &[(usize, usize)], spacing: f64) -> f64 {
    let mut dists: Vec<f64> = from
        .iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    percentile(&dists, 0.95) * spacing
}

/// Symmetric 95th-percentile boundary Hausdorff distance in physical units.
pub fn hausdorff95(a: &BinaryMask, b: &BinaryMask, spacing: f64) -> Result<f64> {
    if (a.h(), a.w()) != (b.h(), b.w()) {
        return Err(DregError::shape(
            "hausdorff95",
            format!("{}x{} vs {}x{}", a.h(), a.w(), b.h(), b.w()),
        ));
    }
    if a.area() == 0 || b.area() == 0 {
        let side = if a.area() == 0 { "first" } else { "second" };
        return Err(DregError::Invalid(format!(
            "hausdorff95: {side} mask is empty"
        )));
    }
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);
    Ok(directed_hd95(&ba, &bb, spacing).max(directed_hd95(&bb, &ba, spacing)))
}

/// Intensity root-mean-square error.
pub fn rmse(f: &ScalarImage, g: &ScalarImage) -> Result<f64> {
    if (f.h(), f.w()) != (g.h(), g.w()) {
        return Err(DregError::shape(
            "rmse",
            format!("{}x{} vs {}x{}", f.h(), f.w(), g.h(), g.w()),
        ));
    }
    let n = f.tensor().numel() as f64;
    let s: f64 = f
        .tensor()
        .data()
        .iter()
        .zip(g.tensor().data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((s / n).sqrt())
}

/// Mean magnitude of the spatial gradient of the Jacobian determinant
/// (central differences, one-sided at borders; Euclidean norm per pixel).
pub fn grad_det_jac(phi: &DeformationField) -> Result<f64> {
    let j = jacobian_determinant(phi)?;
    let (h, w) = (j.h(), j.w());
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (x0, x1, ddx) = if x == 0 {
                (0, 1, 1.0)
            } else if x == w - 1 {
                (w - 2, w - 1, 1.0)
            } else {
                (x - 1, x + 1, 2.0)
            };
            let (y0, y1, ddy) = if y == 0 {
                (0, 1, 1.0)
            } else if y == h - 1 {
                (h - 2, h - 1, 1.0)
            } else {
                (y - 1, y + 1, 2.0)
            };
            let gx = (j.at(y, x1) - j.at(y, x0)) / ddx;
            let gy = (j.at(y1, x) - j.at(y0, x)) / ddy;
            acc += (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(acc / (h * w) as f64)
}

/// Area-based ejection-fraction surrogate `(A_ED - A_ES) / A_ED`.
pub fn ejection_fraction(bp_ed: &BinaryMask, bp_es: &BinaryMask) -> Result<f64> {
    let a_ed = bp_ed.area() as f64;
    if a_ed == 0.0 {
        return Err(DregError::Invalid(
            "ejection_fraction: empty ED bloodpool".into(),
        ));
    }
    Ok((a_ed - bp_es.area() as f64) / a_ed)
}

/// The anatomical masks of one case.
pub struct CaseMasks<'a> {
    pub ed_bloodpool: &'a BinaryMask,
    pub ed_wall: &'a BinaryMask,
    pub es_bloodpool: &'a BinaryMask,
    pub es_wall: &'a BinaryMask,
}

/// Per-structure overlap and boundary metrics, warped versus undeformed.
#[derive(Clone, Debug)]
pub struct StructureMetrics {
    pub name: &'static str,
    pub dice: f64,
    pub dice_baseline: f64,
    pub hd95: f64,
    pub hd95_baseline: f64,
}

/// All metrics of one registered case.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub id: String,
    pub rmse: f64,
    pub rmse_baseline: f64,
    pub structures: Vec<StructureMetrics>,
    pub dice_mean: f64,
    pub dice_mean_baseline: f64,
    pub hd95_mean: f64,
    pub hd95_mean_baseline: f64,
    pub grad_det_jac: f64,
    pub min_det_jac: f64,
    /// EF from the ED bloodpool warped by the predicted field.
    pub ef_predicted: f64,
    /// EF from the ground-truth masks.
    pub ef_true: f64,
}

impl CaseReport {
    pub fn all_finite(&self) -> bool {
        let vals = [
            self.rmse,
            self.rmse_baseline,
            self.dice_mean,
            self.dice_mean_baseline,
            self.hd95_mean,
            self.hd95_mean_baseline,
            self.grad_det_jac,
            self.min_det_jac,
            self.ef_predicted,
            self.ef_true,
        ];
        vals.iter().all(|v| v.is_finite())
            && self
                .structures
                .iter()
                .all(|s| [s.dice, s.dice_baseline, s.hd95, s.hd95_baseline].iter().all(|v| v.is_finite()))
    }
}

/// Evaluates a registration against the ES ground truth: ED masks are warped
/// by the full-scale deformation with nearest-neighbor sampling and compared
/// to the ES masks; the undeformed ED masks give the baseline columns.
pub fn evaluate_case(
    id: &str,
    f: &ScalarImage,
    m: &ScalarImage,
    masks: &CaseMasks,
    result: &RegistrationResult,
    spacing: f64,
) -> Result<CaseReport> {
    let full = result.full_scale();
    let phi = &full.deformation;
    let warped_bp = warp_mask_nearest(masks.ed_bloodpool, phi)?;
    let warped_wall = warp_mask_nearest(masks.ed_wall, phi)?;

    let mut structures = Vec::new();
    for (name, warped, ed, es) in [
        ("bloodpool", &warped_bp, masks.ed_bloodpool, masks.es_bloodpool),
        ("wall", &warped_wall, masks.ed_wall, masks.es_wall),
    ] {
        structures.push(StructureMetrics {
            name,
            dice: dice(warped, es)?,
            dice_baseline: dice(ed, es)?,
            hd95: hausdorff95(warped, es, spacing)?,
            hd95_baseline: hausdorff95(ed, es, spacing)?,
        });
    }
    let n = structures.len() as f64;
    let dice_mean = structures.iter().map(|s| s.dice).sum::<f64>() / n;
    let dice_mean_baseline = structures.iter().map(|s| s.dice_baseline).sum::<f64>() / n;
    let hd95_mean = structures.iter().map(|s| s.hd95).sum::<f64>() / n;
    let hd95_mean_baseline = structures.iter().map(|s| s.hd95_baseline).sum::<f64>() / n;

    let det = jacobian_determinant(phi)?;
    let min_det_jac = det.tensor().data().iter().fold(f64::INFINITY, |a, &b| a.min(b));

    Ok(CaseReport {
        id: id.to_string(),
        rmse: rmse(&full.warped, f)?,
        rmse_baseline: rmse(m, f)?,
        structures,
        dice_mean,
        dice_mean_baseline,
        hd95_mean,
        hd95_mean_baseline,
        grad_det_jac: grad_det_jac(phi)?,
        min_det_jac,
        ef_predicted: ejection_fraction(masks.ed_bloodpool, &warped_bp)?,
        ef_true: ejection_fraction(masks.ed_bloodpool, masks.es_bloodpool)?,
    })
}

/// Result of a paired two-sided Wilcoxon signed-rank test (normal
/// approximation with tie correction; zero differences are dropped).
#[derive(Clone, Debug)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    pub w_plus: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

pub fn wilcoxon_signed_rank(diffs: &[f64]) -> WilcoxonResult {
    let mut entries: Vec<(f64, bool)> = diffs
        .iter()
        .filter(|d| **d != 0.0)
        .map(|&d| (d.abs(), d > 0.0))
        .collect();
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let n = entries.len();
    if n == 0 {
        return WilcoxonResult {
            n_effective: 0,
            w_plus: 0.0,
            z: 0.0,
            p_two_sided: 1.0,
        };
    }
    // average ranks over ties
    let mut ranks = vec![0.0; n];
    let mut tie_correction = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && entries[j + 1].0 == entries[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        let t = (j - i + 1) as f64;
        tie_correction += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = entries
        .iter()
        .zip(&ranks)
        .filter(|((_, pos), _)| *pos)
        .map(|(_, r)| r)
        .sum();
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
    if var <= 0.0 {
        return WilcoxonResult {
            n_effective: n,
            w_plus,
            z: 0.0,
            p_two_sided: 1.0,
        };
    }
    let z = (w_plus - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = 2.0 * normal.cdf(-z.abs());
    WilcoxonResult {
        n_effective: n,
        w_plus,
        z,
        p_two_sided: p.min(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::{exponentiate, gaussian_smooth, random_smooth_field};
    use crate::tensor::Tensor;

    fn mask_from(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn dice_reference_values() {
        let a = mask_from(4, 4, |y, _| y < 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask_from(4, 4, |y, _| y >= 2);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let half = mask_from(4, 4, |_, x| x < 2);
        let full = mask_from(4, 4, |_, _| true);
        assert!((dice(&half, &full).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let empty = mask_from(4, 4, |_, _| false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let a = mask_from(8, 8, |y, x| (y + x) % 3 == 0);
        let b = mask_from(8, 8, |y, x| y * x % 5 < 2);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }

    #[test]
    fn hausdorff_reference_values() {
        let a = mask_from(12, 12, |y, x| (4..8).contains(&y) && (4..8).contains(&x));
        assert_eq!(hausdorff95(&a, &a, 1.0).unwrap(), 0.0);

        let p = mask_from(12, 12, |y, x| y == 2 && x == 2);
        let q = mask_from(12, 12, |y, x| y == 2 && x == 7);
        assert_eq!(hausdorff95(&p, &q, 1.0).unwrap(), 5.0);
        assert_eq!(hausdorff95(&p, &q, 2.0).unwrap(), 10.0);

        let empty = mask_from(12, 12, |_, _| false);
        assert!(hausdorff95(&a, &empty, 1.0).is_err());
    }

    #[test]
    fn hausdorff_square_vs_cross_dilation_is_one() {
        let (h, w) = (24, 24);
        let square = mask_from(h, w, |y, x| (8..16).contains(&y) && (8..16).contains(&x));
        // 4-neighbor dilation by one pixel
        let dilated = mask_from(h, w, |y, x| {
            let inside = |yy: isize, xx: isize| (8..16).contains(&yy) && (8..16).contains(&xx);
            let (yy, xx) = (y as isize, x as isize);
            inside(yy, xx)
                || inside(yy - 1, xx)
                || inside(yy + 1, xx)
                || inside(yy, xx - 1)
                || inside(yy, xx + 1)
        });
        let got = hausdorff95(&square, &dilated, 1.0).unwrap();

        // brute-force oracle over boundary pixels
        let oracle = {
            let ba = boundary_pixels(&square);
            let bb = boundary_pixels(&dilated);
            directed_hd95(&ba, &bb, 1.0).max(directed_hd95(&bb, &ba, 1.0))
        };
        assert_eq!(got, oracle);
        assert!((got - 1.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn rmse_reference_values() {
        let f = ScalarImage::from_grid(4, 4, vec![0.5; 16], 1.0).unwrap();
        assert_eq!(rmse(&f, &f).unwrap(), 0.0);
        let g = ScalarImage::from_grid(4, 4, vec![0.6; 16], 1.0).unwrap();
        assert!((rmse(&f, &g).unwrap() - 0.1).abs() < 1e-12);
        let cb = ScalarImage::from_grid(4, 4, (0..16).map(|i| (i % 2) as f64).collect(), 1.0).unwrap();
        let inv = ScalarImage::from_grid(4, 4, (0..16).map(|i| ((i + 1) % 2) as f64).collect(), 1.0)
            .unwrap();
        assert_eq!(rmse(&cb, &inv).unwrap(), 1.0);
    }

    #[test]
    fn grad_det_jac_vanishes_for_affine_maps() {
        let id = DeformationField::identity(16, 16);
        assert_eq!(grad_det_jac(&id).unwrap(), 0.0);

        let (h, w) = (16, 16);
        let mut g = Vec::new();
        for y in 0..h {
            for x in 0..w {
                g.push(1.07 * x as f64 + 0.3 * y as f64 + 2.0);
                g.push(-0.1 * x as f64 + 0.95 * y as f64 - 1.0);
            }
        }
        let phi = DeformationField::from_absolute(Tensor::new(vec![h, w, 2], g).unwrap()).unwrap();
        assert!(grad_det_jac(&phi).unwrap() < 1e-12);
    }

    #[test]
    fn grad_det_jac_decreases_with_smoothing() {
        let sigmas = [1.0, 2.0, 3.0, 4.0];
        let mut means = vec![0.0; sigmas.len()];
        for seed in 0..10 {
            let v = random_smooth_field(32, 32, 3.0, 900 + seed);
            for (i, &s) in sigmas.iter().enumerate() {
                let vs = gaussian_smooth(&v, s, 15).unwrap();
                let phi = exponentiate(&vs, 4);
                means[i] += grad_det_jac(&phi).unwrap() / 10.0;
            }
        }
        for i in 1..means.len() {
            assert!(
                means[i] < means[i - 1],
                "not monotone: {means:?}"
            );
        }
        assert!(means[0] > 0.0);
    }

    #[test]
    fn ejection_fraction_reference_values() {
        let bp = mask_from(16, 16, |y, x| {
            let dy = y as f64 - 8.0;
            let dx = x as f64 - 8.0;
            (dy * dy + dx * dx).sqrt() <= 5.0
        });
        assert_eq!(ejection_fraction(&bp, &bp).unwrap(), 0.0);
        let a = mask_from(4, 4, |y, _| y < 2);
        let b = mask_from(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(ejection_fraction(&a, &b).unwrap(), 0.5);
        let empty = mask_from(4, 4, |_, _| false);
        assert!(ejection_fraction(&empty, &a).is_err());
    }

    #[test]
    fn identity_registration_report_equals_baseline() {
        use crate::model::{LatentCode, RegistrationResult, ScaleResult};
        let spec = crate::phantom::PhantomSpec {
            class: crate::phantom::PhantomClass::Norm,
            extent: 64,
            center: (32.0, 32.0),
            outer_radius: 14.0,
            wall_thickness: 4.0,
            contraction: 0.5,
            background: 0.15,
            wall_intensity: 0.85,
            bloodpool_intensity: 0.45,
            noise_sd: 0.02,
            seed: 3,
        };
        let pair = crate::phantom::generate_pair(&spec).unwrap();
        let result = RegistrationResult {
            z: LatentCode(vec![0.0; 4]),
            scales: vec![ScaleResult {
                scale: 1,
                velocity: crate::diffeo::VectorField::zeros(64, 64),
                deformation: DeformationField::identity(64, 64),
                warped: pair.ed.clone(),
            }],
        };
        let masks = CaseMasks {
            ed_bloodpool: &pair.ed_bloodpool,
            ed_wall: &pair.ed_wall,
            es_bloodpool: &pair.es_bloodpool,
            es_wall: &pair.es_wall,
        };
        let report = evaluate_case("t", &pair.es, &pair.ed, &masks, &result, 1.0).unwrap();
        assert!(report.all_finite());
        assert_eq!(report.rmse, report.rmse_baseline);
        assert_eq!(report.dice_mean, report.dice_mean_baseline);
        assert_eq!(report.hd95_mean, report.hd95_mean_baseline);
        assert_eq!(report.grad_det_jac, 0.0);
        assert_eq!(report.min_det_jac, 1.0);
        assert_eq!(report.ef_predicted, 0.0);
        assert!(report.ef_true > 0.4);
    }

    #[test]
    fn wilcoxon_detects_a_consistent_shift() {
        let diffs: Vec<f64> = (0..36).map(|i| 0.05 + 0.001 * i as f64).collect();
        let r = wilcoxon_signed_rank(&diffs);
        assert_eq!(r.n_effective, 36);
        assert!(r.p_two_sided < 1e-6, "{r:?}");

        let balanced: Vec<f64> = (0..20)
            .map(|i| if i % 2 == 0 { 0.1 + i as f64 * 1e-3 } else { -0.1 - i as f64 * 1e-3 })
            .collect();
        let r2 = wilcoxon_signed_rank(&balanced);
        assert!(r2.p_two_sided > 0.5, "{r2:?}");

        let r3 = wilcoxon_signed_rank(&[0.0, 0.0]);
        assert_eq!(r3.n_effective, 0);
        assert_eq!(r3.p_two_sided, 1.0);
    }
}
