//! Analysis and reuse of latent deformation codes: PCA over encoded training
//! codes, inverse-projection sampling along principal axes, deformation
//! transport onto new images, and a linear separability probe.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffeo::ScalarImage;
use crate::error::{DregError, Result};
use crate::metrics::ejection_fraction;
use crate::model::{LatentCode, ModelParams, RegistrationResult};
use crate::phantom::LoadedCase;
use crate::seeding;

/// One encoded case.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeEntry {
    pub id: String,
    pub class: String,
    /// Auxiliary scalar (the ground-truth ejection-fraction surrogate).
    pub ef: f64,
    pub z: Vec<f64>,
}

/// A set of codes of equal dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentDataset {
    pub codes: Vec<CodeEntry>,
}

impl LatentDataset {
    pub fn dim(&self) -> usize {
        self.codes.first().map_or(0, |c| c.z.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.codes.iter().any(|c| c.z.len() != d) {
            return Err(DregError::Invalid(
                "latent dataset: codes differ in dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Encodes cases with the deterministic `z = mu` path.
pub fn encode_cases(model: &ModelParams, cases: &[&LoadedCase]) -> Result<LatentDataset> {
    let mut codes = Vec::with_capacity(cases.len());
    for case in cases {
        let q = model.encode(&case.es, &case.ed)?;
        codes.push(CodeEntry {
            id: case.id.clone(),
            class: case.class.as_str().to_string(),
            ef: ejection_fraction(&case.ed_bloodpool, &case.es_bloodpool)?,
            z: q.mu,
        });
    }
    Ok(LatentDataset { codes })
}

// ---------------------------------------------------------------------------
// PCA.
// ---------------------------------------------------------------------------

/// Orthonormal principal basis of a code population.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrincipalBasis {
    pub mean: Vec<f64>,
    /// Rows are principal directions, sorted by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Per-component standard deviations, non-increasing.
    pub stddevs: Vec<f64>,
}

impl PrincipalBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigendecomposition of the sample covariance (denominator `n - 1`).  Sign
/// convention: each component's largest-magnitude entry is positive.
pub fn fit_pca(codes: &LatentDataset) -> Result<PrincipalBasis> {
    codes.validate()?;
    let n = codes.codes.len();
    if n < 2 {
        return Err(DregError::Invalid(format!(
            "fit_pca: need at least 2 codes, got {n}"
        )));
    }
    let d = codes.dim();
    let mut mean = vec![0.0; d];
    for c in &codes.codes {
        for (m, z) in mean.iter_mut().zip(&c.z) {
            *m += z;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for c in &codes.codes {
        let centered = DVector::from_iterator(d, c.z.iter().zip(&mean).map(|(z, m)| z - m));
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite")
    });
    let mut components = Vec::with_capacity(d);
    let mut stddevs = Vec::with_capacity(d);
    for &idx in &order {
        let col = eig.eigenvectors.column(idx);
        let mut row: Vec<f64> = col.iter().copied().collect();
        let lead = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .expect("non-empty");
        if row[lead] < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        components.push(row);
        stddevs.push(eig.eigenvalues[idx].max(0.0).sqrt());
    }
    Ok(PrincipalBasis {
        mean,
        components,
        stddevs,
    })
}

/// Coordinates of `z` in the basis, in standard-deviation units (components
/// with zero variance report 0).
pub fn project(basis: &PrincipalBasis, z: &[f64]) -> Vec<f64> {
    basis
        .components
        .iter()
        .zip(&basis.stddevs)
        .map(|(comp, &sd)| {
            if sd <= 0.0 {
                return 0.0;
            }
            comp.iter()
                .zip(z.iter().zip(&basis.mean))
                .map(|(c, (zz, m))| c * (zz - m))
                .sum::<f64>()
                / sd
        })
        .collect()
}

/// Inverse projection: `z = mean + sum_j coords_j * sd_j * component_j`, with
/// `coords` a sparse map of component index to sd-units.
pub fn code_at(basis: &PrincipalBasis, coords: &[(usize, f64)]) -> Result<LatentCode> {
    let mut z = basis.mean.clone();
    for &(j, units) in coords {
        if j >= basis.dim() {
            return Err(DregError::Invalid(format!(
                "code_at: component {j} out of range (d = {})",
                basis.dim()
            )));
        }
        let scale = units * basis.stddevs[j];
        for (zz, c) in z.iter_mut().zip(&basis.components[j]) {
            *zz += scale * c;
        }
    }
    Ok(LatentCode(z))
}

// ---------------------------------------------------------------------------
// Deformation transport.
// ---------------------------------------------------------------------------

/// Transports the deformation of the donor pair `(F_A, M_A)` onto the
/// recipient image `M_B`: the donor pair is encoded to `z = mu`, then decoded
/// against `M_B`.  No inter-subject registration is involved.
pub fn transport(
    model: &ModelParams,
    f_a: &ScalarImage,
    m_a: &ScalarImage,
    m_b: &ScalarImage,
) -> Result<RegistrationResult> {
    let q = model.encode(f_a, m_a)?;
    model.sample_deformation(m_b, &LatentCode(q.mu))
}

// ---------------------------------------------------------------------------
// Linear probe (multinomial logistic regression on the codes).
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-3,
            seed: 0,
        }
    }
}

/// A trained softmax classifier over standardized codes.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    classes: Vec<String>,
    feature_mean: Vec<f64>,
    feature_sd: Vec<f64>,
    /// `[class][feature + bias]` weights.
    weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn scores(&self, z: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = z
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        self.weights
            .iter()
            .map(|w| {
                w[..x.len()]
                    .iter()
                    .zip(&x)
                    .map(|(wi, xi)| wi * xi)
                    .sum::<f64>()
                    + w[x.len()]
            })
            .collect()
    }

    /// Most probable class label.
    pub fn classify(&self, z: &[f64]) -> &str {
        let s = self.scores(z);
        let mut best = 0;
        for i in 1..s.len() {
            if s[i] > s[best] {
                best = i;
            }
        }
        &self.classes[best]
    }
}

fn class_labels(ds: &LatentDataset) -> Vec<String> {
    let mut classes: Vec<String> = Vec::new();
    for c in &ds.codes {
        if !classes.contains(&c.class) {
            classes.push(c.class.clone());
        }
    }
    classes.sort();
    classes
}

/// Deterministic full-batch gradient descent on the softmax cross-entropy.
pub fn fit_linear_probe(ds: &LatentDataset, cfg: &ProbeConfig) -> Result<LinearProbe> {
    ds.validate()?;
    let classes = class_labels(ds);
    if classes.len() < 2 {
        return Err(DregError::Invalid(
            "linear probe: need at least two classes".into(),
        ));
    }
    for cl in &classes {
        let n = ds.codes.iter().filter(|c| &c.class == cl).count();
        if n < 5 {
            return Err(DregError::Invalid(format!(
                "linear probe: class {cl} has only {n} codes (need 5)"
            )));
        }
    }
    let d = ds.dim();
    let n = ds.codes.len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for c in &ds.codes {
        for (m, z) in mean.iter_mut().zip(&c.z) {
            *m += z / n as f64;
        }
    }
    for c in &ds.codes {
        for ((s, z), m) in sd.iter_mut().zip(&c.z).zip(&mean) {
            *s += (z - m) * (z - m) / (n - 1).max(1) as f64;
        }
    }
    for s in &mut sd {
        *s = s.sqrt().max(1e-12);
    }
    let x: Vec<Vec<f64>> = ds
        .codes
        .iter()
        .map(|c| {
            c.z.iter()
                .zip(mean.iter().zip(&sd))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect();
    let y: Vec<usize> = ds
        .codes
        .iter()
        .map(|c| classes.iter().position(|cl| cl == &c.class).expect("known"))
        .collect();

    let k = classes.len();
    let mut w = vec![vec![0.0; d + 1]; k];
    for _ in 0..cfg.iterations {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (xi, &yi) in x.iter().zip(&y) {
            let mut logits: Vec<f64> = w
                .iter()
                .map(|wr| wr[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + wr[d])
                .collect();
            let maxl = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            for l in &mut logits {
                *l = (*l - maxl).exp();
            }
            let sum: f64 = logits.iter().sum();
            for (ci, g) in grad.iter_mut().enumerate() {
                let p = logits[ci] / sum - if ci == yi { 1.0 } else { 0.0 };
                for (gj, xj) in g[..d].iter_mut().zip(xi) {
                    *gj += p * xj;
                }
                g[d] += p;
            }
        }
        for (wr, gr) in w.iter_mut().zip(&grad) {
            for j in 0..=d {
                let reg = if j < d { cfg.l2 * wr[j] } else { 0.0 };
                wr[j] -= cfg.learning_rate * (gr[j] / n as f64 + reg);
            }
        }
    }
    Ok(LinearProbe {
        classes,
        feature_mean: mean,
        feature_sd: sd,
        weights: w,
    })
}

/// Stratified k-fold cross-validated accuracy of the probe.
pub fn cross_validated_accuracy(ds: &LatentDataset, folds: usize, cfg: &ProbeConfig) -> Result<f64> {
    ds.validate()?;
    if folds < 2 || ds.codes.len() < folds {
        return Err(DregError::Invalid(format!(
            "cross-validation: bad fold count {folds} for {} codes",
            ds.codes.len()
        )));
    }
    let classes = class_labels(ds);
    let mut fold_of = vec![0usize; ds.codes.len()];
    for (ci, cl) in classes.iter().enumerate() {
        let mut idx: Vec<usize> = ds
            .codes
            .iter()
            .enumerate()
            .filter(|(_, c)| &c.class == cl)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, 77, ci as u64));
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for fold in 0..folds {
        let train = LatentDataset {
            codes: ds
                .codes
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_of[*i] != fold)
                .map(|(_, c)| c.clone())
                .collect(),
        };
        let held: Vec<&CodeEntry> = ds
            .codes
            .iter()
            .enumerate()
            .filter(|(i, _)| fold_of[*i] == fold)
            .map(|(_, c)| c)
            .collect();
        if held.is_empty() {
            continue;
        }
        let probe = fit_linear_probe(&train, cfg)?;
        for c in held {
            total += 1;
            if probe.classify(&c.z) == c.class {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Codes CSV.
// ---------------------------------------------------------------------------

/// Writes `id,class,ef,z1..zd`.
pub fn export_codes(path: &Path, ds: &LatentDataset) -> Result<()> {
    ds.validate()?;
    let mut w = csv::Writer::from_path(path).map_err(DregError::Csv)?;
    let d = ds.dim();
    let mut header = vec!["id".to_string(), "class".to_string(), "ef".to_string()];
    header.extend((1..=d).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for c in &ds.codes {
        let mut rec = vec![c.id.clone(), c.class.clone(), format!("{}", c.ef)];
        rec.extend(c.z.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| DregError::io(path, e))?;
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<LatentDataset> {
    let mut r = csv::Reader::from_path(path).map_err(DregError::Csv)?;
    let d = r.headers()?.len().saturating_sub(3);
    let mut codes = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d + 3 {
            return Err(DregError::format(path, "ragged codes row"));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| DregError::format(path, format!("bad number {s:?}")))
        };
        codes.push(CodeEntry {
            id: rec[0].to_string(),
            class: rec[1].to_string(),
            ef: parse(&rec[2])?,
            z: rec.iter().skip(3).map(parse).collect::<Result<_>>()?,
        });
    }
    let ds = LatentDataset { codes };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_codes(n: usize, d: usize, seed: u64) -> LatentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentDataset {
            codes: (0..n)
                .map(|i| CodeEntry {
                    id: format!("c{i}"),
                    class: "A".into(),
                    ef: 0.0,
                    z: (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn pca_of_unit_gaussian_has_unit_spread() {
        let ds = gaussian_codes(10_000, 6, 3);
        let basis = fit_pca(&ds).unwrap();
        for sd in &basis.stddevs {
            assert!((0.9..1.1).contains(sd), "{sd}");
        }
        for i in 1..basis.stddevs.len() {
            assert!(basis.stddevs[i] <= basis.stddevs[i - 1]);
        }
    }

    #[test]
    fn pca_components_are_orthonormal() {
        let ds = gaussian_codes(200, 5, 9);
        let basis = fit_pca(&ds).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = basis.components[i]
                    .iter()
                    .zip(&basis.components[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8, "({i},{j}): {dot}");
            }
        }
    }

    #[test]
    fn pca_of_identical_codes_is_degenerate() {
        let code = vec![0.4, -1.0, 2.0];
        let ds = LatentDataset {
            codes: (0..5)
                .map(|i| CodeEntry {
                    id: format!("{i}"),
                    class: "A".into(),
                    ef: 0.0,
                    z: code.clone(),
                })
                .collect(),
        };
        let basis = fit_pca(&ds).unwrap();
        assert!(basis.stddevs.iter().all(|&s| s == 0.0));
        assert_eq!(basis.mean, code);
    }

    #[test]
    fn pca_recovers_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = LatentDataset {
            codes: (0..100)
                .map(|i| {
                    let t: f64 = rng.random_range(-2.0..2.0);
                    CodeEntry {
                        id: format!("{i}"),
                        class: "A".into(),
                        ef: 0.0,
                        z: vec![t, 2.0 * t],
                    }
                })
                .collect(),
        };
        let basis = fit_pca(&ds).unwrap();
        let want = [1.0 / 5.0f64.sqrt(), 2.0 / 5.0f64.sqrt()];
        for (a, b) in basis.components[0].iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{:?}", basis.components[0]);
        }
        assert!(basis.stddevs[1].abs() < 1e-10);
    }

    #[test]
    fn pca_requires_two_codes() {
        let ds = gaussian_codes(1, 3, 0);
        assert!(fit_pca(&ds).is_err());
    }

    #[test]
    fn inverse_projection_roundtrip() {
        let ds = gaussian_codes(300, 4, 11);
        let basis = fit_pca(&ds).unwrap();
        assert_eq!(code_at(&basis, &[]).unwrap().0, basis.mean);

        let z = code_at(&basis, &[(0, 1.0)]).unwrap();
        let coords = project(&basis, &z.0);
        assert!((coords[0] - 1.0).abs() < 1e-10, "{coords:?}");
        for c in &coords[1..] {
            assert!(c.abs() < 1e-10);
        }

        let z2 = code_at(&basis, &[(1, -2.5), (3, 0.7)]).unwrap();
        let coords2 = project(&basis, &z2.0);
        assert!((coords2[1] + 2.5).abs() < 1e-10);
        assert!((coords2[3] - 0.7).abs() < 1e-10);

        assert!(code_at(&basis, &[(4, 1.0)]).is_err());
    }

    #[test]
    fn transport_with_same_moving_image_equals_registration() {
        use crate::model::{ModelParams, NetworkConfig};
        let model = ModelParams::init(NetworkConfig::reduced_for_tests(), 16, 16, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = |rng: &mut ChaCha8Rng| {
            ScalarImage::from_grid(16, 16, (0..256).map(|_| rng.random()).collect(), 1.0).unwrap()
        };
        let f = img(&mut rng);
        let m = img(&mut rng);
        let reg = model.register(&f, &m).unwrap();
        let tr = transport(&model, &f, &m, &m).unwrap();
        assert_eq!(reg.z.0, tr.z.0);
        for (a, b) in reg.scales.iter().zip(&tr.scales) {
            assert_eq!(a.warped.tensor(), b.warped.tensor());
            assert_eq!(
                a.deformation.displacement_tensor(),
                b.deformation.displacement_tensor()
            );
        }
    }

    fn blobs(n_per: usize, sep: f64, seed: u64) -> LatentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = Vec::new();
        for (ci, class) in ["A", "B"].iter().enumerate() {
            for i in 0..n_per {
                // centers sit `sep` sds apart along the first two axes
                let z: Vec<f64> = (0..4)
                    .map(|j| {
                        let center = if j < 2 { ci as f64 * sep } else { 0.0 };
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        center + noise
                    })
                    .collect();
                codes.push(CodeEntry {
                    id: format!("{class}{i}"),
                    class: class.to_string(),
                    ef: 0.0,
                    z,
                });
            }
        }
        LatentDataset { codes }
    }

    #[test]
    fn probe_separates_distant_blobs() {
        let ds = blobs(60, 3.0, 17);
        let acc = cross_validated_accuracy(&ds, 10, &ProbeConfig::default()).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn probe_on_shuffled_labels_is_at_chance() {
        let mut ds = blobs(60, 3.0, 19);
        // destroy the association with a label shuffle
        let mut labels: Vec<String> = ds.codes.iter().map(|c| c.class.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        rand::seq::SliceRandom::shuffle(&mut labels[..], &mut rng);
        for (c, l) in ds.codes.iter_mut().zip(labels) {
            c.class = l;
        }
        let acc = cross_validated_accuracy(&ds, 10, &ProbeConfig::default()).unwrap();
        let n = ds.codes.len() as f64;
        let chance = 0.5;
        let sd = (chance * (1.0 - chance) / n).sqrt();
        assert!(
            (acc - chance).abs() <= 3.0 * sd,
            "acc {acc} vs chance {chance} (3 sd = {})",
            3.0 * sd
        );
    }

    #[test]
    fn probe_rejects_single_class() {
        let ds = gaussian_codes(20, 3, 31);
        assert!(fit_linear_probe(&ds, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn codes_csv_roundtrip_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.csv");
        let empty = LatentDataset::default();
        export_codes(&path, &empty).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);

        let ds = blobs(5, 2.0, 41);
        export_codes(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), ds.codes.len() + 1);
        assert!(text.starts_with("id,class,ef,z1,z2,z3,z4"));
        let back = read_codes(&path).unwrap();
        assert_eq!(back.codes.len(), ds.codes.len());
        for (a, b) in back.codes.iter().zip(&ds.codes) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.class, b.class);
            assert_eq!(a.z, b.z);
        }

        // deterministic re-export is byte-identical
        let path2 = dir.path().join("codes2.csv");
        export_codes(&path2, &ds).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
