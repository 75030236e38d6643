//! Synthetic 2-D "cardiac" data: ED/ES pairs of contracting annuli.
//!
//! Each case is an annulus (bright wall around a mid-intensity bloodpool on a
//! dark background) whose inner area shrinks from ED to ES by a
//! class-dependent contraction fraction `c`, with the wall area preserved.
//! Three classes mimic normal, hypertrophic (thick wall, strong contraction)
//! and dilated (large cavity, weak contraction) morphology, so that the
//! contraction fraction nearly separates the classes.  The analytic ED->ES
//! radial map is exported per case as a ground-truth displacement field.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffeo::{BinaryMask, ScalarImage, VectorField};
use crate::error::{DregError, Result};
use crate::io;
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhantomClass {
    #[serde(rename = "NORM")]
    Norm,
    #[serde(rename = "HYP")]
    Hyp,
    #[serde(rename = "DIL")]
    Dil,
}

impl PhantomClass {
    pub const ALL: [PhantomClass; 3] = [PhantomClass::Norm, PhantomClass::Hyp, PhantomClass::Dil];

    pub fn as_str(&self) -> &'static str {
        match self {
            PhantomClass::Norm => "NORM",
            PhantomClass::Hyp => "HYP",
            PhantomClass::Dil => "DIL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "NORM" => Ok(PhantomClass::Norm),
            "HYP" => Ok(PhantomClass::Hyp),
            "DIL" => Ok(PhantomClass::Dil),
            other => Err(DregError::Invalid(format!("unknown class {other}"))),
        }
    }

    /// Per-class parameter ranges: outer radius (fraction of the extent),
    /// wall thickness (fraction of the outer radius), contraction fraction.
    fn ranges(&self) -> (std::ops::Range<f64>, std::ops::Range<f64>, std::ops::Range<f64>) {
        // NORM spans the geometry of both pathological classes, so the image
        // geometry alone cannot reveal the contraction; classes separate by
        // contraction fraction, which must travel through the latent code.
        match self {
            PhantomClass::Norm => (0.20..0.31, 0.18..0.42, 0.45..0.60),
            PhantomClass::Hyp => (0.19..0.26, 0.35..0.45, 0.60..0.75),
            PhantomClass::Dil => (0.27..0.33, 0.13..0.22, 0.10..0.25),
        }
    }
}

impl fmt::Display for PhantomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full description of one synthetic case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub class: PhantomClass,
    pub extent: usize,
    pub center: (f64, f64),
    pub outer_radius: f64,
    pub wall_thickness: f64,
    /// Fractional inner-area reduction ED -> ES, in (0, 1).
    pub contraction: f64,
    pub background: f64,
    pub wall_intensity: f64,
    pub bloodpool_intensity: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let e = self.extent as f64;
        if self.extent < 32 {
            return Err(DregError::Config(format!(
                "phantom: extent {} must be at least 32",
                self.extent
            )));
        }
        if self.outer_radius - self.wall_thickness <= 2.0 {
            return Err(DregError::Config(
                "phantom: inner radius must exceed 2 px".into(),
            ));
        }
        let margin_ok = |c: f64| c - self.outer_radius >= 4.0 && (e - c) - self.outer_radius >= 4.0;
        if !margin_ok(self.center.0) || !margin_ok(self.center.1) {
            return Err(DregError::Config(
                "phantom: annulus must keep a 4 px margin inside the image".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.contraction) || self.contraction == 0.0 {
            return Err(DregError::Config(
                "phantom: contraction must lie in (0, 1)".into(),
            ));
        }
        if self.noise_sd < 0.0 {
            return Err(DregError::Config("phantom: noise sd must be >= 0".into()));
        }
        Ok(())
    }

    pub fn inner_radius(&self) -> f64 {
        self.outer_radius - self.wall_thickness
    }

    /// ES radii: the inner area shrinks by `contraction`, wall area is kept.
    pub fn es_radii(&self) -> (f64, f64) {
        let ri = self.inner_radius();
        let ro = self.outer_radius;
        let ri_es = ri * (1.0 - self.contraction).sqrt();
        let ro_es = (ri_es * ri_es + ro * ro - ri * ri).sqrt();
        (ri_es, ro_es)
    }

    /// Draws one spec from the class ranges.
    pub fn sample(class: PhantomClass, extent: usize, rng: &mut ChaCha8Rng) -> Self {
        let e = extent as f64;
        let (ro_range, t_range, c_range) = class.ranges();
        let outer_radius = rng.random_range(ro_range) * e;
        let wall_thickness = rng.random_range(t_range) * outer_radius;
        let contraction = rng.random_range(c_range);
        let jitter = 0.03 * e;
        let center = (
            e / 2.0 + rng.random_range(-jitter..jitter),
            e / 2.0 + rng.random_range(-jitter..jitter),
        );
        PhantomSpec {
            class,
            extent,
            center,
            outer_radius,
            wall_thickness,
            contraction,
            background: 0.15 + rng.random_range(-0.05..0.05),
            wall_intensity: 0.85 + rng.random_range(-0.05..0.05),
            bloodpool_intensity: 0.45 + rng.random_range(-0.05..0.05),
            noise_sd: 0.02,
            seed: rng.random(),
        }
    }
}

/// One-pixel smoothstep edge coverage for signed distance `d` (inside > 0).
fn coverage(d: f64) -> f64 {
    let t = (d + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render(
    spec: &PhantomSpec,
    r_inner: f64,
    r_outer: f64,
    rng: &mut ChaCha8Rng,
) -> (ScalarImage, BinaryMask, BinaryMask) {
    let e = spec.extent;
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut img = Vec::with_capacity(e * e);
    let mut bp = Vec::with_capacity(e * e);
    let mut wall = Vec::with_capacity(e * e);
    for y in 0..e {
        for x in 0..e {
            let dx = x as f64 - spec.center.0;
            let dy = y as f64 - spec.center.1;
            let r = (dx * dx + dy * dy).sqrt();
            let cov_o = coverage(r_outer - r);
            let cov_i = coverage(r_inner - r);
            let mut v = spec.background
                + (spec.wall_intensity - spec.background) * cov_o
                + (spec.bloodpool_intensity - spec.wall_intensity) * cov_i;
            if spec.noise_sd > 0.0 {
                v += noise.sample(rng);
            }
            img.push(v.clamp(0.0, 1.0));
            bp.push(r <= r_inner);
            wall.push(r > r_inner && r <= r_outer);
        }
    }
    (
        ScalarImage::from_grid(e, e, img, 1.0).expect("shape"),
        BinaryMask::new(e, e, bp).expect("shape"),
        BinaryMask::new(e, e, wall).expect("shape"),
    )
}

/// The analytic radial ED->ES transport map `T` and the width of the blend
/// band that returns it to the identity outside the annulus.
struct RadialMap {
    ri_ed: f64,
    ro_ed: f64,
    ri_es: f64,
    ro_es: f64,
    band: f64,
}

impl RadialMap {
    fn new(spec: &PhantomSpec, ri_es: f64, ro_es: f64) -> Self {
        let delta = (ro_es - spec.outer_radius).abs();
        RadialMap {
            ri_ed: spec.inner_radius(),
            ro_ed: spec.outer_radius,
            ri_es,
            ro_es,
            band: (3.0 * delta).max(4.0),
        }
    }

    /// ED radius -> ES radius; linear in the cavity, area-preserving in the
    /// wall, smoothstep-blended to the identity outside.
    fn forward(&self, r: f64) -> f64 {
        if r <= self.ri_ed {
            r * self.ri_es / self.ri_ed
        } else if r <= self.ro_ed {
            (self.ri_es * self.ri_es + r * r - self.ri_ed * self.ri_ed).sqrt()
        } else if r < self.ro_ed + self.band {
            let t = (r - self.ro_ed) / self.band;
            let s = t * t * (3.0 - 2.0 * t);
            r + (self.ro_es - self.ro_ed) * (1.0 - s)
        } else {
            r
        }
    }

    /// ES radius -> ED radius (the sampling map of the ES grid), by closed
    /// forms where available and bisection in the blend band.
    fn inverse(&self, rho: f64) -> f64 {
        if rho <= self.ri_es {
            rho * self.ri_ed / self.ri_es
        } else if rho <= self.ro_es {
            (rho * rho - self.ri_es * self.ri_es + self.ri_ed * self.ri_ed).sqrt()
        } else if rho < self.ro_ed + self.band {
            let (mut lo, mut hi) = (self.ro_ed, self.ro_ed + self.band);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if self.forward(mid) < rho {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        } else {
            rho
        }
    }
}

/// One generated ED/ES pair with masks and the ground-truth sampling map.
pub struct PhantomPair {
    /// ED frame (the moving image M).
    pub ed: ScalarImage,
    /// ES frame (the fixed image F).
    pub es: ScalarImage,
    pub ed_bloodpool: BinaryMask,
    pub ed_wall: BinaryMask,
    pub es_bloodpool: BinaryMask,
    pub es_wall: BinaryMask,
    /// Ground-truth displacement on the ES grid: sampling ED at `x + u(x)`
    /// reconstructs the ES geometry.
    pub gt_displacement: VectorField,
}

/// Sorted distances of all pixel centers from `center`.
fn sorted_distances(center: (f64, f64), extent: usize) -> Vec<f64> {
    let mut d = Vec::with_capacity(extent * extent);
    for y in 0..extent {
        for x in 0..extent {
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            d.push((dx * dx + dy * dy).sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    d
}

fn disk_count(dists: &[f64], r: f64) -> usize {
    dists.partition_point(|&d| d <= r)
}

/// Picks a radius near `r0` whose discrete disk area (`dist <= r` pixel
/// count) matches `target`, so mask-based area ratios reproduce the requested
/// contraction despite pixelization.  Within the admissible distance gap the
/// analytic radius is kept, so a vanishing contraction keeps the geometry.
fn refine_radius(dists: &[f64], target: f64, r0: f64) -> f64 {
    let n = dists.len();
    let k0 = (target.round().max(1.0) as usize).clamp(1, n - 1);
    // distances repeat on symmetry rings; a count is realizable only at a
    // strict split, so take the split nearest the target
    let is_split = |k: usize| k == 0 || k == n || dists[k - 1] < dists[k];
    let mut down = k0;
    while down > 1 && !is_split(down) {
        down -= 1;
    }
    let mut up = k0;
    while up < n && !is_split(up) {
        up += 1;
    }
    let k = if (target - down as f64).abs() <= (up as f64 - target).abs() {
        down
    } else {
        up
    };
    let lower = dists[k - 1];
    let upper = if k < n { dists[k] } else { lower + 1.0 };
    r0.clamp(lower, upper - 1e-9 * upper.max(1.0))
}

/// Renders a pair from a spec; same seed, same bytes.
pub fn generate_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (ed, ed_bp, ed_wall) = render(spec, spec.inner_radius(), spec.outer_radius, &mut rng);

    // ES radii: analytic targets refined against discrete pixel areas.
    let (ri0, ro0) = spec.es_radii();
    let dists = sorted_distances(spec.center, spec.extent);
    let a_inner_ed = disk_count(&dists, spec.inner_radius()) as f64;
    let a_outer_ed = disk_count(&dists, spec.outer_radius) as f64;
    let ri_es = refine_radius(&dists, (1.0 - spec.contraction) * a_inner_ed, ri0);
    let a_inner_es = disk_count(&dists, ri_es) as f64;
    let ro_es = refine_radius(&dists, a_inner_es + (a_outer_ed - a_inner_ed), ro0);
    let (es, es_bp, es_wall) = render(spec, ri_es, ro_es, &mut rng);

    let map = RadialMap::new(spec, ri_es, ro_es);
    let e = spec.extent;
    let mut u = Vec::with_capacity(e * e * 2);
    for y in 0..e {
        for x in 0..e {
            let dx = x as f64 - spec.center.0;
            let dy = y as f64 - spec.center.1;
            let rho = (dx * dx + dy * dy).sqrt();
            if rho < 1e-9 {
                u.push(0.0);
                u.push(0.0);
                continue;
            }
            let r_src = map.inverse(rho);
            let scale = r_src / rho;
            u.push(dx * scale - dx);
            u.push(dy * scale - dy);
        }
    }
    let gt = VectorField::new(Tensor::new(vec![e, e, 2], u)?)?;
    Ok(PhantomPair {
        ed,
        es,
        ed_bloodpool: ed_bp,
        ed_wall,
        es_bloodpool: es_bp,
        es_wall,
        gt_displacement: gt,
    })
}

// ---------------------------------------------------------------------------
// Dataset generation and loading.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFiles {
    pub ed: PathBuf,
    pub es: PathBuf,
    pub ed_bloodpool: PathBuf,
    pub ed_wall: PathBuf,
    pub es_bloodpool: PathBuf,
    pub es_wall: PathBuf,
    pub gt_displacement: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub class: PhantomClass,
    pub split: Split,
    pub spec: PhantomSpec,
    pub files: CaseFiles,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub extent: usize,
    pub spacing: f64,
    pub seed: u64,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates `n_per_class` cases per class under `out_dir`, with a stratified
/// 70/30 train/test split, and writes `manifest.json` plus one DRT1 file per
/// image, mask and ground-truth field.
pub fn generate_dataset(
    n_per_class: usize,
    extent: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(DregError::Config("dataset: n_per_class must be >= 1".into()));
    }
    let case_dir = out_dir.join("cases");
    fs::create_dir_all(&case_dir).map_err(|e| DregError::io(&case_dir, e))?;

    let mut cases = Vec::new();
    for (ci, class) in PhantomClass::ALL.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, 10 + ci as u64, 0));
        let n_train = 7 * n_per_class / 10;
        let mut order: Vec<usize> = (0..n_per_class).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let mut splits = vec![Split::Test; n_per_class];
        for &i in order.iter().take(n_train) {
            splits[i] = Split::Train;
        }
        for i in 0..n_per_class {
            let spec = PhantomSpec::sample(*class, extent, &mut rng);
            let id = format!("{}-{i:03}", class.as_str().to_lowercase());
            let pair = generate_pair(&spec)?;
            let rel = |suffix: &str| PathBuf::from(format!("cases/{id}_{suffix}.drt"));
            let files = CaseFiles {
                ed: rel("ed"),
                es: rel("es"),
                ed_bloodpool: rel("ed_bp"),
                ed_wall: rel("ed_wall"),
                es_bloodpool: rel("es_bp"),
                es_wall: rel("es_wall"),
                gt_displacement: rel("gt_disp"),
            };
            io::write_tensor(out_dir.join(&files.ed), pair.ed.tensor())?;
            io::write_tensor(out_dir.join(&files.es), pair.es.tensor())?;
            io::write_tensor(out_dir.join(&files.ed_bloodpool), &pair.ed_bloodpool.to_tensor())?;
            io::write_tensor(out_dir.join(&files.ed_wall), &pair.ed_wall.to_tensor())?;
            io::write_tensor(out_dir.join(&files.es_bloodpool), &pair.es_bloodpool.to_tensor())?;
            io::write_tensor(out_dir.join(&files.es_wall), &pair.es_wall.to_tensor())?;
            io::write_tensor(
                out_dir.join(&files.gt_displacement),
                pair.gt_displacement.tensor(),
            )?;
            cases.push(CaseEntry {
                id,
                class: *class,
                split: splits[i],
                spec,
                files,
            });
        }
    }
    let manifest = DatasetManifest {
        extent,
        spacing: 1.0,
        seed,
        cases,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| DregError::io(&path, e))?;
    Ok(manifest)
}

/// A case loaded into memory.
pub struct LoadedCase {
    pub id: String,
    pub class: PhantomClass,
    pub split: Split,
    pub spec: PhantomSpec,
    /// Moving image (ED).
    pub ed: ScalarImage,
    /// Fixed image (ES).
    pub es: ScalarImage,
    pub ed_bloodpool: BinaryMask,
    pub ed_wall: BinaryMask,
    pub es_bloodpool: BinaryMask,
    pub es_wall: BinaryMask,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub cases: Vec<LoadedCase>,
}

impl Dataset {
    /// Reads a manifest (path to `manifest.json` or its directory) and every
    /// file it references.
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let text =
            fs::read_to_string(&manifest_path).map_err(|e| DregError::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut seen = std::collections::BTreeSet::new();
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for entry in &manifest.cases {
            if !seen.insert(entry.id.clone()) {
                return Err(DregError::format(
                    &manifest_path,
                    format!("duplicate case id {}", entry.id),
                ));
            }
            let img = |p: &PathBuf| -> Result<ScalarImage> {
                ScalarImage::new(io::read_tensor(root.join(p))?, manifest.spacing)
            };
            let mask = |p: &PathBuf| -> Result<BinaryMask> {
                BinaryMask::from_tensor(&io::read_tensor(root.join(p))?)
            };
            cases.push(LoadedCase {
                id: entry.id.clone(),
                class: entry.class,
                split: entry.split,
                spec: entry.spec.clone(),
                ed: img(&entry.files.ed)?,
                es: img(&entry.files.es)?,
                ed_bloodpool: mask(&entry.files.ed_bloodpool)?,
                ed_wall: mask(&entry.files.ed_wall)?,
                es_bloodpool: mask(&entry.files.es_bloodpool)?,
                es_wall: mask(&entry.files.es_wall)?,
            });
        }
        Ok(Dataset { manifest, cases })
    }

    pub fn split(&self, split: Split) -> Vec<&LoadedCase> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn train(&self) -> Vec<&LoadedCase> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&LoadedCase> {
        self.split(Split::Test)
    }
}
