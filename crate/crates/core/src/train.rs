//! Stochastic training: Adam on the multi-scale loss with paired data
//! augmentation, CSV metrics logging and checkpointing.
//!
//! Determinism and resumability come from stateless seeding: the shuffle of
//! epoch `e` uses `derive(seed, 1, e)`, the augmentation and noise draws of
//! optimizer step `t` use `derive(seed, 2, t)`.  Resuming from a checkpoint
//! replays the schedule and skips the already-finished steps, so the
//! continued run is bitwise identical to an uninterrupted one.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffeo::{warp, DeformationField, ScalarImage};
use crate::error::{DregError, Result};
use crate::model::{save_checkpoint, AdamExtras, ModelParams};
use crate::objective::LossConfig;
use crate::phantom::Dataset;
use crate::seeding;
use crate::tape::Tape;
use crate::tensor::{Parameter, Tensor};

const SHUFFLE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// Ranges of the random spatial transform applied identically to both images
/// of a pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Maximum |shift| in pixels, per axis.
    pub max_shift: f64,
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub mirror_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_shift: 8.0,
            max_rotation_deg: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            mirror_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.5e-4,
            batch_size: 1,
            epochs: 30,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(DregError::Config(
                "train: learning_rate >= 0, batch_size >= 1, epochs >= 1 required".into(),
            ));
        }
        let a = &self.augment;
        if a.max_shift < 0.0
            || a.scale_min <= 0.0
            || a.scale_max < a.scale_min
            || !(0.0..=1.0).contains(&a.mirror_prob)
        {
            return Err(DregError::Config("train: bad augmentation ranges".into()));
        }
        Ok(())
    }
}

/// The random resampling transform of one augmentation draw.
#[derive(Clone, Copy, Debug)]
struct AugmentDraw {
    shift: (f64, f64),
    rotation_rad: f64,
    scale: f64,
    mirror: bool,
}

impl AugmentDraw {
    fn sample(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let range = |r: f64, rng: &mut ChaCha8Rng| {
            if r > 0.0 {
                rng.random_range(-r..r)
            } else {
                0.0
            }
        };
        AugmentDraw {
            shift: (range(cfg.max_shift, rng), range(cfg.max_shift, rng)),
            rotation_rad: range(cfg.max_rotation_deg, rng).to_radians(),
            scale: if cfg.scale_max > cfg.scale_min {
                rng.random_range(cfg.scale_min..cfg.scale_max)
            } else {
                cfg.scale_min
            },
            mirror: rng.random::<f64>() < cfg.mirror_prob,
        }
    }

    /// Sampling map about the image center: for each output pixel the source
    /// coordinate under mirror, inverse scale, inverse rotation and shift.
    fn field(&self, h: usize, w: usize) -> DeformationField {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let (sin, cos) = (-self.rotation_rad).sin_cos();
        let inv_scale = 1.0 / self.scale;
        let mut abs = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx - self.shift.0;
                let dy = y as f64 - cy - self.shift.1;
                let rx = (cos * dx - sin * dy) * inv_scale;
                let ry = (sin * dx + cos * dy) * inv_scale;
                let rx = if self.mirror { -rx } else { rx };
                abs.push(cx + rx);
                abs.push(cy + ry);
            }
        }
        DeformationField::from_absolute(Tensor::new(vec![h, w, 2], abs).expect("shape"))
            .expect("shape")
    }
}

/// Applies one random transform (shift, rotation, scale, mirror; bilinear,
/// clamp-to-edge) to both images of a pair.
pub fn augment(
    f: &ScalarImage,
    m: &ScalarImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ScalarImage, ScalarImage)> {
    if (f.h(), f.w()) != (m.h(), m.w()) {
        return Err(DregError::shape(
            "augment",
            format!("{}x{} vs {}x{}", f.h(), f.w(), m.h(), m.w()),
        ));
    }
    if !cfg.enabled {
        return Ok((f.clone(), m.clone()));
    }
    let draw = AugmentDraw::sample(cfg, rng);
    let phi = draw.field(f.h(), f.w());
    Ok((warp(f, &phi)?, warp(m, &phi)?))
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value().shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value().shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held by `params`.  Weight
    /// decay is decoupled (independent of the learning rate) and skips bias
    /// vectors.
    pub fn step(&mut self, params: &mut [Parameter], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decays() { weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad().data().to_vec();
            for ((value, (mi, vi)), gi) in p
                .value_mut()
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g)
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *value -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                if decay > 0.0 {
                    *value -= decay * *value;
                }
            }
        }
    }

    /// Serializes the moments as checkpoint extras.
    pub fn to_extras(&self, params: &[Parameter]) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (i, p) in params.iter().enumerate() {
            out.push((format!("{}{}", AdamExtras::M_PREFIX, p.name()), self.m[i].clone()));
            out.push((format!("{}{}", AdamExtras::V_PREFIX, p.name()), self.v[i].clone()));
        }
        out
    }

    /// Rebuilds the state from checkpoint extras; `t` is the optimizer step
    /// count stored in the manifest.
    pub fn from_extras(
        params: &[Parameter],
        extras: &std::collections::BTreeMap<String, Tensor>,
        t: u64,
    ) -> Result<Self> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params {
            let fetch = |prefix: &str| -> Result<Tensor> {
                let key = format!("{prefix}{}", p.name());
                extras
                    .get(&key)
                    .filter(|t| t.shape() == p.value().shape())
                    .cloned()
                    .ok_or_else(|| DregError::Invalid(format!("checkpoint misses {key}")))
            };
            m.push(fetch(AdamExtras::M_PREFIX)?);
            v.push(fetch(AdamExtras::V_PREFIX)?);
        }
        Ok(AdamState { m, v, t })
    }
}

// ---------------------------------------------------------------------------
// The loop.
// ---------------------------------------------------------------------------

/// Loss breakdown of an optimizer step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub kl: f64,
    pub lcc: Vec<f64>,
    pub mean_abs_z: f64,
}

/// One optimizer step on an already-augmented batch.  Gradients are averaged
/// over the batch; `epsilons[i]` is the latent noise of pair `i`.
pub fn train_step(
    model: &mut ModelParams,
    adam: &mut AdamState,
    batch: &[(&ScalarImage, &ScalarImage)],
    epsilons: &[Vec<f64>],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    assert_eq!(batch.len(), epsilons.len());
    model.zero_grads();
    let mut total = 0.0;
    let mut kl = 0.0;
    let mut lcc = vec![0.0; loss_cfg.scales.len()];
    let mut mean_abs_z = 0.0;
    for ((f, m), eps) in batch.iter().zip(epsilons) {
        let mut tape = Tape::new();
        let vals = model.values_on(&mut tape);
        let fv = tape.constant(f.tensor().clone());
        let mv = tape.constant(m.tensor().clone());
        let graph = model.training_loss_on(&mut tape, &vals, fv, mv, eps, loss_cfg)?;
        let loss = tape.value(graph.terms.total).item();
        if !loss.is_finite() {
            return Err(DregError::NonFinite("training loss".into()));
        }
        total += loss;
        kl += tape.value(graph.terms.kl).item();
        for (acc, &val) in lcc.iter_mut().zip(&graph.terms.lcc) {
            *acc += tape.value(val).item();
        }
        let z = tape.value(graph.z).data();
        mean_abs_z += z.iter().map(|v| v.abs()).sum::<f64>() / z.len() as f64;
        tape.backward(graph.terms.total)?;
        tape.accumulate_param_grads(model.params_mut());
    }
    let n = batch.len() as f64;
    if batch.len() > 1 {
        for p in model.params_mut() {
            for g in p.grad_mut().data_mut() {
                *g /= n;
            }
        }
    }
    let weight_decay = model.config().weight_decay;
    adam.step(model.params_mut(), cfg.learning_rate, weight_decay);
    Ok(StepRecord {
        step: adam.step_count(),
        total: total / n,
        kl: kl / n,
        lcc: lcc.iter().map(|v| v / n).collect(),
        mean_abs_z: mean_abs_z / n,
    })
}

pub struct TrainOutcome {
    pub steps: u64,
    pub history: Vec<StepRecord>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

fn csv_header(loss_cfg: &LossConfig) -> String {
    let mut h = String::from("step,total,kl");
    for s in &loss_cfg.scales {
        h.push_str(&format!(",lcc_s{s}"));
    }
    h.push_str(",mean_abs_z\n");
    h
}

fn csv_row(r: &StepRecord) -> String {
    let mut row = format!("{},{},{}", r.step, r.total, r.kl);
    for v in &r.lcc {
        row.push_str(&format!(",{v}"));
    }
    row.push_str(&format!(",{}\n", r.mean_abs_z));
    row
}

/// Runs the optimization loop over the training split.  `start_step > 0`
/// resumes a checkpointed run: the schedule is replayed and finished steps
/// are skipped, so the result matches an uninterrupted run bitwise.
pub fn train(
    model: &mut ModelParams,
    adam: &mut AdamState,
    dataset: &Dataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    start_step: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let cases = dataset.train();
    if cases.is_empty() {
        return Err(DregError::Invalid("train: dataset has no training cases".into()));
    }
    let latent_dim = model.config().latent_dim;

    let mut metrics_path = None;
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| DregError::io(dir, e))?;
            let path = dir.join("metrics.csv");
            // fresh runs truncate; resumed runs append
            let fresh = start_step == 0 || !path.exists();
            let mut opts = fs::OpenOptions::new();
            if fresh {
                opts.create(true).write(true).truncate(true);
            } else {
                opts.create(true).append(true);
            }
            let mut file = opts.open(&path).map_err(|e| DregError::io(&path, e))?;
            if fresh {
                file.write_all(csv_header(loss_cfg).as_bytes())
                    .map_err(|e| DregError::io(&path, e))?;
            }
            metrics_path = Some(path);
            Some(file)
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..cases.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, SHUFFLE_STREAM, epoch));
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            if step <= start_step {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, STEP_STREAM, step));
            let mut batch = Vec::with_capacity(chunk.len());
            let mut epsilons = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let case = cases[idx];
                let (f, m) = augment(&case.es, &case.ed, &cfg.augment, &mut rng)?;
                let eps: Vec<f64> =
                    (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                batch.push((f, m));
                epsilons.push(eps);
            }
            let refs: Vec<(&ScalarImage, &ScalarImage)> =
                batch.iter().map(|(f, m)| (f, m)).collect();
            let record = match train_step(model, adam, &refs, &epsilons, loss_cfg, cfg) {
                Ok(r) => r,
                Err(DregError::NonFinite(what)) => {
                    // dump state for inspection before bailing out
                    if let Some(dir) = out_dir {
                        let dump = dir.join("checkpoint-diagnostic");
                        save_checkpoint(&dump, model, &adam.to_extras(model.params()), step, cfg.seed)?;
                        return Err(DregError::Invalid(format!(
                            "non-finite {what} at step {step}; state dumped to {}",
                            dump.display()
                        )));
                    }
                    return Err(DregError::NonFinite(what));
                }
                Err(e) => return Err(e),
            };
            if let Some(file) = metrics.as_mut() {
                file.write_all(csv_row(&record).as_bytes())
                    .map_err(|e| DregError::io(metrics_path.as_ref().expect("set"), e))?;
            }
            history.push(record);
            if let Some(dir) = out_dir {
                if cfg.checkpoint_interval > 0 && step.is_multiple_of(cfg.checkpoint_interval) {
                    let ckdir = dir.join(format!("checkpoint-step{step:06}"));
                    save_checkpoint(&ckdir, model, &adam.to_extras(model.params()), step, cfg.seed)?;
                }
            }
        }
    }
    let checkpoint_dir = match out_dir {
        Some(dir) => {
            let ckdir = dir.join("checkpoint");
            save_checkpoint(&ckdir, model, &adam.to_extras(model.params()), step, cfg.seed)?;
            Some(ckdir)
        }
        None => None,
    };
    Ok(TrainOutcome {
        steps: step,
        history,
        checkpoint_dir,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;
    use crate::phantom::{generate_pair, DatasetManifest, LoadedCase, PhantomClass, PhantomSpec, Split};

    fn tiny_dataset(n: usize, extent: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases = Vec::new();
        for i in 0..n {
            let class = PhantomClass::ALL[i % 3];
            let spec = PhantomSpec::sample(class, extent, &mut rng);
            let pair = generate_pair(&spec).unwrap();
            cases.push(LoadedCase {
                id: format!("case-{i:02}"),
                class,
                split: Split::Train,
                spec,
                ed: pair.ed,
                es: pair.es,
                ed_bloodpool: pair.ed_bloodpool,
                ed_wall: pair.ed_wall,
                es_bloodpool: pair.es_bloodpool,
                es_wall: pair.es_wall,
            });
        }
        Dataset {
            manifest: DatasetManifest {
                extent,
                spacing: 1.0,
                seed,
                cases: vec![],
            },
            cases,
        }
    }

    fn tiny_model(extent: usize, seed: u64) -> ModelParams {
        ModelParams::init(NetworkConfig::reduced_for_tests(), extent, extent, seed).unwrap()
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    fn quick_loss() -> LossConfig {
        LossConfig {
            lcc_window: 5,
            ..LossConfig::default()
        }
    }

    #[test]
    fn degenerate_augment_draw_is_identity() {
        let ds = tiny_dataset(1, 32, 1);
        let cfg = AugmentConfig {
            enabled: true,
            max_shift: 0.0,
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            mirror_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, m) = augment(&ds.cases[0].es, &ds.cases[0].ed, &cfg, &mut rng).unwrap();
        assert_eq!(f.tensor(), ds.cases[0].es.tensor());
        assert_eq!(m.tensor(), ds.cases[0].ed.tensor());
    }

    #[test]
    fn mirror_draw_flips_both_images_identically() {
        let ds = tiny_dataset(1, 32, 2);
        let cfg = AugmentConfig {
            enabled: true,
            max_shift: 0.0,
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            mirror_prob: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, m) = augment(&ds.cases[0].es, &ds.cases[0].ed, &cfg, &mut rng).unwrap();
        let w = 32;
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(f.at(y, x), ds.cases[0].es.at(y, w - 1 - x));
                assert_eq!(m.at(y, x), ds.cases[0].ed.at(y, w - 1 - x));
            }
        }
    }

    #[test]
    fn augmentation_is_reproducible_across_runs() {
        let ds = tiny_dataset(1, 32, 3);
        let cfg = AugmentConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let (f, m) = augment(&ds.cases[0].es, &ds.cases[0].ed, &cfg, &mut rng).unwrap();
            (f, m)
        };
        let (f1, m1) = run();
        let (f2, m2) = run();
        assert_eq!(f1.tensor(), f2.tensor());
        assert_eq!(m1.tensor(), m2.tensor());
    }

    #[test]
    fn zero_learning_rate_only_decays_weights() {
        let ds = tiny_dataset(2, 32, 5);
        let mut model = tiny_model(32, 1);
        let before: Vec<Tensor> = model.params().iter().map(|p| p.value().clone()).collect();
        let mut adam = AdamState::new(model.params());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let eps = vec![vec![0.1; 4]];
        let batch = vec![(&ds.cases[0].es, &ds.cases[0].ed)];
        train_step(&mut model, &mut adam, &batch, &eps, &quick_loss(), &cfg).unwrap();
        let wd = model.config().weight_decay;
        for (p, b) in model.params().iter().zip(&before) {
            for (a, old) in p.value().data().iter().zip(b.data()) {
                if p.decays() {
                    let expect = old - wd * old;
                    assert_eq!(a.to_bits(), expect.to_bits(), "{}", p.name());
                } else {
                    assert_eq!(a.to_bits(), old.to_bits(), "{}", p.name());
                }
            }
        }
    }

    #[test]
    fn zero_lr_and_zero_decay_leave_parameters_bitwise_unchanged() {
        let ds = tiny_dataset(1, 32, 6);
        let mut net_cfg = NetworkConfig::reduced_for_tests();
        net_cfg.weight_decay = 0.0;
        let mut model = ModelParams::init(net_cfg, 32, 32, 2).unwrap();
        let before: Vec<Tensor> = model.params().iter().map(|p| p.value().clone()).collect();
        let mut adam = AdamState::new(model.params());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let eps = vec![vec![0.3; 4]];
        let batch = vec![(&ds.cases[0].es, &ds.cases[0].ed)];
        train_step(&mut model, &mut adam, &batch, &eps, &quick_loss(), &cfg).unwrap();
        for (p, b) in model.params().iter().zip(&before) {
            assert!(p
                .value()
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn loss_descends_on_a_small_set() {
        let ds = tiny_dataset(10, 32, 7);
        let mut model = tiny_model(32, 3);
        let mut adam = AdamState::new(model.params());
        let cfg = TrainConfig {
            epochs: 20,
            seed: 5,
            learning_rate: 4e-4,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &mut adam, &ds, &quick_loss(), &cfg, 0, None).unwrap();
        assert_eq!(out.steps, 200);
        let first: f64 = out.history[..20].iter().map(|r| r.total).sum::<f64>() / 20.0;
        let last: f64 = out.history[180..].iter().map(|r| r.total).sum::<f64>() / 20.0;
        assert!(last < first, "no descent: first {first}, last {last}");
    }

    #[test]
    fn identical_seeds_give_identical_loss_curves() {
        let ds = tiny_dataset(4, 32, 8);
        let run = || {
            let mut model = tiny_model(32, 9);
            let mut adam = AdamState::new(model.params());
            let cfg = quick_cfg(3, 11);
            train(&mut model, &mut adam, &ds, &quick_loss(), &cfg, 0, None)
                .unwrap()
                .history
                .iter()
                .map(|r| r.total)
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 12);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let ds = tiny_dataset(3, 32, 10);
        let dir = tempfile::tempdir().unwrap();
        let full_dir = dir.path().join("full");
        let mut cfg = quick_cfg(4, 13);
        cfg.checkpoint_interval = 6;

        let mut model = tiny_model(32, 21);
        let mut adam = AdamState::new(model.params());
        let full = train(
            &mut model,
            &mut adam,
            &ds,
            &quick_loss(),
            &cfg,
            0,
            Some(&full_dir),
        )
        .unwrap();
        assert_eq!(full.steps, 12);

        let ck = crate::model::load_checkpoint(&full_dir.join("checkpoint-step000006")).unwrap();
        let mut resumed_model = ck.model;
        let mut resumed_adam =
            AdamState::from_extras(resumed_model.params(), &ck.extras, ck.step).unwrap();
        let resumed = train(
            &mut resumed_model,
            &mut resumed_adam,
            &ds,
            &quick_loss(),
            &cfg,
            ck.step,
            None,
        )
        .unwrap();
        let tail: Vec<f64> = full.history[6..].iter().map(|r| r.total).collect();
        let cont: Vec<f64> = resumed.history.iter().map(|r| r.total).collect();
        assert_eq!(tail.len(), cont.len());
        assert!(tail.iter().zip(&cont).all(|(a, b)| a.to_bits() == b.to_bits()));
        // final parameters agree bitwise too
        for (a, b) in model.params().iter().zip(resumed_model.params()) {
            assert!(a
                .value()
                .data()
                .iter()
                .zip(b.value().data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn optimizer_state_roundtrips_through_extras() {
        let mut model = tiny_model(32, 30);
        let ds = tiny_dataset(2, 32, 31);
        let mut adam = AdamState::new(model.params());
        let cfg = quick_cfg(1, 3);
        let eps = vec![vec![0.5; 4]];
        let batch = vec![(&ds.cases[0].es, &ds.cases[0].ed)];
        train_step(&mut model, &mut adam, &batch, &eps, &quick_loss(), &cfg).unwrap();
        let extras: std::collections::BTreeMap<String, Tensor> =
            adam.to_extras(model.params()).into_iter().collect();
        let restored = AdamState::from_extras(model.params(), &extras, adam.step_count()).unwrap();
        assert_eq!(restored.t, 1);
        for i in 0..model.params().len() {
            assert_eq!(restored.m[i], adam.m[i]);
            assert_eq!(restored.v[i], adam.v[i]);
        }
    }

    #[test]
    fn metrics_csv_has_the_expected_layout() {
        let ds = tiny_dataset(2, 32, 32);
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(32, 40);
        let mut adam = AdamState::new(model.params());
        let out = train(
            &mut model,
            &mut adam,
            &ds,
            &quick_loss(),
            &quick_cfg(1, 2),
            0,
            Some(dir.path()),
        )
        .unwrap();
        let text = std::fs::read_to_string(out.metrics_path.unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,total,kl,lcc_s1,lcc_s2,lcc_s3,mean_abs_z");
        assert_eq!(lines.count(), 2);
        assert!(out.checkpoint_dir.unwrap().join("checkpoint.json").exists());
    }
}
