//! The registration network: a convolutional encoder producing a diagonal
//! Gaussian over the latent code, and a conditional multi-scale decoder that
//! turns a code plus the moving image into smoothed velocities,
//! diffeomorphisms and warped images.
//!
//! Encoder: the fixed and moving images are stacked as two channels and run
//! through strided convolutions; two fully connected heads emit `mu` and
//! `logvar`.  Decoder: a fully connected layer maps `z` to the bottleneck
//! grid; each stage upsamples by two (transposed convolution), concatenates
//! the matching downsample of the moving image, applies a convolution, and a
//! per-scale two-channel head with `tanh` scaled by the velocity cap emits
//! the scale's velocity field.  Velocities are Gaussian-smoothed,
//! exponentiated by scaling and squaring, and used to warp the moving image
//! at that scale.  Registration runs the whole thing once with `z = mu`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffeo::{
    exponentiate_on, gaussian_smooth_on, DeformationField, ScalarImage, VectorField,
};
use crate::error::{DregError, Result};
use crate::io;
use crate::objective::{total_loss_on, EncoderDistribution, LossConfig, LossTerms};
use crate::tape::{Tape, Value};
use crate::tensor::{Parameter, Tensor};

/// Per-scale Gaussian smoothing of the decoded velocities.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSpec {
    /// Standard deviation in pixels of that scale's grid.
    pub sigma: f64,
    /// Sampled kernel size, odd.
    pub kernel: usize,
}

fn default_smoothing(num_scales: usize) -> Vec<SmoothingSpec> {
    let mut out = Vec::with_capacity(num_scales);
    let mut sigma = 3.0;
    let mut kernel = 15usize;
    for _ in 0..num_scales {
        out.push(SmoothingSpec { sigma, kernel });
        sigma /= 2.0;
        kernel = ((kernel / 2) | 1).max(3);
    }
    out
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub num_scales: usize,
    pub encoder_widths: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    /// One width per decoder stage, coarsest first.
    pub decoder_widths: Vec<usize>,
    pub conv_kernel: usize,
    pub leaky_slope: f64,
    /// Velocity bound in pixels applied through `cap * tanh(.)`.
    pub velocity_cap: f64,
    /// One entry per scale, full resolution first.
    pub smoothing: Vec<SmoothingSpec>,
    pub squaring_steps: u32,
    pub weight_decay: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latent_dim: 32,
            num_scales: 3,
            encoder_widths: vec![16, 32, 32, 4],
            encoder_strides: vec![2, 2, 2, 1],
            decoder_widths: vec![32, 32, 16],
            conv_kernel: 3,
            leaky_slope: 0.2,
            velocity_cap: 4.0,
            smoothing: default_smoothing(3),
            squaring_steps: 4,
            weight_decay: 1e-4,
        }
    }
}

impl NetworkConfig {
    /// A small configuration for 8x8 gradient-check runs.
    pub fn reduced_for_tests() -> Self {
        NetworkConfig {
            latent_dim: 4,
            num_scales: 3,
            encoder_widths: vec![4, 6, 6, 2],
            encoder_strides: vec![2, 2, 2, 1],
            decoder_widths: vec![6, 6, 4],
            smoothing: vec![
                SmoothingSpec { sigma: 1.0, kernel: 5 },
                SmoothingSpec { sigma: 0.5, kernel: 3 },
                SmoothingSpec { sigma: 0.25, kernel: 3 },
            ],
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(DregError::Config(m));
        if self.latent_dim == 0 || self.num_scales == 0 {
            return cfg_err("network: latent_dim and num_scales must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.encoder_strides.len()
        {
            return cfg_err("network: encoder widths and strides must match".into());
        }
        if self.encoder_strides.iter().any(|&s| s != 1 && s != 2) {
            return cfg_err("network: encoder strides must be 1 or 2".into());
        }
        let downs: usize = self.encoder_strides.iter().product();
        if downs != 1usize << self.num_scales {
            return cfg_err(format!(
                "network: encoder stride product {downs} must equal 2^num_scales = {}",
                1usize << self.num_scales
            ));
        }
        if self.decoder_widths.len() != self.num_scales {
            return cfg_err("network: decoder_widths needs one entry per scale".into());
        }
        if self.smoothing.len() != self.num_scales {
            return cfg_err("network: smoothing needs one entry per scale".into());
        }
        if self.smoothing.iter().any(|s| s.kernel % 2 == 0 || s.sigma < 0.0) {
            return cfg_err("network: smoothing kernels must be odd, sigmas non-negative".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return cfg_err("network: conv_kernel must be odd".into());
        }
        if self.velocity_cap <= 0.0 || self.weight_decay < 0.0 {
            return cfg_err("network: velocity_cap must be positive".into());
        }
        Ok(())
    }
}

/// A latent deformation code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Output of a decode/registration pass at one scale.
#[derive(Clone, Debug)]
pub struct ScaleResult {
    pub scale: u32,
    /// Smoothed velocity field on the scale's grid.
    pub velocity: VectorField,
    pub deformation: DeformationField,
    pub warped: ScalarImage,
}

/// Latent code plus per-scale fields; `scales[0]` is full resolution.
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub z: LatentCode,
    pub scales: Vec<ScaleResult>,
}

impl RegistrationResult {
    pub fn full_scale(&self) -> &ScaleResult {
        &self.scales[0]
    }
}

struct StageIdx {
    deconv: (usize, usize),
    conv: (usize, usize),
    head: (usize, usize),
}

struct Layout {
    enc: Vec<(usize, usize)>,
    mu: (usize, usize),
    logvar: (usize, usize),
    fc: (usize, usize),
    stages: Vec<StageIdx>,
}

/// All trainable weights plus the architecture and image extent they serve.
pub struct ModelParams {
    config: NetworkConfig,
    image_h: usize,
    image_w: usize,
    params: Vec<Parameter>,
    layout: Layout,
}

struct Builder {
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform_fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, zero: bool) -> (usize, usize) {
        let w = if zero {
            Tensor::zeros(&[k, k, cout, cin])
        } else {
            self.uniform_fan_in(&[k, k, cout, cin], k * k * cin)
        };
        let wi = self.push(format!("{name}/w"), w);
        let bi = self.push(format!("{name}/b"), Tensor::zeros(&[cout]));
        (wi, bi)
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) -> (usize, usize) {
        let w = self.uniform_fan_in(&[n_out, n_in], n_in);
        let wi = self.push(format!("{name}/w"), w);
        let bi = self.push(format!("{name}/b"), Tensor::zeros(&[n_out]));
        (wi, bi)
    }
}

impl ModelParams {
    /// Fresh parameters for images of extent `h x w`.  Convolutions use
    /// uniform fan-in initialization, biases start at zero, and the per-scale
    /// velocity heads start at zero so training begins from the identity
    /// deformation.
    pub fn init(config: NetworkConfig, h: usize, w: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let div = 1usize << config.num_scales;
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) || h < div || w < div {
            return Err(DregError::Config(format!(
                "network: image extent {h}x{w} must be divisible by {div}"
            )));
        }
        let k = config.conv_kernel;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let mut enc = Vec::new();
        let mut cin = 2;
        for (i, (&width, &_stride)) in config
            .encoder_widths
            .iter()
            .zip(&config.encoder_strides)
            .enumerate()
        {
            enc.push(b.conv(&format!("enc{}", i + 1), k, cin, width, false));
            cin = width;
        }
        let (hb, wb) = (h / div, w / div);
        let flat = hb * wb * cin;
        let mu = b.dense("mu", flat, config.latent_dim);
        let logvar = b.dense("logvar", flat, config.latent_dim);

        let dw0 = config.decoder_widths[0];
        let fc = b.dense("dec/fc", config.latent_dim, hb * wb * dw0);
        let mut stages = Vec::new();
        let mut prev = dw0;
        for (i, &width) in config.decoder_widths.iter().enumerate() {
            let scale = config.num_scales - i; // coarsest stage first
            let deconv = b.conv(&format!("dec/s{scale}/deconv"), k, prev, width, false);
            let conv = b.conv(&format!("dec/s{scale}/conv"), k, width + 1, width, false);
            let head = b.conv(&format!("dec/s{scale}/head"), k, width, 2, true);
            stages.push(StageIdx { deconv, conv, head });
            prev = width;
        }

        Ok(ModelParams {
            config,
            image_h: h,
            image_w: w,
            params: b.params,
            layout: Layout {
                enc,
                mu,
                logvar,
                fc,
                stages,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn image_extent(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Pushes every parameter onto the tape, in registry order.
    pub fn values_on(&self, tape: &mut Tape) -> Vec<Value> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p))
            .collect()
    }

    fn check_image(&self, img: &ScalarImage) -> Result<()> {
        if (img.h(), img.w()) != (self.image_h, self.image_w) {
            return Err(DregError::shape(
                "model",
                format!(
                    "image {}x{} does not match model extent {}x{}",
                    img.h(),
                    img.w(),
                    self.image_h,
                    self.image_w
                ),
            ));
        }
        Ok(())
    }

    // -- taped forward passes ------------------------------------------------

    /// Encoder on the tape; `vals` must come from [`ModelParams::values_on`].
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        vals: &[Value],
        f: Value,
        m: Value,
    ) -> Result<(Value, Value)> {
        let slope = self.config.leaky_slope;
        let (h, w) = (self.image_h, self.image_w);
        let f3 = tape.reshape(f, &[h, w, 1])?;
        let m3 = tape.reshape(m, &[h, w, 1])?;
        let mut x = tape.concat_channels(f3, m3)?;
        for ((wi, bi), &stride) in self.layout.enc.iter().zip(&self.config.encoder_strides) {
            x = tape.conv2d(x, vals[*wi], vals[*bi], stride)?;
            x = tape.leaky_relu(x, slope)?;
        }
        let flat_n = tape.value(x).numel();
        let flat = tape.reshape(x, &[flat_n])?;
        let mu = tape.dense(flat, vals[self.layout.mu.0], vals[self.layout.mu.1])?;
        let logvar = tape.dense(flat, vals[self.layout.logvar.0], vals[self.layout.logvar.1])?;
        Ok((mu, logvar))
    }

    /// Decoder on the tape.  Returns per-scale values, full resolution first.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        vals: &[Value],
        z: Value,
        m: Value,
    ) -> Result<Vec<ScaleValues>> {
        let cfg = &self.config;
        let slope = cfg.leaky_slope;
        let (h, w) = (self.image_h, self.image_w);
        let s_max = cfg.num_scales;

        // moving-image pyramid, scale s at index s-1
        let mut pyr = vec![m];
        for _ in 1..s_max {
            let prev = *pyr.last().expect("non-empty");
            pyr.push(tape.spatial_downsample(prev)?);
        }

        let fc_out = tape.dense(z, vals[self.layout.fc.0], vals[self.layout.fc.1])?;
        let act = tape.leaky_relu(fc_out, slope)?;
        let div = 1usize << s_max;
        let (hb, wb) = (h / div, w / div);
        let mut x = tape.reshape(act, &[hb, wb, cfg.decoder_widths[0]])?;

        let mut out = Vec::with_capacity(s_max);
        for (i, stage) in self.layout.stages.iter().enumerate() {
            let scale = (s_max - i) as u32;
            x = tape.conv2d_transpose(x, vals[stage.deconv.0], vals[stage.deconv.1])?;
            x = tape.leaky_relu(x, slope)?;
            let m_s = pyr[scale as usize - 1];
            let (hs, ws) = (
                tape.value(m_s).shape()[0],
                tape.value(m_s).shape()[1],
            );
            let cond = tape.reshape(m_s, &[hs, ws, 1])?;
            x = tape.concat_channels(x, cond)?;
            x = tape.conv2d(x, vals[stage.conv.0], vals[stage.conv.1], 1)?;
            x = tape.leaky_relu(x, slope)?;
            let raw = tape.conv2d(x, vals[stage.head.0], vals[stage.head.1], 1)?;
            let t = tape.tanh(raw)?;
            let v = tape.scale(t, cfg.velocity_cap)?;
            let sm = &cfg.smoothing[scale as usize - 1];
            let v_hat = gaussian_smooth_on(tape, v, sm.sigma, sm.kernel)?;
            let exp = exponentiate_on(tape, v_hat, cfg.squaring_steps)?;
            let warped = tape.warp(m_s, exp.phi)?;
            out.push(ScaleValues {
                scale,
                velocity: v_hat,
                displacement: exp.u,
                phi: exp.phi,
                warped,
            });
        }
        out.reverse(); // full resolution first
        Ok(out)
    }

    /// Full training graph: encode, reparametrize with the given noise, decode,
    /// and assemble the multi-scale loss.
    pub fn training_loss_on(
        &self,
        tape: &mut Tape,
        vals: &[Value],
        f: Value,
        m: Value,
        epsilon: &[f64],
        loss_cfg: &LossConfig,
    ) -> Result<TrainingGraph> {
        if epsilon.len() != self.config.latent_dim {
            return Err(DregError::shape(
                "training_loss",
                format!(
                    "epsilon has {} entries for latent_dim {}",
                    epsilon.len(),
                    self.config.latent_dim
                ),
            ));
        }
        if loss_cfg.scales.len() > self.config.num_scales
            || loss_cfg.scales.iter().any(|&s| s as usize > self.config.num_scales)
        {
            return Err(DregError::Config(
                "training_loss: loss scales exceed the model's scales".into(),
            ));
        }
        let (mu, logvar) = self.encode_on(tape, vals, f, m)?;
        let z = reparametrize_on(tape, mu, logvar, epsilon)?;
        let scales = self.decode_on(tape, vals, z, m)?;
        let velocities: Vec<Value> = loss_cfg
            .scales
            .iter()
            .map(|&s| scales[s as usize - 1].velocity)
            .collect();
        let terms = total_loss_on(tape, f, m, mu, logvar, &velocities, loss_cfg)?;
        Ok(TrainingGraph {
            terms,
            mu,
            logvar,
            z,
            scales,
        })
    }

    fn extract_result(
        &self,
        tape: &Tape,
        z: Value,
        scales: &[ScaleValues],
        spacing: f64,
    ) -> Result<RegistrationResult> {
        let mut out = Vec::with_capacity(scales.len());
        for sv in scales {
            let velocity =
                VectorField::at_scale(tape.value(sv.velocity).clone(), sv.scale)?;
            let deformation =
                DeformationField::from_displacement(tape.value(sv.displacement).clone())?;
            let warped = ScalarImage::new(
                tape.value(sv.warped).clone(),
                spacing * (1 << (sv.scale - 1)) as f64,
            )?;
            out.push(ScaleResult {
                scale: sv.scale,
                velocity,
                deformation,
                warped,
            });
        }
        Ok(RegistrationResult {
            z: LatentCode(tape.value(z).data().to_vec()),
            scales: out,
        })
    }

    // -- plain operations ------------------------------------------------------

    /// Deterministic encoder pass `(mu, logvar)`.
    pub fn encode(&self, f: &ScalarImage, m: &ScalarImage) -> Result<EncoderDistribution> {
        self.check_image(f)?;
        self.check_image(m)?;
        let mut tape = Tape::new();
        let vals = self.values_on(&mut tape);
        let fv = tape.constant(f.tensor().clone());
        let mv = tape.constant(m.tensor().clone());
        let (mu, logvar) = self.encode_on(&mut tape, &vals, fv, mv)?;
        Ok(EncoderDistribution {
            mu: tape.value(mu).data().to_vec(),
            logvar: tape.value(logvar).data().to_vec(),
        })
    }

    /// Decodes a latent code against a moving image.
    pub fn decode(&self, z: &LatentCode, m: &ScalarImage) -> Result<RegistrationResult> {
        self.check_image(m)?;
        if z.dim() != self.config.latent_dim {
            return Err(DregError::shape(
                "decode",
                format!("code dim {} vs latent_dim {}", z.dim(), self.config.latent_dim),
            ));
        }
        let mut tape = Tape::new();
        let vals = self.values_on(&mut tape);
        let mv = tape.constant(m.tensor().clone());
        let zv = tape.constant(Tensor::from_vec(z.0.clone()));
        let scales = self.decode_on(&mut tape, &vals, zv, mv)?;
        self.extract_result(&tape, zv, &scales, m.spacing())
    }

    /// Registration in a single forward path with `z = mu`.
    pub fn register(&self, f: &ScalarImage, m: &ScalarImage) -> Result<RegistrationResult> {
        self.check_image(f)?;
        self.check_image(m)?;
        let mut tape = Tape::new();
        let vals = self.values_on(&mut tape);
        let fv = tape.constant(f.tensor().clone());
        let mv = tape.constant(m.tensor().clone());
        let (mu, _logvar) = self.encode_on(&mut tape, &vals, fv, mv)?;
        let scales = self.decode_on(&mut tape, &vals, mu, mv)?;
        self.extract_result(&tape, mu, &scales, m.spacing())
    }

    /// Applies an arbitrary latent code to a moving image; the decoder half
    /// of [`ModelParams::register`].
    pub fn sample_deformation(&self, m: &ScalarImage, z: &LatentCode) -> Result<RegistrationResult> {
        self.decode(z, m)
    }
}

/// Per-scale tape values produced by [`ModelParams::decode_on`].
pub struct ScaleValues {
    pub scale: u32,
    /// Smoothed velocity.
    pub velocity: Value,
    /// Displacement of `exp(velocity)`.
    pub displacement: Value,
    /// Absolute warp coordinates.
    pub phi: Value,
    pub warped: Value,
}

/// Everything the trainer needs from one taped forward pass.
pub struct TrainingGraph {
    pub terms: LossTerms,
    pub mu: Value,
    pub logvar: Value,
    pub z: Value,
    pub scales: Vec<ScaleValues>,
}

/// `z = mu + exp(logvar / 2) * epsilon` on the tape.
pub fn reparametrize_on(tape: &mut Tape, mu: Value, logvar: Value, epsilon: &[f64]) -> Result<Value> {
    if tape.value(mu).numel() != epsilon.len() {
        return Err(DregError::shape(
            "reparametrize",
            format!("epsilon {} vs mu {}", epsilon.len(), tape.value(mu).numel()),
        ));
    }
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let eps = tape.constant(Tensor::from_vec(epsilon.to_vec()));
    let scaled = tape.mul(sd, eps)?;
    tape.add(mu, scaled)
}

/// `z = mu + exp(logvar / 2) * epsilon`.
pub fn reparametrize(q: &EncoderDistribution, epsilon: &[f64]) -> LatentCode {
    LatentCode(
        q.mu
            .iter()
            .zip(&q.logvar)
            .zip(epsilon)
            .map(|((&m, &lv), &e)| m + (lv * 0.5).exp() * e)
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest plus one DRT1 blob of concatenated tensors.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.drt";

/// Naming scheme for optimizer moments stored as checkpoint extras.
pub struct AdamExtras;

impl AdamExtras {
    pub const M_PREFIX: &'static str = "opt/m/";
    pub const V_PREFIX: &'static str = "opt/v/";
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in bytes from the start of the blob payload.
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    network: NetworkConfig,
    image_h: usize,
    image_w: usize,
    step: u64,
    seed: u64,
    entries: Vec<BlobEntry>,
}

/// Writes `checkpoint.json` + `checkpoint.drt` into `dir`.  `extras` carries
/// non-parameter state (optimizer moments); entry names must not collide with
/// parameter names.
pub fn save_checkpoint(
    dir: &Path,
    model: &ModelParams,
    extras: &[(String, Tensor)],
    step: u64,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DregError::io(dir, e))?;
    let mut entries = Vec::new();
    let mut flat: Vec<f64> = Vec::new();
    let push = |name: &str, t: &Tensor, entries: &mut Vec<BlobEntry>, flat: &mut Vec<f64>| {
        entries.push(BlobEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            byte_offset: (flat.len() * 8) as u64,
        });
        flat.extend_from_slice(t.data());
    };
    for p in model.params() {
        push(p.name(), p.value(), &mut entries, &mut flat);
    }
    for (name, t) in extras {
        push(name, t, &mut entries, &mut flat);
    }
    let manifest = CheckpointManifest {
        version: 1,
        network: model.config.clone(),
        image_h: model.image_h,
        image_w: model.image_w,
        step,
        seed,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), json)
        .map_err(|e| DregError::io(dir.join(CHECKPOINT_MANIFEST), e))?;
    io::write_tensor(dir.join(CHECKPOINT_BLOB), &Tensor::from_vec(flat))
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub model: ModelParams,
    /// Non-parameter entries, keyed by name.
    pub extras: BTreeMap<String, Tensor>,
    pub step: u64,
    pub seed: u64,
}

/// Accepts either the checkpoint directory or the manifest path itself.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (manifest_path, blob_path) = if path.is_dir() {
        (path.join(CHECKPOINT_MANIFEST), path.join(CHECKPOINT_BLOB))
    } else {
        (
            path.to_path_buf(),
            path.parent().unwrap_or(Path::new(".")).join(CHECKPOINT_BLOB),
        )
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| DregError::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(DregError::format(
            &manifest_path,
            format!("unsupported checkpoint version {}", manifest.version),
        ));
    }
    let blob = io::read_tensor(&blob_path)?;
    let data = blob.data();
    let mut model = ModelParams::init(manifest.network.clone(), manifest.image_h, manifest.image_w, 0)?;
    let mut extras = BTreeMap::new();
    let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
    for (i, p) in model.params.iter().enumerate() {
        by_name.insert(p.name().to_string(), i);
    }
    let mut filled = vec![false; model.params.len()];
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = (e.byte_offset / 8) as usize;
        if e.byte_offset % 8 != 0 || start + n > data.len() {
            return Err(DregError::format(
                &blob_path,
                format!("entry {} out of blob bounds", e.name),
            ));
        }
        let t = Tensor::new(e.shape.clone(), data[start..start + n].to_vec())
            .map_err(|_| DregError::format(&blob_path, format!("entry {} bad shape", e.name)))?;
        if let Some(&i) = by_name.get(e.name.as_str()) {
            if model.params[i].value().shape() != e.shape.as_slice() {
                return Err(DregError::format(
                    &blob_path,
                    format!("entry {} shape mismatch", e.name),
                ));
            }
            *model.params[i].value_mut() = t.with_requires_grad(true);
            filled[i] = true;
        } else {
            extras.insert(e.name.clone(), t);
        }
    }
    if let Some(i) = filled.iter().position(|&f| !f) {
        return Err(DregError::format(
            &manifest_path,
            format!("checkpoint misses parameter {}", model.params[i].name()),
        ));
    }
    Ok(Checkpoint {
        model,
        extras,
        step: manifest.step,
        seed: manifest.seed,
    })
}
