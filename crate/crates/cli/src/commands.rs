use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use dreg_core::diffeo::{jacobian_determinant, BinaryMask, ScalarImage};
use dreg_core::io;
use dreg_core::latent::{
    code_at, encode_cases, export_codes, fit_pca, read_codes, transport, PrincipalBasis,
};
use dreg_core::metrics::{ejection_fraction, evaluate_case, CaseMasks, CaseReport};
use dreg_core::model::{
    load_checkpoint, LatentCode, ModelParams, NetworkConfig, RegistrationResult,
};
use dreg_core::objective::LossConfig;
use dreg_core::phantom::{generate_dataset, Dataset, LoadedCase, Split};
use dreg_core::seeding;
use dreg_core::tensor::Tensor;
use dreg_core::train::{train, AdamState, TrainConfig};

/// Seed streams of the CLI (model init is separate from the training loop).
const INIT_STREAM: u64 = 3;
const SAMPLE_STREAM: u64 = 4;

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset (images, masks, manifest).
    GenerateData(GenerateDataArgs),
    /// Train a registration model on a dataset.
    Train(TrainArgs),
    /// Register one image pair with a trained model.
    Register(RegisterArgs),
    /// Evaluate a model over a dataset split.
    Evaluate(EvaluateArgs),
    /// Decode latent codes (prior draws or a principal-axis sweep) on an image.
    Sample(SampleArgs),
    /// Transport a donor pair's deformation onto a recipient image.
    Transport(TransportArgs),
    /// Export the latent codes of a dataset split to CSV.
    Codes(CodesArgs),
    /// Fit a principal basis on exported codes.
    Pca(PcaArgs),
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => run_train(a),
        Command::Register(a) => run_register(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Sample(a) => run_sample(a),
        Command::Transport(a) => run_transport(a),
        Command::Codes(a) => run_codes(a),
        Command::Pca(a) => run_pca(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

/// Full run configuration; unknown keys are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let cfg: RunConfig =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                Ok(cfg)
            }
        }
    }
}

fn write_resolved_config<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join("resolved_config.json");
    let json = serde_json::to_string_pretty(resolved)?;
    fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn worker_count() -> usize {
    std::env::var("DREG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs `f` over the items on up to `DREG_THREADS` workers; results come back
/// in input order regardless of scheduling.
fn fan_out<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = worker_count().min(items.len().max(1));
    if threads <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<Result<R>>] = &mut slots;
        let mut base = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let worker_items = &items[base..base + take];
            let f = &f;
            scope.spawn(move || {
                for (off, item) in worker_items.iter().enumerate() {
                    head[off] = Some(f(base + off, item));
                }
            });
            base += take;
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("filled by worker"))
        .collect()
}

fn load_model(path: &Path) -> Result<ModelParams> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

fn read_image(path: &Path, spacing: f64) -> Result<ScalarImage> {
    Ok(ScalarImage::new(io::read_tensor(path)?, spacing)?)
}

fn split_cases<'d>(dataset: &'d Dataset, split: &str) -> Result<Vec<&'d LoadedCase>> {
    Ok(match split {
        "train" => dataset.split(Split::Train),
        "test" => dataset.split(Split::Test),
        "all" => dataset.cases.iter().collect(),
        other => bail!("unknown split {other:?} (use train|test|all)"),
    })
}

fn write_registration_artifacts(
    out: &Path,
    result: &RegistrationResult,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let d = result.z.0.len();
    let mut z_csv = (1..=d).map(|i| format!("z{i}")).collect::<Vec<_>>().join(",");
    z_csv.push('\n');
    z_csv.push_str(
        &result
            .z
            .0
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    z_csv.push('\n');
    fs::write(out.join("z.csv"), z_csv)?;
    for s in &result.scales {
        io::write_tensor(
            out.join(format!("u_s{}.drt", s.scale)),
            s.deformation.displacement_tensor(),
        )?;
        io::write_tensor(out.join(format!("warped_s{}.drt", s.scale)), s.warped.tensor())?;
    }
    let det = jacobian_determinant(&result.full_scale().deformation)?;
    io::write_tensor(out.join("detjac_s1.drt"), det.tensor())?;
    io::write_pgm(out.join("warped_s1.pgm"), result.full_scale().warped.tensor(), 0.0, 1.0)?;
    io::write_pgm(out.join("detjac_s1.pgm"), det.tensor(), 0.0, 2.0)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate-data
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct GenerateDataArgs {
    /// Cases per class (NORM, HYP, DIL).
    #[arg(long)]
    n_per_class: usize,
    /// Square image extent in pixels.
    #[arg(long, default_value_t = 64)]
    extent: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also export ED/ES frames as PGM for inspection.
    #[arg(long, default_value_t = false)]
    pgm: bool,
    #[arg(long)]
    out: PathBuf,
}

fn generate_data(a: GenerateDataArgs) -> Result<()> {
    write_resolved_config(&a.out, &serde_json::json!({ "command": "generate-data", "args": a }))?;
    let manifest = generate_dataset(a.n_per_class, a.extent, a.seed, &a.out)?;
    if a.pgm {
        for case in &manifest.cases {
            for rel in [&case.files.ed, &case.files.es] {
                let t = io::read_tensor(a.out.join(rel))?;
                io::write_pgm(a.out.join(rel).with_extension("pgm"), &t, 0.0, 1.0)?;
            }
        }
    }
    println!(
        "wrote {} cases ({} train / {} test) to {}",
        manifest.cases.len(),
        manifest.cases.iter().filter(|c| c.split == Split::Train).count(),
        manifest.cases.iter().filter(|c| c.split == Split::Test).count(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory (containing manifest.json).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration (network/loss/train sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    let dataset = Dataset::load(&a.data)?;
    let extent = dataset.manifest.extent;

    let (mut model, mut adam, start_step) = match &a.resume {
        Some(ck) => {
            let ck = load_checkpoint(ck)?;
            let adam = AdamState::from_extras(ck.model.params(), &ck.extras, ck.step)?;
            (ck.model, adam, ck.step)
        }
        None => {
            let model = ModelParams::init(
                cfg.network.clone(),
                extent,
                extent,
                seeding::derive(cfg.train.seed, INIT_STREAM, 0),
            )?;
            let adam = AdamState::new(model.params());
            (model, adam, 0)
        }
    };

    write_resolved_config(
        &a.out,
        &serde_json::json!({ "command": "train", "args": a, "config": cfg }),
    )?;
    let outcome = train(
        &mut model,
        &mut adam,
        &dataset,
        &cfg.loss,
        &cfg.train,
        start_step,
        Some(&a.out),
    )?;
    println!(
        "trained {} steps; checkpoint at {}",
        outcome.steps,
        outcome
            .checkpoint_dir
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// register
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct RegisterArgs {
    /// Checkpoint directory or manifest path.
    #[arg(long)]
    model: PathBuf,
    /// Fixed image (DRT1).
    #[arg(long)]
    fixed: PathBuf,
    /// Moving image (DRT1).
    #[arg(long)]
    moving: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    #[arg(long)]
    out: PathBuf,
}

fn run_register(a: RegisterArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let fixed = read_image(&a.fixed, a.spacing)?;
    let moving = read_image(&a.moving, a.spacing)?;
    write_resolved_config(&a.out, &serde_json::json!({ "command": "register", "args": a }))?;
    let result = model.register(&fixed, &moving)?;
    write_registration_artifacts(&a.out, &result)?;
    println!("registered; artifacts in {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

const EVAL_CSV_HEADER: &str = "id,class,rmse,rmse_baseline,dice_bloodpool,dice_wall,dice_mean,\
dice_mean_baseline,hd95_bloodpool,hd95_wall,hd95_mean,hd95_mean_baseline,grad_det_jac,\
min_det_jac,ef_pred,ef_true";

fn report_row(class: &str, r: &CaseReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.id,
        class,
        r.rmse,
        r.rmse_baseline,
        r.structures[0].dice,
        r.structures[1].dice,
        r.dice_mean,
        r.dice_mean_baseline,
        r.structures[0].hd95,
        r.structures[1].hd95,
        r.hd95_mean,
        r.hd95_mean_baseline,
        r.grad_det_jac,
        r.min_det_jac,
        r.ef_predicted,
        r.ef_true
    )
}

/// Evaluates one case with a model (shared with the acceptance suite).
pub fn evaluate_one(model: &ModelParams, case: &LoadedCase, spacing: f64) -> Result<CaseReport> {
    let result = model.register(&case.es, &case.ed)?;
    let masks = CaseMasks {
        ed_bloodpool: &case.ed_bloodpool,
        ed_wall: &case.ed_wall,
        es_bloodpool: &case.es_bloodpool,
        es_wall: &case.es_wall,
    };
    Ok(evaluate_case(&case.id, &case.es, &case.ed, &masks, &result, spacing)?)
}

#[derive(Serialize)]
struct Stat {
    mean: f64,
    sd: f64,
}

fn stat(values: &[f64]) -> Stat {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Stat {
        mean,
        sd: var.sqrt(),
    }
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let dataset = Dataset::load(&a.data)?;
    let cases = split_cases(&dataset, &a.split)?;
    write_resolved_config(&a.out, &serde_json::json!({ "command": "evaluate", "args": a }))?;
    let spacing = dataset.manifest.spacing;
    let reports = fan_out(&cases, |_, case| evaluate_one(&model, case, spacing))?;

    let mut csv = String::from(EVAL_CSV_HEADER);
    csv.push('\n');
    for (case, r) in cases.iter().zip(&reports) {
        csv.push_str(&report_row(case.class.as_str(), r));
        csv.push('\n');
    }
    fs::write(a.out.join("cases.csv"), csv)?;

    let mut agg = std::collections::BTreeMap::new();
    let col = |f: fn(&CaseReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    agg.insert("rmse", stat(&col(|r| r.rmse)));
    agg.insert("rmse_baseline", stat(&col(|r| r.rmse_baseline)));
    agg.insert("dice_mean", stat(&col(|r| r.dice_mean)));
    agg.insert("dice_mean_baseline", stat(&col(|r| r.dice_mean_baseline)));
    agg.insert("hd95_mean", stat(&col(|r| r.hd95_mean)));
    agg.insert("hd95_mean_baseline", stat(&col(|r| r.hd95_mean_baseline)));
    agg.insert("grad_det_jac", stat(&col(|r| r.grad_det_jac)));
    agg.insert("min_det_jac", stat(&col(|r| r.min_det_jac)));
    agg.insert("ef_pred", stat(&col(|r| r.ef_predicted)));
    agg.insert("ef_true", stat(&col(|r| r.ef_true)));
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "n_cases": reports.len(),
        "split": a.split,
        "metrics": agg,
    }))?;
    fs::write(a.out.join("aggregate.json"), json)?;
    println!("evaluated {} cases; results in {}", reports.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Moving image the codes are decoded against (DRT1).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of z ~ N(0, I) prior draws to decode.
    #[arg(long, conflicts_with = "basis")]
    prior_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Principal-basis directory (from `dreg pca`) for a grid sweep over the
    /// two leading components.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Sweep grid side length.
    #[arg(long, default_value_t = 9)]
    grid: usize,
    /// Sweep range in standard deviations.
    #[arg(long, default_value_t = 2.5)]
    range: f64,
}

#[derive(Deserialize)]
struct BasisHeader {
    mean: Vec<f64>,
    stddevs: Vec<f64>,
}

fn load_basis(dir: &Path) -> Result<PrincipalBasis> {
    let text = fs::read_to_string(dir.join("basis.json"))
        .with_context(|| format!("reading {}", dir.join("basis.json").display()))?;
    let header: BasisHeader = serde_json::from_str(&text)?;
    let comp = io::read_tensor(dir.join("components.drt"))?;
    let d = header.mean.len();
    anyhow::ensure!(comp.shape() == [d, d], "components.drt must be [d, d]");
    Ok(PrincipalBasis {
        mean: header.mean,
        stddevs: header.stddevs,
        components: comp.data().chunks_exact(d).map(|c| c.to_vec()).collect(),
    })
}

fn run_sample(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let image = read_image(&a.image, 1.0)?;
    write_resolved_config(&a.out, &serde_json::json!({ "command": "sample", "args": a }))?;
    let d = model.config().latent_dim;

    // (name, code) list: prior draws or the component grid
    let mut codes: Vec<(String, LatentCode)> = Vec::new();
    let mut grid_side = 0usize;
    if let Some(dir) = &a.basis {
        let basis = load_basis(dir)?;
        anyhow::ensure!(basis.dim() == d, "basis dimension {} vs model {}", basis.dim(), d);
        anyhow::ensure!(a.grid >= 2, "--grid must be at least 2");
        grid_side = a.grid;
        for i in 0..a.grid {
            for j in 0..a.grid {
                let u0 = -a.range + 2.0 * a.range * i as f64 / (a.grid - 1) as f64;
                let u1 = -a.range + 2.0 * a.range * j as f64 / (a.grid - 1) as f64;
                let z = code_at(&basis, &[(0, u0), (1, u1)])?;
                codes.push((format!("sweep_{i:02}_{j:02}"), z));
            }
        }
    } else {
        let n = a.prior_samples.unwrap_or(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(a.seed, SAMPLE_STREAM, 0));
        for i in 0..n {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            codes.push((format!("prior_{i:03}"), LatentCode(z)));
        }
    }

    let mut summary = String::from("name,min_det_jac\n");
    for (name, z) in &codes {
        let result = model.sample_deformation(&image, z)?;
        let full = result.full_scale();
        io::write_tensor(
            a.out.join(format!("{name}_u.drt")),
            full.deformation.displacement_tensor(),
        )?;
        io::write_tensor(a.out.join(format!("{name}_warped.drt")), full.warped.tensor())?;
        let det = jacobian_determinant(&full.deformation)?;
        let min = det.tensor().data().iter().fold(f64::INFINITY, |m, &v| m.min(v));
        summary.push_str(&format!("{name},{min}\n"));
    }
    fs::write(a.out.join("samples.csv"), summary)?;

    // contact sheet assembled purely from the stored artifacts
    if grid_side > 0 {
        let tiles: Vec<Tensor> = codes
            .iter()
            .map(|(name, _)| io::read_tensor(a.out.join(format!("{name}_warped.drt"))))
            .collect::<dreg_core::Result<_>>()?;
        let sheet = io::tile_grid(&tiles, grid_side, grid_side)?;
        io::write_pgm(a.out.join("sweep.pgm"), &sheet, 0.0, 1.0)?;
    }
    println!("decoded {} codes; artifacts in {}", codes.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// transport
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct TransportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Donor fixed image (ES frame).
    #[arg(long)]
    donor_fixed: PathBuf,
    /// Donor moving image (ED frame).
    #[arg(long)]
    donor_moving: PathBuf,
    /// Recipient moving image (ED frame).
    #[arg(long)]
    recipient: PathBuf,
    /// Donor ED bloodpool mask, for the EF report.
    #[arg(long)]
    donor_mask: Option<PathBuf>,
    /// Recipient ED bloodpool mask, for the EF report.
    #[arg(long)]
    recipient_mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run_transport(a: TransportArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let donor_fixed = read_image(&a.donor_fixed, 1.0)?;
    let donor_moving = read_image(&a.donor_moving, 1.0)?;
    let recipient = read_image(&a.recipient, 1.0)?;
    write_resolved_config(&a.out, &serde_json::json!({ "command": "transport", "args": a }))?;

    let result = transport(&model, &donor_fixed, &donor_moving, &recipient)?;
    write_registration_artifacts(&a.out, &result)?;

    if let (Some(dm), Some(rm)) = (&a.donor_mask, &a.recipient_mask) {
        let donor_bp = BinaryMask::from_tensor(&io::read_tensor(dm)?)?;
        let recipient_bp = BinaryMask::from_tensor(&io::read_tensor(rm)?)?;
        let donor_reg = model.register(&donor_fixed, &donor_moving)?;
        let donor_warp =
            dreg_core::diffeo::warp_mask_nearest(&donor_bp, &donor_reg.full_scale().deformation)?;
        let recip_warp =
            dreg_core::diffeo::warp_mask_nearest(&recipient_bp, &result.full_scale().deformation)?;
        let ef_donor = ejection_fraction(&donor_bp, &donor_warp)?;
        let ef_recipient = ejection_fraction(&recipient_bp, &recip_warp)?;
        let json = serde_json::to_string_pretty(&serde_json::json!({
            "ef_donor_prediction": ef_donor,
            "ef_recipient_transport": ef_recipient,
            "abs_difference": (ef_donor - ef_recipient).abs(),
        }))?;
        fs::write(a.out.join("ef_report.json"), json)?;
    }
    println!("transported; artifacts in {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// codes
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct CodesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "all")]
    split: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn run_codes(a: CodesArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let dataset = Dataset::load(&a.data)?;
    let cases = split_cases(&dataset, &a.split)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        write_resolved_config(dir, &serde_json::json!({ "command": "codes", "args": a }))?;
    }
    // fan out over chunks, then concatenate in order
    let encoded = fan_out(&cases, |_, case| {
        Ok(encode_cases(&model, std::slice::from_ref(case))?)
    })?;
    let mut all = dreg_core::latent::LatentDataset::default();
    for mut ds in encoded {
        all.codes.append(&mut ds.codes);
    }
    export_codes(&a.out, &all)?;
    println!("wrote {} codes to {}", all.codes.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// pca
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct PcaArgs {
    /// Codes CSV (from `dreg codes`).
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn run_pca(a: PcaArgs) -> Result<()> {
    let ds = read_codes(&a.codes)?;
    write_resolved_config(&a.out, &serde_json::json!({ "command": "pca", "args": a }))?;
    let basis = fit_pca(&ds)?;
    let d = basis.dim();
    // JSON carries mean and spreads; the component matrix goes to DRT1
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "mean": basis.mean,
        "stddevs": basis.stddevs,
    }))?;
    fs::write(a.out.join("basis.json"), json)?;
    let flat: Vec<f64> = basis.components.iter().flatten().copied().collect();
    io::write_tensor(a.out.join("components.drt"), &Tensor::new(vec![d, d], flat)?)?;
    println!("fitted basis on {} codes; wrote {}", ds.codes.len(), a.out.display());
    Ok(())
}
