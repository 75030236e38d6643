use dreg_core::diffeo::warp_mask_nearest;
use dreg_core::latent::{cross_validated_accuracy, encode_cases, transport, ProbeConfig};
use dreg_core::metrics::ejection_fraction;
use dreg_core::model::{reparametrize, ModelParams, NetworkConfig};
use dreg_core::objective::LossConfig;
use dreg_core::phantom::{Dataset, PhantomClass, Split};
use dreg_core::train::{train, AdamState, TrainConfig};
use rand::SeedableRng;
use rand_distr::Distribution;
use std::path::Path;

fn measure(model: &ModelParams, ds: &Dataset, probe: &Dataset, tag: &str) {
    let test = ds.split(Split::Test);
    // dice
    let mut dice = 0.0;
    for c in &test {
        let reg = model.register(&c.es, &c.ed).unwrap();
        let bw = warp_mask_nearest(&c.ed_bloodpool, &reg.full_scale().deformation).unwrap();
        let ww = warp_mask_nearest(&c.ed_wall, &reg.full_scale().deformation).unwrap();
        let d1 = dreg_core::metrics::dice(&bw, &c.es_bloodpool).unwrap();
        let d2 = dreg_core::metrics::dice(&ww, &c.es_wall).unwrap();
        dice += (d1 + d2) / 2.0 / test.len() as f64;
    }
    // transports: mixed donors (3 HYP + 2 DIL), 5 NORM recipients
    let hyp: Vec<_> = test.iter().filter(|c| c.class == PhantomClass::Hyp).take(3).collect();
    let dil: Vec<_> = test.iter().filter(|c| c.class == PhantomClass::Dil).take(2).collect();
    let recipients: Vec<_> = test.iter().filter(|c| c.class == PhantomClass::Norm).take(5).collect();
    let mut diffs = Vec::new();
    let mut dil_diffs = Vec::new();
    for donor in hyp.iter().chain(dil.iter()) {
        let reg = model.register(&donor.es, &donor.ed).unwrap();
        let dw = warp_mask_nearest(&donor.ed_bloodpool, &reg.full_scale().deformation).unwrap();
        let ef1 = ejection_fraction(&donor.ed_bloodpool, &dw).unwrap();
        for r in &recipients {
            let tr = transport(model, &donor.es, &donor.ed, &r.ed).unwrap();
            let rw = warp_mask_nearest(&r.ed_bloodpool, &tr.full_scale().deformation).unwrap();
            let ef2 = ejection_fraction(&r.ed_bloodpool, &rw).unwrap();
            diffs.push((ef1 - ef2).abs());
            if donor.class == PhantomClass::Dil {
                dil_diffs.push((ef1 - ef2).abs());
            }
        }
    }
    let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let dil_mean: f64 = dil_diffs.iter().sum::<f64>() / dil_diffs.len().max(1) as f64;
    // directional: HYP donor raises, DIL donor lowers recipient EF vs self-reg
    let r0 = recipients[0];
    let selfreg = model.register(&r0.es, &r0.ed).unwrap();
    let sw = warp_mask_nearest(&r0.ed_bloodpool, &selfreg.full_scale().deformation).unwrap();
    let ef_self = ejection_fraction(&r0.ed_bloodpool, &sw).unwrap();
    let tr_h = transport(model, &hyp[0].es, &hyp[0].ed, &r0.ed).unwrap();
    let hw = warp_mask_nearest(&r0.ed_bloodpool, &tr_h.full_scale().deformation).unwrap();
    let ef_h = ejection_fraction(&r0.ed_bloodpool, &hw).unwrap();
    let tr_d = transport(model, &dil[0].es, &dil[0].ed, &r0.ed).unwrap();
    let dw2 = warp_mask_nearest(&r0.ed_bloodpool, &tr_d.full_scale().deformation).unwrap();
    let ef_d = ejection_fraction(&r0.ed_bloodpool, &dw2).unwrap();
    // z stats on training codes (one draw per case)
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
    let train_cases = ds.split(Split::Train);
    let d = model.config().latent_dim;
    let zs: Vec<Vec<f64>> = train_cases.iter().map(|c| {
        let q = model.encode(&c.es, &c.ed).unwrap();
        let eps: Vec<f64> = (0..d).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        reparametrize(&q, &eps).0
    }).collect();
    let n = zs.len() as f64;
    let (mut mam, mut mv) = (0.0, 0.0);
    for i in 0..d {
        let m: f64 = zs.iter().map(|z| z[i]).sum::<f64>() / n;
        let v: f64 = zs.iter().map(|z| (z[i] - m) * (z[i] - m)).sum::<f64>() / (n - 1.0);
        mam += m.abs() / d as f64;
        mv += v / d as f64;
    }
    // probe
    let all: Vec<_> = probe.cases.iter().collect();
    let codes = encode_cases(model, &all).unwrap();
    let acc = cross_validated_accuracy(&codes, 10, &ProbeConfig::default()).unwrap();
    println!("{tag}: dice={dice:.3} transport={mean:.3} (dil {dil_mean:.3}) dir self/hyp/dil={ef_self:.3}/{ef_h:.3}/{ef_d:.3} zstats=({mam:.3},{mv:.3}) probe={acc:.3}");
}

fn main() {
    let ds = Dataset::load(Path::new("/tmp/full/data")).unwrap();
    let probe = Dataset::load(Path::new("/tmp/full/probe_data")).unwrap();
    let args: Vec<String> = std::env::args().collect();
    let lambda: f64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let cap: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4.0);
    let net = NetworkConfig { velocity_cap: cap, ..NetworkConfig::default() };
    let mut model = ModelParams::init(net, 64, 64, dreg_core::seeding::derive(11, 3, 0)).unwrap();
    let mut adam = AdamState::new(model.params());
    let loss_cfg = LossConfig { lambda, ..LossConfig::default() };
    let cfg = TrainConfig { epochs, seed: 11, ..TrainConfig::default() };
    train(&mut model, &mut adam, &ds, &loss_cfg, &cfg, 0, None).unwrap();
    measure(&model, &ds, &probe, &format!("lambda={lambda} epochs={epochs}"));
}
