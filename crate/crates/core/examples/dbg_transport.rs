use dreg_core::diffeo::warp_mask_nearest;
use dreg_core::latent::{cross_validated_accuracy, encode_cases, transport, ProbeConfig};
use dreg_core::metrics::ejection_fraction;
use dreg_core::model::load_checkpoint;
use dreg_core::phantom::{Dataset, PhantomClass, Split};
use std::path::Path;

fn main() {
    let model = load_checkpoint(Path::new("/tmp/full/train/checkpoint")).unwrap().model;
    let ds = Dataset::load(Path::new("/tmp/full/data")).unwrap();
    let test = ds.split(Split::Test);

    // --- criterion 9 rehearsal: 25 cross-class transports ---
    let donors: Vec<_> = test.iter().filter(|c| c.class != PhantomClass::Norm).take(5).collect();
    let recipients: Vec<_> = test.iter().filter(|c| c.class == PhantomClass::Norm).take(5).collect();
    println!("donors: {:?}", donors.iter().map(|c| &c.id).collect::<Vec<_>>());
    println!("recipients: {:?}", recipients.iter().map(|c| &c.id).collect::<Vec<_>>());
    let mut diffs = Vec::new();
    for donor in &donors {
        let reg = model.register(&donor.es, &donor.ed).unwrap();
        let dw = warp_mask_nearest(&donor.ed_bloodpool, &reg.full_scale().deformation).unwrap();
        let ef1 = ejection_fraction(&donor.ed_bloodpool, &dw).unwrap();
        for r in &recipients {
            let tr = transport(&model, &donor.es, &donor.ed, &r.ed).unwrap();
            let rw = warp_mask_nearest(&r.ed_bloodpool, &tr.full_scale().deformation).unwrap();
            let ef2 = ejection_fraction(&r.ed_bloodpool, &rw).unwrap();
            diffs.push((ef1 - ef2).abs());
            print!("{:.3} ", (ef1 - ef2).abs());
        }
        println!(" (donor {} ef1={ef1:.3})", donor.id);
    }
    let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
    println!("mean |EF1-EF2| over {} transports: {mean:.4}", diffs.len());

    // directional check: HYP-like donor onto NORM raises recipient EF vs self-registration
    let hyp_donor = test.iter().find(|c| c.class == PhantomClass::Hyp).unwrap();
    let reg_h = model.register(&hyp_donor.es, &hyp_donor.ed).unwrap();
    let hw = warp_mask_nearest(&hyp_donor.ed_bloodpool, &reg_h.full_scale().deformation).unwrap();
    let ef_h = ejection_fraction(&hyp_donor.ed_bloodpool, &hw).unwrap();
    for r in recipients.iter().take(3) {
        let selfreg = model.register(&r.es, &r.ed).unwrap();
        let sw = warp_mask_nearest(&r.ed_bloodpool, &selfreg.full_scale().deformation).unwrap();
        let ef_self = ejection_fraction(&r.ed_bloodpool, &sw).unwrap();
        let tr = transport(&model, &hyp_donor.es, &hyp_donor.ed, &r.ed).unwrap();
        let tw = warp_mask_nearest(&r.ed_bloodpool, &tr.full_scale().deformation).unwrap();
        let ef_tr = ejection_fraction(&r.ed_bloodpool, &tw).unwrap();
        println!("recipient {}: ef_self={ef_self:.3}, ef_transport(HYP донor ef={ef_h:.3})={ef_tr:.3}", r.id);
    }

    // --- criterion 8 probe rehearsal: dedicated 3x30 probe set ---
    let probe_dir = Path::new("/tmp/full/probe_data");
    if !probe_dir.exists() {
        dreg_core::phantom::generate_dataset(30, 64, 501, probe_dir).unwrap();
    }
    let probe_ds = Dataset::load(probe_dir).unwrap();
    let all: Vec<_> = probe_ds.cases.iter().collect();
    let codes = encode_cases(&model, &all).unwrap();
    let acc = cross_validated_accuracy(&codes, 10, &ProbeConfig::default()).unwrap();
    println!("probe 10-fold CV accuracy on {} codes: {acc:.4}", codes.codes.len());

    // z statistics on training codes (one reparametrized draw per case)
    use rand::SeedableRng; use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
    let train_cases = ds.split(Split::Train);
    let d = model.config().latent_dim;
    let mut zs: Vec<Vec<f64>> = Vec::new();
    for c in &train_cases {
        let q = model.encode(&c.es, &c.ed).unwrap();
        let eps: Vec<f64> = (0..d).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        zs.push(dreg_core::model::reparametrize(&q, &eps).0);
    }
    let n = zs.len() as f64;
    let mut mean_abs_mu = 0.0; let mut mean_var = 0.0;
    for i in 0..d {
        let m: f64 = zs.iter().map(|z| z[i]).sum::<f64>() / n;
        let v: f64 = zs.iter().map(|z| (z[i] - m) * (z[i] - m)).sum::<f64>() / (n - 1.0);
        mean_abs_mu += m.abs() / d as f64;
        mean_var += v / d as f64;
    }
    println!("z stats: mean |mean_i| = {mean_abs_mu:.3}, mean var = {mean_var:.3}");
}
