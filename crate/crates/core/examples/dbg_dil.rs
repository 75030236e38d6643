use dreg_core::diffeo::warp_mask_nearest;
use dreg_core::latent::transport;
use dreg_core::metrics::ejection_fraction;
use dreg_core::model::load_checkpoint;
use dreg_core::phantom::{Dataset, PhantomClass, Split};
use std::path::Path;

fn main() {
    let model = load_checkpoint(Path::new("/tmp/full/train/checkpoint")).unwrap().model;
    let ds = Dataset::load(Path::new("/tmp/full/data")).unwrap();
    let test = ds.split(Split::Test);
    let dil: Vec<_> = test.iter().filter(|c| c.class == PhantomClass::Dil).take(3).collect();
    let recipients: Vec<_> = test.iter().filter(|c| c.class == PhantomClass::Norm).take(3).collect();
    for donor in &dil {
        let reg = model.register(&donor.es, &donor.ed).unwrap();
        let dw = warp_mask_nearest(&donor.ed_bloodpool, &reg.full_scale().deformation).unwrap();
        let ef1 = ejection_fraction(&donor.ed_bloodpool, &dw).unwrap();
        for r in &recipients {
            let tr = transport(&model, &donor.es, &donor.ed, &r.ed).unwrap();
            let rw = warp_mask_nearest(&r.ed_bloodpool, &tr.full_scale().deformation).unwrap();
            let ef2 = ejection_fraction(&r.ed_bloodpool, &rw).unwrap();
            println!("DIL donor {} (ef1={ef1:.3}) -> {}: ef2={ef2:.3}, diff={:.3}", donor.id, r.id, (ef1-ef2).abs());
        }
    }
}
