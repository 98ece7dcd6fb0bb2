use ebipla::config::{build_decoder, build_energy, load_config};
use ebipla::eval::{generate_samples, mmd_unbiased, MmdConfig};
use ebipla::rng::NoiseStream;
use ebipla::trainer::load_checkpoint;

fn main() {
    let cfg = load_config(std::path::Path::new(&std::env::args().nth(1).unwrap())).unwrap();
    let out = std::env::args().nth(2).unwrap();
    let steps: usize = std::env::args().nth(3).unwrap().parse().unwrap();
    let (theta, _, _) = load_checkpoint(std::path::Path::new(&format!("{out}/checkpoint.bin"))).unwrap();
    let ds = ebipla::config::resolve_dataset(&cfg.dataset, None).unwrap();
    let energy = build_energy(&cfg.model.energy).unwrap();
    let decoder = build_decoder(&cfg.model.decoder).unwrap();
    let stream = NoiseStream::new(999);
    let gen = generate_samples(energy.as_ref(), decoder.as_ref(), &theta, 2000, steps, cfg.run.gamma, &stream, false).unwrap();
    let m = mmd_unbiased(&gen, ds.values(), 2, &MmdConfig::default()).unwrap();
    let n = gen.len() / 2;
    let mut r2max: f64 = 0.0;
    for i in 0..n {
        r2max = r2max.max(gen[2*i].powi(2) + gen[2*i+1].powi(2));
    }
    println!("{out} steps={steps}: mmd={m:.5} max_radius={:.2}", r2max.sqrt());
}
