use std::collections::BTreeMap;
use upil_core::dataio::{generate_confounded, reshuffle_attrs, split, SyntheticSpec};
use upil_core::faireval::evaluate;
use upil_core::trainer::{train, Ablation, TrainConfig};

fn median(v: &mut Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn run(noise: f64, warmup: usize, max_epochs: usize, tau: f64, seeds: u64) {
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut gd: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut gp: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..seeds {
        let mut spec = SyntheticSpec::default();
        spec.noise_sigma = noise;
        spec.seed = 1000 + seed;
        let (ds, meta) = generate_confounded(&spec).unwrap();
        let (tr, va, te) = split(&ds, (0.6, 0.1, 0.3), spec.seed).unwrap();
        let mut meta0 = meta.clone();
        for a in &mut meta0.spec.attributes { a.confound_strength = 0.0; }
        let te0 = reshuffle_attrs(&te, &meta0, spec.seed + 77).unwrap();
        for (name, ab) in [("full", Ablation::Full), ("erm", Ablation::Erm)] {
            let cfg = TrainConfig {
                seed: spec.seed, warmup_epochs: warmup, max_epochs, tau,
                ablation: ab, ..Default::default()
            };
            let out = train(&tr, &va, &cfg).unwrap();
            let rep = evaluate(&out.bundle, &te0, 10).unwrap();
            acc.entry(name).or_default().push(rep.accuracy);
            gd.entry(name).or_default().push(rep.dp_gaps["domain"]);
            gp.entry(name).or_default().push(rep.dp_gaps["platform"]);
        }
    }
    let f = median(&mut acc["full"].clone());
    let e = median(&mut acc["erm"].clone());
    println!("noise {noise} wu {warmup} me {max_epochs} tau {tau}: full {f:.3} erm {e:.3} (d {:+.3}) | gapD {:.3}/{:.3} | gapP {:.3}/{:.3}",
        f - e,
        median(&mut gd["full"].clone()), median(&mut gd["erm"].clone()),
        median(&mut gp["full"].clone()), median(&mut gp["erm"].clone()));
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args[1].parse().unwrap();
    let warmup: usize = args[2].parse().unwrap();
    let tau: f64 = args[3].parse().unwrap();
    let me: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(60);
    let seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3);
    run(noise, warmup, me, tau, seeds);
}
