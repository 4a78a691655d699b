use std::collections::BTreeMap;
use upil_core::dataio::{generate_confounded, reshuffle_attrs, split, SyntheticSpec};
use upil_core::faireval::evaluate;
use upil_core::trainer::{train, Ablation, TrainConfig};

fn median(v: &mut Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let max_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let variants: Vec<Ablation> = vec![Ablation::Full, Ablation::Erm];

    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut gap_d: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut gap_p: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut epochs_run: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let t0 = std::time::Instant::now();
    for seed in 0..5u64 {
        let mut spec = SyntheticSpec::default();
        spec.noise_sigma = noise;
        spec.seed = 1000 + seed;
        let (ds, meta) = generate_confounded(&spec).unwrap();
        let (tr, va, te) = split(&ds, (0.6, 0.1, 0.3), spec.seed).unwrap();
        let mut meta0 = meta.clone();
        for a in &mut meta0.spec.attributes {
            a.confound_strength = 0.0;
        }
        let te0 = reshuffle_attrs(&te, &meta0, spec.seed + 77).unwrap();

        for &ab in &variants {
            let cfg = TrainConfig {
                seed: spec.seed,
                max_epochs,
                ablation: ab,
                static_attr: if ab == Ablation::StaticPartition { Some("domain".into()) } else { None },
                ..Default::default()
            };
            let out = train(&tr, &va, &cfg).unwrap();
            let rep = evaluate(&out.bundle, &te0, 10).unwrap();
            let name = format!("{ab:?}");
            acc.entry(name.clone()).or_default().push(rep.accuracy);
            gap_d.entry(name.clone()).or_default().push(rep.dp_gaps["domain"]);
            gap_p.entry(name.clone()).or_default().push(rep.dp_gaps["platform"]);
            epochs_run.entry(name).or_default().push(out.history.epochs.len() as f64);
        }
    }
    println!("noise {noise} max_epochs {max_epochs} elapsed {:.1}s", t0.elapsed().as_secs_f64());
    for (name, mut a) in acc {
        let mut gd = gap_d[&name].clone();
        let mut gp = gap_p[&name].clone();
        let mut er = epochs_run[&name].clone();
        println!("{name:16} acc {:.4}  gap_domain {:.4}  gap_platform {:.4}  epochs {:.0}",
            median(&mut a), median(&mut gd), median(&mut gp), median(&mut er));
    }
}
