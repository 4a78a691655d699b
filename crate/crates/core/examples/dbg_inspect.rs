use upil_core::dataio::{generate_confounded, reshuffle_attrs, split, SyntheticSpec};
use upil_core::faireval::evaluate;
use upil_core::trainer::{train, Ablation, TrainConfig};

fn align(assignment: &[usize], tags: &[usize]) -> f64 {
    let n = assignment.len();
    let agree = assignment.iter().zip(tags).filter(|(&a, &t)| a == t).count();
    (agree.max(n - agree)) as f64 / n as f64
}

fn main() {
    let mut spec = SyntheticSpec::default();
    spec.seed = 1001;
    let (ds, meta) = generate_confounded(&spec).unwrap();
    let (tr, va, te) = split(&ds, (0.6, 0.1, 0.3), spec.seed).unwrap();
    let mut meta0 = meta.clone();
    for a in &mut meta0.spec.attributes { a.confound_strength = 0.0; }
    let te0 = reshuffle_attrs(&te, &meta0, spec.seed + 77).unwrap();

    let domain: Vec<usize> = tr.instances().iter().map(|i| i.attrs["domain"][1..].parse().unwrap()).collect();
    let label: Vec<usize> = tr.labels().iter().map(|&l| l as usize).collect();
    let plat_half: Vec<usize> = tr.instances().iter().map(|i| {
        let g: usize = i.attrs["platform"][1..].parse().unwrap();
        (g >= 2) as usize
    }).collect();
    let plat_parity: Vec<usize> = tr.instances().iter().map(|i| {
        let g: usize = i.attrs["platform"][1..].parse().unwrap();
        g % 2
    }).collect();

    let cfg = TrainConfig { seed: spec.seed, max_epochs: 60, ablation: Ablation::Full, ..Default::default() };
    let out = train(&tr, &va, &cfg).unwrap();
    println!("epochs {} best {} registry {}", out.history.epochs.len(), out.history.best_epoch, out.registry.len());
    for e in out.registry.entries() {
        println!("  ep {:3} score {:.4} | dom {:.3} lab {:.3} pHalf {:.3} pParity {:.3} | sizes {}/{}",
            e.epoch, e.score,
            align(&e.assignment, &domain), align(&e.assignment, &label),
            align(&e.assignment, &plat_half), align(&e.assignment, &plat_parity),
            e.assignment.iter().filter(|&&v| v == 0).count(),
            e.assignment.iter().filter(|&&v| v == 1).count());
    }
    // per-epoch val and snapshot gaps: rerun trainings truncated at e epochs
    for me in [8usize, 12, 16, 20, 30, 45, 60] {
        let cfg = TrainConfig { seed: spec.seed, max_epochs: me, patience: 1000, ablation: Ablation::Full, ..Default::default() };
        let out = train(&tr, &va, &cfg).unwrap();
        let rep = evaluate(&out.bundle, &te0, 10).unwrap();
        let last_val = out.history.epochs.last().unwrap().val_accuracy;
        println!("  me {me:3} best {:2} last-val {:.4} | deconf acc {:.4} gapD {:.3} gapP {:.3}",
            out.history.best_epoch, last_val, rep.accuracy, rep.dp_gaps["domain"], rep.dp_gaps["platform"]);
    }
}
