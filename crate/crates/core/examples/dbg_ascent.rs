use upil_core::losses::{unfair_objective_hard, unfair_objective_soft};
use upil_core::models::{init_bundle, ModelConfig};
use upil_core::numerics::{sgd_step, softmax_backward, softmax_rows, SgdConfig, Tensor2};
use upil_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;

fn run(m: usize, scale: f64, lr: f64, steps: usize, seed: u64, sharpen: f64) {
    let mut rng = rng::substream(seed, 909);
    let mut x = Tensor2::zeros(m, 3);
    let mut y = Vec::with_capacity(m);
    for i in 0..m {
        let c = if i % 2 == 0 { scale } else { -scale };
        let label = rng.random_range(0..2) as u8;
        x.set(i, 0, c + rng.random_range(-0.2..0.2));
        x.set(i, 1, 0.3 * label as f64 + rng.random_range(-0.2..0.2));
        x.set(i, 2, rng.random_range(-0.2..0.2));
        y.push(label);
    }
    let cfg = ModelConfig { feature_dim: 3, hidden_widths: vec![], rep_dim: 3, k: 2 };
    let mut bundle = init_bundle(&cfg, seed).unwrap();
    bundle.set_frozen(true, true, false);
    let opt = SgdConfig::new(lr);
    let mut best_seen = f64::NEG_INFINITY;
    let mut final_hard = 0.0;
    for step in 0..steps {
        let logits = {
            let mut l = bundle.partition_logits(&x).unwrap();
            if sharpen > 0.0 {
                let t = 1.0 + sharpen * (step as f64 / steps as f64);
                for v in l.data_mut() { *v *= t; }
            }
            l
        };
        let p = softmax_rows(&logits).unwrap();
        let (_, dp) = unfair_objective_soft(&x, &y, &p, 0.5, 0.1).unwrap();
        let dl = softmax_backward(&p, &dp).unwrap();
        let (mut grads, _) = bundle.partition_head_backward(&x, &dl).unwrap();
        let hard: Vec<usize> = (0..m).map(|r| if p.get(r,1) > p.get(r,0) {1} else {0}).collect();
        let hs = unfair_objective_hard(&x, &y, &hard, 2, 0.5, 0.1).unwrap().objective;
        best_seen = best_seen.max(hs);
        final_hard = hs;
        for g in &mut grads { for v in g.data_mut() { *v = -*v; } }
        sgd_step(&mut [&mut bundle.partition_head], &[grads], &opt).unwrap();
    }
    let mut rrng = rng::substream(seed, 910);
    let mut best_rand = f64::NEG_INFINITY;
    let mut rand_scores = Vec::new();
    for _ in 0..100 {
        let mut a: Vec<usize> = (0..m).map(|i| i % 2).collect();
        a.shuffle(&mut rrng);
        let s = unfair_objective_hard(&x, &y, &a, 2, 0.5, 0.1).unwrap().objective;
        rand_scores.push(s);
        best_rand = best_rand.max(s);
    }
    rand_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med_rand = rand_scores[50];
    println!("m {m} sc {scale} lr {lr} st {steps} sh {sharpen} seed {seed}: final {final_hard:.4} seen {best_seen:.4} rnd-med {med_rand:.4} rnd-best {best_rand:.4}  {}",
        if best_seen >= best_rand {"WIN"} else if best_seen >= med_rand {"beat-median"} else {"LOSE"});
}

fn main() {
    for seed in 0..3 { run(64, 1.5, 0.3, 300, seed, 0.0); }
    for seed in 0..3 { run(64, 1.5, 0.3, 300, seed, 8.0); }
    for seed in 0..3 { run(64, 1.5, 1.0, 300, seed, 8.0); }
}
