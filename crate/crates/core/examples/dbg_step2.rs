use upil_core::losses::unfair_objective_hard;
use upil_core::models::{init_bundle, ModelConfig};
use upil_core::numerics::Tensor2;
use upil_core::partitioner::{unfair_partition_step, PartitionStepConfig};
use upil_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;

fn main() {
    for m in [64usize, 200, 600] {
        for (steps, lr) in [(60, 0.5), (100, 0.5), (100, 1.0), (200, 1.0)] {
            let mut step_meds = Vec::new();
            let mut rand_best_meds = Vec::new();
            let mut rand_med_meds = Vec::new();
            for seed in 0..5u64 {
                let mut rng = rng::substream(seed, 42);
                let mut x = Tensor2::zeros(m, 3);
                let mut y = Vec::new();
                let n_min = m / 6;
                for i in 0..m {
                    let g = i % 2;
                    let label = if i < m - n_min { g as u8 } else { (1 - g) as u8 };
                    x.set(i, 0, if g == 0 { 1.0 } else { -1.0 } + rng.random_range(-0.1..0.1));
                    x.set(i, 1, 0.3 * label as f64 + rng.random_range(-0.1..0.1));
                    x.set(i, 2, rng.random_range(-0.1..0.1));
                    y.push(label);
                }
                let cfg = ModelConfig { feature_dim: 3, hidden_widths: vec![], rep_dim: 3, k: 2 };
                let mut bundle = init_bundle(&cfg, seed).unwrap();
                bundle.set_frozen(true, true, false);
                let sc = PartitionStepConfig { ascent_steps: steps, lr, batch_size: 256, seed, ..Default::default() };
                let p = unfair_partition_step(&mut bundle, &x, &y, &sc).unwrap();
                let mut rrng = rng::substream(seed, 910);
                let mut rs: Vec<f64> = (0..100).map(|_| {
                    let mut a: Vec<usize> = (0..m).map(|i| i % 2).collect();
                    a.shuffle(&mut rrng);
                    unfair_objective_hard(&x, &y, &a, 2, 0.5, 0.1).unwrap().objective
                }).collect();
                rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                step_meds.push(p.score);
                rand_med_meds.push(rs[50]);
                rand_best_meds.push(rs[99]);
            }
            let med = |v: &mut Vec<f64>| { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] };
            println!("m {m:4} steps {steps:3} lr {lr:3}: step-med {:.4} rand-med {:.4} rand-best {:.4}",
                med(&mut step_meds), med(&mut rand_med_meds), med(&mut rand_best_meds));
        }
    }
}
