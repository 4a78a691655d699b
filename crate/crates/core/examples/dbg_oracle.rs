use upil_core::losses::unfair_objective_hard;
use upil_core::numerics::Tensor2;
use upil_core::partitioner::brute_force_oracle;
use upil_core::rng;
use rand::Rng;

fn main() {
    let m = 12;
    for seed in 0..4u64 {
        let mut rng = rng::substream(seed, 42);
        let mut x = Tensor2::zeros(m, 2);
        let mut y = Vec::new();
        let mut cluster = Vec::new();
        for i in 0..m {
            let g = i % 2; // confounder cluster
            // rho=0.83: 10 aligned, 2 minority flipped
            let label = if i < 10 { g as u8 } else { (1 - g) as u8 };
            x.set(i, 0, if g == 0 { 1.0 } else { -1.0 } + rng.random_range(-0.1..0.1));
            x.set(i, 1, 0.3 * label as f64 + rng.random_range(-0.1..0.1));
            y.push(label);
            cluster.push(g);
        }
        let (best, score) = brute_force_oracle(&x, &y, 2, 0.5, 0.1).unwrap();
        let by_cluster: Vec<usize> = cluster.clone();
        let sc_cluster = unfair_objective_hard(&x, &y, &by_cluster, 2, 0.5, 0.1).unwrap().objective;
        let by_label: Vec<usize> = y.iter().map(|&v| v as usize).collect();
        let sc_label = unfair_objective_hard(&x, &y, &by_label, 2, 0.5, 0.1).unwrap().objective;
        let all_one = vec![0usize; m];
        let sc_one = unfair_objective_hard(&x, &y, &all_one, 2, 0.5, 0.1).unwrap().objective;
        println!("seed {seed}: oracle {score:.4} | by-cluster {sc_cluster:.4} | by-label {sc_label:.4} | lump {sc_one:.4}");
        println!("  labels  {:?}", y);
        println!("  cluster {:?}", cluster);
        println!("  oracle  {:?}  sizes {}/{}", best, best.iter().filter(|&&v| v==0).count(), best.iter().filter(|&&v| v==1).count());
        // how does oracle assignment correlate with label / cluster?
        let agree_label = best.iter().zip(&y).filter(|(&a, &l)| a == l as usize).count();
        let agree_cluster = best.iter().zip(&cluster).filter(|(&a, &c)| a == c).count();
        println!("  agreement with label {}/{m}, with cluster {}/{m}", agree_label.max(m-agree_label), agree_cluster.max(m-agree_cluster));
    }
}
