use upil_core::losses::unfair_objective_hard;
use upil_core::numerics::Tensor2;
use upil_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;

// Enumerate all halfspace partitions in 2-d (directions through point pairs)
fn linear_partitions(x: &Tensor2) -> Vec<Vec<usize>> {
    let m = x.rows();
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i == j { continue; }
            // normal = rotate(x_j - x_i), bias through midpoints scanned
            let dx = x.get(j,0) - x.get(i,0);
            let dy = x.get(j,1) - x.get(i,1);
            let (nx, ny) = (-dy, dx);
            let mut scores: Vec<f64> = (0..m).map(|r| nx*x.get(r,0) + ny*x.get(r,1)).collect();
            let mut sorted = scores.clone();
            sorted.sort_by(|a,b| a.partial_cmp(b).unwrap());
            for t in 0..m-1 {
                let thr = 0.5*(sorted[t]+sorted[t+1]);
                let a: Vec<usize> = scores.iter().map(|&s| if s > thr {1} else {0}).collect();
                out.push(a);
            }
            let _ = &mut scores;
        }
    }
    out.sort();
    out.dedup();
    out
}

fn main() {
    let m = 12;
    for seed in 0..5u64 {
        let mut rng = rng::substream(seed, 42);
        let mut x = Tensor2::zeros(m, 2);
        let mut y = Vec::new();
        for i in 0..m {
            let g = i % 2;
            let label = if i < 10 { g as u8 } else { (1 - g) as u8 };
            x.set(i, 0, if g == 0 { 1.0 } else { -1.0 } + rng.random_range(-0.1..0.1));
            x.set(i, 1, 0.3 * label as f64 + rng.random_range(-0.1..0.1));
            y.push(label);
        }
        let score = |a: &[usize]| unfair_objective_hard(&x, &y, a, 2, 0.5, 0.1).unwrap().objective;
        // linear max
        let lin = linear_partitions(&x);
        let lin_max = lin.iter().map(|a| score(a)).fold(f64::NEG_INFINITY, f64::max);
        // random balanced: best + median of 100
        let mut rrng = rng::substream(seed, 910);
        let mut rs: Vec<f64> = (0..100).map(|_| {
            let mut a: Vec<usize> = (0..m).map(|i| i % 2).collect();
            a.shuffle(&mut rrng);
            score(&a)
        }).collect();
        rs.sort_by(|a,b| a.partial_cmp(b).unwrap());
        println!("seed {seed}: linear-max {lin_max:.4} | rand median {:.4} best {:.4} | #linear {}",
            rs[50], rs[99], lin.len());
    }
}
