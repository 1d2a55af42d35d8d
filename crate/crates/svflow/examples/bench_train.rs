use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svflow::flow::*;
use svflow::train::*;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 2; let zn = 8; let l = 100; let h = 0.01;
    let theta: Vec<Vec<f64>> = (0..l).map(|_| (0..zn).flat_map(|_| {
        let mean: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let ls: Vec<f64> = (0..d).map(|_| -0.7 + 0.1 * rng.gen::<f64>()).collect();
        mean.into_iter().chain(ls)
    }).collect()).collect();
    let phi: Vec<Vec<f64>> = (0..l).map(|_| (0..zn*d+zn).map(|_| 0.1*(rng.gen::<f64>()-0.5)).collect()).collect();
    let model = FlowModel::new(Family::Gaussian, d, zn, l, h, PosteriorMode::Untied, theta, phi).unwrap();
    let head = ClassifierHead::zeros(2, 2, true);
    let cfg = ObjectiveConfig::uniform(0.1, l, IntegrationMode::Euclidean).unwrap();
    let batch: Vec<(Vec<f64>, Option<usize>)> = (0..512).map(|i| {
        (vec![rng.gen::<f64>()*2.0-1.0, rng.gen::<f64>()*2.0-1.0], Some(i % 2))
    }).collect();
    let t0 = std::time::Instant::now();
    let n_iter = 20;
    let mut sink = 0.0;
    for _ in 0..n_iter {
        let g = svflow::train::grad_theta(&model, &cfg, Some(&head), &batch).unwrap();
        sink += g[0][0];
    }
    let dt = t0.elapsed().as_secs_f64() / n_iter as f64;
    println!("per train-step grad: {:.1} ms (sink {sink:.3e})", dt * 1e3);
    println!("10k steps estimate: {:.1} min", dt * 10_000.0 / 60.0);
}
