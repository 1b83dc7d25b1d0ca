// scratch kernel timing (not part of the repo)
use std::hint::black_box;
use std::time::Instant;

fn bench(name: &str, f: impl Fn(&[f64], &[f64], usize, usize, usize, &mut [f64]), m: usize, k: usize, n: usize, reps: usize) {
    let (m, k, n) = (black_box(m), black_box(k), black_box(n));
    let a: Vec<f64> = (0..m*k).map(|i| (i as f64 * 0.001).sin()).collect();
    let b: Vec<f64> = (0..k*n).map(|i| (i as f64 * 0.002).cos()).collect();
    let mut c = vec![0.0; m*n];
    f(&a, &b, m, k, n, &mut c);
    let t0 = Instant::now();
    for _ in 0..reps { f(&a, &b, m, k, n, &mut c); }
    let dt = t0.elapsed().as_secs_f64();
    println!("{name} [{m}x{k}]x[{k}x{n}]: {:.2} GFLOP/s (sink {:.3})", 2.0 * (m*k*n) as f64 * reps as f64 / dt / 1e9, c[0]);
}

fn main() {
    for (m, k, n, reps) in [(69usize, 128usize, 512usize, 3000usize), (213, 128, 512, 1000), (69, 256, 1024, 800), (128, 69, 69, 8000), (69, 128, 80, 8000), (8, 128, 128, 20000)] {
        bench("mm   ", memlab_gemm::matmul_mm, m, k, n, reps);
        bench("mine ", memlab_gemm::matmul, m, k, n, reps);
    }
}
