use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    n
}

/// Largest singular value by power iteration on `WᵀW`, run for exactly
/// `iters` steps from a fixed pseudo-random start.
pub fn spectral_norm_estimate(w: &Tensor<f64>, iters: usize) -> Result<f64> {
    run(w, iters.max(1), 0.0)
}

/// Power iteration until the estimate changes by less than `1e-13`
/// relative, capped at 20 000 steps.
pub fn spectral_norm(w: &Tensor<f64>) -> Result<f64> {
    run(w, 20_000, 1e-13)
}

fn run(w: &Tensor<f64>, iters: usize, tol: f64) -> Result<f64> {
    let (m, n) = w.dims2()?;
    let a = w.data();
    if a.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut u = vec![0.0; m];
    let mut sigma = 0.0;
    for _ in 0..iters {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * n..(i + 1) * n].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let next = normalize(&mut u);
        v.iter_mut().for_each(|x| *x = 0.0);
        for (i, &ui) in u.iter().enumerate() {
            for (vj, &aij) in v.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                *vj += aij * ui;
            }
        }
        let s = normalize(&mut v);
        let done = tol > 0.0 && (s - sigma).abs() <= tol * s;
        sigma = s;
        if next == 0.0 || done {
            break;
        }
    }
    Ok(sigma)
}
