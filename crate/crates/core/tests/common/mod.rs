#![allow(dead_code)]

use quantdistill::distill::kd_loss_with_grad;
use quantdistill::graph::Tape;
use quantdistill::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scale and zero-point computed straight from the defining formulas in f64.
pub fn oracle_params(lo: f64, hi: f64, bits: u32) -> (f64, i64) {
    let levels = ((1u64 << bits) - 1) as f64;
    let half = (1u64 << (bits - 1)) as f64;
    let s = (hi - lo) / levels;
    let z = (lo * levels / (hi - lo) + half).round_ties_even() as i64;
    (s, z)
}

pub fn oracle_code(x: f64, s: f64, z: i64, bits: u32) -> i64 {
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    ((x / s - z as f64).round_ties_even() as i64).clamp(lo, hi)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Largest elementwise deviation of `analytic` from `numeric`, relative to
/// the largest numeric entry.
pub fn max_rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / scale)
        .fold(0.0, f64::max)
}

fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn linear_objective(x: &[f64], w: &[f64], b: &[f64], r: &[f64], m: usize, k: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let mut acc = b[j];
            for p in 0..k {
                acc += x[i * k + p] * w[j * k + p];
            }
            total += r[i * n + j] * acc;
        }
    }
    total
}

/// Linear layer gradients against finite differences of an f64 reference.
/// Returns the worst relative error over x, w and b.
pub fn check_linear(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (m, k, n) = (g.random_range(1..5), g.random_range(1..6), g.random_range(1..5));
    let x = random_tensor(&mut g, &[m, k], 1.0);
    let w = random_tensor(&mut g, &[n, k], 1.0);
    let b = random_tensor(&mut g, &[n], 1.0);
    let r = random_tensor(&mut g, &[m, n], 1.0);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (tape.input(x.clone()), tape.param(0, w.clone()), tape.param(1, b.clone()));
    let out = tape.linear(vx, vw, vb).unwrap();
    let grads = tape.backward(out, r.clone()).unwrap();
    let (xs, ws, bs, rs) = (to_f64(&x), to_f64(&w), to_f64(&b), to_f64(&r));
    let h = 1e-4;
    let fx = central_diff(&xs, h, |v| linear_objective(v, &ws, &bs, &rs, m, k, n));
    let fw = central_diff(&ws, h, |v| linear_objective(&xs, v, &bs, &rs, m, k, n));
    let fb = central_diff(&bs, h, |v| linear_objective(&xs, &ws, v, &rs, m, k, n));
    max_rel_error(grads.wrt(vx).unwrap().data(), &fx)
        .max(max_rel_error(grads.param(0).unwrap().data(), &fw))
        .max(max_rel_error(grads.param(1).unwrap().data(), &fb))
}

fn normalize_objective(x: &[f64], r: &[f64], d: usize) -> f64 {
    x.chunks(d)
        .zip(r.chunks(d))
        .map(|(row, rr)| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().zip(rr).map(|(v, q)| q * v / norm).sum::<f64>()
        })
        .sum()
}

pub fn check_l2_normalize(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (m, d) = (g.random_range(1..5), g.random_range(2..7));
    let mut x = random_tensor(&mut g, &[m, d], 1.0);
    // keep rows well away from the origin
    for v in x.data_mut() {
        *v += v.signum() * 0.5;
    }
    let r = random_tensor(&mut g, &[m, d], 1.0);
    let mut tape = Tape::new();
    let vx = tape.input(x.clone());
    let y = tape.l2_normalize(vx).unwrap();
    let grads = tape.backward(y, r.clone()).unwrap();
    let rs = to_f64(&r);
    let fx = central_diff(&to_f64(&x), 1e-5, |v| normalize_objective(v, &rs, d));
    max_rel_error(grads.wrt(vx).unwrap().data(), &fx)
}

pub fn kd_reference(q: &[f64], t: &[f64], d: usize) -> f64 {
    let m = q.len() / d;
    let cos: f64 = q
        .chunks(d)
        .zip(t.chunks(d))
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        })
        .sum();
    1.0 - cos / m as f64
}

pub fn check_kd_loss(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (m, d) = (g.random_range(1..6), g.random_range(2..9));
    let q = random_tensor(&mut g, &[m, d], 1.0);
    let t = random_tensor(&mut g, &[m, d], 1.0);
    let (loss, grad) = kd_loss_with_grad(&q, &t).unwrap();
    let (qs, ts) = (to_f64(&q), to_f64(&t));
    assert!((loss as f64 - kd_reference(&qs, &ts, d)).abs() < 1e-6);
    let fq = central_diff(&qs, 1e-5, |v| kd_reference(v, &ts, d));
    max_rel_error(grad.data(), &fq)
}
