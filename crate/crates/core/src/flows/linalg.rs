//! Small dense helpers for the PLU-parameterized linear maps. Matrices are
//! row-major `c x c` slices of `f64`.

use rand::Rng;
use rand_distr::StandardNormal;

/// Orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut q: Vec<f64> = (0..c * c).map(|_| rng.sample(StandardNormal)).collect();
        let mut ok = true;
        for j in 0..c {
            for k in 0..j {
                let dot: f64 = (0..c).map(|i| q[i * c + j] * q[i * c + k]).sum();
                for i in 0..c {
                    q[i * c + j] -= dot * q[i * c + k];
                }
            }
            let norm = (0..c).map(|i| q[i * c + j].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..c {
                q[i * c + j] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

/// Factors `a = P L U` with partial pivoting. `L` is unit lower triangular.
pub fn plu(a: &[f64], c: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut u = a.to_vec();
    let mut l = vec![0.0; c * c];
    let mut rows: Vec<usize> = (0..c).collect();
    for k in 0..c {
        let pivot = (k..c)
            .max_by(|&i, &j| u[i * c + k].abs().total_cmp(&u[j * c + k].abs()))
            .unwrap();
        if pivot != k {
            for j in 0..c {
                u.swap(k * c + j, pivot * c + j);
                l.swap(k * c + j, pivot * c + j);
            }
            rows.swap(k, pivot);
        }
        for i in k + 1..c {
            let f = u[i * c + k] / u[k * c + k];
            l[i * c + k] = f;
            for j in k..c {
                u[i * c + j] -= f * u[k * c + j];
            }
        }
    }
    for i in 0..c {
        l[i * c + i] = 1.0;
    }
    // rows[k] is the original row now at position k: (R a) = L U, a = R^T L U.
    let mut p = vec![0.0; c * c];
    for (k, &r) in rows.iter().enumerate() {
        p[r * c + k] = 1.0;
    }
    (p, l, u)
}

pub fn matmul(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for k in 0..c {
            let aik = a[i * c + k];
            for j in 0..c {
                out[i * c + j] += aik * b[k * c + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], c: usize) -> Vec<f64> {
    (0..c * c).map(|i| a[(i % c) * c + i / c]).collect()
}

/// Inverse of `P L U` from its factors: `U^-1 L^-1 P^T`, via triangular solves.
pub fn plu_inverse(p: &[f64], l: &[f64], u: &[f64], c: usize) -> Vec<f64> {
    let pt = transpose(p, c);
    let mut inv = vec![0.0; c * c];
    for col in 0..c {
        let mut v: Vec<f64> = (0..c).map(|i| pt[i * c + col]).collect();
        for i in 0..c {
            for k in 0..i {
                v[i] -= l[i * c + k] * v[k];
            }
        }
        for i in (0..c).rev() {
            for k in i + 1..c {
                v[i] -= u[i * c + k] * v[k];
            }
            v[i] /= u[i * c + i];
        }
        for i in 0..c {
            inv[i * c + col] = v[i];
        }
    }
    inv
}
