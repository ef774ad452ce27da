//! Preconditioned conjugate gradients for the symmetric cell operators.

use crate::error::{Error, Result};
use crate::field::dot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Stop when `||r|| <= rel_tol * ||b||` (Euclidean norms).
    pub rel_tol: f64,
    /// Also stop when `||r|| <= abs_tol`.
    pub abs_tol: f64,
    pub max_iters: usize,
    /// Work in the zero-mean subspace (singular Neumann operators).
    pub zero_mean: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            rel_tol: 1e-12,
            abs_tol: 1e-300,
            max_iters: 20_000,
            zero_mean: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final residual norm `||b - A x||`.
    pub residual: f64,
}

fn project(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `A x = b` for symmetric positive (semi)definite `A` given as a
/// matrix-free `apply(x, out)`, with Jacobi preconditioner `diag`.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x0: Option<&[f64]>,
    opts: CgOptions,
) -> Result<CgResult> {
    let n = b.len();
    let mut b = b.to_vec();
    if opts.zero_mean {
        project(&mut b);
    }
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    if opts.zero_mean {
        project(&mut x);
    }
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if opts.zero_mean {
        project(&mut r);
    }
    let bnorm = dot(&b, &b).sqrt();
    let target = (opts.rel_tol * bnorm).max(opts.abs_tol);
    let precond = |r: &[f64], z: &mut [f64]| {
        for ((z, r), d) in z.iter_mut().zip(r).zip(diag) {
            *z = if *d > 0.0 { r / d } else { *r };
        }
        if opts.zero_mean {
            project(z);
        }
    };
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rnorm = dot(&r, &r).sqrt();
    let mut it = 0;
    while rnorm > target {
        if it >= opts.max_iters {
            return Err(Error::NotConverged {
                solver: "conjugate gradient",
                iterations: it,
                residual: rnorm,
            });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if opts.zero_mean {
            project(&mut r);
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rnorm = dot(&r, &r).sqrt();
        it += 1;
    }
    // Report the true residual rather than the recurrence.
    apply(&x, &mut ax);
    let mut res: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if opts.zero_mean {
        project(&mut res);
    }
    Ok(CgResult {
        x,
        iterations: it,
        residual: dot(&res, &res).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal() {
        let n = 50;
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                out[i] = 3.0 * x[i] - l - r;
            }
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let res = pcg(apply, &vec![3.0; n], &b, None, CgOptions::default()).unwrap();
        let mut ax = vec![0.0; n];
        apply(&res.x, &mut ax);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_neumann_chain() {
        let n = 40;
        let apply = |x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..n - 1 {
                let f = x[i + 1] - x[i];
                out[i] -= f;
                out[i + 1] += f;
            }
        };
        let mut b: Vec<f64> = (0..n).map(|i| (0.3 * i as f64).cos()).collect();
        let m = b.iter().sum::<f64>() / n as f64;
        b.iter_mut().for_each(|v| *v -= m);
        let opts = CgOptions { zero_mean: true, ..CgOptions::default() };
        let res = pcg(apply, &vec![2.0; n], &b, None, opts).unwrap();
        assert!(res.residual < 1e-10);
        assert!(res.x.iter().sum::<f64>().abs() < 1e-10);
    }
}
