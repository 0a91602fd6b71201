//! Per-task latent rotations updated to align task gradients.
//!
//! Task `k` sees `R_k z`. Given `u_k`, the gradient of its loss w.r.t. the
//! rotated latent, the shared latent receives `x_k = R_k^T u_k`. Each step
//! raises `sum_k cos(x_k, v)` with `v` the (detached) mean of the `x_k`, by
//! Riemannian ascent on SO(L): `R_k <- R_k expm(eta * skew(R_k^T G_k))`.

use ndarray::Array2;

use crate::model::{LatentGrads, Tensor};

pub const ROTOGRAD_ETA: f64 = 0.05;
const TINY: f64 = 1e-12;

/// Matrix exponential by scaling and squaring a Taylor series.
pub fn expm(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let norm = a
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let b = a / 2f64.powi(squarings);
    let mut term = Array2::<f64>::eye(n);
    let mut out = Array2::<f64>::eye(n);
    for k in 1..=18 {
        term = term.dot(&b) / k as f64;
        out += &term;
    }
    for _ in 0..squarings {
        out = out.dot(&out);
    }
    out
}

/// `max |R^T R - I|`.
pub fn orthogonality_error(r: &Array2<f64>) -> f64 {
    let g = r.t().dot(r) - Array2::<f64>::eye(r.nrows());
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn column(t: &Tensor, n: usize) -> Vec<f64> {
    t.sample_vector(n)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec_t(r: &Array2<f64>, u: &[f64]) -> Vec<f64> {
    (0..r.ncols())
        .map(|j| (0..r.nrows()).map(|i| r[[i, j]] * u[i]).sum())
        .collect()
}

/// Mean over samples and tasks of `cos(R_k^T u_k, v)`.
pub fn alignment(rotations: &[Array2<f64>], task: &[Tensor]) -> f64 {
    let n = task[0].n;
    let mut total = 0.0;
    let mut count = 0;
    for s in 0..n {
        let xs: Vec<Vec<f64>> = rotations
            .iter()
            .zip(task)
            .map(|(r, t)| mat_vec_t(r, &column(t, s)))
            .collect();
        let v = mean(&xs);
        let nv = norm(&v);
        for x in &xs {
            let nx = norm(x);
            if nx > TINY && nv > TINY {
                total += dot(x, &v) / (nx * nv);
                count += 1;
            }
        }
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

fn mean(xs: &[Vec<f64>]) -> Vec<f64> {
    let l = xs[0].len();
    (0..l)
        .map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64)
        .collect()
}

/// One alignment step on every rotation; returns the Frobenius norm of the
/// summed generators (0 when the task gradients already agree). With fewer
/// than two tasks nothing changes.
pub fn rotograd_update(rotations: &mut [Array2<f64>], grads: &LatentGrads, eta: f64) -> f64 {
    let k = rotations.len().min(grads.task.len());
    if k < 2 {
        return 0.0;
    }
    let l = rotations[0].nrows();
    let n = grads.task[0].n;
    let mut g: Vec<Array2<f64>> = vec![Array2::zeros((l, l)); k];
    for s in 0..n {
        let us: Vec<Vec<f64>> = grads.task[..k].iter().map(|t| column(t, s)).collect();
        let xs: Vec<Vec<f64>> = rotations
            .iter()
            .zip(&us)
            .map(|(r, u)| mat_vec_t(r, u))
            .collect();
        let v = mean(&xs);
        let nv = norm(&v);
        if nv < TINY {
            continue;
        }
        for t in 0..k {
            let nx = norm(&xs[t]);
            if nx < TINY {
                continue;
            }
            let cos = dot(&xs[t], &v) / (nx * nv);
            let grad_x: Vec<f64> = xs[t]
                .iter()
                .zip(&v)
                .map(|(x, vv)| vv / (nx * nv) - cos * x / (nx * nx))
                .collect();
            for i in 0..l {
                for j in 0..l {
                    g[t][[i, j]] += us[t][i] * grad_x[j] / n as f64;
                }
            }
        }
    }
    let mut magnitude = 0.0;
    for (r, gt) in rotations.iter_mut().zip(&g) {
        let m = r.t().dot(gt);
        let omega = (&m - &m.t()) / 2.0;
        magnitude += omega.iter().map(|v| v * v).sum::<f64>();
        *r = r.dot(&expm(&(omega * eta)));
    }
    magnitude.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_a_plane_rotation() {
        let theta: f64 = 2.7;
        let a = ndarray::array![[0.0, -theta], [theta, 0.0]];
        let e = expm(&a);
        let expected = ndarray::array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
        assert!((&e - &expected).iter().all(|d| d.abs() < 1e-12));
        assert!(orthogonality_error(&e) < 1e-12);
    }

    fn grads(fields: &[Vec<[f64; 2]>]) -> LatentGrads {
        let n = fields[0].len();
        let task = fields
            .iter()
            .map(|f| {
                let mut data = vec![0.0; 2 * n];
                for (s, g) in f.iter().enumerate() {
                    data[s] = g[0];
                    data[n + s] = g[1];
                }
                Tensor::from_data(2, n, 1, 1, data)
            })
            .collect();
        LatentGrads {
            latent: Tensor::zeros(2, n, 1, 1),
            task,
        }
    }

    #[test]
    fn identical_gradients_do_not_rotate() {
        let mut rs = vec![Array2::eye(2); 2];
        let field = vec![[1.0, 2.0], [-0.5, 0.3]];
        let step = rotograd_update(&mut rs, &grads(&[field.clone(), field]), ROTOGRAD_ETA);
        assert!(step < 1e-12);
        assert!(rs
            .iter()
            .all(|r| (r - &Array2::<f64>::eye(2)).iter().all(|d| d.abs() < 1e-12)));
    }

    #[test]
    fn single_task_is_a_no_op() {
        let mut rs = vec![Array2::eye(2)];
        assert_eq!(
            rotograd_update(&mut rs, &grads(&[vec![[1.0, 0.0]]]), ROTOGRAD_ETA),
            0.0
        );
    }

    #[test]
    fn antipodal_fields_align() {
        let a: Vec<[f64; 2]> = (0..8)
            .map(|i| {
                let t = i as f64 * 0.3;
                [t.cos(), t.sin() + 0.2]
            })
            .collect();
        let b: Vec<[f64; 2]> = a.iter().map(|g| [-g[0] + 0.01, -g[1]]).collect();
        let g = grads(&[a, b]);
        let mut rs = vec![Array2::eye(2); 2];
        let mut last = alignment(&rs, &g.task);
        for _ in 0..50 {
            rotograd_update(&mut rs, &g, ROTOGRAD_ETA);
            let now = alignment(&rs, &g.task);
            assert!(now > last, "{now} <= {last}");
            last = now;
            for r in &rs {
                assert!(orthogonality_error(r) < 1e-5);
                assert!((r[[0, 0]] * r[[1, 1]] - r[[0, 1]] * r[[1, 0]] - 1.0).abs() < 1e-4);
            }
        }
    }
}
