//! Consistency loss between uncertainty maps: L1 + gradient-L1 + a
//! down-weighted simplified SSIM term, all with analytic gradients.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Down-weight applied to the SSIM term.
pub const DEFAULT_SSIM_LAMBDA: f64 = 0.1;

/// `L1(pred, target) + L1 of forward-difference gradients (axis-averaged)
/// + lambda * (1 - SSIM3(pred, target))`, each term a voxel mean.
pub fn consistency_loss(pred: &Array3<f64>, target: &Array3<f64>, lambda: f64) -> Result<f64> {
    Ok(consistency_parts(pred, target, lambda)?.0)
}

/// Loss value plus its gradient with respect to `pred`.
pub fn consistency_loss_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    lambda: f64,
) -> Result<(f64, Array3<f64>)> {
    let (loss, grad) = consistency_parts(pred, target, lambda)?;
    Ok((loss, grad))
}

fn consistency_parts(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    lambda: f64,
) -> Result<(f64, Array3<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "consistency maps {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    let mut grad = Array3::zeros(pred.dim());

    // L1 term
    let mut l1 = 0.0;
    for ((g, &p), &t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let d = p - t;
        l1 += d.abs();
        *g += signum0(d) / n;
    }
    l1 /= n;

    // gradient term: forward differences, replicate edge (edge diff is 0),
    // axis contributions averaged
    let (nx, ny, nz) = pred.dim();
    let mut lgrad = 0.0;
    let axis_w = 1.0 / 3.0;
    for axis in 0..3 {
        let extent = [nx, ny, nz][axis];
        if extent < 2 {
            continue;
        }
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let idx = [x, y, z];
                    if idx[axis] + 1 >= extent {
                        continue;
                    }
                    let mut next = idx;
                    next[axis] += 1;
                    let dp = pred[next] - pred[idx];
                    let dt = target[next] - target[idx];
                    let d = dp - dt;
                    lgrad += axis_w * d.abs() / n;
                    let s = signum0(d) * axis_w / n;
                    grad[next] += s;
                    grad[idx] -= s;
                }
            }
        }
    }

    // SSIM term
    let (mean_ssim, ssim_grad) = ssim3_with_grad(pred, target);
    let loss = l1 + lgrad + lambda * (1.0 - mean_ssim);
    grad.zip_mut_with(&ssim_grad, |g, &sg| *g -= lambda * sg);
    Ok((loss, grad))
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Simplified structural similarity with a 3x3x3 average filter, plus the
/// gradient of its voxel mean with respect to `pred`.
///
/// Windows are clipped at the boundary; stabilising constants are
/// C1 = (0.01 L)^2 and C2 = (0.03 L)^2 with L the dynamic range of the
/// target map (unit range when the target is constant).
pub fn ssim3_with_grad(pred: &Array3<f64>, target: &Array3<f64>) -> (f64, Array3<f64>) {
    let n = pred.len() as f64;
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    for &t in target.iter() {
        t_min = t_min.min(t);
        t_max = t_max.max(t);
    }
    let range = if t_max > t_min { t_max - t_min } else { 1.0 };
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);

    let mu_x = box3(pred);
    let mu_y = box3(target);
    let xx = box3(&(pred * pred));
    let yy = box3(&(target * target));
    let xy = box3(&(pred * target));

    let dim = pred.dim();
    let mut ssim_sum = 0.0;
    let mut d_mu = Array3::zeros(dim);
    let mut d_var = Array3::zeros(dim);
    let mut d_cov = Array3::zeros(dim);
    for (idx, _) in pred.indexed_iter() {
        let (mx, my) = (mu_x[idx], mu_y[idx]);
        let sx = xx[idx] - mx * mx;
        let sy = yy[idx] - my * my;
        let sxy = xy[idx] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = sx + sy + c2;
        let denom = b1 * b2;
        ssim_sum += (a1 * a2) / denom;
        // partials of SSIM(v) wrt mu_x, sigma_x^2, sigma_xy at v
        d_mu[idx] = 2.0 * (my * a2 * b1 - mx * a1 * a2) / (b1 * b1 * b2);
        d_var[idx] = -(a1 * a2) / (b1 * b2 * b2);
        d_cov[idx] = 2.0 * a1 / denom;
    }
    let mean_ssim = ssim_sum / n;

    // chain through the window statistics via the box-filter adjoint
    let adj_mu = box3_adjoint(&d_mu);
    let adj_var = box3_adjoint(&d_var);
    let adj_var_mu = box3_adjoint(&(&d_var * &mu_x));
    let adj_cov = box3_adjoint(&d_cov);
    let adj_cov_mu = box3_adjoint(&(&d_cov * &mu_y));

    let mut grad = Array3::zeros(dim);
    for (idx, g) in grad.indexed_iter_mut() {
        *g = (adj_mu[idx]
            + 2.0 * pred[idx] * adj_var[idx]
            - 2.0 * adj_var_mu[idx]
            + target[idx] * adj_cov[idx]
            - adj_cov_mu[idx])
            / n;
    }
    (mean_ssim, grad)
}

/// 3x3x3 box mean with windows clipped at the grid boundary.
pub fn box3(src: &Array3<f64>) -> Array3<f64> {
    let (nx, ny, nz) = src.dim();
    let mut out = Array3::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut acc = 0.0;
                let mut count = 0.0;
                for u in clip(x, nx) {
                    for v in clip(y, ny) {
                        for w in clip(z, nz) {
                            acc += src[[u, v, w]];
                            count += 1.0;
                        }
                    }
                }
                out[[x, y, z]] = acc / count;
            }
        }
    }
    out
}

/// Adjoint of [`box3`]: scatters `g(v) / |window(v)|` back to each window
/// member. `box3_adjoint` is the exact transpose of the linear map `box3`.
fn box3_adjoint(g: &Array3<f64>) -> Array3<f64> {
    let (nx, ny, nz) = g.dim();
    let mut out = Array3::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let xs = clip(x, nx);
                let ys = clip(y, ny);
                let zs = clip(z, nz);
                let count = (xs.len() * ys.len() * zs.len()) as f64;
                let share = g[[x, y, z]] / count;
                for u in xs.clone() {
                    for v in ys.clone() {
                        for w in zs.clone() {
                            out[[u, v, w]] += share;
                        }
                    }
                }
            }
        }
    }
    out
}

fn clip(i: usize, n: usize) -> std::ops::Range<usize> {
    i.saturating_sub(1)..(i + 2).min(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use rand::Rng;

    fn random_map(shape: (usize, usize, usize), seed: u64, lo: f64, hi: f64) -> Array3<f64> {
        let mut rng = rng_stream(seed, 0);
        Array3::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn self_consistency_is_zero() {
        let x = random_map((5, 4, 3), 80, 0.1, 2.0);
        let loss = consistency_loss(&x, &x, DEFAULT_SSIM_LAMBDA).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
        let constant = Array3::from_elem((4, 4, 2), 0.7);
        let loss_c = consistency_loss(&constant, &constant, DEFAULT_SSIM_LAMBDA).unwrap();
        assert!(loss_c.abs() < 1e-12);
    }

    #[test]
    fn constant_offset_hits_l1_only_in_gradient_term() {
        let x = random_map((6, 5, 4), 81, 0.5, 1.5);
        let c = 0.3;
        let y = &x + c;
        let l_all = consistency_loss(&x, &y, 0.0).unwrap();
        // gradient term vanishes for a constant offset; L1 term is |c|
        assert!((l_all - c).abs() < 1e-12, "loss {l_all}");
    }

    #[test]
    fn lambda_zero_drops_ssim() {
        let x = random_map((5, 5, 3), 82, 0.1, 1.0);
        let y = random_map((5, 5, 3), 83, 0.1, 1.0);
        let with = consistency_loss(&x, &y, 0.4).unwrap();
        let without = consistency_loss(&x, &y, 0.0).unwrap();
        let (ssim, _) = ssim3_with_grad(&x, &y);
        assert!((with - without - 0.4 * (1.0 - ssim)).abs() < 1e-12);
    }

    #[test]
    fn ssim_identical_maps_is_one() {
        let x = random_map((5, 4, 4), 84, 0.2, 1.4);
        let (ssim, _) = ssim3_with_grad(&x, &x);
        assert!((ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box3_matches_naive_window_mean() {
        let x = random_map((4, 5, 3), 85, 0.0, 1.0);
        let b = box3(&x);
        // brute-force check at a corner, an edge, and the interior
        for &(cx, cy, cz) in &[(0usize, 0usize, 0usize), (1, 2, 1), (3, 4, 2)] {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for u in cx.saturating_sub(1)..(cx + 2).min(4) {
                for v in cy.saturating_sub(1)..(cy + 2).min(5) {
                    for w in cz.saturating_sub(1)..(cz + 2).min(3) {
                        acc += x[[u, v, w]];
                        cnt += 1.0;
                    }
                }
            }
            assert!((b[[cx, cy, cz]] - acc / cnt).abs() < 1e-12);
        }
    }

    #[test]
    fn box3_adjoint_is_transpose() {
        // <box(x), g> == <x, box_adjoint(g)> for random x, g
        let x = random_map((4, 3, 3), 86, -1.0, 1.0);
        let g = random_map((4, 3, 3), 87, -1.0, 1.0);
        let lhs: f64 = box3(&x).iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(box3_adjoint(&g).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = (4, 4, 3);
        let pred = random_map(shape, 88, 0.3, 1.2);
        // keep |pred - target| and gradient facets away from zero so the
        // L1 subgradients are valid derivatives at the test point
        let mut rng = rng_stream(89, 0);
        let target = pred.mapv(|p| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            p + sign * rng.gen_range(0.1..0.3)
        });
        let (_, grad) = consistency_loss_grad(&pred, &target, DEFAULT_SSIM_LAMBDA).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (li, _) in pred.indexed_iter() {
            let mut plus = pred.clone();
            plus[li] += h;
            let mut minus = pred.clone();
            minus[li] -= h;
            let fd = (consistency_loss(&plus, &target, DEFAULT_SSIM_LAMBDA).unwrap()
                - consistency_loss(&minus, &target, DEFAULT_SSIM_LAMBDA).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(grad[li].abs()).max(1e-8);
            worst = worst.max((fd - grad[li]).abs() / denom);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array3::<f64>::zeros((2, 2, 2));
        let b = Array3::<f64>::zeros((2, 2, 3));
        assert!(consistency_loss(&a, &b, 0.1).is_err());
    }
}
