//! Central finite-difference oracle for tape gradients.

use super::mat::Mat;
use super::tape::{Tape, Var};
use super::NumError;

/// Denominator guard in the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a − n| / (|n| + REL_ERR_FLOOR)` maximised over every coordinate.
pub fn max_relative_error(analytic: &[Mat], numeric: &[Mat]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.as_slice().iter().zip(n.as_slice()) {
            worst = worst.max((x - y).abs() / (y.abs() + REL_ERR_FLOOR));
        }
    }
    worst
}

/// Tensor-wise relative error `‖a − n‖∞ / ‖n‖∞`, maximised over tensors.
///
/// A tensor whose own magnitude is below `1e-6` of the largest numeric
/// component anywhere is measured against that level instead, so exactly-zero
/// derivatives are not judged by finite-difference roundoff.
pub fn max_tensor_error(analytic: &[Mat], numeric: &[Mat]) -> f64 {
    let inf = |m: &Mat| m.as_slice().iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let global = numeric.iter().map(inf).fold(0.0f64, f64::max);
    let floor = (1e-6 * global).max(REL_ERR_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = a
                .as_slice()
                .iter()
                .zip(n.as_slice())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            diff / inf(n).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of several matrices.
pub fn central_differences<F>(f: F, point: &[Mat], eps: f64) -> Result<Vec<Mat>, NumError>
where
    F: Fn(&[Mat]) -> Result<f64, NumError>,
{
    let mut work: Vec<Mat> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for li in 0..point.len() {
        let (rows, cols) = point[li].shape();
        let mut g = Mat::zeros(rows, cols);
        for k in 0..point[li].len() {
            let orig = point[li].as_slice()[k];
            work[li].as_mut_slice()[k] = orig + eps;
            let up = f(&work)?;
            work[li].as_mut_slice()[k] = orig - eps;
            let down = f(&work)?;
            work[li].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Builds `loss` on a fresh tape over `leaves`, differentiates it, and
/// returns the worst relative disagreement with central differences.
pub fn finite_diff_check<F>(loss: F, leaves: &[Mat], eps: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    let eval = |vals: &[Mat]| -> Result<(Tape, Vec<Var>, Var), NumError> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let l = loss(&mut tape, &vars)?;
        Ok((tape, vars, l))
    };
    let (tape, vars, l) = eval(leaves)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Mat> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let numeric = central_differences(
        |vals| {
            let (t, _, l) = eval(vals)?;
            Ok(t.scalar(l))
        },
        leaves,
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Mat {
        Mat::row_vector(v.to_vec())
    }

    #[test]
    fn quadratic_loss_is_tight() {
        let err = finite_diff_check(
            |t, v| {
                let y = t.matmul_t(v[0], v[1])?;
                t.mse_to_target(y, row(&[0.5, -0.25]))
            },
            &[
                row(&[0.3, -0.7, 1.1]),
                Mat::from_rows(&[vec![0.2, 0.4, -0.1], vec![-0.3, 0.8, 0.5]]).unwrap(),
            ],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn linear_loss_is_exact_to_roundoff() {
        let err = finite_diff_check(
            |t, v| {
                let a = t.mse_to_target(v[0], row(&[0.0]))?;
                // weighted_sum of a leaf scalar is linear in that leaf
                t.weighted_sum(&[(v[1], 2.5), (a, 0.0)])
            },
            &[row(&[0.4]), row(&[1.3])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn tensor_error_scales_per_tensor() {
        let a = [row(&[1.0, 0.0]), row(&[0.0])];
        let n = [row(&[1.0 + 1e-9, 3e-11]), row(&[2e-11])];
        assert!(max_tensor_error(&a, &n) < 1e-4);
        assert!(max_relative_error(&a, &n) > 1e-3);
        let off = [row(&[1.1, 0.0]), row(&[0.0])];
        assert!((max_tensor_error(&off, &n) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let err = finite_diff_check(|t, _| t.weighted_sum(&[]), &[row(&[1.0, 2.0])], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }
}
