//! Central finite-difference gradient checking. Runs in f64: the reverse
//! pass of a scalar-valued graph is compared coordinate by coordinate against
//! `(f(x+eps) - f(x-eps)) / 2 eps`.

use super::array::Array;
use super::graph::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Relative error with the usual both-near-zero escape.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

/// Checks d f / d inputs at every coordinate of every input.
pub fn check_all<F>(f: F, inputs: &[Array<f64>], eps: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, a)| (0..a.numel()).map(move |j| (i, j)))
        .collect();
    check_coords(f, inputs, eps, &coords)
}

/// Checks d f / d inputs at the given (input, element) coordinates only.
/// One reverse pass supplies all analytic values; each coordinate costs two
/// extra forward evaluations.
pub fn check_coords<F>(f: F, inputs: &[Array<f64>], eps: f64, coords: &[(usize, usize)]) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let loss = f(&params);
    assert_eq!(loss.numel(), 1, "gradient check needs a scalar function");
    loss.backward();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |arrays: &[Array<f64>]| -> f64 {
        let leaves: Vec<Tensor<f64>> = arrays.iter().map(|a| Tensor::leaf(a.clone())).collect();
        f(&leaves).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let up = eval(&work);
        work[i].data_mut()[j] = orig - eps;
        let down = eval(&work);
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_err(analytic[i][j], numeric);
        report.coords_checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = (i, j);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_cleanly() {
        // f(x) = sum(x * x), grad = 2x
        let x = Array::from_vec(&[3], vec![0.5, -1.25, 2.0]);
        let report = check_all(|t| t[0].mul(&t[0]).unwrap().sum(), &[x], 1e-5);
        assert!(report.max_rel_err <= 1e-7, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale() by 3 forward but claim gradient 1 by using add of detached
        let x = Array::from_vec(&[2], vec![1.0, 2.0]);
        let report = check_all(
            |t| {
                // y = 3x in value, but the graph only sees one x
                let detached = t[0].stop_gradient().scale(2.0);
                t[0].add(&detached).unwrap().sum()
            },
            &[x],
            1e-5,
        );
        assert!(report.max_rel_err > 0.1, "{report:?}");
    }
}
