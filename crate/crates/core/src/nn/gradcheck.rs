use super::ModelParams;

/// Denominator floor in the relative error `|a - n| / max(|a| + |n|, floor)`,
/// so coordinates whose true gradient is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, row-major index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares `analytic` against central differences of `loss` at every
/// parameter coordinate.
pub fn finite_diff_check<F>(
    params: &ModelParams,
    analytic: &ModelParams,
    mut loss: F,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&ModelParams) -> f64,
{
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tolerance,
    };
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let (rows, cols) = params.get(&name).map_or((0, 0), |t| t.dim());
        let grad = analytic.get(&name).expect("analytic gradient has the same tensors");
        for k in 0..rows * cols {
            let at = [k / cols, k % cols];
            let orig = params.get(&name).unwrap()[at];
            probe.get_mut(&name).unwrap()[at] = orig + step;
            let up = loss(&probe);
            probe.get_mut(&name).unwrap()[at] = orig - step;
            let down = loss(&probe);
            probe.get_mut(&name).unwrap()[at] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[at];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_ERROR_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((name.clone(), k));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gcn_case() -> (ModelParams, NormalizedAdjacency, Array2<f64>, Vec<Option<usize>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = ModelParams::init_gcn2(3, 4, 2, &mut rng);
        let adj = NormalizedAdjacency::from_edges(5, &[(0, 1), (1, 2), (2, 3), (1, 4)]);
        let x = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let labels = vec![Some(0), Some(1), Some(1), None, Some(0)];
        let mask = vec![true, true, true, false, true];
        (params, adj, x, labels, mask)
    }

    fn gcn_loss(p: &ModelParams, adj: &NormalizedAdjacency, x: &Array2<f64>, labels: &[Option<usize>], mask: &[bool]) -> f64 {
        let z = gcn_forward(p, adj, x.view()).unwrap();
        softmax_ce_loss_and_grad(&z, labels, mask).unwrap().0
    }

    #[test]
    fn gcn2_gradients_match() {
        let (params, adj, x, labels, mask) = gcn_case();
        let (z, cache) = gcn_forward_cached(&params, &adj, x.view()).unwrap();
        let (_, dz) = softmax_ce_loss_and_grad(&z, &labels, &mask).unwrap();
        let g = gcn_backward(&params, &adj, x.view(), &cache, dz.view()).unwrap();
        let report = finite_diff_check(&params, &g, |p| gcn_loss(p, &adj, &x, &labels, &mask), 1e-4, 1e-4);
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coordinates, 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn mlp4_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init_mlp4(2, [3, 3, 3], &mut rng);
        let x = Array2::from_shape_simple_fn((6, 2), || rng.random_range(-2.0..2.0));
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let loss = |p: &ModelParams| {
            let probs = mlp_forward(p, x.view()).unwrap();
            bce_loss_and_grad(probs.as_slice().unwrap(), &y).unwrap().0
        };
        let (probs, cache) = mlp_forward_cached(&params, x.view()).unwrap();
        let (_, dp) = bce_loss_and_grad(probs.as_slice().unwrap(), &y).unwrap();
        let g = mlp_backward(&params, &cache, &dp).unwrap();
        let report = finite_diff_check(&params, &g, loss, 1e-4, 1e-4);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (params, adj, x, labels, mask) = gcn_case();
        let (z, cache) = gcn_forward_cached(&params, &adj, x.view()).unwrap();
        let (_, dz) = softmax_ce_loss_and_grad(&z, &labels, &mask).unwrap();
        let mut g = gcn_backward(&params, &adj, x.view(), &cache, dz.view()).unwrap();
        g.get_mut("w2").unwrap()[[0, 0]] += 0.1;
        let report = finite_diff_check(&params, &g, |p| gcn_loss(p, &adj, &x, &labels, &mask), 1e-4, 1e-4);
        assert!(!report.passed());
        assert_eq!(report.worst, Some(("w2".to_string(), 0)));
    }
}
