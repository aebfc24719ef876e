use super::Differentiable;

/// `|a − n| / max(|a| + |n|, 1e-6)`; the floor keeps entries whose true
/// gradient is ~0 from dividing rounding noise by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Central-difference check of every parameter of `model` on one sample.
pub fn grad_check<M: Differentiable>(model: &M, sample: &M::Sample, epsilon: f64) -> f64 {
    grad_check_with(model, sample, epsilon, |_| {}).max_relative_error
}

/// As [`grad_check`], with a hook that may tamper with the analytic
/// gradient before comparison (used to confirm the checker catches faults).
pub fn grad_check_with<M: Differentiable>(
    model: &M,
    sample: &M::Sample,
    epsilon: f64,
    tamper: impl FnOnce(&mut M),
) -> GradCheckReport {
    assert!(epsilon > 0.0 && epsilon <= 1e-2, "epsilon must lie in (0, 1e-2]");
    let (_, mut analytic) = model.objective_and_grad(sample);
    tamper(&mut analytic);
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: (String::new(), 0), checked: 0 };
    for (ti, name) in names.iter().enumerate() {
        for (i, &a) in analytic[ti].iter().enumerate() {
            let orig = probe.tensors_mut()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + epsilon;
            let plus = probe.objective(sample);
            probe.tensors_mut()[ti].data[i] = orig - epsilon;
            let minus = probe.objective(sample);
            probe.tensors_mut()[ti].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.0.is_empty() {
                report.max_relative_error = err;
                report.worst = (name.clone(), i);
            }
        }
    }
    report
}
