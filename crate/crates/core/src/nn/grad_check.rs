use crate::Scalar;

/// Central differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad<T, F>(mut f: F, params: &[T], step: T) -> Vec<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    assert!(step > T::zero(), "finite difference step must be positive");
    let mut theta = params.to_vec();
    let two_h = step + step;
    (0..params.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + step;
            let plus = f(&theta);
            theta[i] = orig - step;
            let minus = f(&theta);
            theta[i] = orig;
            (plus - minus) / two_h
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSummary {
    /// Largest `|a − n| / max(|a|, |n|)` over the compared coordinates.
    pub max_relative: f64,
    /// Coordinates with `max(|a|, |n|)` above the floor.
    pub compared: usize,
    pub total: usize,
}

/// Compares analytic and numeric gradients, skipping coordinates where both
/// are at most `floor` in magnitude.
pub fn relative_errors<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> GradCheckSummary {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_relative = 0.0f64;
    let mut compared = 0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.to_f64_lossy(), n.to_f64_lossy());
        let scale = a.abs().max(n.abs());
        if scale <= floor {
            continue;
        }
        compared += 1;
        max_relative = max_relative.max((a - n).abs() / scale);
    }
    GradCheckSummary {
        max_relative,
        compared,
        total: analytic.len(),
    }
}
