use super::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub worst_coord: Option<usize>,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at the listed
/// coordinates of `params`.
///
/// The error at a coordinate is `|analytic − numeric| / (|analytic| + 1e-8)`;
/// the report carries the maximum.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Real],
    analytic: &[Real],
    coords: &[usize],
    step: Real,
) -> GradCheckReport
where
    F: FnMut(&[Real]) -> Real,
{
    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coord: None, checked: 0 };
    for &i in coords {
        let orig = work[i];
        work[i] = orig + step;
        let up = f(&work);
        work[i] = orig - step;
        let down = f(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        report.checked += 1;
        if report.worst_coord.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = Some(i);
        }
    }
    report
}
