//! Central-difference gradient oracle, independent of the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, TensorError};
use crate::params::ParamSet;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Samples `opts.samples` random coordinates of `params` and compares
/// `(f(p + h) − f(p − h)) / 2h` with the matching entry of `analytic`.
pub fn finite_diff_gradcheck<F>(
    mut f: F,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, ModelError>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64, ModelError>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(TensorError::Usage(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        ))
        .into());
    }
    if !params.same_layout(analytic) {
        return Err(ModelError::Input(
            "analytic gradients do not mirror the parameters".into(),
        ));
    }
    let sizes: Vec<(String, usize)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(ModelError::Input("empty parameter set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for _ in 0..opts.samples {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which].1 {
            flat -= sizes[which].1;
            which += 1;
        }
        let name = &sizes[which].0;
        let original = params.get(name).expect("name from params").data()[flat];
        let set =
            |w: &mut ParamSet<f64>, v: f64| w.get_mut(name).expect("name").data_mut()[flat] = v;

        set(&mut work, original + opts.step);
        let plus = f(&work)?;
        set(&mut work, original - opts.step);
        let minus = f(&work)?;
        set(&mut work, original);

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.get(name).expect("layout checked").data()[flat];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (name.clone(), flat);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
