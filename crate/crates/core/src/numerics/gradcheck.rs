//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! independent check on [`Tape::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use super::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error with an absolute floor so that two tiny numbers compare
/// as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients with central differences of step `h` on up to
/// `per_param` randomly chosen coordinates of every parameter.
pub fn check_gradients<F>(
    store: &ParameterStore,
    h: f64,
    per_param: usize,
    seed: u64,
    forward: F,
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    let grads = tape.backward(loss, store)?;

    let eval = |s: &ParameterStore| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let l = forward(&mut t, s)?;
        Ok(t.scalar(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let analytic = grads.get_or_zero(store, &name).as_standard_layout().into_owned();
        let n = analytic.len();
        let picks: Vec<usize> = if per_param >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        for flat in picks {
            let original = store.get(&name).unwrap().as_slice().unwrap()[flat];
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = original + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = original - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = original;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.as_slice().unwrap()[flat], numeric);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), flat));
            }
        }
    }
    Ok(report)
}
