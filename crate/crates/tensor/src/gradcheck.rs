//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only evaluates the forward function; it never touches the
//! backward sweep it is checking.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// (param name, element index, analytic, numeric, relative error)
    pub entries: Vec<(String, usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.4).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss_fn` against central differences with step
/// `h` at the given (param, element) coordinates.
pub fn check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    floor: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = loss_fn(&tape, store)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads.params(store.len());

    let eval = |s: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        Ok(loss_fn(&t, s)?.item())
    };
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(coords.len());
    for &(id, j) in coords {
        let orig = work.entry(id).value[j];
        work.value_mut(id)[j] = orig + h;
        let plus = eval(&work)?;
        work.value_mut(id)[j] = orig - h;
        let minus = eval(&work)?;
        work.value_mut(id)[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
        entries.push((
            store.entry(id).name.clone(),
            j,
            a,
            numeric,
            relative_error(a, numeric, floor),
        ));
    }
    Ok(GradCheckReport { entries })
}

/// Every (param, element) coordinate of a store.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.entry(id).value.len()).map(move |j| (id, j)))
        .collect()
}
