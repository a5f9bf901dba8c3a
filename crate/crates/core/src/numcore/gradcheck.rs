//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every element of every block in `store`.
///
/// `f` receives a fresh tape and one `Var` per block of `store` and must
/// return a scalar. Failures are reported, not raised.
pub fn finite_diff_check<F>(store: &ParamStore<f64>, mut f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..store.len()).map(|i| tape.param(store, i)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = (0..s.len()).map(|i| t.frozen(s, i)).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.scalar(out))
    };

    let mut work = store.clone();
    let mut blocks = Vec::with_capacity(store.len());
    for bi in 0..store.len() {
        let analytic = grads.get(store.key(bi)).map(|g| g.data().to_vec());
        let n = store.block(bi).value.len();
        let mut check = BlockCheck {
            name: store.block(bi).name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..n {
            let orig = work.block(bi).value.data()[i];
            work.block_mut(bi).value.data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work.block_mut(bi).value.data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work.block_mut(bi).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let re = rel_err(a, numeric);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if re > check.max_rel_err {
                check.max_rel_err = re;
                check.worst_index = i;
            }
        }
        blocks.push(check);
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        blocks,
        max_rel_err,
        tolerance,
    })
}
