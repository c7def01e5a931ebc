//! Finite-difference verification harness for backward rules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::TensorData;

/// Which coordinates of the input to probe.
#[derive(Debug, Clone, Copy)]
pub enum CoordSel {
    All,
    /// Random subset without replacement, seeded.
    Random { count: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    // The floor keeps near-zero-gradient coordinates from amplifying plain
    // finite-difference roundoff (~1e-10 absolute at delta = 1e-5) into
    // spurious relative errors.
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn select(sel: CoordSel, n: usize) -> Vec<usize> {
    match sel {
        CoordSel::All => (0..n).collect(),
        CoordSel::Random { count, seed } => {
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(count.min(n));
            idx.sort_unstable();
            idx
        }
    }
}

/// Evaluate the scalar function once on a fresh tape.
fn eval_scalar<T: Real, F>(f: &F, x: &TensorData<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = f(&mut tape, v)?;
    let yv = tape.value(y);
    if yv.numel() != 1 {
        return Err(Error::shape("grad_check", "scalar output", format!("{:?}", yv.shape())));
    }
    Ok(yv.item().as_f64())
}

/// Central-difference gradient at the selected coordinates: (index, d/dx_i).
pub fn numeric_grad<T: Real, F>(f: &F, x0: &TensorData<T>, delta: f64, sel: CoordSel) -> Result<Vec<(usize, f64)>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let coords = select(sel, x0.numel());
    let base: Vec<T> = x0.data().to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in &coords {
        let mut plus = base.clone();
        plus[i] = plus[i] + T::of_f64(delta);
        let mut minus = base.clone();
        minus[i] = minus[i] - T::of_f64(delta);
        let fp = eval_scalar(f, &TensorData::new(x0.shape().to_vec(), plus))?;
        let fm = eval_scalar(f, &TensorData::new(x0.shape().to_vec(), minus))?;
        out.push((i, (fp - fm) / (2.0 * delta)));
    }
    Ok(out)
}

/// Compare analytic gradients against numeric ones (both at the same
/// coordinate order). Exposed separately so tests can run negative controls
/// with deliberately corrupted analytic values.
pub fn compare_grads(analytic: &[(usize, f64)], numeric: &[(usize, f64)]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: analytic.len(),
    };
    for (&(ia, a), &(inn, n)) in analytic.iter().zip(numeric) {
        assert_eq!(ia, inn);
        let e = rel_err(a, n);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = ia;
        }
    }
    report
}

impl<T: Real> Tape<T> {
    /// Max relative error between the analytic gradient of the scalar-valued
    /// `f` at `x0` and a central finite difference with step `delta`
    /// (default 1e-5 at f64), over all or a seeded random coordinate subset.
    pub fn grad_check<F>(f: F, x0: &TensorData<T>, delta: f64, sel: CoordSel) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<T>, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let v = tape.leaf(x0.clone());
        let y = f(&mut tape, v)?;
        let yv = tape.value(y);
        if yv.numel() != 1 {
            return Err(Error::shape("grad_check", "scalar output", format!("{:?}", yv.shape())));
        }
        let mut grads = tape.backward(y)?;
        let full = grads
            .take(v)
            .ok_or_else(|| Error::Numerics("grad_check: input received no gradient".into()))?;
        let numeric = numeric_grad(&f, x0, delta, sel)?;
        let analytic: Vec<(usize, f64)> = numeric.iter().map(|&(i, _)| (i, full[i].as_f64())).collect();
        Ok(compare_grads(&analytic, &numeric))
    }
}
