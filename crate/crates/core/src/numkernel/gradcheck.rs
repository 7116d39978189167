use super::{KernelError, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// `f` builds the function on a fresh tape from the tracked input it is
/// handed. Returns `max_i |g_i - fd_i| / max(1, |fd_i|)`.
pub fn finite_diff_check<E, F>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    E: From<KernelError>,
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
{
    if !(step > 0.0) {
        return Err(KernelError::Invalid(format!("step must be positive, got {step}")).into());
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let value = tape.scalar(root)?;
    if !value.is_finite() {
        return Err(nonfinite("f(x)"));
    }
    let analytic = tape.backward(root)?.wrt(leaf);

    let eval = |point: Tensor| -> Result<f64, E> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let r = f(&mut t, v)?;
        Ok(t.scalar(r)?)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(nonfinite(&format!("f near coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * step);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn nonfinite<E: From<KernelError>>(context: &str) -> E {
    KernelError::NonFinite {
        context: context.to_string(),
    }
    .into()
}
