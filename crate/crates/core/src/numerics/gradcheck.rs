//! Central finite-difference verification of tape gradients (64-bit).

use super::{SeededRng, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Smallest denominator of the relative error. Gradients below it are
    /// judged by absolute error `floor * tolerance` instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords: None,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compare the tape gradient of `f` against central differences.
///
/// `f` rebuilds the scalar loss on a fresh tape from leaf handles of
/// `params`; it may bind data borrowed for `'w` onto the tape. The error
/// per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<'w, F, E>(f: F, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'w, f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<(f64, Option<Vec<Tensor<f64>>>), E> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        Ok((v, Some(grads_of(&mut tape, loss, &vars, ps)?)))
    };
    let value_only = |ps: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let (_, analytic) = eval(params)?;
    let analytic = analytic.unwrap_or_default();

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    if let Some(n) = opts.max_coords {
        if n < coords.len() {
            let mut rng = SeededRng::new(opts.seed);
            rng.shuffle(&mut coords);
            coords.truncate(n);
            coords.sort_unstable();
        }
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for &(p, i) in &coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + opts.epsilon;
        let plus = value_only(&work)?;
        work[p].data_mut()[i] = orig - opts.epsilon;
        let minus = value_only(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let a = analytic[p].data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((p, i));
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

fn grads_of(tape: &mut Tape<'_, f64>, loss: Var, vars: &[Var], ps: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, TensorError> {
    let mut g = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(ps)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}
