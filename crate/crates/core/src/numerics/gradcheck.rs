use std::collections::BTreeMap;

use super::{Graph, NumericsError, ParamStore, Var};

/// Builds the graph from `build`, back-propagates the scalar it returns and
/// adds the parameter gradients into `params`. Returns the loss value.
pub fn forward_backward<F>(params: &mut ParamStore, build: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
{
    let (loss, grads) = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        let grads = g.backward(loss)?;
        (g.value(loss).item(), grads)
    };
    params.accumulate(&grads, 1.0);
    Ok(loss)
}

/// Maximum relative error between analytic and central-difference
/// gradients, per parameter.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

fn eval_loss<F>(params: &ParamStore, build: &F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    let v = g.value(loss);
    if v.shape() != (1, 1) {
        return Err(NumericsError::NonScalarLoss(v.shape()));
    }
    Ok(v.item())
}

/// Compares every parameter gradient entry with a central difference of
/// width `2 · step`. Relative error is `|analytic − numeric| / (|numeric| + 1e-12)`.
pub fn finite_difference_check<F>(
    params: &ParamStore,
    step: f64,
    tolerance: f64,
    build: F,
) -> Result<GradReport, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidStep);
    }
    let analytic: BTreeMap<String, Vec<f64>> = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        let grads = g.backward(loss)?;
        params
            .names()
            .map(|n| {
                let len = params.get(n).map_or(0, |t| t.len());
                let v = grads
                    .param(n)
                    .map_or_else(|| vec![0.0; len], |t| t.data().to_vec());
                (n.to_string(), v)
            })
            .collect()
    };

    let mut probe = params.clone();
    let mut max_rel_error = BTreeMap::new();
    for (name, grad) in &analytic {
        let mut worst = 0.0f64;
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.get(name).expect("known parameter").data()[i];
            probe.get_mut(name).expect("known parameter").data_mut()[i] = orig + step;
            let plus = eval_loss(&probe, &build)?;
            probe.get_mut(name).expect("known parameter").data_mut()[i] = orig - step;
            let minus = eval_loss(&probe, &build)?;
            probe.get_mut(name).expect("known parameter").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
        max_rel_error.insert(name.clone(), worst);
    }
    Ok(GradReport {
        max_rel_error,
        tolerance,
    })
}
