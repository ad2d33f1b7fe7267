use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of one finite-difference check.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen across all checked elements.
    pub max_rel_err: f64,
    /// Leaf name and flat element index where it occurred.
    pub worst: String,
    /// Total number of elements compared.
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn pass(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

const REL_DENOM_FLOOR: f64 = 1e-6;

/// Compare analytic gradients against central finite differences.
///
/// `build` receives a fresh graph plus one var per named leaf (same order)
/// and must return a scalar loss. It is re-invoked twice per element, so it
/// has to be a pure function of the leaf values.
pub fn grad_check<F>(leaves: &[(&str, Tensor)], mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: loss must be scalar, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    let base = g.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::Numeric(format!("grad_check: loss is {base}")));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, (_, t))| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |leaves_now: &[(&str, Tensor)], build: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves_now
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("-");
    let mut n_checked = 0usize;
    let mut work: Vec<(&str, Tensor)> = leaves.to_vec();
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].1.len() {
            let x = leaves[li].1.data()[ei];
            let h = 1e-6 * x.abs().max(1.0);

            work[li].1.data_mut()[ei] = x + h;
            let up = eval(&work, &mut build)?;
            work[li].1.data_mut()[ei] = x - h;
            let down = eval(&work, &mut build)?;
            work[li].1.data_mut()[ei] = x;

            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: perturbed loss not finite at {}[{ei}]",
                    leaves[li].0
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[li][ei];
            if !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: analytic gradient not finite at {}[{ei}]",
                    leaves[li].0
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_DENOM_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{}[{ei}]", leaves[li].0);
            }
            n_checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, n_checked })
}
