use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - fd| / max(|analytic|, |fd|, floor)
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the maximum occurred
    pub worst: Option<(usize, usize)>,
    pub coords: usize,
}

fn eval<T: Real, F>(f: &F, point: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NotScalar(shape.to_vec()));
    }
    Ok(g.scalar(out))
}

/// Checks the reverse-mode gradient of `f` at `point` against central finite
/// differences with step `eps`. The element type `T` selects precision.
pub fn grad_check<T: Real, F>(f: F, point: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    grad_check_floor(f, point, eps, 1e-12)
}

/// As [`grad_check`], with relative errors taken against at least `floor`, so
/// coordinates whose exact gradient vanishes compare by absolute error.
pub fn grad_check_floor<T: Real, F>(f: F, point: &[Tensor<T>], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaves require grad"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
    };
    let mut probe: Vec<Tensor<T>> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            let h = T::lit(eps);
            probe[ti].data_mut()[j] = x0 + h;
            let fp = eval(&f, &probe)?;
            probe[ti].data_mut()[j] = x0 - h;
            let fm = eval(&f, &probe)?;
            probe[ti].data_mut()[j] = x0;
            // use the step actually represented in T
            let step = ((x0 + h) - (x0 - h)).to_f64().unwrap();
            let fd = (fp - fm) / step;
            let an = analytic[ti].data()[j].to_f64().unwrap();
            let denom = an.abs().max(fd.abs()).max(floor);
            let rel = (an - fd).abs() / denom;
            report.coords += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((ti, j));
                }
            }
        }
    }
    Ok(report)
}
