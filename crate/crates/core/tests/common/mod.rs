//! Finite-difference checks over session-built graphs and shared fixtures.
#![allow(dead_code)]

use rand_distr::{Distribution, StandardNormal};
use utged::numeric::gradcheck::relative_error;
use utged::numeric::{NodeId, ParamStore, Session, Tensor};
use utged::rng;

pub fn random_tensor(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            std * z
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_name: String,
    pub tensors: usize,
}

impl GradReport {
    fn push(&mut self, name: String, analytic: &[f64], numeric: &[f64]) {
        self.tensors += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || self.worst_name.is_empty() {
            self.max_rel_error = e.max(self.max_rel_error);
            self.worst_name = name;
        }
    }

    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_name: String::new(),
            tensors: 0,
        }
    }
}

/// Checks `f`'s gradient with respect to every parameter it reaches.
pub fn param_check<F>(store: &ParamStore, h: f64, f: F) -> utged::Result<GradReport>
where
    F: Fn(&mut Session<'_>) -> utged::Result<NodeId>,
{
    let analytic = {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        s.backward(loss)?;
        s.param_grads()
    };
    let mut work = store.clone();
    let mut report = GradReport::new();
    for (id, a) in analytic {
        let mut numeric = Vec::with_capacity(a.len());
        for k in 0..a.len() {
            let orig = work.get(id).data()[k];
            let mut eval = |x: f64| -> utged::Result<f64> {
                work.get_mut(id).data_mut()[k] = x;
                let mut s = Session::frozen(&work);
                let l = f(&mut s)?;
                Ok(s.scalar(l))
            };
            let up = eval(orig + h)?;
            let down = eval(orig - h)?;
            work.get_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        report.push(store.name(id).to_string(), &a, &numeric);
    }
    Ok(report)
}

/// Checks `f`'s gradient with respect to free input tensors, parameters
/// held fixed.
pub fn session_check<F>(store: &ParamStore, inputs: &[Tensor], h: f64, f: F) -> utged::Result<GradReport>
where
    F: Fn(&mut Session<'_>, &[NodeId]) -> utged::Result<NodeId>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut s = Session::frozen(store);
        let ids: Vec<NodeId> = inputs.iter().map(|t| s.variable(t.clone())).collect();
        let loss = f(&mut s, &ids)?;
        s.backward(loss)?;
        ids.iter().zip(inputs).map(|(&i, t)| s.grad(i).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)).collect()
    };
    let eval = |xs: &[Tensor]| -> utged::Result<f64> {
        let mut s = Session::frozen(store);
        let ids: Vec<NodeId> = xs.iter().map(|t| s.constant(t.clone())).collect();
        let l = f(&mut s, &ids)?;
        Ok(s.scalar(l))
    };
    let mut work = inputs.to_vec();
    let mut report = GradReport::new();
    for i in 0..inputs.len() {
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        report.push(format!("input {i}"), &analytic[i], &numeric);
    }
    Ok(report)
}
