#![allow(dead_code)]

use sparsity_forcing::numcore::{Graph, SplitRng, Tensor, Var};

/// Central finite-difference gradient of `f` with respect to each input.
pub fn finite_difference(inputs: &[Tensor], step: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for i in 0..g.len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let up = f(&work);
            work[t].data_mut()[i] = orig - step;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * step);
        }
        out.push(Tensor::new(inputs[t].shape(), g).unwrap());
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `build` on fresh graphs, compares analytic against finite-difference
/// gradients and returns the worst relative error over all inputs.
pub fn grad_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars);
        g.value(root).item()
    };
    let fd = finite_difference(inputs, 1e-5, &eval);
    vars.iter()
        .zip(&fd)
        .map(|(v, f)| relative_error(grads.get(*v).unwrap(), f))
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut SplitRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * scale).collect()).unwrap()
}

/// Random row-stochastic causal attention map of size `len×len`.
pub fn random_causal_map(rng: &mut SplitRng, len: usize, sharpness: f64) -> Tensor {
    let mut data = vec![0.0; len * len];
    for r in 0..len {
        let mut row: Vec<f64> = (0..=r).map(|_| (rng.normal() * sharpness).exp()).collect();
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
        data[r * len..r * len + r + 1].copy_from_slice(&row);
    }
    Tensor::new(&[len, len], data).unwrap()
}
pub mod oracle;
