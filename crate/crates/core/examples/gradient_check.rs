//! Compares reverse-mode gradients of a small conv net against central
//! differences of the forward pass.
//!
//!     cargo run --example gradient_check

use phoenix::numeric::{Graph, NamedTensors, Padding, ParamTable, Tensor};
use phoenix::rng;

fn build(labels: &[usize]) -> Graph {
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("conv.weight");
    let b = g.param("conv.bias");
    let gamma = g.param("norm.gamma");
    let beta = g.param("norm.beta");
    let head = g.param("head.weight");
    let h = g.conv2d(x, w, Some(b), Padding::Same);
    let h = g.group_norm(h, gamma, beta, 2);
    let h = g.silu(h);
    let h = g.avgpool2x(h);
    let h = g.reshape(h, &[2, 16]);
    let logits = g.matmul(h, head);
    let loss = g.softmax_cross_entropy(logits, labels);
    g.set_output(loss);
    g
}

fn main() -> phoenix::Result<()> {
    let mut r = rng::substream(7, &[0]);
    let mut params = ParamTable::new();
    params.insert("conv.weight", Tensor::randn(&[4, 1, 3, 3], 0.5, &mut r), false)?;
    params.insert("conv.bias", Tensor::randn(&[4], 0.1, &mut r), false)?;
    params.insert("norm.gamma", Tensor::full(&[4], 1.0), false)?;
    params.insert("norm.beta", Tensor::zeros(&[4]), false)?;
    params.insert("head.weight", Tensor::randn(&[16, 3], 0.3, &mut r), false)?;
    let inputs: NamedTensors = [("x".to_string(), Tensor::randn(&[2, 1, 4, 4], 1.0, &mut r))].into();
    let labels = [0, 2];

    let mut g = build(&labels);
    let loss = g.forward(&[&params, &inputs])?.item();
    let grads = g.backward()?;
    println!("loss {loss:.6}");

    let h = 1e-2f32;
    let mut worst = 0.0f64;
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        for i in 0..params.get(&name).unwrap().numel() {
            let eval = |delta: f32| -> phoenix::Result<f64> {
                let mut p = params.clone();
                p.get_mut(&name).unwrap().data_mut()[i] += delta;
                Ok(build(&labels).forward(&[&p, &inputs])?.item() as f64)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h as f64);
            let analytic = grads[&name].data()[i] as f64;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        println!("{name:<12} checked {} entries", params.get(&name).unwrap().numel());
    }
    // f32 forward passes limit the agreement to roughly 1e-2 here; the f64
    // reference in the test suite is far tighter.
    println!("worst relative error {worst:.2e}");
    Ok(())
}
