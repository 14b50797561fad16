//! Build a small graph, backpropagate, and compare against central
//! differences.

use robin::gradcheck::{central_difference, rel_error};
use robin::tensor::{no_grad, AttentionMask};
use robin::{Rng, Tensor};

fn main() -> robin::Result<()> {
    let mut rng = Rng::new(7);
    let table = Tensor::param(rng.normals(6 * 4), &[6, 4])?;
    let w = Tensor::param(rng.normals(4 * 2), &[4, 2])?;
    let ids = [1, 5, 2];

    let f = || -> robin::Result<Tensor> {
        let e = Tensor::embedding(&table, &ids)?;
        let a = Tensor::attention(&e, &e, &e, &AttentionMask::causal(3), 2)?;
        Ok(a.layernorm(None, None, 1e-5)?.matmul(&w)?.gelu().mean())
    };

    let loss = f()?;
    loss.backward()?;
    println!("loss = {:.6}", loss.item());

    for (name, p) in [("table", &table), ("w", &w)] {
        let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let worst = (0..p.numel())
            .map(|i| {
                let fd = central_difference(p, i, 1e-5, || {
                    let _g = no_grad();
                    f().expect("forward").item()
                });
                rel_error(g[i], fd)
            })
            .fold(0.0, f64::max);
        println!("{name}: {} coordinates, worst relative error {worst:.2e}", p.numel());
    }
    Ok(())
}
