//! Euler sampling with guidance on hand-written velocity fields.

use robin::refiner::{euler_sample, FlowConfig, VelocityModel};
use robin::{Rng, Tensor};

/// Exact field for a single target point.
struct ToPoint(Vec<f64>);

impl VelocityModel for ToPoint {
    fn velocity(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>, _prev: &Tensor) -> robin::Result<Tensor> {
        // The unconditional branch pulls toward the origin instead.
        let target: Vec<f64> = match ctx {
            Some(_) => self.0.clone(),
            None => vec![0.0; self.0.len()],
        };
        Tensor::new(x.to_vec().iter().zip(&target).map(|(x, p)| (x - p) / t).collect(), x.shape())
    }
}

fn main() -> robin::Result<()> {
    let target = vec![1.0, -2.0, 0.5, 3.0];
    let field = ToPoint(target.clone());
    let ctx = Tensor::zeros(&[1, 1]);
    let prev = Tensor::zeros(&[1, 4]);
    for scale in [1.0, 2.0] {
        for steps in [1, 5, 20] {
            let flow = FlowConfig { euler_steps: steps, cfg_scale: scale, ..FlowConfig::default() };
            let x = euler_sample(&field, &ctx, &prev, &flow, &mut Rng::new(0))?;
            let v: Vec<String> = x.to_vec().iter().map(|v| format!("{v:+.3}")).collect();
            println!("scale {scale} steps {steps:>2}: [{}]", v.join(", "));
        }
    }
    println!("target {target:?}; the unconditional branch aims at the origin, so scale s lands at s * target");
    Ok(())
}
