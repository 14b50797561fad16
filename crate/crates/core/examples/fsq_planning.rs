//! Run the planner on a prompt and a short history: semantic states,
//! quantized bottleneck, and the planning embeddings handed to the refiner.

use robin::data::tokenize;
use robin::model::{ModelConfig, RobinModel};
use robin::Rng;

fn main() -> robin::Result<()> {
    let cfg = ModelConfig::default();
    let model = RobinModel::new(cfg, 8, 1)?;
    let text = tokenize("warm cello over rain", cfg.vocab)?;
    let mut rng = Rng::new(2);
    let history: Vec<Vec<f64>> = (0..2).map(|_| rng.normals(model.patch_width())).collect();
    let refs: Vec<&[f64]> = history.iter().map(Vec::as_slice).collect();

    let plan = model.ar.plan(&text, None, &refs)?;
    println!("text ids {:?}", text.ids);
    println!("fused length {} (prefix {}), width {}", plan.seg.len(), plan.seg.prefix(), cfg.d);
    let b = plan.bottleneck.to_vec();
    let mut levels: Vec<i64> = b.iter().map(|v| (v / cfg.fsq_delta).round() as i64).collect();
    levels.sort_unstable();
    levels.dedup();
    println!("bottleneck {:?}, grid levels used {levels:?}", plan.bottleneck.shape());
    let residual: f64 = plan.e_p.sub(&plan.e_d)?.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("planning embedding {:?}, |E_p - E_d| = {residual:.4}", plan.e_p.shape());
    Ok(())
}
