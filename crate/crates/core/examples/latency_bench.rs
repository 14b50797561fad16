//! Generation wall time against the number of Euler steps.

use robin::cli::bench_rows;
use robin::codec::Codec;
use robin::config::Config;
use robin::model::RobinModel;

fn main() -> robin::Result<()> {
    let cfg = Config::desk();
    let model = RobinModel::new(cfg.model, cfg.codec.k, 0)?;
    let codec = Codec::new(cfg.codec)?;
    let rows = bench_rows(&model, &codec, &cfg, &[5, 10, 20, 40, 80], 5, 4, 0)?;
    let base = rows[0].median_ms / rows[0].euler_steps as f64;
    for r in &rows {
        let per_step = r.median_ms / r.euler_steps as f64;
        println!("{:>3} steps: median {:>7.2} ms, {per_step:.3} ms/step ({:.2}x the 5-step rate)", r.euler_steps, r.median_ms, per_step / base);
    }
    Ok(())
}
