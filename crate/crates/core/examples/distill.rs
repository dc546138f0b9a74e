//! A few dual-guidance distillation steps between two tiny teachers.

use candle_core::DType;
use lvg::config::RunConfig;
use lvg::distill::Distiller;
use lvg::net::ModelParams;
use lvg::scenes::{gen_assets, gen_scene};
use lvg::train::{distill, distill_scenes};

fn main() -> lvg::Result<()> {
    let cfg = RunConfig {
        width: 16,
        layers: 1,
        cond_dim: 16,
        ..RunConfig::compact()
    };
    let catalog = gen_assets();
    let specs = (0..4)
        .map(|s| gen_scene(s, &cfg.rules(), &catalog))
        .collect::<lvg::Result<Vec<_>>>()?;
    let scenes = distill_scenes(&specs, &catalog, &cfg.codec()?, &cfg.embedder())?;

    let holistic = ModelParams::new(cfg.model_config(), DType::F32)?;
    let stepwise = ModelParams::new(
        lvg::net::ModelConfig {
            seed: 1,
            ..cfg.model_config()
        },
        DType::F32,
    )?;
    let mut d = Distiller::new(&holistic, &stepwise, cfg.distill_config()?)?;
    let logs = distill(&mut d, &scenes, 8, |k, log, ms| {
        println!(
            "iter {k}: step {:.4} holistic {:.4} critic {:.4} |g| {:.3} (sampled step {}, {ms:.0} ms)",
            log.loss_step, log.loss_holistic, log.critic_loss, log.grad_norm, log.sampled_step
        );
    })?;
    println!("{} iterations, counters {:?}", logs.len(), d.counters);
    println!("student checksum {}", d.student.checksum()?);
    Ok(())
}
