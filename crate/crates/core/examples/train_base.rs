//! A short base-model run on freshly generated scenes.

use candle_core::DType;
use lvg::config::RunConfig;
use lvg::net::ModelParams;
use lvg::scenes::{gen_assets, gen_scene};
use lvg::train::{eval_loss, stage_items, train, Stage, TrainConfig};

fn main() -> lvg::Result<()> {
    let cfg = RunConfig::compact();
    let catalog = gen_assets();
    let specs = (0..32)
        .map(|s| gen_scene(s, &cfg.rules(), &catalog))
        .collect::<lvg::Result<Vec<_>>>()?;
    let items = stage_items(&specs, Stage::Base, &catalog, &cfg.codec()?, &cfg.embedder())?;
    let params = ModelParams::new(cfg.model_config(), DType::F32)?;
    println!("{} parameters, {} scenes", params.parameter_count(), items.len());

    let before = eval_loss(&params, &items, 11)?;
    let tc = TrainConfig {
        steps: 200,
        batch: 8,
        lr: 1e-3,
        p_drop: cfg.drop,
        seed: cfg.seed,
    };
    let summary = train(&params, &items, &tc, |r| {
        if r.step % 50 == 0 {
            println!("step {:4} loss {:.4}", r.step, r.loss);
        }
    })?;
    let after = eval_loss(&params, &items, 11)?;
    println!(
        "held-noise loss {before:.4} -> {after:.4}, {} of {} conditions dropped",
        summary.dropped, summary.samples
    );
    Ok(())
}
