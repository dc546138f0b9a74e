//! Euler sampling with classifier-free guidance at several weights.

use candle_core::DType;
use lvg::config::RunConfig;
use lvg::flow::{sample, SamplerConfig};
use lvg::net::ModelParams;
use lvg::scenes::gen_assets;

fn main() -> lvg::Result<()> {
    let cfg = RunConfig::compact();
    let codec = cfg.codec()?;
    let model = ModelParams::new(cfg.model_config(), DType::F32)?;
    let c = cfg.embedder().embed("a small office with a desk and a chair")?;
    let s = codec.empty_latent(16)?;
    let o = codec.encode(&gen_assets().get("desk")?.canonical_grid(16)?)?;

    for w in [0.0, 1.0, 3.0] {
        let cfg = SamplerConfig::new(w, 20, 7)?;
        let out = sample(&model, &s, &o, &c, &cfg)?;
        let occupied = codec.decode(&out.latent, 16)?.count();
        let mean = out.latent.values().iter().map(|&v| v as f64).sum::<f64>() / out.latent.values().len() as f64;
        println!("w={w}: {} evaluations, latent mean {mean:+.4}, decoded voxels {occupied}", out.evaluations);
    }
    Ok(())
}
