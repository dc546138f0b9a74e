//! Rotary positions over `[x | s | o]` tokens: the object block differs from
//! the others only through its source flag.

use candle_core::{DType, Tensor};
use lvg::net::{rope_angles, token_positions, CondBatch, ConditionEmbedding, ModelConfig, ModelParams};

fn main() -> lvg::Result<()> {
    let dims = [2, 2, 2];
    let n = 8;
    let positions = token_positions(dims, true);
    for i in [0, n, 2 * n, 2 * n + 7] {
        println!("token {i:2}: {:?}", positions[i]);
    }
    let angles = rope_angles(positions[2 * n + 7], 16)?;
    println!("angles of the last object token: {angles:.3?}");

    let model = ModelParams::new(
        ModelConfig {
            channels: 4,
            width: 32,
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        },
        DType::F64,
    )?;
    // identical content in every token isolates the positional terms
    let x = Tensor::ones((1, n, 4), DType::F64, &candle_core::Device::Cpu)?;
    let null = CondBatch::new(&[&ConditionEmbedding::null()], model.config.cond_dim, DType::F64)?;
    for (label, keep) in [("all bands", [true; 4]), ("no flag band", [false, true, true, true])] {
        let (_, probe) = model.forward_with_logits(&x, &x, &x, dims, &null, &[0.5], keep)?;
        let l = probe.logits.get(0)?.get(0)?.to_vec2::<f64>()?;
        println!(
            "{label:>12}: logit(x0, x0) {:+.6}  logit(x0, s0) {:+.6}  logit(x0, o0) {:+.6}",
            l[0][0],
            l[0][n],
            l[0][2 * n]
        );
    }
    Ok(())
}
