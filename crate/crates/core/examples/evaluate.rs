//! Scores ground-truth and jittered layouts and summarizes with bootstrap
//! intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lvg::config::RunConfig;
use lvg::metrics::summarize;
use lvg::rollout::{score_layout, Layout};
use lvg::scenes::{gen_assets, gen_scene};

fn main() -> lvg::Result<()> {
    let cfg = RunConfig::default();
    let catalog = gen_assets();
    let th = cfg.thresholds();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for jitter in [0.0, 0.02, 0.1] {
        let mut reports = Vec::new();
        for seed in 0..32 {
            let spec = gen_scene(seed, &cfg.rules(), &catalog)?;
            let mut layout = Layout::from_spec(&spec);
            for o in &mut layout.objects {
                o.position[0] += jitter * rng.random_range(-1.0..1.0);
                o.position[1] += jitter * rng.random_range(-1.0..1.0);
                o.yaw += 10.0 * jitter * rng.random_range(-1.0..1.0);
            }
            reports.push(score_layout(&layout, &spec, &catalog, &th, 0.0)?);
        }
        let s = summarize(&reports, 1000, 0)?;
        println!("jitter {jitter:.2}:");
        for (name, i) in [("CF", s.cf), ("IB", s.ib), ("Pos", s.pos), ("Rot", s.rot), ("PSA", s.psa)] {
            println!("  {name:<4}{:6.1}  [{:5.1}, {:5.1}]", i.mean, i.lo, i.hi);
        }
    }
    Ok(())
}
