use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lvg::codec::LatentGrid;
use lvg::distill::{DistillConfig, DistillScene, Distiller};
use lvg::flow::{gaussian_latent, FmSample};
use lvg::net::{ConditionEmbedding, HashEmbedder, ModelConfig, ModelParams};

const DIMS: [usize; 3] = [2, 2, 2];

fn tiny(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        channels: 4,
        width: 16,
        layers: 1,
        heads: 2,
        cond_dim: 8,
        ffn_mult: 2,
        identity_flag: true,
        seed,
    };
    ModelParams::new(cfg, DType::F32).unwrap()
}

fn scene(seed: u64, objects: usize) -> DistillScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DistillScene {
        s0: LatentGrid::zeros(DIMS, 4),
        objects: (0..objects).map(|_| gaussian_latent(DIMS, 4, &mut rng)).collect(),
        cond: HashEmbedder::new(64, 8, 8, 1).embed("two chairs around a table").unwrap(),
    }
}

fn config() -> DistillConfig {
    DistillConfig {
        steps: 2,
        lr_student: 1e-3,
        lr_critic: 1e-3,
        ratio: 2,
        ..DistillConfig::default()
    }
}

#[test]
fn teachers_stay_frozen_and_critic_moves() {
    let (holistic, stepwise) = (tiny(1), tiny(2));
    let sums = (holistic.checksum().unwrap(), stepwise.checksum().unwrap());
    let mut d = Distiller::new(&holistic, &stepwise, config()).unwrap();
    assert_eq!(d.student.checksum().unwrap(), sums.1);
    assert_eq!(d.teachers.critic.checksum().unwrap(), sums.0);
    for k in 0..3 {
        d.dual_guidance_step(&scene(k, 3)).unwrap();
    }
    assert_eq!((holistic.checksum().unwrap(), stepwise.checksum().unwrap()), sums);
    assert_ne!(d.student.checksum().unwrap(), sums.1);
    assert_ne!(d.teachers.critic.checksum().unwrap(), sums.0);
    assert_eq!(d.counters.critic_updates, 6);
    assert_eq!(d.counters.student_updates, 3);
    assert_eq!(d.critic_log.len(), 6);
}

#[test]
fn critic_update_leaves_student_alone() {
    let (holistic, stepwise) = (tiny(1), tiny(2));
    let mut d = Distiller::new(&holistic, &stepwise, config()).unwrap();
    let before = d.student.checksum().unwrap();
    let x0 = gaussian_latent(DIMS, 4, &mut ChaCha8Rng::seed_from_u64(5));
    let zero = LatentGrid::zeros(DIMS, 4);
    let c = ConditionEmbedding::null();
    let item = FmSample { x0: &x0, s: &zero, o: &zero, c: &c };
    d.critic_step(&[item]).unwrap();
    assert_eq!(d.student.checksum().unwrap(), before);
}

#[test]
fn critic_learns_a_fixed_distribution() {
    let (holistic, stepwise) = (tiny(1), tiny(2));
    let cfg = DistillConfig {
        lr_critic: 3e-3,
        ..config()
    };
    let mut d = Distiller::new(&holistic, &stepwise, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = vec![gaussian_latent(DIMS, 4, &mut rng); 8];
    let zero = LatentGrid::zeros(DIMS, 4);
    let c = ConditionEmbedding::null();
    let items: Vec<FmSample> = samples.iter().map(|x0| FmSample { x0, s: &zero, o: &zero, c: &c }).collect();
    let losses: Vec<f64> = (0..500).map(|_| d.critic_step(&items).unwrap()).collect();
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[450..].iter().sum::<f64>() / 50.0;
    assert!(tail <= 0.5 * head, "critic loss {head:.4} -> {tail:.4}");
}

#[test]
fn distillation_is_deterministic() {
    let (holistic, stepwise) = (tiny(1), tiny(2));
    let run = || {
        let mut d = Distiller::new(&holistic, &stepwise, config()).unwrap();
        let logs: Vec<_> = (0..3).map(|k| d.dual_guidance_step(&scene(k, 2)).unwrap()).collect();
        (logs, d.student.checksum().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_loss_modes() {
    let (holistic, stepwise) = (tiny(1), tiny(2));
    for (step_loss, holistic_loss) in [(true, false), (false, true)] {
        let cfg = DistillConfig {
            step_loss,
            holistic_loss,
            ..config()
        };
        let mut d = Distiller::new(&holistic, &stepwise, cfg).unwrap();
        let log = d.dual_guidance_step(&scene(0, 3)).unwrap();
        assert_eq!(log.loss_step > 0.0, step_loss);
        assert_eq!(log.loss_holistic > 0.0, holistic_loss);
        assert_eq!(d.counters.step_teacher_scores, if step_loss { 3 } else { 0 });
        assert_eq!(d.counters.holistic_teacher_scores, usize::from(holistic_loss));
    }
    let off = DistillConfig {
        step_loss: false,
        holistic_loss: false,
        ..config()
    };
    assert!(Distiller::new(&holistic, &stepwise, off).is_err());
}
