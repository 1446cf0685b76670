use bandflow::harness::accomp::{accomp_step, init_accomp, tie_single_expert, AccompConfig, AccompModel, AccompSettings, FfnKind};
use bandflow::moe::RouterState;
use bandflow::optim::Adam;
use bandflow::{Tape64, Tensor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fields(model: &AccompModel<f64>, probes: &[(Tensor64, Tensor64, f64, Option<usize>)]) -> Vec<u64> {
    let mut idle = ChaCha8Rng::seed_from_u64(0);
    let mut bits = Vec::new();
    for (xt, vocal, t, tag) in probes {
        let mut tape = Tape64::new();
        let x = tape.constant(xt.clone());
        let out = model
            .forward(&mut tape, x, vocal, *t, *tag, &RouterState::inference(), &mut idle)
            .unwrap();
        bits.extend(tape.value(out.field).data().iter().map(|v| v.to_bits()));
    }
    bits
}

/// Trains a plain feed-forward model and a one-expert model from tied
/// weights on the same draws. Returns the first step (0 = before training)
/// where their fields differ in any bit, or `None`.
pub fn single_expert_divergence(steps: usize) -> Option<usize> {
    let base = AccompConfig {
        frames: 16,
        width: 16,
        hidden: 32,
        ..AccompConfig::small()
    };
    let dense_s = AccompSettings {
        seed: 21,
        model: AccompConfig {
            ffn: FfnKind::Dense,
            ..base.clone()
        },
        steps,
        batch: 4,
        train_size: 32,
        test_size: 2,
        ..AccompSettings::default()
    };
    let single_s = AccompSettings {
        model: AccompConfig {
            ffn: FfnKind::SingleExpert,
            ..base
        },
        ..dense_s.clone()
    };
    let mut dense = init_accomp::<f64>(&dense_s).unwrap();
    let mut single = init_accomp::<f64>(&single_s).unwrap();
    tie_single_expert(&mut single, &dense).unwrap();

    let (train, test) = dense_s.datasets().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let probes: Vec<_> = test
        .iter()
        .flat_map(|p| {
            let xt = Tensor64::randn(p.accomp.shape(), &mut rng);
            [(xt.clone(), p.vocal.clone(), 0.3, Some(p.tag)), (xt, p.vocal.clone(), 0.8, None)]
        })
        .collect();

    let (mut opt_d, mut opt_s) = (Adam::with_lr(dense_s.lr), Adam::with_lr(single_s.lr));
    let (mut rng_d, mut rng_s) = (ChaCha8Rng::seed_from_u64(9), ChaCha8Rng::seed_from_u64(9));
    if fields(&dense, &probes) != fields(&single, &probes) {
        return Some(0);
    }
    for step in 0..steps {
        accomp_step(&mut dense, &mut opt_d, &train, &dense_s, step, &mut rng_d).unwrap();
        accomp_step(&mut single, &mut opt_s, &train, &single_s, step, &mut rng_s).unwrap();
        if fields(&dense, &probes) != fields(&single, &probes) {
            return Some(step + 1);
        }
    }
    None
}
