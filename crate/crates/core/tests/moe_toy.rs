//! Small routing tasks where the right expert assignment is known.

use bandflow::moe::{
    balance_loss, channel_stats, BalanceForm, BandMoe, ExpertGroup, MoeConfig, RouteAxis, RouterState, TauSchedule,
    BALANCE_WEIGHT,
};
use bandflow::optim::{Adam, Optimizer};
use bandflow::{Store64, Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 400;
const TOKENS: usize = 16;
const WIDTH: usize = 8;

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

/// One example: the routed input, its routing source and the target.
type Example = (Tensor64, Option<Tensor64>, Tensor64);

type RouteFn<'a> = &'a dyn Fn(&mut Tape64, &Store64, Var, Option<Var>, &RouterState, &mut ChaCha8Rng) -> (Var, Var);

/// Trains with `route(tape, h, source) -> (out, gates)` on fresh examples
/// from `make` under the usual temperature schedule.
fn train(
    store: &mut Store64,
    rng: &mut ChaCha8Rng,
    make: &dyn Fn(&mut ChaCha8Rng) -> Example,
    route: RouteFn,
) {
    let mut opt = Adam::with_lr(1e-2);
    let sched = TauSchedule::default();
    for step in 0..STEPS {
        let state = RouterState::training(sched.at(step, STEPS));
        store.zero_grad();
        let mut tape = Tape64::new();
        let mut terms = Vec::new();
        let mut gates = Vec::new();
        for _ in 0..4 {
            let (h, src, y) = make(rng);
            let h = tape.constant(h);
            let src = src.map(|s| tape.constant(s));
            let (out, g) = route(&mut tape, store, h, src, &state, rng);
            let y = tape.constant(y);
            terms.push(tape.mse(out, y).unwrap());
            gates.push(g);
        }
        let all = tape.concat(&terms, 0).unwrap();
        let fit = tape.sum(all);
        let bal = balance_loss(&mut tape, &gates, BALANCE_WEIGHT, BalanceForm::Corrected).unwrap();
        let loss = tape.add(fit, bal).unwrap();
        tape.backward(loss).unwrap();
        tape.write_param_grads(store).unwrap();
        opt.step(store);
    }
}

#[test]
fn aligned_router_follows_vocal_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = Store64::new();
    let group = ExpertGroup::new(&mut store, "aligned", WIDTH, 16, 2, WIDTH, RouteAxis::Token, &mut rng).unwrap();
    // the sign of the first vocal feature decides whether the target is h or -h
    let make = |rng: &mut ChaCha8Rng| -> Example {
        let h = Tensor64::randn(&[TOKENS, WIDTH], rng);
        let z = Tensor64::randn(&[TOKENS, WIDTH], rng);
        let mut y = h.clone();
        for t in 0..TOKENS {
            if z.at(t, 0) < 0.0 {
                y.data_mut()[t * WIDTH..(t + 1) * WIDTH].iter_mut().for_each(|v| *v = -*v);
            }
        }
        (h, Some(z), y)
    };
    let route = |tape: &mut Tape64, st: &Store64, h: Var, z: Option<Var>, s: &RouterState, rng: &mut ChaCha8Rng| {
        group.route(tape, st, h, z.unwrap(), s, rng).unwrap()
    };
    train(&mut store, &mut rng, &make, &route);

    let (mut agree, mut total) = (0usize, 0usize);
    for _ in 0..20 {
        let (h, z, _) = make(&mut rng);
        let z = z.unwrap();
        let mut tape = Tape64::new();
        let hv = tape.constant(h);
        let zv = tape.constant(z.clone());
        let (_, g) = group.route(&mut tape, &store, hv, zv, &RouterState::inference(), &mut rng).unwrap();
        let g = tape.value(g);
        for t in 0..TOKENS {
            agree += usize::from((argmax(g.row(t)) == 1) == (z.at(t, 0) < 0.0));
            total += 1;
        }
    }
    let acc = agree as f64 / total as f64;
    let acc = acc.max(1.0 - acc);
    assert!(acc > 0.9, "routing accuracy {acc}");
}

#[test]
fn controlled_router_flips_with_style_vocabulary() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = Store64::new();
    let cfg = MoeConfig {
        width: WIDTH,
        hidden: 16,
        experts: 2,
    };
    let moe = BandMoe::new(&mut store, "moe", &cfg, &mut rng).unwrap();
    let vocab = [Tensor64::randn(&[4, WIDTH], &mut rng), Tensor64::randn(&[4, WIDTH], &mut rng)];
    let prompt = |style: usize, rng: &mut ChaCha8Rng| {
        let rows: Vec<Vec<f64>> = (0..3).map(|_| vocab[style].row(rng.gen_range(0..4)).to_vec()).collect();
        Tensor64::from_rows(&rows).unwrap()
    };
    let make = |rng: &mut ChaCha8Rng| -> Example {
        let style = rng.gen_range(0..2);
        let h = Tensor64::randn(&[TOKENS, WIDTH], rng);
        let y = if style == 0 { h.clone() } else { h.map(|v| -v) };
        (h, Some(prompt(style, rng)), y)
    };
    let route = |tape: &mut Tape64, st: &Store64, h: Var, p: Option<Var>, s: &RouterState, rng: &mut ChaCha8Rng| {
        let z_sty = moe.style_summary(tape, st, h, p.unwrap()).unwrap();
        moe.controlled.route(tape, st, h, z_sty, s, rng).unwrap()
    };
    train(&mut store, &mut rng, &make, &route);

    let h = Tensor64::randn(&[TOKENS, WIDTH], &mut rng);
    let majority = |style: usize, rng: &mut ChaCha8Rng| {
        let mut votes = [0usize; 2];
        for _ in 0..10 {
            let mut tape = Tape64::new();
            let hv = tape.constant(h.clone());
            let pv = tape.constant(prompt(style, rng));
            let z = moe.style_summary(&mut tape, &store, hv, pv).unwrap();
            let (_, g) = moe.controlled.route(&mut tape, &store, hv, z, &RouterState::inference(), rng).unwrap();
            let g = tape.value(g);
            (0..TOKENS).for_each(|t| votes[argmax(g.row(t))] += 1);
        }
        argmax(&votes.map(|v| v as f64))
    };
    assert_ne!(majority(0, &mut rng), majority(1, &mut rng));
}

#[test]
fn acoustic_router_splits_channel_halves() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = Store64::new();
    let group = ExpertGroup::new(&mut store, "acoustic", WIDTH, 16, 2, 2, RouteAxis::Channel, &mut rng).unwrap();
    let half = WIDTH / 2;
    // low channels: mean +1, small spread, target x; high channels: mean -1,
    // wide spread, target -x
    let make = |rng: &mut ChaCha8Rng| -> Example {
        let mut x = Tensor64::randn(&[TOKENS, WIDTH], rng);
        let mut y = x.clone();
        for t in 0..TOKENS {
            for c in 0..WIDTH {
                let i = t * WIDTH + c;
                if c < half {
                    x.data_mut()[i] = 1.0 + 0.2 * x.data()[i];
                    y.data_mut()[i] = x.data()[i];
                } else {
                    x.data_mut()[i] = -1.0 + 1.5 * x.data()[i];
                    y.data_mut()[i] = -x.data()[i];
                }
            }
        }
        (x, None, y)
    };
    let route = |tape: &mut Tape64, st: &Store64, x: Var, _: Option<Var>, s: &RouterState, rng: &mut ChaCha8Rng| {
        let stats = channel_stats(tape, x).unwrap();
        group.route(tape, st, x, stats, s, rng).unwrap()
    };
    train(&mut store, &mut rng, &make, &route);

    let mut votes = [[0usize; 2]; 2];
    for _ in 0..20 {
        let (x, _, _) = make(&mut rng);
        let mut tape = Tape64::new();
        let xv = tape.constant(x);
        let stats = channel_stats(&mut tape, xv).unwrap();
        let (_, g) = group.route(&mut tape, &store, xv, stats, &RouterState::inference(), &mut rng).unwrap();
        let g = tape.value(g);
        for c in 0..WIDTH {
            votes[usize::from(c >= half)][argmax(g.row(c))] += 1;
        }
    }
    let low = argmax(&votes[0].map(|v| v as f64));
    let high = argmax(&votes[1].map(|v| v as f64));
    assert_ne!(low, high, "votes {votes:?}");
}
