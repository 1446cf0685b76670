//! Band mixture of experts: temporally aligned, prompt-controlled, and
//! per-channel acoustic expert groups with Gumbel-softmax routers, a dense
//! global router over the time embedding, and the load-balancing penalty.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Init, Linear};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::sdp_attention;

pub const BALANCE_WEIGHT: f64 = 0.1;
pub const TAU_START: f64 = 2.0;
pub const TAU_END: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Noisy softmax, differentiable; used in training.
    Dense,
    /// One-hot argmax of the noise-free logits.
    Hard,
}

/// Router settings shared by all groups during one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterState {
    pub tau: f64,
    pub mode: GateMode,
    /// Whether dense gates draw Gumbel noise.
    pub noise: bool,
}

impl RouterState {
    pub fn training(tau: f64) -> Self {
        Self {
            tau,
            mode: GateMode::Dense,
            noise: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            tau: TAU_END,
            mode: GateMode::Hard,
            noise: false,
        }
    }
}

/// Linear temperature decay from `start` to `end` over training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            start: TAU_START,
            end: TAU_END,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let p = if total <= 1 {
            1.0
        } else {
            (step as f64 / (total - 1) as f64).clamp(0.0, 1.0)
        };
        self.start + (self.end - self.start) * p
    }
}

/// Standard Gumbel draws `−ln(−ln U)`.
pub fn gumbel_noise<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            S::lit(-(-u.ln()).ln())
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot rows at the argmax of each row of `logits[U×N]`.
pub fn hard_gates<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (u, n) = (logits.rows(), logits.cols());
    let mut out = vec![S::zero(); u * n];
    for r in 0..u {
        out[r * n + argmax(logits.row(r))] = S::one();
    }
    Tensor::new(&[u, n], out).expect("same shape as logits")
}

/// Gate weights `softmax((logits + ζ) / τ)` per row, or the one-hot argmax
/// in hard mode. `noise = None` forces ζ = 0.
pub fn gumbel_gate<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    tau: f64,
    noise: Option<&Tensor<S>>,
    mode: GateMode,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("gate temperature {tau} must be > 0")));
    }
    if tape.value(logits).rank() != 2 {
        return Err(Error::Shape {
            op: "gumbel_gate",
            detail: format!("logits must be [units × experts], got {:?}", tape.shape(logits)),
        });
    }
    match mode {
        GateMode::Hard => {
            let g = hard_gates(tape.value(logits));
            Ok(tape.constant(g))
        }
        GateMode::Dense => {
            let z = match noise {
                Some(n) => {
                    let nv = tape.constant(n.clone());
                    tape.add(logits, nv)?
                }
                None => logits,
            };
            let z = tape.scale(z, S::lit(1.0 / tau));
            tape.softmax(z, 1)
        }
    }
}

/// Shannon entropy (nats) of each gate row.
pub fn gate_entropy<S: Scalar>(gates: &Tensor<S>) -> Vec<f64> {
    (0..gates.rows())
        .map(|r| {
            gates
                .row(r)
                .iter()
                .map(|g| g.as_f64())
                .filter(|&g| g > 0.0)
                .map(|g| -g * g.ln())
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Which axis of `[T × d]` the group routes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteAxis {
    Token,
    Channel,
}

/// A set of same-width feed-forward experts with a linear router.
#[derive(Clone, Debug)]
pub struct ExpertGroup {
    pub name: String,
    pub experts: Vec<FeedForward>,
    pub router: Linear,
    pub axis: RouteAxis,
}

impl ExpertGroup {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        width: usize,
        hidden: usize,
        experts: usize,
        route_width: usize,
        axis: RouteAxis,
        rng: &mut R,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config(format!("group {name} needs at least one expert")));
        }
        let ex = (0..experts)
            .map(|i| FeedForward::new(store, &format!("{name}.experts.{i}"), width, hidden, rng))
            .collect::<Result<_>>()?;
        let router = Linear::new(store, &format!("{name}.router"), route_width, experts, true, Init::Uniform, rng)?;
        Ok(Self {
            name: name.to_string(),
            experts: ex,
            router,
            axis,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Gate weights for routing signal `source[U × route_width]`.
    pub fn gates<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        source: Var,
        state: &RouterState,
        rng: &mut R,
    ) -> Result<Var> {
        let logits = self.router.forward(tape, store, source)?;
        // A single expert always receives weight exactly 1; skipping the
        // draw keeps the random stream identical to an expert-free model.
        let noise = if state.noise && state.mode == GateMode::Dense && self.len() > 1 {
            Some(gumbel_noise(tape.shape(logits), rng))
        } else {
            None
        };
        gumbel_gate(tape, logits, state.tau, noise.as_ref(), state.mode)
    }

    /// Mixes expert outputs on `h[T × d]` with `gates` over the group's axis.
    pub fn mix<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParameterStore<S>, h: Var, gates: Var) -> Result<Var> {
        let outs = self
            .experts
            .iter()
            .map(|e| e.forward(tape, store, h))
            .collect::<Result<Vec<_>>>()?;
        match self.axis {
            RouteAxis::Token => tape.mix_rows(gates, &outs),
            RouteAxis::Channel => {
                let outs_t = outs.iter().map(|&o| tape.transpose(o)).collect::<Result<Vec<_>>>()?;
                let m = tape.mix_rows(gates, &outs_t)?;
                tape.transpose(m)
            }
        }
    }

    /// Routes tokens of `h` by `source` (one row per token).
    pub fn route<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        h: Var,
        source: Var,
        state: &RouterState,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let units = match self.axis {
            RouteAxis::Token => tape.shape(h)[0],
            RouteAxis::Channel => tape.shape(h)[1],
        };
        if tape.shape(source)[0] != units {
            return Err(Error::dim("route", tape.shape(h), tape.shape(source)));
        }
        let g = self.gates(tape, store, source, state, rng)?;
        let out = self.mix(tape, store, h, g)?;
        Ok((out, g))
    }
}

/// Per-channel `(mean, variance)` over time of `x[T × d]`, shape `[d × 2]`.
pub fn channel_stats<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let d = tape.shape(x)[1];
    let xt = tape.transpose(x)?;
    let m = tape.mean_axis(xt, 1)?;
    let sq = tape.square(xt);
    let m2 = tape.mean_axis(sq, 1)?;
    let mm = tape.square(m);
    let var = tape.sub(m2, mm)?;
    let m = tape.reshape(m, &[d, 1])?;
    let var = tape.reshape(var, &[d, 1])?;
    tape.concat(&[m, var], 1)
}

/// `α·o_aligned + β·o_controlled` with `gate = [α, β]` of shape `[1 × 2]`.
pub fn global_mix<S: Scalar>(tape: &mut Tape<S>, o_aligned: Var, o_controlled: Var, gate: Var) -> Result<Var> {
    let a = tape.slice(gate, 1, 0, 1)?;
    let b = tape.slice(gate, 1, 1, 1)?;
    let a = tape.reshape(a, &[1])?;
    let b = tape.reshape(b, &[1])?;
    let x = tape.scale_by(o_aligned, a)?;
    let y = tape.scale_by(o_controlled, b)?;
    tape.add(x, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub width: usize,
    pub hidden: usize,
    pub experts: usize,
}

/// Gates produced by one Band-MOE evaluation, kept for the balance penalty
/// and route traces.
#[derive(Clone, Debug)]
pub struct MoeGates {
    pub aligned: Var,
    pub controlled: Var,
    pub acoustic: Var,
    /// `[1 × 2]` global mix `(α_t, β_t)`.
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct BandMoe {
    pub width: usize,
    pub aligned: ExpertGroup,
    pub controlled: ExpertGroup,
    pub acoustic: ExpertGroup,
    pub style_query: Linear,
    pub global_router: Linear,
}

impl BandMoe {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        cfg: &MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, h, n) = (cfg.width, cfg.hidden, cfg.experts);
        Ok(Self {
            width: d,
            aligned: ExpertGroup::new(store, &format!("{name}.aligned"), d, h, n, d, RouteAxis::Token, rng)?,
            controlled: ExpertGroup::new(store, &format!("{name}.controlled"), d, h, n, d, RouteAxis::Token, rng)?,
            acoustic: ExpertGroup::new(store, &format!("{name}.acoustic"), d, h, n, 2, RouteAxis::Channel, rng)?,
            style_query: Linear::new(store, &format!("{name}.style_query"), d, d, false, Init::Uniform, rng)?,
            global_router: Linear::new(store, &format!("{name}.global_router"), d, 2, true, Init::Uniform, rng)?,
        })
    }

    /// Style summary per token: cross-attention of `h·W_q` over the prompt.
    pub fn style_summary<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        h: Var,
        z_p: Var,
    ) -> Result<Var> {
        let q = self.style_query.forward(tape, store, h)?;
        sdp_attention(tape, q, z_p, z_p)
    }

    /// `h[T×d]`, `z_v[T×d]`, `z_p[L×d]`, `time_emb[1×d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        h: Var,
        z_v: Var,
        z_p: Var,
        time_emb: Var,
        state: &RouterState,
        rng: &mut R,
    ) -> Result<(Var, MoeGates)> {
        if tape.shape(z_v) != tape.shape(h) {
            return Err(Error::dim("route_aligned", tape.shape(h), tape.shape(z_v)));
        }
        let (o_a, g_a) = self.aligned.route(tape, store, h, z_v, state, rng)?;
        let z_sty = self.style_summary(tape, store, h, z_p)?;
        let (o_c, g_c) = self.controlled.route(tape, store, h, z_sty, state, rng)?;

        let logits = self.global_router.forward(tape, store, time_emb)?;
        let noise = (state.noise && state.mode == GateMode::Dense).then(|| gumbel_noise(&[1, 2], rng));
        let g_g = gumbel_gate(tape, logits, state.tau, noise.as_ref(), GateMode::Dense)?;
        let combined = global_mix(tape, o_a, o_c, g_g)?;

        let stats = channel_stats(tape, combined)?;
        let (out, g_s) = self.acoustic.route(tape, store, combined, stats, state, rng)?;
        Ok((
            out,
            MoeGates {
                aligned: g_a,
                controlled: g_c,
                acoustic: g_s,
                global: g_g,
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BalanceForm {
    /// `α·N·Σ_i f_i·P_i` with `f_i` the argmax fraction and `P_i` the mean gate.
    Corrected,
    /// `α·N·Σ_i P_i`, constant under normalized gates.
    Literal,
}

/// Load-balancing penalty summed over gate batches `[U × N]`.
pub fn balance_loss<S: Scalar>(tape: &mut Tape<S>, gates: &[Var], alpha: f64, form: BalanceForm) -> Result<Var> {
    if gates.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[1])));
    }
    let mut terms = Vec::with_capacity(gates.len());
    for &g in gates {
        let gv = tape.value(g).clone();
        if gv.rank() != 2 {
            return Err(Error::Shape {
                op: "balance_loss",
                detail: format!("gates must be [units × experts], got {:?}", gv.shape()),
            });
        }
        let (u, n) = (gv.rows(), gv.cols());
        let p = tape.mean_axis(g, 0)?;
        let weighted = match form {
            BalanceForm::Literal => p,
            BalanceForm::Corrected => {
                let mut f = vec![S::zero(); n];
                for r in 0..u {
                    f[argmax(gv.row(r))] += S::one();
                }
                let f = Tensor::new(&[n], f.into_iter().map(|c| c / S::count(u)).collect())?;
                let f = tape.constant(f);
                tape.mul(f, p)?
            }
        };
        let s = tape.sum(weighted);
        terms.push(tape.scale(s, S::lit(alpha * n as f64)));
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.sum(all))
}

/// One row of a routing trace.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteRecord {
    pub group: String,
    pub unit: usize,
    pub expert: usize,
    pub entropy: f64,
    pub tau: f64,
    pub t: f64,
}

pub fn route_records<S: Scalar>(group: &str, gates: &Tensor<S>, tau: f64, t: f64) -> Vec<RouteRecord> {
    let ent = gate_entropy(gates);
    (0..gates.rows())
        .map(|r| RouteRecord {
            group: group.to_string(),
            unit: r,
            expert: argmax(gates.row(r)),
            entropy: ent[r],
            tau,
            t,
        })
        .collect()
}

pub fn write_route_csv<W: Write>(rows: &[RouteRecord], mut w: W) -> Result<()> {
    writeln!(w, "group,unit,expert,entropy,tau,t")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.group, r.unit, r.expert, r.entropy, r.tau, r.t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gates_of(logits: &Tensor<f64>, tau: f64, noise: Option<&Tensor<f64>>, mode: GateMode) -> Tensor<f64> {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let g = gumbel_gate(&mut tape, l, tau, noise, mode).unwrap();
        tape.value(g).clone()
    }

    #[test]
    fn equal_logits_give_uniform_gates() {
        let g = gates_of(&Tensor::zeros(&[3, 4]), 1.0, None, GateMode::Dense);
        assert!(g.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hard_mode_picks_argmax() {
        let l = Tensor::from_f64(&[1, 4], &[2.0, 1.0, 0.0, -1.0]).unwrap();
        assert_eq!(gates_of(&l, 1.0, None, GateMode::Hard).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_positive_tau_rejected() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(gumbel_gate(&mut tape, l, 0.0, None, GateMode::Dense), Err(Error::Config(_))));
        assert!(matches!(gumbel_gate(&mut tape, l, -1.0, None, GateMode::Hard), Err(Error::Config(_))));
    }

    #[test]
    fn low_temperature_lowers_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Tensor::from_f64(&[1, 4], &[0.5, 0.2, -0.1, 0.3]).unwrap();
        let mean_entropy = |tau: f64, rng: &mut ChaCha8Rng| {
            (0..1000)
                .map(|_| {
                    let z = gumbel_noise(&[1, 4], rng);
                    gate_entropy(&gates_of(&l, tau, Some(&z), GateMode::Dense))[0]
                })
                .sum::<f64>()
                / 1000.0
        };
        let cold = mean_entropy(0.3, &mut rng);
        let hot = mean_entropy(2.0, &mut rng);
        assert!(cold < hot, "{cold} vs {hot}");
    }

    #[test]
    fn tau_schedule_endpoints() {
        let s = TauSchedule::default();
        assert_eq!(s.at(0, 100), 2.0);
        assert!((s.at(99, 100) - 0.3).abs() < 1e-15);
        assert!(s.at(50, 100) < 2.0 && s.at(50, 100) > 0.3);
    }

    fn group_with(n: usize, axis: RouteAxis, seed: u64) -> (ParameterStore<f64>, ExpertGroup) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let route = if axis == RouteAxis::Token { 4 } else { 2 };
        let g = ExpertGroup::new(&mut store, &format!("g{seed}"), 4, 8, n, route, axis, &mut rng).unwrap();
        (store, g)
    }

    #[test]
    fn single_expert_group_is_its_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, g) = group_with(1, RouteAxis::Token, 1);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[5, 4], &mut rng));
        let zv = tape.constant(Tensor::randn(&[5, 4], &mut rng));
        let (o, _) = g.route(&mut tape, &store, h, zv, &RouterState::training(1.0), &mut rng).unwrap();
        let e = g.experts[0].forward(&mut tape, &store, h).unwrap();
        assert_eq!(tape.value(o), tape.value(e));

        let (store, g) = group_with(1, RouteAxis::Channel, 2);
        let stats = channel_stats(&mut tape, h).unwrap();
        let (o, _) = g.route(&mut tape, &store, h, stats, &RouterState::training(1.0), &mut rng).unwrap();
        let e = g.experts[0].forward(&mut tape, &store, h).unwrap();
        assert_eq!(tape.value(o), tape.value(e));
    }

    #[test]
    fn hard_routing_selects_one_expert_per_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, g) = group_with(3, RouteAxis::Token, 3);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[6, 4], &mut rng));
        let zv = tape.constant(Tensor::randn(&[6, 4], &mut rng));
        let (o, gates) = g.route(&mut tape, &store, h, zv, &RouterState::inference(), &mut rng).unwrap();
        let outs: Vec<_> = g.experts.iter().map(|e| e.forward(&mut tape, &store, h).unwrap()).collect();
        let gv = tape.value(gates).clone();
        for r in 0..6 {
            let k = argmax(gv.row(r));
            assert_eq!(gv.row(r).iter().sum::<f64>(), 1.0);
            assert_eq!(tape.value(o).row(r), tape.value(outs[k]).row(r));
        }

        let (store, g) = group_with(3, RouteAxis::Channel, 4);
        let stats = channel_stats(&mut tape, h).unwrap();
        let (o, gates) = g.route(&mut tape, &store, h, stats, &RouterState::inference(), &mut rng).unwrap();
        let outs: Vec<_> = g.experts.iter().map(|e| e.forward(&mut tape, &store, h).unwrap()).collect();
        let gv = tape.value(gates).clone();
        assert_eq!(gv.shape(), &[4, 3]);
        for c in 0..4 {
            let k = argmax(gv.row(c));
            for t in 0..6 {
                assert_eq!(tape.value(o).at(t, c), tape.value(outs[k]).at(t, c));
            }
        }
    }

    #[test]
    fn route_length_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, g) = group_with(2, RouteAxis::Token, 5);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[6, 4], &mut rng));
        let zv = tape.constant(Tensor::randn(&[5, 4], &mut rng));
        assert!(matches!(
            g.route(&mut tape, &store, h, zv, &RouterState::inference(), &mut rng),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_prompt_token_summary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParameterStore::<f64>::new();
        let cfg = MoeConfig {
            width: 4,
            hidden: 8,
            experts: 2,
        };
        let moe = BandMoe::new(&mut store, "moe", &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[5, 4], &mut rng));
        let zp = tape.constant(Tensor::randn(&[1, 4], &mut rng));
        let s = moe.style_summary(&mut tape, &store, h, zp).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(s).row(r), tape.value(zp).row(0));
        }
        let zv = tape.constant(Tensor::randn(&[5, 4], &mut rng));
        let te = tape.constant(Tensor::randn(&[1, 4], &mut rng));
        let (out, gates) = moe
            .forward(&mut tape, &store, h, zv, zp, te, &RouterState::training(1.0), &mut rng)
            .unwrap();
        assert_eq!(tape.shape(out), &[5, 4]);
        let gg = tape.value(gates.global).clone();
        assert!((gg.data()[0] + gg.data()[1] - 1.0f64).abs() < 1e-12);
        let (_, hard) = moe
            .forward(&mut tape, &store, h, zv, zp, te, &RouterState::inference(), &mut rng)
            .unwrap();
        assert!(tape.value(hard.global).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn global_mix_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[2, 2], 2.0));
        let c = tape.constant(Tensor::full(&[2, 2], 4.0));
        let g = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let m = global_mix(&mut tape, a, c, g).unwrap();
        assert_eq!(tape.value(m), tape.value(a));
        let g = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
        let m = global_mix(&mut tape, a, c, g).unwrap();
        assert!(tape.value(m).data().iter().all(|&x| x == 3.0));
    }

    fn balance_of(g: Tensor<f64>, form: BalanceForm) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(g);
        let l = balance_loss(&mut tape, &[v], BALANCE_WEIGHT, form).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn balance_closed_forms() {
        // four units each routed to a different expert, dense gates uniform
        let mut uniform = vec![0.25; 16];
        for i in 0..4 {
            uniform[i * 4 + i] += 1e-9;
            uniform[i * 4 + (i + 1) % 4] -= 1e-9;
        }
        let u = balance_of(Tensor::from_f64(&[4, 4], &uniform).unwrap(), BalanceForm::Corrected);
        assert!((u - 0.1).abs() < 1e-9, "{u}");
        let mut onehot = vec![0.0; 16];
        for i in 0..4 {
            onehot[i * 4] = 1.0;
        }
        let c = balance_of(Tensor::from_f64(&[4, 4], &onehot).unwrap(), BalanceForm::Corrected);
        assert!((c - 0.4).abs() < 1e-12);
    }

    #[test]
    fn literal_balance_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let l = Tensor::randn(&[9, 4], &mut rng).map(|x: f64| 3.0 * x);
            let g = gates_of(&l, 0.7, None, GateMode::Dense);
            assert!((balance_of(g, BalanceForm::Literal) - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn corrected_balance_minimum_is_uniform() {
        // hard assignments of N units to N experts, for every N <= 4
        for n in 1..=4usize {
            let total = n.pow(n as u32);
            for code in 0..total {
                let mut g = vec![0.0; n * n];
                let mut c = code;
                let mut counts = vec![0; n];
                for u in 0..n {
                    g[u * n + c % n] = 1.0;
                    counts[c % n] += 1;
                    c /= n;
                }
                let l = balance_of(Tensor::from_f64(&[n, n], &g).unwrap(), BalanceForm::Corrected);
                if counts.iter().all(|&k| k == 1) {
                    assert!((l - 0.1).abs() < 1e-12);
                } else {
                    assert!(l > 0.1 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn route_csv_layout() {
        let g = Tensor::<f64>::from_f64(&[2, 2], &[0.9, 0.1, 0.5, 0.5]).unwrap();
        let rows = route_records("aligned", &g, 0.3, 0.5);
        assert_eq!(rows[0].expert, 0);
        assert!((rows[1].entropy - 2f64.ln()).abs() < 1e-12);
        let mut out = Vec::new();
        write_route_csv(&rows, &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("group,unit,expert,entropy,tau,t\naligned,0,0,"));
    }

    proptest! {
        #[test]
        fn gates_normalized_and_hard_is_argmax(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            tau in 0.05f64..5.0,
            seed in 0u64..1000,
        ) {
            let l = Tensor::from_f64(&[3, 4], &vals).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = gumbel_noise(&[3, 4], &mut rng);
            let g = gates_of(&l, tau, Some(&z), GateMode::Dense);
            for r in 0..3 {
                prop_assert!((g.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(g.row(r).iter().all(|&x| x >= 0.0));
            }
            let h = gates_of(&l, tau, Some(&z), GateMode::Hard);
            prop_assert_eq!(h, hard_gates(&l));
        }
    }
}
