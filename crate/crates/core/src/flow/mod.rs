//! Rectified flow matching: straight-line probability paths, the
//! conditional flow-matching loss, explicit Euler sampling, and
//! classifier-free guidance.

mod mlp;
mod wavenet;

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use mlp::{MlpConfig, MlpField};
pub use wavenet::{WaveNet, WaveNetConfig};

/// How training times are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeSampling {
    /// Uniform over `{k / T : k = 0..T-1}` with `T = train_timesteps`.
    Grid,
    /// Uniform on `[0, 1)`.
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub train_timesteps: usize,
    pub infer_steps: usize,
    /// Guidance scale γ.
    pub cfg_scale: f64,
    pub cond_drop_prob: f64,
    pub time_sampling: TimeSampling,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 100,
            infer_steps: 25,
            cfg_scale: 3.0,
            cond_drop_prob: 0.2,
            time_sampling: TimeSampling::Grid,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_timesteps == 0 || self.infer_steps == 0 {
            return Err(Error::Config("flow step counts must be positive".into()));
        }
        if self.cfg_scale.is_nan() || self.cfg_scale < 0.0 {
            return Err(Error::Config(format!("cfg scale {} must be >= 0", self.cfg_scale)));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!(
                "condition drop probability {} outside [0, 1]",
                self.cond_drop_prob
            )));
        }
        Ok(())
    }

    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.time_sampling {
            TimeSampling::Grid => rng.gen_range(0..self.train_timesteps) as f64 / self.train_timesteps as f64,
            TimeSampling::Continuous => rng.gen::<f64>(),
        }
    }
}

/// One point on the straight path between noise `x0` and data `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<S> {
    pub x0: Tensor<S>,
    pub x1: Tensor<S>,
    pub t: f64,
    /// `(1 - t)·x0 + t·x1`
    pub xt: Tensor<S>,
    /// `x1 - x0`
    pub u: Tensor<S>,
}

impl<S: Scalar> FlowSample<S> {
    pub fn new(x0: Tensor<S>, x1: Tensor<S>, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("flow time {t} outside [0, 1]")));
        }
        let (a, b) = (S::lit(1.0 - t), S::lit(t));
        let xt = x0.zip_map(&x1, |p, q| a * p + b * q)?;
        let u = x0.zip_map(&x1, |p, q| q - p)?;
        Ok(Self { x0, x1, t, xt, u })
    }
}

/// Draws noise and a time for the data point `x1`.
pub fn make_flow_sample<S: Scalar, R: Rng + ?Sized>(
    x1: &Tensor<S>,
    rng: &mut R,
    cfg: &FlowConfig,
) -> Result<FlowSample<S>> {
    if !x1.is_finite() {
        return Err(Error::NumericDomain {
            op: "make_flow_sample",
            detail: "non-finite data endpoint".into(),
        });
    }
    let x0 = Tensor::randn(x1.shape(), rng);
    let t = cfg.sample_time(rng);
    FlowSample::new(x0, x1.clone(), t)
}

/// A learned (or fixed) vector field `v(x, t | c)`.
pub trait VectorFieldEstimator<S: Scalar> {
    type Condition;

    fn store(&self) -> &ParameterStore<S>;

    /// `cond = None` requests the null (unconditional) field. The output must
    /// have the shape of `xt`.
    fn field(&self, tape: &mut Tape<S>, xt: Var, t: f64, cond: Option<&Self::Condition>) -> Result<Var>;
}

/// Wraps a closure as a parameter-free estimator.
pub struct FieldFn<S, C, F> {
    store: ParameterStore<S>,
    f: F,
    _cond: std::marker::PhantomData<fn(&C)>,
}

impl<S: Scalar, C, F> FieldFn<S, C, F>
where
    F: Fn(&Tensor<S>, f64, Option<&C>) -> Tensor<S>,
{
    pub fn new(f: F) -> Self {
        Self {
            store: ParameterStore::new(),
            f,
            _cond: std::marker::PhantomData,
        }
    }
}

impl<S: Scalar, C, F> VectorFieldEstimator<S> for FieldFn<S, C, F>
where
    F: Fn(&Tensor<S>, f64, Option<&C>) -> Tensor<S>,
{
    type Condition = C;

    fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn field(&self, tape: &mut Tape<S>, xt: Var, t: f64, cond: Option<&C>) -> Result<Var> {
        let v = (self.f)(tape.value(xt), t, cond);
        Ok(tape.constant(v))
    }
}

/// Mean squared distance between the estimated and target fields over the
/// batch. Each condition is replaced by the null condition with probability
/// `drop_prob`.
pub fn cfm_loss<S, E, R>(
    est: &E,
    tape: &mut Tape<S>,
    samples: &[FlowSample<S>],
    conds: &[E::Condition],
    drop_prob: f64,
    rng: &mut R,
) -> Result<Var>
where
    S: Scalar,
    E: VectorFieldEstimator<S>,
    R: Rng + ?Sized,
{
    if samples.is_empty() || samples.len() != conds.len() {
        return Err(Error::dim("cfm_loss", &[samples.len()], &[conds.len()]));
    }
    let mut terms = Vec::with_capacity(samples.len());
    let mut count = 0usize;
    for (s, c) in samples.iter().zip(conds) {
        let keep = !(drop_prob > 0.0 && rng.gen::<f64>() < drop_prob);
        let xt = tape.constant(s.xt.clone());
        let v = est.field(tape, xt, s.t, keep.then_some(c))?;
        if tape.shape(v) != s.u.shape() {
            return Err(Error::dim("cfm_loss", tape.shape(v), s.u.shape()));
        }
        let u = tape.constant(s.u.clone());
        let d = tape.sub(v, u)?;
        let sq = tape.square(d);
        terms.push(tape.sum(sq));
        count += s.u.numel();
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, S::one() / S::count(count)))
}

/// `γ·v_cond + (1 − γ)·v_uncond`
pub fn cfg_field<S: Scalar>(v_cond: &Tensor<S>, v_uncond: &Tensor<S>, gamma: f64) -> Result<Tensor<S>> {
    let (g, h) = (S::lit(gamma), S::lit(1.0 - gamma));
    v_cond.zip_map(v_uncond, |a, b| g * a + h * b)
}

/// One row of the optional sampling trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub mean_abs_x: f64,
    pub mean_abs_v: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> Result<()> {
    writeln!(w, "step,t,mean_abs_x,mean_abs_v")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.t, r.mean_abs_x, r.mean_abs_v)?;
    }
    Ok(())
}

/// Evaluates the (optionally guided) field at one state.
pub fn guided_field<S, E>(
    est: &E,
    x: &Tensor<S>,
    t: f64,
    cond: Option<&E::Condition>,
    gamma: f64,
) -> Result<Tensor<S>>
where
    S: Scalar,
    E: VectorFieldEstimator<S>,
{
    let eval = |c: Option<&E::Condition>| -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let v = est.field(&mut tape, xv, t, c)?;
        if tape.shape(v) != x.shape() {
            return Err(Error::dim("euler_sample", tape.shape(v), x.shape()));
        }
        Ok(tape.value(v).clone())
    };
    match cond {
        Some(c) if gamma != 1.0 => {
            let vc = eval(Some(c))?;
            let vu = eval(None)?;
            cfg_field(&vc, &vu, gamma)
        }
        other => eval(other),
    }
}

/// Integrates `dx/dt = v` with explicit Euler from `t_start` to 1.
///
/// Generation starts from noise at `t_start = 0`; style transfer starts from
/// a partially noised prompt at `t_start = 0.5` (see [`noised_prompt`]).
pub fn euler_sample_from<S, E>(
    est: &E,
    x_init: &Tensor<S>,
    cond: Option<&E::Condition>,
    cfg: &FlowConfig,
    t_start: f64,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Tensor<S>>
where
    S: Scalar,
    E: VectorFieldEstimator<S>,
{
    cfg.validate()?;
    if !(0.0..1.0).contains(&t_start) {
        return Err(Error::Config(format!("start time {t_start} outside [0, 1)")));
    }
    let dt = (1.0 - t_start) / cfg.infer_steps as f64;
    let mut x = x_init.clone();
    for step in 0..cfg.infer_steps {
        let t = t_start + step as f64 * dt;
        let v = guided_field(est, &x, t, cond, cfg.cfg_scale)?;
        let h = S::lit(dt);
        x = x.zip_map(&v, |a, b| a + h * b)?;
        if !x.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite sampler state".into(),
            });
        }
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                step,
                t: t + dt,
                mean_abs_x: x.mean_abs().as_f64(),
                mean_abs_v: v.mean_abs().as_f64(),
            });
        }
    }
    Ok(x)
}

/// Generation from `t = 0`.
pub fn euler_sample<S, E>(
    est: &E,
    x_init: &Tensor<S>,
    cond: Option<&E::Condition>,
    cfg: &FlowConfig,
) -> Result<Tensor<S>>
where
    S: Scalar,
    E: VectorFieldEstimator<S>,
{
    euler_sample_from(est, x_init, cond, cfg, 0.0, None)
}

/// Start state for style transfer: the prompt moved back along the training
/// path to time `t` with fresh noise, `(1 − t)·ε + t·prompt`.
pub fn noised_prompt<S: Scalar, R: Rng + ?Sized>(prompt: &Tensor<S>, t: f64, rng: &mut R) -> Result<Tensor<S>> {
    let eps = Tensor::randn(prompt.shape(), rng);
    Ok(FlowSample::new(eps, prompt.clone(), t)?.xt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Adam, Optimizer};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn endpoints_and_forced_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::<f64>::randn(&[4], &mut rng);
        let x1 = Tensor::randn(&[4], &mut rng);
        assert_eq!(FlowSample::new(x0.clone(), x1.clone(), 0.0).unwrap().xt, x0);
        assert_eq!(FlowSample::new(x0, x1.clone(), 1.0).unwrap().xt, x1);
        let s = FlowSample::new(t1(&[0.0, 0.0]), t1(&[2.0, 4.0]), 0.5).unwrap();
        assert_eq!(s.xt, t1(&[1.0, 2.0]));
        assert_eq!(s.u, t1(&[2.0, 4.0]));
    }

    #[test]
    fn grid_times_lie_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FlowConfig::default();
        for _ in 0..200 {
            let s = make_flow_sample(&t1(&[1.0]), &mut rng, &cfg).unwrap();
            let k = s.t * 100.0;
            assert!((k - k.round()).abs() < 1e-9 && s.t < 1.0);
        }
    }

    #[test]
    fn defaults() {
        let c = FlowConfig::default();
        assert_eq!((c.infer_steps, c.cfg_scale, c.cond_drop_prob), (25, 3.0, 0.2));
        assert!(FlowConfig { infer_steps: 0, ..c.clone() }.validate().is_err());
        assert!(FlowConfig { cond_drop_prob: 1.5, ..c }.validate().is_err());
    }

    fn oracle_loss(offset: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = FlowConfig::default();
        let samples: Vec<_> = (0..4)
            .map(|_| make_flow_sample(&Tensor::<f64>::randn(&[3, 2], &mut rng), &mut rng, &cfg).unwrap())
            .collect();
        // The oracle recovers u from xt, t and the known x1.
        let x1s: Vec<Tensor<f64>> = samples.iter().map(|s| s.x1.clone()).collect();
        let est = FieldFn::new(move |xt: &Tensor<f64>, t: f64, c: Option<&usize>| {
            let x1 = &x1s[*c.unwrap()];
            xt.zip_map(x1, |x, y| (y - x) / (1.0 - t) + offset).unwrap()
        });
        let mut tape = Tape::new();
        let l = cfm_loss(&est, &mut tape, &samples, &[0, 1, 2, 3], 0.0, &mut rng).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn cfm_loss_exact_and_offset() {
        assert!(oracle_loss(0.0) < 1e-24);
        assert!((oracle_loss(1.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cfm_loss_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = make_flow_sample(&Tensor::<f64>::zeros(&[2, 2]), &mut rng, &FlowConfig::default()).unwrap();
        let est = FieldFn::new(|_: &Tensor<f64>, _, _: Option<&()>| Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let r = cfm_loss(&est, &mut tape, &[s], &[()], 0.0, &mut rng);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_estimator_training_reduces_loss() {
        // v(x, t) = a·x + b·t + c on 1-D data concentrated at 1.5
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::<f64>::new();
        store.insert("coef", Tensor::zeros(&[3])).unwrap();
        struct Lin(ParameterStore<f64>);
        impl VectorFieldEstimator<f64> for Lin {
            type Condition = ();
            fn store(&self) -> &ParameterStore<f64> {
                &self.0
            }
            fn field(&self, tape: &mut Tape<f64>, xt: Var, t: f64, _: Option<&()>) -> Result<Var> {
                let c = tape.param(&self.0, "coef")?;
                let feats = tape.constant(Tensor::from_f64(&[1, 3], &[tape.value(xt).item(), t, 1.0])?);
                let ct = tape.reshape(c, &[3, 1])?;
                let v = tape.matmul(feats, ct)?;
                tape.reshape(v, &[1])
            }
        }
        let mut est = Lin(store);
        let cfg = FlowConfig {
            time_sampling: TimeSampling::Continuous,
            ..FlowConfig::default()
        };
        let mut opt = Adam::with_lr(0.05);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(99);
        let eval: Vec<_> = (0..256)
            .map(|_| make_flow_sample(&t1(&[1.5]), &mut eval_rng, &cfg).unwrap())
            .collect();
        let loss_of = |est: &Lin| {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let l = cfm_loss(est, &mut tape, &eval, &[(); 256], 0.0, &mut r).unwrap();
            tape.value(l).item()
        };
        let before = loss_of(&est);
        for _ in 0..300 {
            let batch: Vec<_> = (0..32)
                .map(|_| make_flow_sample(&t1(&[1.5]), &mut rng, &cfg).unwrap())
                .collect();
            est.0.zero_grad();
            let mut tape = Tape::new();
            let l = cfm_loss(&est, &mut tape, &batch, &[(); 32], 0.0, &mut rng).unwrap();
            tape.backward(l).unwrap();
            tape.write_param_grads(&mut est.0).unwrap();
            opt.step(&mut est.0);
        }
        let after = loss_of(&est);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn euler_constant_field_and_straight_path() {
        let u0 = t1(&[0.3, -1.25, 2.0]);
        let uc = u0.clone();
        let est = FieldFn::new(move |_: &Tensor<f64>, _, _: Option<&()>| uc.clone());
        let x = t1(&[1.0, 2.0, 3.0]);
        let cfg = FlowConfig::default();
        let out = euler_sample(&est, &x, None, &cfg).unwrap();
        for ((o, a), b) in out.data().iter().zip(x.data()).zip(u0.data()) {
            assert!((o - (a + b)).abs() < 1e-12);
        }

        let x1 = t1(&[5.0, -3.0, 0.5]);
        let x0 = x.clone();
        let (a, b) = (x0.clone(), x1.clone());
        let est = FieldFn::new(move |_: &Tensor<f64>, _, _: Option<&()>| b.zip_map(&a, |p, q| p - q).unwrap());
        let cfg1 = FlowConfig {
            infer_steps: 1,
            ..FlowConfig::default()
        };
        assert_eq!(euler_sample(&est, &x0, None, &cfg1).unwrap(), x1);
    }

    #[test]
    fn euler_two_point_dataset_reaches_endpoints() {
        // Marginal field of straight paths from N(0,1) to {-1, +1}:
        // v(x,t) = E[x1 - x0 | xt = x] = (E[x1|x] - x) / (1 - t).
        let field = |x: f64, t: f64| -> f64 {
            if t >= 1.0 {
                return 0.0;
            }
            let s2 = (1.0 - t) * (1.0 - t);
            let lp = -(x - t).powi(2) / (2.0 * s2);
            let lm = -(x + t).powi(2) / (2.0 * s2);
            let m = lp.max(lm);
            let (wp, wm) = ((lp - m).exp(), (lm - m).exp());
            let e1 = (wp - wm) / (wp + wm);
            (e1 - x) / (1.0 - t)
        };
        let est = FieldFn::new(move |x: &Tensor<f64>, t, _: Option<&()>| x.map(|v| field(v, t)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = FlowConfig::default();
        for _ in 0..200 {
            let x0 = Tensor::randn(&[1], &mut rng);
            let out = euler_sample(&est, &x0, None, &cfg).unwrap().item();
            assert!((out.abs() - 1.0).abs() < 0.05, "{out}");
        }
    }

    #[test]
    fn euler_reports_divergence_step() {
        let est = FieldFn::new(|x: &Tensor<f64>, t, _: Option<&()>| {
            if t > 0.1 {
                x.map(|_| f64::INFINITY)
            } else {
                x.clone()
            }
        });
        let r = euler_sample(&est, &t1(&[1.0]), None, &FlowConfig::default());
        assert!(matches!(r, Err(Error::Divergence { step: 3, .. })), "{r:?}");
    }

    #[test]
    fn style_transfer_starts_half_way() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prompt = t1(&[2.0, -2.0]);
        let start = noised_prompt(&prompt, 0.5, &mut rng).unwrap();
        let target = t1(&[1.0, 1.0]);
        let (a, b) = (start.clone(), target.clone());
        // exact straight field from the start state over the remaining half
        let est = FieldFn::new(move |_: &Tensor<f64>, _, _: Option<&()>| {
            b.zip_map(&a, |p, q| (p - q) / 0.5).unwrap()
        });
        let mut rows = Vec::new();
        let out = euler_sample_from(&est, &start, None, &FlowConfig::default(), 0.5, Some(&mut rows)).unwrap();
        for (o, e) in out.data().iter().zip(target.data()) {
            assert!((o - e).abs() < 1e-12);
        }
        assert_eq!(rows.len(), 25);
        assert!((rows[0].t - 0.52).abs() < 1e-12 && (rows[24].t - 1.0).abs() < 1e-12);
        let mut csv = Vec::new();
        write_trace_csv(&rows, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,t,mean_abs_x,mean_abs_v\n0,"));
    }

    #[test]
    fn cfg_field_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[5], &mut rng);
        let b = Tensor::<f64>::randn(&[5], &mut rng);
        assert_eq!(cfg_field(&a, &b, 1.0).unwrap(), a);
        assert_eq!(cfg_field(&a, &b, 0.0).unwrap(), b);
        let r = cfg_field(&t1(&[2.0]), &t1(&[0.0]), 3.0).unwrap();
        assert_eq!(r.item(), 6.0);
        assert!(cfg_field(&a, &t1(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn guidance_uses_both_fields() {
        let est = FieldFn::new(|x: &Tensor<f64>, _, c: Option<&f64>| x.map(|_| c.copied().unwrap_or(0.0)));
        let v = guided_field(&est, &t1(&[0.0]), 0.0, Some(&2.0), 3.0).unwrap();
        assert_eq!(v.item(), 6.0);
        let v = guided_field(&est, &t1(&[0.0]), 0.0, Some(&2.0), 1.0).unwrap();
        assert_eq!(v.item(), 2.0);
    }

    proptest! {
        #[test]
        fn path_is_linear(t in 0.0f64..=1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor::<f64>::randn(&[6], &mut rng);
            let x1 = Tensor::<f64>::randn(&[6], &mut rng);
            let s = FlowSample::new(x0.clone(), x1.clone(), t).unwrap();
            for k in 0..6 {
                let lhs = s.xt.data()[k] - x0.data()[k];
                let rhs = t * (x1.data()[k] - x0.data()[k]);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn cfg_is_affine_in_gamma(
            a in proptest::collection::vec(-64i32..64, 4),
            b in proptest::collection::vec(-64i32..64, 4),
            g1 in 0u32..32, g2 in 0u32..32,
        ) {
            // dyadic inputs keep every product exact
            let ta = Tensor::<f64>::from_f64(&[4], &a.iter().map(|&v| v as f64 / 8.0).collect::<Vec<_>>()).unwrap();
            let tb = Tensor::<f64>::from_f64(&[4], &b.iter().map(|&v| v as f64 / 8.0).collect::<Vec<_>>()).unwrap();
            let (g1, g2) = (g1 as f64 / 4.0, g2 as f64 / 4.0);
            let lhs = cfg_field(&ta, &tb, g1).unwrap().zip_map(&cfg_field(&ta, &tb, g2).unwrap(), |x, y| x + y).unwrap();
            let rhs = cfg_field(&ta, &tb, (g1 + g2) / 2.0).unwrap().map(|x| 2.0 * x);
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn oracle_field_reaches_target_for_any_step_count(steps in 1usize..60, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor::<f64>::randn(&[3], &mut rng);
            let x1 = Tensor::<f64>::randn(&[3], &mut rng);
            let (a, b) = (x0.clone(), x1.clone());
            let est = FieldFn::new(move |_: &Tensor<f64>, _, _: Option<&()>| b.zip_map(&a, |p, q| p - q).unwrap());
            let cfg = FlowConfig { infer_steps: steps, ..FlowConfig::default() };
            let out = euler_sample(&est, &x0, None, &cfg).unwrap();
            for (o, e) in out.data().iter().zip(x1.data()) {
                prop_assert!((o - e).abs() < 1e-10);
            }
        }
    }
}
