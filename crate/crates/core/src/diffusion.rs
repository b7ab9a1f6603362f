//! Noise schedules, the forward corruption process, the x0-prediction
//! training loss and the stochastic DDPM sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, StreamRng};
use crate::tensor::{Binding, Graph, ParamGrads, ParamSet, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step coefficients of a discrete diffusion process.
///
/// Index 0 is the clean data (`alpha_bar[0] == 1`); steps run `1..=T`.
/// `network_t[k]` is the timestep fed to the denoiser for step `k`, which
/// differs from `k` on strided sub-schedules.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
    network_t: Vec<usize>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, zero_snr: bool) -> Result<NoiseSchedule> {
    if steps < 2 {
        return invalid(format!("schedule needs at least 2 steps, got {steps}"));
    }
    let t_f = steps as f64;
    let mut alpha_bar = vec![1.0; steps + 1];
    match kind {
        ScheduleKind::Linear => {
            // reference range is for 1000 steps; rescaled so shorter schedules still reach high noise
            let scale = 1000.0 / t_f;
            let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(0.999));
            for t in 1..=steps {
                let beta = lo + (hi - lo) * (t - 1) as f64 / (t_f - 1.0);
                alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / t_f + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            for t in 1..=steps {
                let ab = f(t as f64) / f0;
                let beta = (1.0 - ab / (f(t as f64 - 1.0) / f0)).clamp(0.0, 0.999);
                alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
            }
        }
    }
    if zero_snr {
        rescale_zero_terminal_snr(&mut alpha_bar);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar, (0..=steps).collect())
}

/// Shifts and scales `sqrt(alpha_bar[1..])` so the last entry is exactly zero
/// while the first is unchanged.
fn rescale_zero_terminal_snr(alpha_bar: &mut [f64]) {
    let sqrt: Vec<f64> = alpha_bar.iter().map(|v| v.sqrt()).collect();
    let first = sqrt[1];
    let last = sqrt[sqrt.len() - 1];
    for t in 2..alpha_bar.len() {
        let s = (sqrt[t] - last) * first / (first - last);
        alpha_bar[t] = s * s;
    }
}

impl NoiseSchedule {
    /// Derives betas and x0-parameterised posterior coefficients from a
    /// cumulative product sequence.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, network_t: Vec<usize>) -> Result<Self> {
        if alpha_bar.len() < 3 || alpha_bar[0] != 1.0 || network_t.len() != alpha_bar.len() {
            return invalid("alpha_bar must start at 1 and cover at least two steps");
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0]) || w[1] < 0.0) {
            return invalid("alpha_bar must be strictly decreasing and non-negative");
        }
        let n = alpha_bar.len();
        let mut beta = vec![0.0; n];
        let (mut a, mut b, mut sigma) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for t in 1..n {
            let (prev, cur) = (alpha_bar[t - 1], alpha_bar[t]);
            beta[t] = 1.0 - cur / prev;
            let alpha = 1.0 - beta[t];
            b[t] = prev.sqrt() * beta[t] / (1.0 - cur);
            a[t] = alpha.sqrt() * (1.0 - prev) / (1.0 - cur);
            sigma[t] = (beta[t] * (1.0 - prev) / (1.0 - cur)).max(0.0).sqrt();
        }
        Ok(Self {
            beta,
            alpha_bar,
            a,
            b,
            sigma,
            network_t,
        })
    }

    /// Explicit single- or multi-step sampler coefficients; used for toy
    /// policies that do not derive from a forward process. Index 0 entries
    /// are ignored.
    pub fn from_coefficients(a: Vec<f64>, b: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let n = a.len();
        if n < 2 || b.len() != n || sigma.len() != n {
            return invalid("coefficient vectors must share a length of at least 2");
        }
        if sigma.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return invalid("sigma must be finite and non-negative");
        }
        Ok(Self {
            beta: vec![0.0; n],
            alpha_bar: (0..n).map(|t| if t == 0 { 1.0 } else { 0.0 }).collect(),
            a,
            b,
            sigma,
            network_t: (0..n).collect(),
        })
    }

    /// `steps`-step sub-schedule on evenly spaced timesteps that always
    /// include 1 and T; coefficients are recomputed on the subsequence.
    pub fn strided(&self, steps: usize) -> Result<Self> {
        let t = self.steps();
        if steps < 2 || steps > t {
            return invalid(format!("cannot stride {t} steps down to {steps}"));
        }
        let mut idx = vec![0usize];
        for k in 0..steps {
            let v = 1.0 + (t - 1) as f64 * k as f64 / (steps - 1) as f64;
            idx.push(v.round() as usize);
        }
        let alpha_bar = idx.iter().map(|&i| self.alpha_bar[i]).collect();
        let network_t = idx.iter().map(|&i| self.network_t[i]).collect();
        Self::from_alpha_bar(alpha_bar, network_t)
    }

    /// Copy with every sigma forced to zero (deterministic sampling).
    pub fn deterministic(&self) -> Self {
        let mut s = self.clone();
        s.sigma.iter_mut().for_each(|v| *v = 0.0);
        s
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    pub fn b(&self, t: usize) -> f64 {
        self.b[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn network_t(&self, t: usize) -> usize {
        self.network_t[t]
    }

    /// Steps that carry a density (sigma > 0); deterministic steps are
    /// excluded from policy-gradient sums.
    pub fn stochastic_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.steps()).filter(|&t| self.sigma[t] > 0.0)
    }
}

/// The conditional denoiser `f(x_t, t, c)` predicting `x_0`.
pub trait Denoiser: Sync {
    fn params(&self) -> &ParamSet;

    /// Records the forward pass on `g`. `t` is in network (training) units.
    fn forward(&self, g: &mut Graph, bind: &mut Binding<'_>, x_t: Var, t: usize, cond: usize) -> Result<Var>;
}

/// Gradient-free evaluation of `f(x_t, t, c)`.
pub fn predict<D: Denoiser + ?Sized>(f: &D, x_t: &Tensor, t: usize, cond: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut bind = Binding::frozen(f.params());
    let x = g.constant(x_t.clone());
    let out = f.forward(&mut g, &mut bind, x, t, cond)?;
    Ok(g.value(out).clone().with_grad(false))
}

pub fn standard_normal_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise`.
pub fn forward_diffuse(x0: &Tensor, t: usize, noise: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::Shape {
            op: "forward_diffuse",
            lhs: x0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    if t > s.steps() {
        return invalid(format!("timestep {t} beyond schedule length {}", s.steps()));
    }
    let ab = s.alpha_bar(t);
    if ab == 1.0 {
        return Ok(x0.clone().with_grad(false));
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, n)| sa * x + sn * n).collect();
    Tensor::new(x0.shape(), data)
}

/// One training example: a clean grid in `[-1, 1]` and its condition.
#[derive(Clone, Debug)]
pub struct Example {
    pub x0: Tensor,
    pub cond: usize,
}

struct LossDraw {
    t: usize,
    noise: Tensor,
}

fn draw_loss_inputs(batch: &[Example], s: &NoiseSchedule, rng: &mut StreamRng) -> Vec<LossDraw> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=s.steps());
            LossDraw {
                t,
                noise: standard_normal_like(ex.x0.shape(), rng),
            }
        })
        .collect()
}

fn example_loss<D: Denoiser + ?Sized>(f: &D, ex: &Example, draw: &LossDraw, s: &NoiseSchedule, weight: f64, grad: bool) -> Result<(f64, Option<ParamGrads>)> {
    let x_t = forward_diffuse(&ex.x0, draw.t, &draw.noise, s)?;
    let mut g = Graph::new();
    let mut bind = if grad { Binding::new(f.params()) } else { Binding::frozen(f.params()) };
    let xv = g.constant(x_t);
    let pred = f.forward(&mut g, &mut bind, xv, s.network_t(draw.t), ex.cond)?;
    let target = g.constant(ex.x0.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let loss = g.mul_scalar(mse, weight);
    let value = g.value(loss).item()?;
    if !grad {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    Ok((value, Some(bind.gradients(&mut grads))))
}

/// Mean over the batch of the per-element squared error between `f(x_t)`
/// and `x0`, with `t ~ U{1..T}` and Gaussian noise drawn from `rng`.
pub fn denoising_loss<D: Denoiser + ?Sized>(f: &D, batch: &[Example], s: &NoiseSchedule, rng: &mut StreamRng) -> Result<f64> {
    let draws = draw_loss_inputs(batch, s, rng);
    let w = 1.0 / batch.len().max(1) as f64;
    let parts = batch
        .par_iter()
        .zip(&draws)
        .map(|(ex, d)| example_loss(f, ex, d, s, w, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum())
}

/// [`denoising_loss`] together with its parameter gradient. Each example
/// runs on its own tape; gradients are summed in batch order.
pub fn denoising_loss_and_grad<D: Denoiser + ?Sized>(f: &D, batch: &[Example], s: &NoiseSchedule, rng: &mut StreamRng) -> Result<(f64, ParamGrads)> {
    let draws = draw_loss_inputs(batch, s, rng);
    let w = 1.0 / batch.len().max(1) as f64;
    let parts = batch
        .par_iter()
        .zip(&draws)
        .map(|(ex, d)| example_loss(f, ex, d, s, w, true))
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|p| p.0).sum();
    let grads: Vec<ParamGrads> = parts.into_iter().filter_map(|p| p.1).collect();
    Ok((loss, ParamGrads::sum_ordered(&grads, f.params())))
}

/// A denoiser whose parameters can be updated in place.
pub trait Trainable: Denoiser {
    fn params_mut(&mut self) -> &mut ParamSet;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 16,
            lr: 1e-3,
            warmup: 100,
            seed: 0,
        }
    }
}

/// Minibatch Adam on [`denoising_loss`] with examples drawn uniformly from
/// `data`. Step `k` depends only on `(cfg.seed, k)` and the current
/// parameters. `on_step` receives the step index and training loss.
pub fn train_denoiser<D: Trainable + ?Sized>(
    f: &mut D,
    data: &[Example],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    opt: &mut crate::optim::Adam,
    start_step: usize,
    on_step: &mut dyn FnMut(usize, f64, &D) -> Result<()>,
) -> Result<()> {
    if data.is_empty() || cfg.batch == 0 {
        return invalid("training needs data and a positive batch size");
    }
    for step in start_step..cfg.steps {
        let mut rng = stream(cfg.seed, &[0x57e9, step as u64]);
        let batch: Vec<Example> = (0..cfg.batch).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        let (loss, grads) = denoising_loss_and_grad(&*f, &batch, s, &mut rng)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        opt.lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        opt.step(f.params_mut(), &grads)?;
        on_step(step, loss, f)?;
    }
    Ok(())
}

/// `sum_i log N(x_i; mean_i, sigma^2)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let norm = -sigma.ln() - 0.5 * LN_2PI;
    x.iter().zip(mean).map(|(x, m)| norm - (x - m) * (x - m) * inv).sum()
}

/// Graph version of [`gaussian_log_density`], differentiable in `mean`.
pub fn gaussian_log_density_var(g: &mut Graph, x: &Tensor, mean: Var, sigma: f64) -> Result<Var> {
    let n = x.numel() as f64;
    let xv = g.constant(x.clone());
    let diff = g.sub(xv, mean)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    let scaled = g.mul_scalar(total, -1.0 / (2.0 * sigma * sigma));
    Ok(g.add_scalar(scaled, n * (-sigma.ln() - 0.5 * LN_2PI)))
}

/// `a[t] * x_t + b[t] * f(x_t, t, c)` recorded on `g`.
pub fn step_mean_var<D: Denoiser + ?Sized>(
    f: &D,
    g: &mut Graph,
    bind: &mut Binding<'_>,
    x_t: &Tensor,
    t: usize,
    cond: usize,
    s: &NoiseSchedule,
) -> Result<Var> {
    let xv = g.constant(x_t.clone());
    let pred = f.forward(g, bind, xv, s.network_t(t), cond)?;
    let scaled_pred = g.mul_scalar(pred, s.b(t));
    let scaled_x = g.mul_scalar(xv, s.a(t));
    g.add(scaled_x, scaled_pred)
}

/// A noisy sample at step `t` together with its condition.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub x: Tensor,
    pub t: usize,
    pub cond: usize,
}

/// Draws `x_{t-1} ~ N(a x_t + b f, sigma^2 I)` and returns it with its
/// log-density. Steps with `sigma == 0` are deterministic and report 0.
pub fn sample_step<D: Denoiser + ?Sized>(f: &D, state: &DiffusionState, s: &NoiseSchedule, rng: &mut StreamRng) -> Result<(Tensor, f64)> {
    let t = state.t;
    if t == 0 || t > s.steps() {
        return invalid(format!("sample_step needs 1 <= t <= {}, got {t}", s.steps()));
    }
    let pred = predict(f, &state.x, s.network_t(t), state.cond)?;
    let mean: Vec<f64> = state.x.data().iter().zip(pred.data()).map(|(x, p)| s.a(t) * x + s.b(t) * p).collect();
    let sigma = s.sigma(t);
    if sigma == 0.0 {
        return Ok((Tensor::new(state.x.shape(), mean)?, 0.0));
    }
    let x_prev: Vec<f64> = mean.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let logp = gaussian_log_density(&x_prev, &mean, sigma);
    Ok((Tensor::new(state.x.shape(), x_prev)?, logp))
}

/// A full denoising chain `x_T, ..., x_0` with per-step log-densities.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `states[i]` is the sample at step `T - i`; the last entry is `x_0`.
    pub states: Vec<Tensor>,
    /// `log_probs[i]` is the density of `states[i + 1]` given `states[i]`.
    pub log_probs: Vec<f64>,
    pub cond: usize,
    /// Index of the prompt the trajectory was sampled from.
    pub prompt: usize,
    pub reward: f64,
    pub advantage: f64,
}

impl Trajectory {
    pub fn final_sample(&self) -> &Tensor {
        self.states.last().expect("trajectory has states")
    }

    /// `(x_t, x_{t-1}, log p)` for schedule step `t`.
    pub fn transition(&self, t: usize) -> (&Tensor, &Tensor, f64) {
        let i = self.states.len() - 1 - t;
        (&self.states[i], &self.states[i + 1], self.log_probs[i])
    }
}

pub fn sample_trajectory_from<D: Denoiser + ?Sized>(f: &D, cond: usize, x_t: Tensor, s: &NoiseSchedule, rng: &mut StreamRng) -> Result<Trajectory> {
    let steps = s.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut log_probs = Vec::with_capacity(steps);
    let mut state = DiffusionState { x: x_t, t: steps, cond };
    for t in (1..=steps).rev() {
        state.t = t;
        let (x_prev, logp) = sample_step(f, &state, s, rng)?;
        states.push(std::mem::replace(&mut state.x, x_prev));
        log_probs.push(logp);
    }
    states.push(state.x);
    Ok(Trajectory {
        states,
        log_probs,
        cond,
        prompt: 0,
        reward: 0.0,
        advantage: 0.0,
    })
}

/// Samples `x_T ~ N(0, I)` of the given shape and runs the full chain.
pub fn sample_trajectory<D: Denoiser + ?Sized>(f: &D, cond: usize, shape: &[usize], s: &NoiseSchedule, rng: &mut StreamRng) -> Result<Trajectory> {
    let x_t = standard_normal_like(shape, rng);
    sample_trajectory_from(f, cond, x_t, s, rng)
}

/// Independent trajectories keyed by `(seed, index)`; identical whether run
/// serially or in parallel.
pub fn sample_many<D: Denoiser + ?Sized>(f: &D, conds: &[usize], shape: &[usize], s: &NoiseSchedule, seed: u64) -> Result<Vec<Trajectory>> {
    conds
        .par_iter()
        .enumerate()
        .map(|(i, &c)| sample_trajectory(f, c, shape, s, &mut stream(seed, &[i as u64])))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::stream;

    /// Returns a fixed tensor regardless of input (oracle access to x0).
    pub struct Constant {
        pub out: Tensor,
        pub params: ParamSet,
    }

    impl Constant {
        pub fn new(out: Tensor) -> Self {
            Self { out, params: ParamSet::new() }
        }
    }

    impl Denoiser for Constant {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn forward(&self, g: &mut Graph, _: &mut Binding<'_>, _: Var, _: usize, _: usize) -> Result<Var> {
            Ok(g.constant(self.out.clone()))
        }
    }

    fn linear() -> NoiseSchedule {
        make_schedule(1000, ScheduleKind::Linear, true).unwrap()
    }

    #[test]
    fn zero_snr_terminal_is_exactly_zero() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(1000, kind, true).unwrap();
            assert_eq!(s.alpha_bar(1000), 0.0);
            assert_eq!(s.alpha_bar(0), 1.0);
            let plain = make_schedule(1000, kind, false).unwrap();
            assert_eq!(s.alpha_bar(1), plain.alpha_bar(1));
        }
    }

    #[test]
    fn linear_schedule_is_monotone() {
        let s = make_schedule(1000, ScheduleKind::Linear, false).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn too_short_schedule_fails() {
        assert!(make_schedule(1, ScheduleKind::Linear, true).is_err());
    }

    #[test]
    fn sampler_coefficients_match_posterior() {
        let s = linear();
        for t in [2usize, 10, 500, 999, 1000] {
            let (ab, prev, beta) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
            assert!((s.b(t) - prev.sqrt() * beta / (1.0 - ab)).abs() < 1e-12);
            assert!((s.a(t) - (1.0 - beta).sqrt() * (1.0 - prev) / (1.0 - ab)).abs() < 1e-12);
            assert!((s.sigma(t).powi(2) - beta * (1.0 - prev) / (1.0 - ab)).abs() < 1e-12);
            assert!(s.sigma(t) > 0.0);
        }
        assert_eq!(s.sigma(1), 0.0);
        assert_eq!(s.a(1), 0.0);
        assert!((s.b(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn strided_schedule_keeps_endpoints() {
        let s = linear().strided(50).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.network_t(1), 1);
        assert_eq!(s.network_t(50), 1000);
        assert_eq!(s.alpha_bar(50), 0.0);
        let gaps: Vec<usize> = (2..=50).map(|k| s.network_t(k) - s.network_t(k - 1)).collect();
        assert!(gaps.iter().all(|&g| g == 20 || g == 21), "{gaps:?}");
        assert_eq!(s.stochastic_steps().count(), 49);
    }

    #[test]
    fn forward_at_zero_is_identity_and_terminal_ignores_signal() {
        let s = linear();
        let mut rng = stream(1, &[]);
        let x0 = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let noise = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        assert_eq!(forward_diffuse(&x0, 0, &noise, &s).unwrap(), x0);
        let at_t = forward_diffuse(&x0, 1000, &noise, &s).unwrap();
        assert_eq!(at_t.data(), noise.data());
        assert!(forward_diffuse(&x0, 3, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn forward_moments_monte_carlo() {
        let s = linear();
        let t = 300;
        let x0 = Tensor::full(&[1], 0.7);
        let mut rng = stream(2, &[]);
        let n = 100_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let noise = Tensor::randn(&[1], 1.0, &mut rng);
            let v = forward_diffuse(&x0, t, &noise, &s).unwrap().data()[0];
            m1 += v;
            m2 += v * v;
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        let want_mean = s.alpha_bar(t).sqrt() * 0.7;
        let want_var = 1.0 - s.alpha_bar(t);
        assert!((mean - want_mean).abs() < 0.01 * want_mean.abs().max(want_var.sqrt()), "{mean} vs {want_mean}");
        assert!((var / want_var - 1.0).abs() < 0.01, "{var} vs {want_var}");
    }

    #[test]
    fn cheating_denoiser_has_zero_loss() {
        let s = linear();
        let mut rng = stream(3, &[]);
        let x0 = Tensor::randn(&[3, 4, 4], 0.5, &mut rng);
        let f = Constant::new(x0.clone());
        let batch = vec![Example { x0, cond: 0 }; 4];
        assert_eq!(denoising_loss(&f, &batch, &s, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn zero_denoiser_loss_is_mean_square() {
        let s = linear();
        let mut rng = stream(4, &[]);
        let zeros = Constant::new(Tensor::zeros(&[3, 4, 4]));
        let batch = vec![Example {
            x0: Tensor::zeros(&[3, 4, 4]),
            cond: 0,
        }];
        assert_eq!(denoising_loss(&zeros, &batch, &s, &mut rng).unwrap(), 0.0);
        let x0 = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let want = x0.data().iter().map(|v| v * v).sum::<f64>() / 48.0;
        let batch = vec![Example { x0, cond: 0 }; 3];
        let got = denoising_loss(&zeros, &batch, &s, &mut rng).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn log_density_closed_forms() {
        let unit = gaussian_log_density(&[0.3], &[0.3], 1.0);
        assert!((unit + 0.918_938_533_204_672_7).abs() < 1e-12);
        let half = gaussian_log_density(&[1.0, 1.0], &[1.0, 1.0], 0.5);
        let want = 2.0 * -0.5 * (2.0 * std::f64::consts::PI * 0.25).ln();
        assert!((half - want).abs() < 1e-12);
    }

    #[test]
    fn graph_log_density_matches_direct() {
        let mut rng = stream(5, &[]);
        let x = Tensor::randn(&[10], 1.0, &mut rng);
        let mean = Tensor::randn(&[10], 1.0, &mut rng);
        let mut g = Graph::new();
        let mv = g.constant(mean.clone());
        let lp = gaussian_log_density_var(&mut g, &x, mv, 0.37).unwrap();
        let direct = gaussian_log_density(x.data(), mean.data(), 0.37);
        assert!((g.value(lp).item().unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn step_at_zero_fails() {
        let s = linear();
        let f = Constant::new(Tensor::zeros(&[1]));
        let st = DiffusionState {
            x: Tensor::zeros(&[1]),
            t: 0,
            cond: 0,
        };
        assert!(sample_step(&f, &st, &s, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn fifty_step_trajectory_shape() {
        let s = linear().strided(50).unwrap();
        let f = Constant::new(Tensor::zeros(&[3, 4, 4]));
        let tr = sample_trajectory(&f, 0, &[3, 4, 4], &s, &mut stream(6, &[])).unwrap();
        assert_eq!(tr.states.len(), 51);
        assert_eq!(tr.log_probs.len(), 50);
        assert_eq!(tr.log_probs[49], 0.0);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let s = linear().strided(10).unwrap();
        let f = Constant::new(Tensor::full(&[3, 4, 4], 0.2));
        let a = sample_many(&f, &[0, 1, 2], &[3, 4, 4], &s, 9).unwrap();
        let b = sample_many(&f, &[0, 1, 2], &[3, 4, 4], &s, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.states, y.states);
            assert_eq!(x.log_probs, y.log_probs);
        }
        let det = s.deterministic();
        let zero = Constant::new(Tensor::zeros(&[3, 4, 4]));
        let c = sample_trajectory(&zero, 0, &[3, 4, 4], &det, &mut stream(1, &[])).unwrap();
        let d = sample_trajectory(&zero, 0, &[3, 4, 4], &det, &mut stream(1, &[])).unwrap();
        assert_eq!(c.states, d.states);
        assert!(c.log_probs.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn oracle_denoiser_recovers_x0_without_noise() {
        let s = linear().strided(50).unwrap().deterministic();
        let mut rng = stream(7, &[]);
        let x0 = Tensor::randn(&[3, 4, 4], 0.5, &mut rng);
        let f = Constant::new(x0.clone());
        let tr = sample_trajectory(&f, 0, &[3, 4, 4], &s, &mut rng).unwrap();
        assert!(tr.final_sample().max_abs_diff(&x0) <= 1e-6);
    }
}
