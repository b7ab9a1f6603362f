//! Policy-gradient finetuning of the denoiser: rollouts, advantages and the
//! clipped importance-sampled update of the trainable (adapter) weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{decode, PromptSet};
use crate::diffusion::{gaussian_log_density_var, sample_trajectory_from, step_mean_var, Denoiser, NoiseSchedule, Trainable, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::optim::Adam;
use crate::raster::RgbImage;
use crate::render::{shade, EnvironmentSet, Lighting, RenderConfig};
use crate::reward::{extract_features, RewardHead};
use crate::rng::{stream, StreamRng};
use crate::tensor::{Binding, Graph, ParamGrads, Tensor};

/// Terminal reward of a clean sample. The generator may be used for any
/// randomness the reward needs, such as the lighting draw.
pub trait Reward: Sync {
    fn reward(&self, x0: &Tensor, rng: &mut StreamRng) -> Result<f64>;
}

/// Scalar score of a tone-mapped render.
pub trait ImageScore: Sync {
    fn score(&self, img: &RgbImage) -> Result<f64>;
}

/// Mean Rec.709 luminance.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanLuminance;

impl ImageScore for MeanLuminance {
    fn score(&self, img: &RgbImage) -> Result<f64> {
        let l = img.luminance();
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantScore(pub f64);

impl ImageScore for ConstantScore {
    fn score(&self, _: &RgbImage) -> Result<f64> {
        Ok(self.0)
    }
}

/// Normalized realism score of the trained head.
#[derive(Clone, Debug)]
pub struct RealismScore(pub RewardHead);

impl ImageScore for RealismScore {
    fn score(&self, img: &RgbImage) -> Result<f64> {
        self.0.normalized(&extract_features(img)?)
    }
}

/// Decode, render under a uniformly drawn environment, then score.
#[derive(Clone, Debug)]
pub struct RenderedReward<S> {
    pub envs: EnvironmentSet,
    pub render: RenderConfig,
    pub scorer: S,
}

impl<S> RenderedReward<S> {
    pub fn render_sample(&self, x0: &Tensor, rng: &mut StreamRng) -> Result<RgbImage> {
        if self.envs.environments.is_empty() {
            return invalid("environment set is empty");
        }
        let maps = decode(x0)?;
        let env = &self.envs.environments[rng.random_range(0..self.envs.environments.len())];
        shade(&maps, Lighting::Environment(env), &self.render)
    }
}

impl<S: ImageScore> Reward for RenderedReward<S> {
    fn reward(&self, x0: &Tensor, rng: &mut StreamRng) -> Result<f64> {
        let img = self.render_sample(x0, rng)?;
        self.scorer.score(&img)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    PerPrompt,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub epochs: usize,
    pub trajectories_per_epoch: usize,
    /// Trajectories per minibatch.
    pub minibatch: usize,
    pub clip: f64,
    pub lr: f64,
    /// Minibatches whose gradients are averaged before each optimizer step.
    pub accumulation: usize,
    pub inner_epochs: usize,
    pub advantage: AdvantageMode,
    /// Fixed-seed samples per prompt set used for the per-epoch evaluation.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            epochs: 110,
            trajectories_per_epoch: 32,
            minibatch: 8,
            clip: 0.1,
            lr: 3e-4,
            accumulation: 2,
            inner_epochs: 1,
            advantage: AdvantageMode::PerPrompt,
            eval_samples: 16,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return invalid(format!("clip range {} outside (0, 1)", self.clip));
        }
        if self.trajectories_per_epoch == 0 || self.minibatch == 0 || self.accumulation == 0 || self.inner_epochs == 0 || self.eval_samples == 0 {
            return invalid("RL counts must all be at least 1");
        }
        if !(self.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        Ok(())
    }
}

/// `n` trajectories with prompts drawn uniformly from `prompts`. Trajectory
/// `i` of `round` depends only on `(seed, round, i)`.
pub fn collect_rollouts<D: Denoiser + ?Sized, R: Reward + ?Sized>(
    policy: &D,
    prompts: &PromptSet,
    reward: &R,
    n: usize,
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
    round: u64,
) -> Result<Vec<Trajectory>> {
    if prompts.is_empty() {
        return invalid("cannot collect rollouts from an empty prompt set");
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[0x7011, round, i as u64]);
            let p = rng.random_range(0..prompts.len());
            let prompt = prompts.prompts[p];
            let x_t = prompt.initial_noise(shape, &mut rng);
            let mut traj = sample_trajectory_from(policy, prompt.category, x_t, schedule, &mut rng)?;
            traj.prompt = p;
            traj.reward = reward.reward(traj.final_sample(), &mut rng)?;
            if !traj.reward.is_finite() {
                return Err(Error::NonFinite(format!("reward of trajectory {i}")));
            }
            Ok(traj)
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R - mean) / (std + 1e-8)` over the trajectory's group. Per-prompt
/// groups with a single member use the batch statistics instead.
pub fn compute_advantages(trajs: &mut [Trajectory], mode: AdvantageMode) -> Result<()> {
    if trajs.is_empty() {
        return invalid("no trajectories to normalize");
    }
    let all: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
    let global = mean_std(&all);
    let stats: Vec<(f64, f64)> = match mode {
        AdvantageMode::Global => vec![global; trajs.len()],
        AdvantageMode::PerPrompt => trajs
            .iter()
            .map(|t| {
                let group: Vec<f64> = trajs.iter().filter(|o| o.prompt == t.prompt).map(|o| o.reward).collect();
                if group.len() < 2 {
                    global
                } else {
                    mean_std(&group)
                }
            })
            .collect(),
    };
    for (t, (m, s)) in trajs.iter_mut().zip(stats) {
        t.advantage = (t.reward - m) / (s + 1e-8);
    }
    Ok(())
}

/// Per-minibatch diagnostics of the clipped objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurrogateStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub transitions: usize,
}

struct StepOut {
    loss: f64,
    ratio: f64,
    log_ratio: f64,
    grads: ParamGrads,
}

fn transition_grad<D: Denoiser + ?Sized>(policy: &D, traj: &Trajectory, t: usize, s: &NoiseSchedule, clip: f64, weight: f64) -> Result<StepOut> {
    let (x_t, x_prev, logp_old) = traj.transition(t);
    let mut g = Graph::new();
    let mut bind = Binding::new(policy.params());
    let mean = step_mean_var(policy, &mut g, &mut bind, x_t, t, traj.cond, s)?;
    let logp = gaussian_log_density_var(&mut g, x_prev, mean, s.sigma(t))?;
    let log_ratio = g.add_scalar(logp, -logp_old);
    let ratio = g.exp(log_ratio);
    let unclipped = g.mul_scalar(ratio, traj.advantage);
    let clamped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = g.mul_scalar(clamped, traj.advantage);
    let objective = g.minimum(unclipped, clipped)?;
    let loss = g.mul_scalar(objective, -weight);
    let (r, lr) = (g.value(ratio).item()?, g.value(log_ratio).item()?);
    let value = g.value(loss).item()?;
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("importance ratio at step {t}")));
    }
    let mut grads = g.backward(loss)?;
    Ok(StepOut {
        loss: value,
        ratio: r,
        log_ratio: lr,
        grads: bind.gradients(&mut grads),
    })
}

/// Gradient of `-mean(min(rho A, clip(rho, 1 - eps, 1 + eps) A))` over every
/// stochastic step of every trajectory.
pub fn surrogate_gradient<D: Denoiser + ?Sized>(policy: &D, trajs: &[Trajectory], s: &NoiseSchedule, clip: f64) -> Result<(ParamGrads, SurrogateStats)> {
    let steps: Vec<usize> = s.stochastic_steps().collect();
    let jobs: Vec<(usize, usize)> = (0..trajs.len()).flat_map(|i| steps.iter().map(move |&t| (i, t))).collect();
    if jobs.is_empty() {
        return invalid("no stochastic transitions to train on");
    }
    let w = 1.0 / jobs.len() as f64;
    let outs = jobs
        .par_iter()
        .map(|&(i, t)| transition_grad(policy, &trajs[i], t, s, clip, w))
        .collect::<Result<Vec<_>>>()?;
    let n = outs.len() as f64;
    let stats = SurrogateStats {
        loss: outs.iter().map(|o| o.loss).sum(),
        mean_ratio: outs.iter().map(|o| o.ratio).sum::<f64>() / n,
        clip_fraction: outs.iter().filter(|o| (o.ratio - 1.0).abs() > clip).count() as f64 / n,
        approx_kl: outs.iter().map(|o| 0.5 * o.log_ratio * o.log_ratio).sum::<f64>() / n,
        transitions: outs.len(),
    };
    let parts: Vec<ParamGrads> = outs.into_iter().map(|o| o.grads).collect();
    Ok((ParamGrads::sum_ordered(&parts, policy.params()), stats))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub minibatches: usize,
    pub skipped: usize,
    pub optimizer_steps: usize,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub mean_ratio: f64,
}

/// One round of clipped policy-gradient updates. Minibatches whose ratios
/// are not finite are skipped and counted.
pub fn ppo_update<P: Trainable + ?Sized>(
    policy: &mut P,
    trajs: &[Trajectory],
    s: &NoiseSchedule,
    cfg: &RlConfig,
    opt: &mut Adam,
    round: u64,
) -> Result<UpdateStats> {
    cfg.validate()?;
    let mut stats = UpdateStats::default();
    let mut accum: Option<ParamGrads> = None;
    let mut pending = 0;
    let mut counted = 0.0;
    for inner in 0..cfg.inner_epochs {
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[0x99, round, inner as u64]));
        for chunk in order.chunks(cfg.minibatch) {
            stats.minibatches += 1;
            let batch: Vec<Trajectory> = chunk.iter().map(|&i| trajs[i].clone()).collect();
            let (grads, st) = match surrogate_gradient(&*policy, &batch, s, cfg.clip) {
                Ok(r) if r.0.is_finite() => r,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    stats.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            stats.clip_fraction += st.clip_fraction;
            stats.approx_kl += st.approx_kl;
            stats.mean_ratio += st.mean_ratio;
            counted += 1.0;
            match accum.as_mut() {
                Some(a) => a.add_assign(&grads),
                None => accum = Some(grads),
            }
            pending += 1;
            if pending == cfg.accumulation {
                let mut g = accum.take().expect("accumulated gradient");
                g.scale(1.0 / pending as f64);
                opt.step(policy.params_mut(), &g)?;
                stats.optimizer_steps += 1;
                pending = 0;
            }
        }
    }
    if let Some(mut g) = accum.take() {
        g.scale(1.0 / pending as f64);
        opt.step(policy.params_mut(), &g)?;
        stats.optimizer_steps += 1;
    }
    if counted > 0.0 {
        stats.clip_fraction /= counted;
        stats.approx_kl /= counted;
        stats.mean_ratio /= counted;
    }
    Ok(stats)
}

/// Mean and standard deviation of rewards of `samples` fixed-seed samples
/// cycling over the prompt set. The same seeds are used at every call, so
/// successive evaluations are paired.
pub fn evaluate<D: Denoiser + ?Sized, R: Reward + ?Sized>(
    policy: &D,
    prompts: &PromptSet,
    reward: &R,
    samples: usize,
    s: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<(f64, f64)> {
    if prompts.is_empty() || samples == 0 {
        return invalid("evaluation needs prompts and samples");
    }
    let rewards = (0..samples)
        .into_par_iter()
        .map(|i| {
            let prompt = prompts.prompts[i % prompts.len()];
            let mut rng = stream(seed, &[0xe7a1, i as u64]);
            let x_t = prompt.initial_noise(shape, &mut rng);
            let traj = sample_trajectory_from(policy, prompt.category, x_t, s, &mut rng)?;
            reward.reward(traj.final_sample(), &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_std(&rewards))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub heldout_mean: f64,
    pub heldout_std: f64,
    /// Mean reward of the rollouts collected this epoch; absent for the
    /// final evaluation-only entry.
    pub rollout_mean: Option<f64>,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub skipped_minibatches: usize,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_mean,train_std,heldout_mean,heldout_std,rollout_mean,clip_fraction,approx_kl,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{},{:.9},{:.9},{}",
            self.epoch,
            self.train_mean,
            self.train_std,
            self.heldout_mean,
            self.heldout_std,
            self.rollout_mean.map(|v| format!("{v:.9}")).unwrap_or_default(),
            self.clip_fraction,
            self.approx_kl,
            self.skipped_minibatches
        )
    }
}

/// Everything `rl_train` needs besides the policy.
pub struct RlSetup<'a, R: ?Sized> {
    pub cfg: &'a RlConfig,
    pub train: &'a PromptSet,
    pub heldout: &'a PromptSet,
    pub reward: &'a R,
    pub schedule: &'a NoiseSchedule,
    pub shape: &'a [usize],
}

/// Runs `cfg.epochs` collect/update rounds starting at `start_epoch`. Entry
/// `e` of the log evaluates the policy before update `e`; the last entry
/// evaluates the final policy. `on_epoch` runs once entry `e` is complete,
/// with the policy and optimizer as they stand after update `e`, which is
/// the state a run resumed at epoch `e + 1` starts from.
pub fn rl_train<P: Trainable, R: Reward + ?Sized>(
    policy: &mut P,
    opt: &mut Adam,
    setup: &RlSetup<'_, R>,
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(&EpochLog, &P, &Adam) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let cfg = setup.cfg;
    cfg.validate()?;
    if !setup.train.is_disjoint(setup.heldout) {
        return invalid("training and held-out prompt sets overlap");
    }
    let mut log = Vec::new();
    for epoch in start_epoch..=cfg.epochs {
        let (train_mean, train_std) = evaluate(
            &*policy,
            setup.train,
            setup.reward,
            cfg.eval_samples,
            setup.schedule,
            setup.shape,
            cfg.seed ^ 0x7a,
        )?;
        let (heldout_mean, heldout_std) = evaluate(
            &*policy,
            setup.heldout,
            setup.reward,
            cfg.eval_samples,
            setup.schedule,
            setup.shape,
            cfg.seed ^ 0x4e,
        )?;
        let mut entry = EpochLog {
            epoch,
            train_mean,
            train_std,
            heldout_mean,
            heldout_std,
            ..Default::default()
        };
        if epoch < cfg.epochs {
            let mut trajs = collect_rollouts(
                &*policy,
                setup.train,
                setup.reward,
                cfg.trajectories_per_epoch,
                setup.schedule,
                setup.shape,
                cfg.seed,
                epoch as u64,
            )?;
            entry.rollout_mean = Some(trajs.iter().map(|t| t.reward).sum::<f64>() / trajs.len() as f64);
            compute_advantages(&mut trajs, cfg.advantage)?;
            let st = ppo_update(policy, &trajs, setup.schedule, cfg, opt, epoch as u64)?;
            entry.clip_fraction = st.clip_fraction;
            entry.approx_kl = st.approx_kl;
            entry.skipped_minibatches = st.skipped;
        }
        on_epoch(&entry, policy, opt)?;
        log.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Prompt, Role};
    use crate::net::{Architecture, UNet};
    use crate::render::{make_environment_set, DEFAULT_IRRADIANCE};

    fn tiny_policy() -> UNet {
        let arch = Architecture {
            channels: vec![4, 8],
            blocks_per_level: 1,
            groups: 2,
            time_dim: 4,
            cond_dim: 4,
            emb_dim: 8,
            num_categories: 8,
        };
        let base = UNet::new(arch, &mut stream(1, &[])).unwrap();
        base.attach_lora(2, &mut stream(2, &[])).unwrap()
    }

    fn schedule() -> NoiseSchedule {
        crate::diffusion::make_schedule(100, crate::diffusion::ScheduleKind::Linear, true)
            .unwrap()
            .strided(4)
            .unwrap()
    }

    fn prompts() -> PromptSet {
        PromptSet {
            role: Role::Train,
            prompts: vec![Prompt { category: 3, variation: 0 }, Prompt { category: 6, variation: 1 }],
        }
    }

    fn rendered<S>(scorer: S) -> RenderedReward<S> {
        RenderedReward {
            envs: make_environment_set(4, 2, 0, DEFAULT_IRRADIANCE).unwrap(),
            render: RenderConfig::default(),
            scorer,
        }
    }

    fn constant_reward(v: f64) -> RenderedReward<ConstantScore> {
        rendered(ConstantScore(v))
    }

    fn traj(prompt: usize, reward: f64) -> Trajectory {
        Trajectory {
            states: vec![],
            log_probs: vec![],
            cond: 0,
            prompt,
            reward,
            advantage: 0.0,
        }
    }

    #[test]
    fn constant_reward_rollouts() {
        let p = tiny_policy();
        let t = collect_rollouts(&p, &prompts(), &constant_reward(0.5), 4, &schedule(), &[3, 16, 16], 3, 0).unwrap();
        assert!(t.iter().all(|t| t.reward == 0.5));
        assert!(t.iter().all(|t| t.states.len() == t.log_probs.len() + 1));
    }

    #[test]
    fn rollouts_are_deterministic() {
        let p = tiny_policy();
        let r = rendered(MeanLuminance);
        let a = collect_rollouts(&p, &prompts(), &r, 3, &schedule(), &[3, 16, 16], 3, 1).unwrap();
        let b = collect_rollouts(&p, &prompts(), &r, 3, &schedule(), &[3, 16, 16], 3, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.states, y.states);
            assert_eq!(x.reward, y.reward);
        }
    }

    #[test]
    fn reward_input_is_render_of_decoded_sample() {
        let p = tiny_policy();
        let r = rendered(MeanLuminance);
        let t = &collect_rollouts(&p, &prompts(), &r, 1, &schedule(), &[3, 16, 16], 9, 0).unwrap()[0];
        let mut rng = stream(0, &[]);
        let direct = r.render_sample(t.final_sample(), &mut rng).unwrap();
        let maps = decode(t.final_sample()).unwrap();
        let env = &r.envs.environments[stream(0, &[]).random_range(0..4)];
        assert_eq!(direct, shade(&maps, Lighting::Environment(env), &r.render).unwrap());
    }

    #[test]
    fn advantages_hand_values() {
        let mut t = vec![traj(0, 1.0), traj(0, 1.0)];
        compute_advantages(&mut t, AdvantageMode::PerPrompt).unwrap();
        assert!(t.iter().all(|t| t.advantage == 0.0));

        let mut t = vec![traj(0, 0.0), traj(0, 1.0)];
        compute_advantages(&mut t, AdvantageMode::PerPrompt).unwrap();
        assert!((t[0].advantage + 1.0).abs() < 1e-7 && (t[1].advantage - 1.0).abs() < 1e-7);

        // prompt 0: {1, 3}, prompt 1: {10, 14}; batch mean 7, std sqrt(107/4 - 0) computed below
        let rewards = [1.0, 3.0, 10.0, 14.0];
        let mut per = vec![traj(0, 1.0), traj(0, 3.0), traj(1, 10.0), traj(1, 14.0)];
        let mut glob = per.clone();
        compute_advantages(&mut per, AdvantageMode::PerPrompt).unwrap();
        compute_advantages(&mut glob, AdvantageMode::Global).unwrap();
        let want_per = [-1.0 / (1.0 + 1e-8), 1.0 / (1.0 + 1e-8), -2.0 / (2.0 + 1e-8), 2.0 / (2.0 + 1e-8)];
        let mean = 7.0;
        let std = ((36.0 + 16.0 + 9.0 + 49.0) / 4.0f64).sqrt();
        for i in 0..4 {
            assert!((per[i].advantage - want_per[i]).abs() < 1e-12);
            assert!((glob[i].advantage - (rewards[i] - mean) / (std + 1e-8)).abs() < 1e-12);
        }
        assert!(compute_advantages(&mut [], AdvantageMode::Global).is_err());
    }

    #[test]
    fn first_pass_ratios_are_one_and_only_adapters_move() {
        let p = tiny_policy();
        let r = rendered(MeanLuminance);
        let s = schedule();
        let mut t = collect_rollouts(&p, &prompts(), &r, 4, &s, &[3, 16, 16], 5, 0).unwrap();
        for (i, tr) in t.iter_mut().enumerate() {
            tr.advantage = if i % 2 == 0 { 1.0 } else { -0.5 };
        }
        let (g, st) = surrogate_gradient(&p, &t, &s, 0.1).unwrap();
        assert!((st.mean_ratio - 1.0).abs() < 1e-9);
        assert_eq!(st.clip_fraction, 0.0);
        for ((name, _), grad) in p.params().iter().zip(&g.0) {
            if !name.contains(".lora_") {
                assert_eq!(grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0, "{name}");
            }
        }
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn zero_advantages_leave_parameters_unchanged() {
        let mut p = tiny_policy();
        let before = p.params().clone();
        let s = schedule();
        let mut t = collect_rollouts(&p, &prompts(), &constant_reward(0.3), 4, &s, &[3, 16, 16], 5, 0).unwrap();
        compute_advantages(&mut t, AdvantageMode::PerPrompt).unwrap();
        let (g, _) = surrogate_gradient(&p, &t, &s, 0.1).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let cfg = RlConfig {
            minibatch: 2,
            ..Default::default()
        };
        ppo_update(&mut p, &t, &s, &cfg, &mut Adam::new(cfg.lr), 0).unwrap();
        assert_eq!(p.params().tensors(), before.tensors());
    }

    #[test]
    fn zero_epochs_is_baseline_only() {
        let mut p = tiny_policy();
        let before = p.params().clone();
        let cfg = RlConfig {
            epochs: 0,
            eval_samples: 2,
            ..Default::default()
        };
        let held = PromptSet::candidates(Role::Heldout, 8, 1);
        let r = constant_reward(0.5);
        let setup = RlSetup {
            cfg: &cfg,
            train: &prompts(),
            heldout: &held,
            reward: &r,
            schedule: &schedule(),
            shape: &[3, 16, 16],
        };
        let log = rl_train(&mut p, &mut Adam::new(cfg.lr), &setup, 0, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].rollout_mean, None);
        assert_eq!(p.params().tensors(), before.tensors());
        assert_eq!(RlConfig::default().epochs, 110);
    }

    #[test]
    fn resuming_from_the_callback_state_matches_a_straight_run() {
        let cfg = RlConfig {
            epochs: 2,
            trajectories_per_epoch: 4,
            minibatch: 2,
            lr: 1e-2,
            eval_samples: 2,
            ..Default::default()
        };
        let held = PromptSet::candidates(Role::Heldout, 8, 1);
        let reward = RenderedReward {
            envs: make_environment_set(2, 2, 0, DEFAULT_IRRADIANCE).unwrap(),
            render: RenderConfig::default(),
            scorer: MeanLuminance,
        };
        let train = prompts();
        let s = schedule();
        let setup = RlSetup {
            cfg: &cfg,
            train: &train,
            heldout: &held,
            reward: &reward,
            schedule: &s,
            shape: &[3, 16, 16],
        };
        let mut straight = tiny_policy();
        let mut saved = None;
        let full = rl_train(&mut straight, &mut Adam::new(cfg.lr), &setup, 0, &mut |e, p, o| {
            if e.epoch == 0 {
                saved = Some((p.clone(), o.state(p.params())));
            }
            Ok(())
        })
        .unwrap();
        let (mut resumed, state) = saved.unwrap();
        let mut opt = Adam::new(cfg.lr);
        opt.load_state(resumed.params(), &state).unwrap();
        let tail = rl_train(&mut resumed, &mut opt, &setup, 1, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(tail, full[1..]);
        assert_eq!(resumed.params().tensors(), straight.params().tensors());
        assert_ne!(straight.params().tensors(), tiny_policy().params().tensors());
    }

    #[test]
    fn config_validation() {
        assert!(RlConfig {
            clip: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RlConfig {
            minibatch: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RlConfig::default().validate().is_ok());
    }
}
