//! One function per subcommand. Every command regenerates its procedural
//! inputs from the config and seed, so runs with equal configs produce
//! equal artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use matforge::data::{
    build_corpora, build_corpus, category_id, dataset_material, decode, generate_material, jitter_maps, keep_counts, select_training_prompts,
    training_examples, write_manifest, CorpusConfig, ManifestEntry, Prompt, PromptSet, Render, Role, Source, CATEGORIES,
};
use matforge::diffusion::{denoising_loss, make_schedule, sample_trajectory_from, train_denoiser, Denoiser, NoiseSchedule, TrainConfig};
use matforge::grid::{pack, unpack, GridImage, GridMetadata, MaterialMaps};
use matforge::net::UNet;
use matforge::optim::Adam;
use matforge::raster::RgbImage;
use matforge::render::{make_environment_set, shade, EnvironmentSet, Lighting};
use matforge::reward::{
    apply_threshold, auc, extract_features, score_bounds, train_classifier, train_reward_head, ClassifierConfig, Embedding, HeadTrainConfig, RewardHead,
};
use matforge::rl::{rl_train, EpochLog, ImageScore, MeanLuminance, RealismScore, RenderedReward, RlConfig, RlSetup};
use matforge::rng::stream;
use matforge::tensor::{read_checkpoint, write_checkpoint, ParamSet, Tensor};
use rand::Rng;
use rayon::prelude::*;

use crate::config::{RewardKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::rundir::{CsvLog, RunDir};

const TAG_DATA: u64 = 1;
const TAG_NET: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_VAL: u64 = 4;
const TAG_ENVS: u64 = 5;
const TAG_CORPUS: u64 = 6;
const TAG_HELDOUT: u64 = 7;
const TAG_CLASSIFIER: u64 = 8;
const TAG_HEAD: u64 = 9;
const TAG_LORA: u64 = 10;
const TAG_RL: u64 = 11;
const TAG_IMAGES: u64 = 12;
const TAG_SELECT: u64 = 13;
const TAG_NEAR: u64 = 14;
const TAG_EVAL: u64 = 15;

/// Seed of one pipeline stage, derived from the master seed.
fn seed(cfg: &RunConfig, tag: u64) -> u64 {
    stream(cfg.run.seed, &[0xc11, tag]).random()
}

fn core_err(e: CliError) -> matforge::Error {
    match e {
        CliError::Core(e) => e,
        CliError::Io(e) => matforge::Error::Io(e),
        CliError::Config(msg) => matforge::Error::Invalid(msg),
    }
}

fn environments(cfg: &RunConfig) -> CliResult<EnvironmentSet> {
    let e = &cfg.environments;
    Ok(make_environment_set(e.count, e.lights, seed(cfg, TAG_ENVS), e.irradiance)?)
}

fn schedule(cfg: &RunConfig) -> CliResult<NoiseSchedule> {
    let s = &cfg.schedule;
    Ok(make_schedule(s.steps, s.kind, s.zero_snr)?)
}

fn sampler(cfg: &RunConfig) -> CliResult<NoiseSchedule> {
    Ok(schedule(cfg)?.strided(cfg.schedule.sampler_steps)?)
}

fn load_net(cfg: &RunConfig, path: &Path) -> CliResult<UNet> {
    Ok(UNet::restore(cfg.net.clone(), ParamSet::from_named(read_checkpoint(path)?))?)
}

fn load_bounded_head(path: &Path) -> CliResult<RewardHead> {
    let head = RewardHead::load(path)?;
    if head.bounds.is_none() {
        return Err(CliError::Config(format!("reward head {} has no normalization bounds", path.display())));
    }
    Ok(head)
}

/// Copies an input file into `inputs/` so the run directory can be rerun
/// or resumed on its own.
fn stage_input(run: &mut RunDir, src: &Path, name: &str) -> CliResult<PathBuf> {
    let dst = run.file(&format!("inputs/{name}"))?;
    fs::copy(src, &dst).map_err(|e| io_context(e, src))?;
    Ok(dst)
}

fn io_context(e: std::io::Error, path: &Path) -> CliError {
    CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn csv_table(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

fn render_views(maps: &MaterialMaps, envs: &EnvironmentSet, cfg: &RunConfig) -> CliResult<Vec<RgbImage>> {
    envs.environments[..cfg.sample.views]
        .iter()
        .map(|env| Ok(shade(maps, Lighting::Environment(env), &cfg.render)?))
        .collect()
}

fn image_name(epoch: usize, prompt: &Prompt, seed: u64) -> String {
    format!("{epoch:04}_{}_{seed}.png", prompt.label())
}

/// Final samples for `prompts`, the `i`-th drawn from stream `[tag, i]`.
fn sample_prompts(policy: &UNet, prompts: &[Prompt], s: &NoiseSchedule, shape: &[usize], seed: u64) -> CliResult<Vec<Tensor>> {
    Ok(prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream(seed, &[0x5a, i as u64]);
            let x_t = p.initial_noise(shape, &mut rng);
            Ok(sample_trajectory_from(policy, p.category, x_t, s, &mut rng)?.final_sample().clone())
        })
        .collect::<matforge::Result<_>>()?)
}

/// Writes `{dir}/grids/{name}` with its sidecar and `{dir}/renders/{name}`,
/// a strip of the sample under the first `sample.views` environments.
fn save_sample(
    run: &mut RunDir,
    dir: &str,
    name: &str,
    prompt: &Prompt,
    x0: &Tensor,
    envs: &EnvironmentSet,
    cfg: &RunConfig,
) -> CliResult<(MaterialMaps, RgbImage)> {
    let maps = decode(x0)?;
    let grid = pack(&maps);
    let meta_name = Path::new(name).with_extension("meta.txt");
    run.file(&format!("{dir}/grids/{}", meta_name.display()))?;
    grid.save(
        run.file(&format!("{dir}/grids/{name}"))?,
        &GridMetadata {
            category: CATEGORIES[prompt.category].to_string(),
            prompt: prompt.label(),
        },
    )?;
    let row = RgbImage::hstack(&render_views(&maps, envs, cfg)?);
    row.save_png(run.file(&format!("{dir}/renders/{name}"))?)?;
    Ok((maps, row))
}

// ---- gen-data -----------------------------------------------------------------

fn corpus_config(cfg: &RunConfig, materials: usize, tag: u64) -> CorpusConfig {
    CorpusConfig {
        materials,
        lightings: cfg.reward.lightings,
        degradation: cfg.reward.degradation,
        map_res: cfg.map_res(),
        seed: seed(cfg, tag),
    }
}

fn render_path(split: &str, r: &Render, lightings: usize, index: usize) -> String {
    format!("{split}/{}/{:05}_{}_env{:03}.png", r.source.name(), r.material, index % lightings, r.env_id)
}

/// Exports the stage-1 dataset grids, the environment set and both reward
/// corpora as PNGs with a labeled manifest.
pub fn gen_data(cfg: &RunConfig, run: &mut RunDir) -> CliResult<()> {
    let envs = environments(cfg)?;
    envs.save(run.file("environments.toml")?)?;
    let data_seed = seed(cfg, TAG_DATA);
    let names: Vec<String> = (0..cfg.data.train_examples)
        .map(|i| format!("dataset/{i:06}_{}.png", CATEGORIES[i % CATEGORIES.len()]))
        .collect();
    for n in &names {
        run.file(n)?;
        run.file(&Path::new(n).with_extension("meta.txt").display().to_string())?;
    }
    let root = run.root().to_path_buf();
    let grids: Vec<GridImage> = names
        .par_iter()
        .enumerate()
        .map(|(i, n)| {
            let grid = pack(&dataset_material(i, cfg.map_res(), data_seed)?);
            let meta = GridMetadata {
                category: CATEGORIES[i % CATEGORIES.len()].to_string(),
                prompt: String::new(),
            };
            grid.save(root.join(n), &meta)?;
            Ok(grid)
        })
        .collect::<matforge::Result<_>>()?;
    eprintln!("wrote {} dataset grids", grids.len());
    let strip: Vec<RgbImage> = grids.iter().take(CATEGORIES.len()).map(|g| g.image().clone()).collect();
    RgbImage::hstack(&strip).save_png(run.file("strips/dataset.png")?)?;

    let lightings = cfg.reward.lightings;
    let mut entries = Vec::new();
    for (split, materials, tag) in [
        ("train", cfg.reward.corpus_materials, TAG_CORPUS),
        ("heldout", cfg.reward.heldout_materials, TAG_HELDOUT),
    ] {
        let corpora = build_corpora(&corpus_config(cfg, materials, tag), &envs, &cfg.render)?;
        for corpus in [&corpora.realistic, &corpora.synthetic] {
            let paths: Vec<String> = corpus.iter().enumerate().map(|(i, r)| render_path(split, r, lightings, i)).collect();
            for p in &paths {
                run.file(p)?;
            }
            corpus.par_iter().zip(&paths).try_for_each(|(r, p)| r.image.save_png(root.join(p)))?;
            entries.extend(corpus.iter().zip(&paths).map(|(r, p)| ManifestEntry {
                path: p.clone(),
                category: r.category,
                source: r.source,
                raw_score: None,
                label: None,
            }));
        }
        if split == "train" {
            let first = |c: &[Render]| -> Vec<RgbImage> { c.iter().step_by(lightings).take(CATEGORIES.len()).map(|r| r.image.clone()).collect() };
            let rows = [RgbImage::hstack(&first(&corpora.realistic)), RgbImage::hstack(&first(&corpora.synthetic))];
            RgbImage::vstack(&rows).save_png(run.file("strips/corpus.png")?)?;
        }
    }
    write_manifest(run.file("corpus.csv")?, &entries)?;
    eprintln!("wrote {} corpus renders", entries.len());
    Ok(())
}

// ---- train-diffusion --------------------------------------------------------------

fn latest_checkpoint(dir: &Path, prefix: &str) -> Option<usize> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_prefix(prefix)?.strip_suffix(".ckpt")?.parse().ok())
        .max()
}

pub const DIFFUSION_LOG_HEADER: &str = "step,train_loss,val_loss";

/// Stage-1 training with periodic checkpoints. With `resume`, continues
/// from the latest checkpoint in the run directory.
pub fn train_diffusion(cfg: &RunConfig, run: &mut RunDir, resume: bool) -> CliResult<()> {
    let data_seed = seed(cfg, TAG_DATA);
    let n = cfg.data.train_examples;
    let data = training_examples(0..n, cfg.map_res(), data_seed)?;
    let val = training_examples(n..n + cfg.data.val_examples, cfg.map_res(), data_seed)?;
    let s = schedule(cfg)?;
    let val_seed = seed(cfg, TAG_VAL);
    let val_loss = |net: &UNet| denoising_loss(net, &val, &s, &mut stream(val_seed, &[]));
    let mut net = UNet::new(cfg.net.clone(), &mut stream(seed(cfg, TAG_NET), &[]))?;
    let baseline = val_loss(&net)?;
    let d = &cfg.diffusion;
    let train_cfg = TrainConfig {
        steps: d.steps,
        batch: d.batch,
        lr: d.lr,
        warmup: d.warmup,
        seed: seed(cfg, TAG_TRAIN),
    };
    let mut opt = Adam::new(d.lr);
    let ckpt_dir = run.root().join("checkpoints");
    let start = if resume { latest_checkpoint(&ckpt_dir, "stage1_").unwrap_or(0) } else { 0 };
    let log_path = run.file("diffusion_loss.csv")?;
    let log = if start > 0 {
        net = load_net(cfg, &ckpt_dir.join(format!("stage1_{start:06}.ckpt")))?;
        opt.load_state(net.params(), &read_checkpoint(ckpt_dir.join(format!("adam_{start:06}.ckpt")))?)?;
        eprintln!("resuming at step {start}");
        CsvLog::resume(log_path, DIFFUSION_LOG_HEADER, start)?
    } else {
        CsvLog::create(log_path, DIFFUSION_LOG_HEADER)?
    };
    let mut last_val = baseline;
    {
        let mut on_step = |step: usize, loss: f64, net: &UNet| -> CliResult<()> {
            let done = step + 1;
            let mut val_col = String::new();
            if done % d.val_every == 0 || done == d.steps {
                last_val = val_loss(net)?;
                if !last_val.is_finite() {
                    return Err(matforge::Error::NonFinite(format!("validation loss at step {step}")).into());
                }
                val_col = format!("{last_val:.9}");
                eprintln!("step {done}/{} train {loss:.5} val {last_val:.5}", d.steps);
            }
            log.row(&format!("{step},{loss:.9},{val_col}"))?;
            Ok(())
        };
        // train one checkpoint interval at a time so the optimizer state is
        // available at every checkpoint
        let mut at = start;
        while at < d.steps {
            let until = ((at / d.checkpoint_every + 1) * d.checkpoint_every).min(d.steps);
            let chunk = TrainConfig {
                steps: until,
                ..train_cfg.clone()
            };
            train_denoiser(&mut net, &data, &s, &chunk, &mut opt, at, &mut |k, loss, n| {
                on_step(k, loss, n).map_err(core_err)
            })?;
            write_checkpoint(run.file(&format!("checkpoints/stage1_{until:06}.ckpt"))?, &net.params().to_named())?;
            write_checkpoint(run.file(&format!("checkpoints/adam_{until:06}.ckpt"))?, &opt.state(net.params()))?;
            run.write_manifest()?;
            at = until;
        }
    }
    write_checkpoint(run.file("stage1.ckpt")?, &net.params().to_named())?;
    let summary = [
        format!("baseline_val_loss,{baseline:.9}"),
        format!("final_val_loss,{last_val:.9}"),
        format!("val_loss_ratio,{:.9}", last_val / baseline),
    ];
    run.write("diffusion_summary.csv", csv_table("metric,value", summary))?;

    let prompts = PromptSet::candidates(Role::Train, CATEGORIES.len(), 1);
    let xs = sample_prompts(&net, &prompts.prompts, &sampler(cfg)?, &cfg.shape(), cfg.run.seed)?;
    let grids: Vec<RgbImage> = xs.iter().map(|x| Ok(pack(&decode(x)?).0)).collect::<CliResult<_>>()?;
    RgbImage::hstack(&grids).save_png(run.file("strips/stage1_samples.png")?)?;
    eprintln!("val loss {last_val:.5} vs untrained {baseline:.5}");
    Ok(())
}

// ---- sample -----------------------------------------------------------------------

pub const SAMPLE_LOG_HEADER: &str = "file,category,prompt,seed,mean_albedo,mean_metallicity,mean_luminance";

/// `sample.per_category` samples per category from a checkpoint.
pub fn sample(cfg: &RunConfig, run: &mut RunDir, checkpoint: &Path) -> CliResult<()> {
    let ckpt = stage_input(run, checkpoint, "policy.ckpt")?;
    let net = load_net(cfg, &ckpt)?;
    let envs = environments(cfg)?;
    let prompts = PromptSet::candidates(Role::Train, CATEGORIES.len(), cfg.sample.per_category);
    let xs = sample_prompts(&net, &prompts.prompts, &sampler(cfg)?, &cfg.shape(), cfg.run.seed)?;
    let mut rows = Vec::new();
    let mut strip = Vec::new();
    for (p, x) in prompts.prompts.iter().zip(&xs) {
        let name = image_name(0, p, cfg.run.seed);
        let (maps, row) = save_sample(run, "samples", &name, p, x, &envs, cfg)?;
        let lum = row.luminance();
        rows.push(format!(
            "{name},{},{},{},{:.9},{:.9},{:.9}",
            CATEGORIES[p.category],
            p.label(),
            cfg.run.seed,
            maps.mean_albedo(),
            maps.mean_metallicity(),
            lum.iter().sum::<f64>() / lum.len() as f64
        ));
        strip.push(row);
    }
    RgbImage::vstack(&strip).save_png(run.file("strips/samples.png")?)?;
    run.write("samples.csv", csv_table(SAMPLE_LOG_HEADER, rows))?;
    eprintln!("wrote {} samples", xs.len());
    Ok(())
}

// ---- train-reward -------------------------------------------------------------------

fn features(renders: &[Render]) -> CliResult<Vec<Embedding>> {
    Ok(renders.par_iter().map(|r| extract_features(&r.image)).collect::<matforge::Result<_>>()?)
}

/// Classifier labeling, the realism head with and without the TV term, and
/// normalization bounds from a held-out corpus.
pub fn train_reward(cfg: &RunConfig, run: &mut RunDir) -> CliResult<()> {
    let rw = &cfg.reward;
    let envs = environments(cfg)?;
    envs.save(run.file("environments.toml")?)?;
    let train = build_corpora(&corpus_config(cfg, rw.corpus_materials, TAG_CORPUS), &envs, &cfg.render)?;
    let held = build_corpora(&corpus_config(cfg, rw.heldout_materials, TAG_HELDOUT), &envs, &cfg.render)?;
    let (fr, fs) = (features(&train.realistic)?, features(&train.synthetic)?);
    let held_feats: Vec<Embedding> = features(&held.realistic)?.into_iter().chain(features(&held.synthetic)?).collect();
    eprintln!("embedded {} training and {} held-out renders", fr.len() + fs.len(), held_feats.len());

    let annotated = rw.annotated_materials * rw.lightings;
    let ann: Vec<Embedding> = fr[..annotated].iter().chain(&fs[..annotated]).cloned().collect();
    let ann_labels: Vec<bool> = (0..2 * annotated).map(|i| i < annotated).collect();
    let clf = train_classifier(
        &ann,
        &ann_labels,
        &ClassifierConfig {
            lr: rw.classifier_lr,
            batch: rw.batch,
            epochs: rw.classifier_epochs,
            seed: seed(cfg, TAG_CLASSIFIER),
        },
    )?;
    clf.save(run.file("classifier.ckpt")?)?;
    let probs = |f: &[Embedding]| f.iter().map(|x| clf.probability(x)).collect::<Vec<_>>();
    let (pr, ps) = (probs(&fr), probs(&fs));
    let labels: Vec<bool> = apply_threshold(&pr, rw.threshold_real)
        .into_iter()
        .chain(apply_threshold(&ps, rw.threshold_generated))
        .collect();
    let agreement = labels.iter().enumerate().filter(|(i, l)| **l == (*i < fr.len())).count() as f64 / labels.len() as f64;

    let feats: Vec<Embedding> = fr.into_iter().chain(fs).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let head_cfg = HeadTrainConfig {
        lr: rw.lr,
        batch: rw.batch,
        epochs: rw.epochs,
        lambda_mse: rw.lambda_mse,
        lambda_tv: rw.lambda_tv,
        k: rw.knn_k,
        seed: seed(cfg, TAG_HEAD),
    };
    let (mut head, tv_log) = train_reward_head(&feats, &y, &head_cfg)?;
    let (mut plain, plain_log) = train_reward_head(&feats, &y, &HeadTrainConfig { lambda_tv: 0.0, ..head_cfg })?;
    for h in [&mut head, &mut plain] {
        let raw: Vec<f64> = held_feats.iter().map(|f| h.raw(f)).collect();
        h.bounds = Some(score_bounds(&raw)?);
    }
    head.save(run.file("reward_head.ckpt")?)?;
    plain.save(run.file("reward_head_notv.ckpt")?)?;

    let renders = train.realistic.iter().chain(&train.synthetic);
    let entries: Vec<ManifestEntry> = renders
        .zip(&feats)
        .zip(&labels)
        .enumerate()
        .map(|(i, ((r, f), l))| ManifestEntry {
            path: render_path("train", r, rw.lightings, i),
            category: r.category,
            source: r.source,
            raw_score: Some(head.raw(f)),
            label: Some(*l),
        })
        .collect();
    write_manifest(run.file("labels.csv")?, &entries)?;
    let loss_rows = tv_log
        .epoch_loss
        .iter()
        .zip(&plain_log.epoch_loss)
        .enumerate()
        .map(|(e, (a, b))| format!("{e},{a:.9},{b:.9}"));
    run.write("head_loss.csv", csv_table("epoch,loss_tv,loss_plain", loss_rows))?;
    let (lo, hi) = head.bounds.expect("set above");
    let summary = [
        format!("label_agreement,{agreement:.9}"),
        format!("positive_labels,{}", labels.iter().filter(|l| **l).count()),
        format!("bound_low,{lo:.9}"),
        format!("bound_high,{hi:.9}"),
    ];
    run.write("reward_summary.csv", csv_table("metric,value", summary))?;
    eprintln!("label agreement {agreement:.3}; bounds ({lo:.4}, {hi:.4})");
    Ok(())
}

// ---- select-prompts ---------------------------------------------------------------------

/// Scores every candidate prompt with the realism reward and keeps the
/// lowest-scoring ones per category.
pub fn select_prompts(cfg: &RunConfig, run: &mut RunDir, checkpoint: &Path, reward_head: &Path) -> CliResult<()> {
    let net = load_net(cfg, &stage_input(run, checkpoint, "policy.ckpt")?)?;
    let head = load_bounded_head(&stage_input(run, reward_head, "reward_head.ckpt")?)?;
    let reward = RenderedReward {
        envs: environments(cfg)?,
        render: cfg.render.clone(),
        scorer: RealismScore(head),
    };
    let p = &cfg.prompts;
    let candidates = PromptSet::candidates(Role::Train, CATEGORIES.len(), p.candidates_per_category);
    let keep = keep_counts(p.keep, CATEGORIES.len());
    let sel = select_training_prompts(
        &net,
        &reward,
        &candidates,
        p.samples_per_prompt,
        &keep,
        &sampler(cfg)?,
        &cfg.shape(),
        seed(cfg, TAG_SELECT),
    )?;
    sel.selected.save(run.file("prompts.toml")?)?;
    PromptSet::candidates(Role::Heldout, CATEGORIES.len(), p.heldout_per_category).save(run.file("heldout_prompts.toml")?)?;
    let rows = candidates.prompts.iter().zip(&sel.mean_scores).map(|(c, s)| {
        let chosen = sel.selected.prompts.contains(c);
        format!("{},{},{},{s:.9},{}", c.label(), CATEGORIES[c.category], c.variation, chosen as u8)
    });
    run.write("candidate_scores.csv", csv_table("prompt,category,variation,mean_score,selected", rows))?;
    eprintln!("kept {} of {} candidates", sel.selected.len(), candidates.len());
    Ok(())
}

// ---- rl-finetune ----------------------------------------------------------------------------

enum Scorer {
    Realism(RealismScore),
    Luminance(MeanLuminance),
}

impl ImageScore for Scorer {
    fn score(&self, img: &RgbImage) -> matforge::Result<f64> {
        match self {
            Scorer::Realism(s) => s.score(img),
            Scorer::Luminance(s) => s.score(img),
        }
    }
}

pub struct RlInputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub reward_head: Option<&'a Path>,
    pub prompts: Option<&'a Path>,
}

const RL_POLICY_INPUT: &str = "policy.ckpt";
const RL_HEAD_INPUT: &str = "reward_head.ckpt";
const RL_PROMPTS_INPUT: &str = "prompts.toml";

/// DDPO finetuning of LoRA adapters. A fresh run copies its inputs into the
/// run directory; `resume` continues from the latest epoch checkpoint using
/// those copies.
pub fn rl_finetune(cfg: &RunConfig, run: &mut RunDir, inputs: &RlInputs<'_>, resume: bool) -> CliResult<()> {
    let inputs_dir = run.root().join("inputs");
    let input = |name: &str| inputs_dir.join(name);
    if !resume {
        let ckpt = inputs.checkpoint.ok_or_else(|| CliError::Config("rl-finetune needs --checkpoint".into()))?;
        stage_input(run, ckpt, RL_POLICY_INPUT)?;
        if let Some(h) = inputs.reward_head {
            stage_input(run, h, RL_HEAD_INPUT)?;
        }
        match inputs.prompts {
            Some(p) => {
                stage_input(run, p, RL_PROMPTS_INPUT)?;
            }
            None => {
                PromptSet::candidates(Role::Train, CATEGORIES.len(), cfg.prompts.train_per_category).save(run.file(&format!("inputs/{RL_PROMPTS_INPUT}"))?)?
            }
        }
        run.write_manifest()?;
    }
    let scorer = match cfg.rl.reward {
        RewardKind::Luminance => Scorer::Luminance(MeanLuminance),
        RewardKind::Realism => {
            let path = input(RL_HEAD_INPUT);
            if !path.exists() {
                return Err(CliError::Config("rl.reward = \"realism\" needs --reward-head".into()));
            }
            Scorer::Realism(RealismScore(load_bounded_head(&path)?))
        }
    };
    let envs = environments(cfg)?;
    let reward = RenderedReward {
        envs: envs.clone(),
        render: cfg.render.clone(),
        scorer,
    };
    let train = PromptSet::load(input(RL_PROMPTS_INPUT))?;
    let heldout = PromptSet::candidates(Role::Heldout, CATEGORIES.len(), cfg.prompts.heldout_per_category);
    let r = &cfg.rl;
    let rl_cfg = RlConfig {
        epochs: r.epochs,
        trajectories_per_epoch: r.trajectories,
        minibatch: r.minibatch,
        clip: r.clip,
        lr: r.lr,
        accumulation: r.accumulation,
        inner_epochs: 1,
        advantage: r.advantage,
        eval_samples: r.eval_samples,
        seed: seed(cfg, TAG_RL),
    };
    rl_cfg.validate()?;
    let s = sampler(cfg)?;
    let shape = cfg.shape();

    let ckpt_dir = run.root().join("checkpoints");
    let start = if resume { latest_checkpoint(&ckpt_dir, "policy_").unwrap_or(0) } else { 0 };
    let mut opt = Adam::new(r.lr);
    let mut policy = if start > 0 {
        let p = load_net(cfg, &ckpt_dir.join(format!("policy_{start:04}.ckpt")))?;
        opt.load_state(p.params(), &read_checkpoint(ckpt_dir.join(format!("adam_{start:04}.ckpt")))?)?;
        eprintln!("resuming at epoch {start}");
        p
    } else {
        let base = load_net(cfg, &input(RL_POLICY_INPUT))?;
        if base.lora().is_some() {
            base
        } else {
            base.attach_lora(r.lora_rank, &mut stream(seed(cfg, TAG_LORA), &[]))?
        }
    };
    let log_path = run.file("rl_metrics.csv")?;
    let log = if start > 0 {
        CsvLog::resume(log_path, EpochLog::CSV_HEADER, start)?
    } else {
        CsvLog::create(log_path, EpochLog::CSV_HEADER)?
    };

    let image_prompts: Vec<Prompt> = (0..r.images_per_epoch).map(|i| train.prompts[i % train.len()]).collect();
    let image_seed = seed(cfg, TAG_IMAGES);
    let save_images = |run: &mut RunDir, epoch: usize, policy: &UNet| -> CliResult<()> {
        let xs = sample_prompts(policy, &image_prompts, &s, &shape, image_seed)?;
        for (p, x) in image_prompts.iter().zip(&xs) {
            save_sample(run, "images", &image_name(epoch, p, cfg.run.seed), p, x, &envs, cfg)?;
        }
        Ok(())
    };
    if start == 0 {
        save_images(run, 0, &policy)?;
    }
    let setup = RlSetup {
        cfg: &rl_cfg,
        train: &train,
        heldout: &heldout,
        reward: &reward,
        schedule: &s,
        shape: &shape,
    };
    let logs = rl_train(&mut policy, &mut opt, &setup, start, &mut |e, p, o| {
        let mut step = || -> CliResult<()> {
            log.row(&e.csv_row())?;
            eprintln!("epoch {} train {:.4} heldout {:.4}", e.epoch, e.train_mean, e.heldout_mean);
            if e.epoch < rl_cfg.epochs {
                let next = e.epoch + 1;
                save_images(run, next, p)?;
                write_checkpoint(run.file(&format!("checkpoints/policy_{next:04}.ckpt"))?, &p.params().to_named())?;
                write_checkpoint(run.file(&format!("checkpoints/adam_{next:04}.ckpt"))?, &o.state(p.params()))?;
                run.write_manifest()?;
            }
            Ok(())
        };
        step().map_err(core_err)
    })?;

    let out = run.file("policy.ckpt")?;
    if rl_cfg.epochs == 0 {
        fs::copy(input(RL_POLICY_INPUT), &out)?;
    } else {
        write_checkpoint(&out, &policy.params().to_named())?;
    }
    let rows: Vec<RgbImage> = image_prompts
        .iter()
        .map(|p| {
            let per_epoch = (0..=rl_cfg.epochs)
                .map(|e| RgbImage::load_png(run.root().join("images/renders").join(image_name(e, p, cfg.run.seed))))
                .collect::<matforge::Result<Vec<_>>>()?;
            Ok(RgbImage::vstack(&per_epoch))
        })
        .collect::<CliResult<_>>()?;
    RgbImage::hstack(&rows).save_png(run.file("strips/epochs.png")?)?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        eprintln!("train reward {:.4} -> {:.4}", first.train_mean, last.train_mean);
    }
    Ok(())
}

// ---- render -------------------------------------------------------------------------------------

/// Renders packed grid PNGs under the first `sample.views` environments.
pub fn render(cfg: &RunConfig, run: &mut RunDir, grids: &[PathBuf]) -> CliResult<()> {
    let envs = environments(cfg)?;
    let mut rows = Vec::new();
    for path in grids {
        let img = RgbImage::load_png(path)?;
        let maps = unpack(&GridImage(img))?;
        let row = RgbImage::hstack(&render_views(&maps, &envs, cfg)?);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
        row.save_png(run.file(&format!("renders/{stem}.png"))?)?;
        rows.push(row);
    }
    RgbImage::vstack(&rows).save_png(run.file("strips/renders.png")?)?;
    eprintln!("rendered {} grids", grids.len());
    Ok(())
}

// ---- eval -------------------------------------------------------------------------------------------

pub struct EvalInputs<'a> {
    pub reward_head: &'a Path,
    pub reward_head_notv: Option<&'a Path>,
    pub rl_metrics: &'a [PathBuf],
}

fn near_duplicate_features(cfg: &RunConfig, envs: &EnvironmentSet) -> CliResult<Vec<Embedding>> {
    let base_seed = seed(cfg, TAG_NEAR);
    let stone = generate_material(category_id("stone")?, base_seed, cfg.map_res())?;
    Ok((0..cfg.reward.near_duplicates)
        .into_par_iter()
        .map(|i| {
            let m = jitter_maps(&stone, cfg.reward.near_duplicate_sigma, &mut stream(base_seed, &[i as u64]))?;
            extract_features(&shade(&m, Lighting::Environment(&envs.environments[0]), &cfg.render)?)
        })
        .collect::<matforge::Result<_>>()?)
}

/// Column `name` of a CSV file as numbers.
fn csv_column(text: &str, name: &str) -> CliResult<Vec<f64>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let idx = header
        .split(',')
        .position(|h| h == name)
        .ok_or_else(|| CliError::Core(matforge::Error::Format(format!("CSV has no column {name}"))))?;
    lines
        .map(|l| {
            l.split(',')
                .nth(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Core(matforge::Error::Format(format!("bad {name} value in row {l}"))))
        })
        .collect()
}

/// Mean normalized scores of fresh realistic- and synthetic-analog corpora,
/// the near-duplicate score spread with and without TV, and realism-vs-epoch
/// curves of finished RL runs.
pub fn eval(cfg: &RunConfig, run: &mut RunDir, inputs: &EvalInputs<'_>) -> CliResult<()> {
    let head = load_bounded_head(inputs.reward_head)?;
    let envs = environments(cfg)?;
    let ccfg = corpus_config(cfg, cfg.reward.heldout_materials, TAG_EVAL);
    let mut metrics = Vec::new();
    let mut scores = Vec::new();
    for source in [Source::RealisticAnalog, Source::SyntheticAnalog] {
        let feats = features(&build_corpus(&ccfg, source, &envs, &cfg.render)?)?;
        let s: Vec<f64> = feats.iter().map(|f| head.normalized(f)).collect::<matforge::Result<_>>()?;
        let (m, sd) = mean_std(&s);
        eprintln!("{}: mean normalized score {m:.4} (std {sd:.4}, n {})", source.name(), s.len());
        metrics.push(format!("mean_score_{},{m:.9}", source.name()));
        metrics.push(format!("std_score_{},{sd:.9}", source.name()));
        scores.push(s);
    }
    let a = auc(&scores[0], &scores[1])?;
    metrics.push(format!("auc,{a:.9}"));
    eprintln!("AUC {a:.4}");

    if let Some(path) = inputs.reward_head_notv {
        let plain = load_bounded_head(path)?;
        let feats = near_duplicate_features(cfg, &envs)?;
        let spread = |h: &RewardHead| -> CliResult<f64> { Ok(mean_std(&feats.iter().map(|f| h.normalized(f)).collect::<matforge::Result<Vec<_>>>()?).1) };
        let (with, without) = (spread(&head)?, spread(&plain)?);
        metrics.push(format!("near_duplicate_std_tv,{with:.9}"));
        metrics.push(format!("near_duplicate_std_plain,{without:.9}"));
        metrics.push(format!("near_duplicate_std_ratio,{:.9}", with / without));
        eprintln!("near-duplicate std {with:.4} with TV, {without:.4} without");
    }

    let mut curve = Vec::new();
    for (k, path) in inputs.rl_metrics.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| io_context(e, path))?;
        let (epochs, tr, ho) = (
            csv_column(&text, "epoch")?,
            csv_column(&text, "train_mean")?,
            csv_column(&text, "heldout_mean")?,
        );
        let (Some(t0), Some(h0)) = (tr.first(), ho.first()) else {
            continue;
        };
        for i in 0..epochs.len() {
            curve.push(format!(
                "{k},{},{:.9},{:.9},{:.9},{:.9}",
                epochs[i],
                tr[i],
                ho[i],
                tr[i] / t0 - 1.0,
                ho[i] / h0 - 1.0
            ));
        }
        let (t1, h1) = (tr[tr.len() - 1], ho[ho.len() - 1]);
        metrics.push(format!("run{k}_train_change,{:.9}", t1 / t0 - 1.0));
        metrics.push(format!("run{k}_heldout_change,{:.9}", h1 / h0 - 1.0));
        eprintln!("run {k}: train {t0:.4} -> {t1:.4}, held-out {h0:.4} -> {h1:.4}");
    }
    if !inputs.rl_metrics.is_empty() {
        run.write(
            "realism_curve.csv",
            csv_table("run,epoch,train_mean,heldout_mean,train_change,heldout_change", curve),
        )?;
    }
    run.write("eval.csv", csv_table("metric,value", metrics))?;
    Ok(())
}
