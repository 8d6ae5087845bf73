//! The three training phases: labelled pre-training, frozen-tail training
//! against unlabelled MR with a fresh image critic, and dual-critic
//! fine-tuning with gradual unfreezing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use gansfer_nn::{Adam, Snapshot, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{MultiChannelSlice, N_CHANNELS};
use crate::error::{Error, Result};
use crate::gan::checkpoint::{load_json, save_json};
use crate::gan::generator::{block_group, sample_latents};
use crate::gan::train::{train_step, Adversary, BatchSource, GanTrainConfig, ImagePool, StepMetrics};
use crate::gan::{dyadic_stages, stage_widths, CriticConfig, CriticLossParts, CriticNet, GeneratorConfig, GeneratorNet};
use crate::grid::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanArch {
    pub latent_dim: usize,
    pub base_res: usize,
    pub target_res: usize,
    pub generator_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,
}

impl GanArch {
    /// Uniform width `w` at every stage.
    pub fn uniform(latent_dim: usize, base_res: usize, target_res: usize, w: usize) -> Result<Self> {
        let n = dyadic_stages(base_res, target_res)? + 1;
        Ok(Self { latent_dim, base_res, target_res, generator_widths: vec![w; n], critic_widths: vec![w; n] })
    }

    /// Widths halving with resolution, `max_width` at the coarse stages.
    pub fn tapered(latent_dim: usize, base_res: usize, target_res: usize, max_width: usize) -> Result<Self> {
        let n = dyadic_stages(base_res, target_res)? + 1;
        let w = stage_widths(n, base_res, max_width, (max_width / 4).max(4), 16);
        Ok(Self { latent_dim, base_res, target_res, generator_widths: w.clone(), critic_widths: w })
    }

    pub fn generator(&self, out_channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.latent_dim,
            base_res: self.base_res,
            target_res: self.target_res,
            out_channels,
            widths: self.generator_widths.clone(),
        }
    }

    pub fn critic(&self, in_channels: usize) -> CriticConfig {
        CriticConfig {
            in_channels,
            base_res: self.base_res,
            target_res: self.target_res,
            widths: self.critic_widths.clone(),
        }
    }

    pub fn n_stages(&self) -> usize {
        self.generator_widths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GansferConfig {
    pub arch: GanArch,
    /// Phase 1 progressive schedule, critic ratio, loss weights, optimiser and batch settings.
    pub train: GanTrainConfig,
    pub phase2_images: usize,
    pub phase3_images: usize,
    /// Generator updates that use `warmup_ratio` critic updates at the start of phase 2.
    pub warmup_cycles: usize,
    pub warmup_ratio: usize,
    /// Resolution blocks frozen (with all output layers) in phase 2.
    pub frozen_final_blocks: usize,
    /// Images between successive unfreezes in phase 3.
    pub unfreeze_every: usize,
    pub weight_image: f64,
    pub weight_seg: f64,
    /// Self-teaching pool size as a multiple of the labelled slice count.
    pub selfteach_multiplier: usize,
}

impl GansferConfig {
    pub fn new(arch: GanArch, train: GanTrainConfig) -> Self {
        let p2 = train.images_per_stage * 2;
        Self {
            arch,
            phase2_images: p2,
            phase3_images: p2,
            unfreeze_every: p2 / 4,
            train,
            warmup_cycles: 5,
            warmup_ratio: 100,
            frozen_final_blocks: 1,
            weight_image: 1.0,
            weight_seg: 1.0,
            selfteach_multiplier: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        dyadic_stages(self.arch.base_res, self.arch.target_res)?;
        let n = self.arch.n_stages();
        if self.arch.generator_widths.len() != n || self.arch.critic_widths.len() != n {
            return Err(Error::Config("generator and critic need one width per stage".into()));
        }
        if self.frozen_final_blocks == 0 || self.frozen_final_blocks >= n {
            return Err(Error::Config(format!(
                "frozen_final_blocks must be in 1..{n} so that at least one early block trains"
            )));
        }
        if self.warmup_ratio == 0 || self.unfreeze_every == 0 || self.selfteach_multiplier == 0 {
            return Err(Error::Config("phase counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
    P3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticSlot {
    pub critic: CriticNet<f32>,
    pub opt: Adam<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub images_shown: u64,
    pub stage: usize,
    pub alpha: f64,
    pub critic_updates: Vec<usize>,
    pub critic_loss: Vec<CriticLossParts>,
    pub generator_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableChange {
    pub images_shown: u64,
    pub group: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    /// Names of the critics, in the order of `CycleRecord::critic_updates`.
    pub critics: Vec<String>,
    pub cycles: Vec<CycleRecord>,
    pub trainable_changes: Vec<TrainableChange>,
    /// Images shown when each generator group first changed value in this phase.
    pub first_change: BTreeMap<String, u64>,
    /// Max absolute change of the groups that were frozen for the whole phase.
    pub frozen_max_abs_change: f64,
}

/// Everything needed to continue training; serialised as a phase checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    pub generator: GeneratorNet<f32>,
    pub gen_opt: Adam<f32>,
    pub joint: Option<CriticSlot>,
    pub image_critic: Option<CriticSlot>,
    pub seg_critic: Option<CriticSlot>,
    /// Generator groups frozen when phase 2 started.
    pub frozen_layers: Vec<String>,
    /// `(images shown in phase 3, block group)` pairs.
    pub unfreeze_schedule: Vec<(u64, String)>,
    pub snapshots: BTreeMap<String, Snapshot<f32>>,
    pub rng: ChaCha8Rng,
    pub logs: BTreeMap<String, PhaseLog>,
}

impl PhaseState {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    pub fn log(&self, phase: Phase) -> Option<&PhaseLog> {
        self.logs.get(phase_key(phase))
    }
}

pub fn phase_key(p: Phase) -> &'static str {
    match p {
        Phase::P1 => "p1",
        Phase::P2 => "p2",
        Phase::P3 => "p3",
    }
}

fn cycles_for(images: usize, batch: usize) -> u64 {
    images.div_ceil(batch) as u64
}

fn record(cycle: u64, images: u64, gen: &GeneratorNet<f32>, m: StepMetrics) -> CycleRecord {
    CycleRecord {
        cycle,
        images_shown: images,
        stage: gen.stage(),
        alpha: gen.alpha,
        critic_updates: m.critic_updates,
        critic_loss: m.critic_loss,
        generator_loss: m.generator_loss,
    }
}

fn slice_pool(slices: &[MultiChannelSlice], channels: std::ops::Range<usize>) -> Result<ImagePool> {
    let first = slices.first().ok_or(Error::EmptyPool("labelled slices"))?;
    let (h, w) = first.size();
    for s in slices {
        if s.channels.len() != N_CHANNELS || s.size() != (h, w) {
            return Err(Error::ShapeMismatch("labelled slices must be 8-channel and equally sized".into()));
        }
    }
    let c = channels.len();
    ImagePool::new(slices.iter().map(|s| s.flat(channels.clone())).collect(), [c, h, w])
}

/// MR-only images as a one-channel pool.
pub fn mr_pool(images: &[Image]) -> Result<ImagePool> {
    let first = images.first().ok_or(Error::EmptyPool("unlabelled images"))?;
    ImagePool::new(images.iter().map(|i| i.data.clone()).collect(), [1, first.h, first.w])
}

/// Phase 1: progressive training of an 8-channel GAN on labelled slices.
pub fn run_phase1(labelled: &[MultiChannelSlice], cfg: &GansferConfig) -> Result<PhaseState> {
    cfg.validate()?;
    let mut pool = slice_pool(labelled, 0..N_CHANNELS)?;
    if pool.shape()[1] != cfg.arch.target_res {
        return Err(Error::ShapeMismatch(format!("slices are {}px, GAN targets {}px", pool.shape()[1], cfg.arch.target_res)));
    }
    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut generator = GeneratorNet::build(cfg.arch.generator(N_CHANNELS), &mut rng)?;
    let mut critic = CriticNet::build(cfg.arch.critic(N_CHANNELS), &mut rng)?;
    let mut gen_opt = Adam::new(t.adam(t.lr_generator));
    let mut critic_opt = Adam::new(t.adam(t.lr_critic));
    let mut log = PhaseLog { critics: vec!["joint".into()], ..Default::default() };
    let per_stage = cycles_for(t.images_per_stage, t.batch_size);
    let fade = (per_stage / 2).max(1);
    let mut images = 0u64;
    let mut cycle = 0u64;
    for stage in 0..cfg.arch.n_stages() {
        if stage > 0 {
            generator.grow(&mut rng)?;
            critic.grow(&mut rng)?;
        }
        for i in 0..per_stage {
            let alpha = if stage == 0 { 1.0 } else { (i as f64 / fade as f64).min(1.0) };
            generator.alpha = alpha;
            critic.alpha = alpha;
            let mut adv = [Adversary {
                critic: &mut critic,
                opt: &mut critic_opt,
                channels: 0..N_CHANNELS,
                weight: 1.0,
                real: &mut pool,
                critic_updates: t.critic_updates_per_gen,
            }];
            let m = train_step(&mut generator, &mut gen_opt, &mut adv, t, &mut rng);
            images += t.batch_size as u64;
            log.cycles.push(record(cycle, images, &generator, m));
            cycle += 1;
        }
    }
    generator.alpha = 1.0;
    critic.alpha = 1.0;
    let mut snapshots = BTreeMap::new();
    snapshots.insert("p1_final".to_string(), generator.params.snapshot());
    let mut logs = BTreeMap::new();
    logs.insert("p1".to_string(), log);
    Ok(PhaseState {
        phase: Phase::P1,
        generator,
        gen_opt,
        joint: Some(CriticSlot { critic, opt: critic_opt }),
        image_critic: None,
        seg_critic: None,
        frozen_layers: Vec::new(),
        unfreeze_schedule: Vec::new(),
        snapshots,
        rng,
        logs,
    })
}

/// Groups frozen in phase 2: the last `n` resolution blocks and every output layer.
pub fn final_layers(gen: &GeneratorNet<f32>, n: usize) -> Vec<String> {
    let blocks = gen.block_groups();
    let mut out: Vec<String> = blocks[blocks.len() - n..].to_vec();
    out.extend(gen.output_groups());
    out
}

/// Critic updates before generator update number `cycle` (0-based) of phase 2.
pub fn phase2_ratio(cycle: u64, cfg: &GansferConfig) -> usize {
    if cycle < cfg.warmup_cycles as u64 {
        cfg.warmup_ratio
    } else {
        cfg.train.critic_updates_per_gen
    }
}

/// Tracks the first image count at which each generator group changes value.
struct ChangeTracker {
    prev: Snapshot<f32>,
}

impl ChangeTracker {
    fn observe(&mut self, now: Snapshot<f32>, images: u64, log: &mut PhaseLog) {
        for g in self.prev.changed_groups(&now) {
            log.first_change.entry(g).or_insert(images);
        }
        self.prev = now;
    }
}

/// Phase 2: freeze the final layers, replace the joint critic by a fresh
/// MR-only critic and train against unlabelled MR slices.
pub fn run_phase2(mut state: PhaseState, unlabelled: &[Image], cfg: &GansferConfig) -> Result<PhaseState> {
    cfg.validate()?;
    if state.phase != Phase::P1 {
        return Err(Error::Phase(format!("phase 2 needs a phase 1 state, got {:?}", state.phase)));
    }
    let mut pool = mr_pool(unlabelled)?;
    let t = &cfg.train;
    let frozen = final_layers(&state.generator, cfg.frozen_final_blocks);
    for g in &frozen {
        state.generator.params.set_group_trainable(g, false);
    }
    let entry = state.generator.params.snapshot();
    state.snapshots.insert("p2_entry".into(), entry.clone());
    state.frozen_layers = frozen.clone();
    state.joint = None;
    let mut critic = CriticNet::build_full(cfg.arch.critic(1), &mut state.rng)?;
    let mut opt = Adam::new(t.adam(t.lr_critic));
    let mut log = PhaseLog { critics: vec!["image".into()], ..Default::default() };
    for g in &frozen {
        log.trainable_changes.push(TrainableChange { images_shown: 0, group: g.clone(), trainable: false });
    }
    let mut tracker = ChangeTracker { prev: entry.clone() };
    let mut images = 0u64;
    for cycle in 0..cycles_for(cfg.phase2_images, t.batch_size) {
        let mut adv = [Adversary {
            critic: &mut critic,
            opt: &mut opt,
            channels: 0..1,
            weight: 1.0,
            real: &mut pool,
            critic_updates: phase2_ratio(cycle, cfg),
        }];
        let m = train_step(&mut state.generator, &mut state.gen_opt, &mut adv, t, &mut state.rng);
        images += t.batch_size as u64;
        tracker.observe(state.generator.params.snapshot(), images, &mut log);
        log.cycles.push(record(cycle, images, &state.generator, m));
    }
    let frozen_set: BTreeSet<String> = frozen.iter().cloned().collect();
    let end = state.generator.params.snapshot();
    log.frozen_max_abs_change = entry.max_abs_diff_in(&end, &frozen_set);
    state.snapshots.insert("p2_final".into(), end);
    state.image_critic = Some(CriticSlot { critic, opt });
    state.logs.insert("p2".into(), log);
    state.phase = Phase::P2;
    Ok(state)
}

/// Real and post-phase-2 synthetic segmentation channels (7 channels each).
#[derive(Clone, Debug)]
pub struct SelfTeachSet {
    pub real: ImagePool,
    pub synthetic: ImagePool,
    order: Vec<(bool, usize)>,
    cursor: usize,
    synth_perm: Vec<usize>,
    synth_cursor: usize,
}

impl SelfTeachSet {
    pub fn new(real: ImagePool, synthetic: ImagePool) -> Result<Self> {
        if real.shape() != synthetic.shape() {
            return Err(Error::ShapeMismatch("self-teaching pools differ in shape".into()));
        }
        Ok(Self { real, synthetic, order: Vec::new(), cursor: 0, synth_perm: Vec::new(), synth_cursor: 0 })
    }

    /// One epoch: every real sample once plus as many synthetic samples, drawn
    /// without replacement from the synthetic pool, shuffled together.
    /// Entries are `(is_synthetic, index)`.
    pub fn epoch(&mut self, rng: &mut ChaCha8Rng) -> Vec<(bool, usize)> {
        let mut order: Vec<(bool, usize)> = (0..self.real.len()).map(|i| (false, i)).collect();
        for _ in 0..self.real.len() {
            if self.synth_cursor >= self.synth_perm.len() {
                self.synth_perm = (0..self.synthetic.len()).collect();
                self.synth_perm.shuffle(rng);
                self.synth_cursor = 0;
            }
            order.push((true, self.synth_perm[self.synth_cursor]));
            self.synth_cursor += 1;
        }
        order.shuffle(rng);
        order
    }
}

impl BatchSource for SelfTeachSet {
    fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let [c, h, w] = self.real.shape();
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            if self.cursor >= self.order.len() {
                self.order = self.epoch(rng);
                self.cursor = 0;
            }
            let (synth, i) = self.order[self.cursor];
            self.cursor += 1;
            data.extend_from_slice(if synth { self.synthetic.get(i) } else { self.real.get(i) });
        }
        Tensor::from_vec(&[n, c, h, w], data)
    }
}

/// Generates `n` images in batches.
pub fn generate_batched(gen: &GeneratorNet<f32>, n: usize, rng: &mut ChaCha8Rng, batch: usize) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let mut done = 0;
    while done < n {
        let b = batch.min(n - done);
        let z = sample_latents(b, gen.config.latent_dim, rng);
        parts.push(gen.generate(&z)?);
        done += b;
    }
    if parts.is_empty() {
        return Err(Error::BadCount("cannot generate zero images".into()));
    }
    Ok(Tensor::stack(&parts))
}

/// Self-teaching set from the labelled seg channels and a synthetic pool of
/// `multiplier x` as many generated seg channels.
pub fn build_selfteach_set(state: &mut PhaseState, labelled: &[MultiChannelSlice], multiplier: usize) -> Result<SelfTeachSet> {
    if state.phase != Phase::P2 {
        return Err(Error::Phase(format!("self-teaching needs a phase 2 state, got {:?}", state.phase)));
    }
    let real = slice_pool(labelled, 1..N_CHANNELS)?;
    let n = labelled.len() * multiplier;
    let out = generate_batched(&state.generator, n, &mut state.rng, 32)?;
    let (_, c, h, w) = out.dims4();
    let plane = h * w;
    let items = (0..n).map(|i| out.data()[(i * c + 1) * plane..(i + 1) * c * plane].to_vec()).collect();
    SelfTeachSet::new(real, ImagePool::new(items, [c - 1, h, w])?)
}

/// Earliest-first schedule releasing `frozen` blocks every `every` images.
/// Output layers are never scheduled.
pub fn unfreeze_schedule(frozen: &[String], every: usize) -> Result<Vec<(u64, String)>> {
    let mut blocks: Vec<(usize, String)> = frozen
        .iter()
        .filter(|g| !g.starts_with("to_output"))
        .map(|g| {
            let idx = g.strip_prefix("block").and_then(|s| s.parse().ok()).ok_or_else(|| Error::UnknownLayer(g.clone()))?;
            Ok((idx, g.clone()))
        })
        .collect::<Result<_>>()?;
    blocks.sort();
    Ok(blocks.into_iter().enumerate().map(|(j, (_, g))| ((j as u64 + 1) * every as u64, g)).collect())
}

/// Phase 3: dual-critic training with gradual unfreezing. The default
/// schedule comes from [`unfreeze_schedule`]; a custom one may be supplied.
pub fn run_phase3(
    mut state: PhaseState,
    unlabelled: &[Image],
    selfteach: &mut SelfTeachSet,
    cfg: &GansferConfig,
    schedule: Option<Vec<(u64, String)>>,
) -> Result<PhaseState> {
    cfg.validate()?;
    if state.phase != Phase::P2 {
        return Err(Error::Phase(format!("phase 3 needs a phase 2 state, got {:?}", state.phase)));
    }
    let schedule = match schedule {
        Some(s) => s,
        None => unfreeze_schedule(&state.frozen_layers, cfg.unfreeze_every)?,
    };
    let outputs = state.generator.output_groups();
    for (_, g) in &schedule {
        if outputs.contains(g) {
            return Err(Error::ScheduleExhaustsFinalLayer(g.clone()));
        }
        if !state.generator.params.has_group(g) {
            return Err(Error::UnknownLayer(g.clone()));
        }
    }
    let mut pool = mr_pool(unlabelled)?;
    let t = &cfg.train;
    let CriticSlot { critic: mut image_critic, opt: mut image_opt } =
        state.image_critic.take().ok_or_else(|| Error::Phase("phase 2 state has no image critic".into()))?;
    let mut seg_critic = CriticNet::build_full(cfg.arch.critic(N_CHANNELS - 1), &mut state.rng)?;
    let mut seg_opt = Adam::new(t.adam(t.lr_critic));
    let entry = state.generator.params.snapshot();
    state.snapshots.insert("p3_entry".into(), entry.clone());
    state.unfreeze_schedule = schedule.clone();
    let mut log = PhaseLog { critics: vec!["image".into(), "seg".into()], ..Default::default() };
    let mut tracker = ChangeTracker { prev: entry.clone() };
    let mut pending = schedule.into_iter().peekable();
    let mut images = 0u64;
    for cycle in 0..cycles_for(cfg.phase3_images, t.batch_size) {
        while let Some((at, g)) = pending.next_if(|(at, _)| images >= *at) {
            state.generator.params.set_group_trainable(&g, true);
            log.trainable_changes.push(TrainableChange { images_shown: at.max(images), group: g, trainable: true });
        }
        let mut adv = [
            Adversary {
                critic: &mut image_critic,
                opt: &mut image_opt,
                channels: 0..1,
                weight: cfg.weight_image,
                real: &mut pool,
                critic_updates: t.critic_updates_per_gen,
            },
            Adversary {
                critic: &mut seg_critic,
                opt: &mut seg_opt,
                channels: 1..N_CHANNELS,
                weight: cfg.weight_seg,
                real: &mut *selfteach,
                critic_updates: t.critic_updates_per_gen,
            },
        ];
        let m = train_step(&mut state.generator, &mut state.gen_opt, &mut adv, t, &mut state.rng);
        images += t.batch_size as u64;
        tracker.observe(state.generator.params.snapshot(), images, &mut log);
        log.cycles.push(record(cycle, images, &state.generator, m));
    }
    let still_frozen: BTreeSet<String> = state.generator.params.frozen_groups().map(String::from).collect();
    let end = state.generator.params.snapshot();
    log.frozen_max_abs_change = entry.max_abs_diff_in(&end, &still_frozen);
    state.snapshots.insert("p3_final".into(), end);
    state.image_critic = Some(CriticSlot { critic: image_critic, opt: image_opt });
    state.seg_critic = Some(CriticSlot { critic: seg_critic, opt: seg_opt });
    state.logs.insert("p3".into(), log);
    state.phase = Phase::P3;
    Ok(state)
}

/// Generators captured at the end of each phase of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GansferRun {
    pub p1: GeneratorNet<f32>,
    pub p2: GeneratorNet<f32>,
    pub p3: GeneratorNet<f32>,
    pub state: PhaseState,
}

/// All three phases back to back.
pub fn run_all(labelled: &[MultiChannelSlice], unlabelled: &[Image], cfg: &GansferConfig) -> Result<GansferRun> {
    let s1 = run_phase1(labelled, cfg)?;
    let p1 = s1.generator.clone();
    let mut s2 = run_phase2(s1, unlabelled, cfg)?;
    let p2 = s2.generator.clone();
    let mut st = build_selfteach_set(&mut s2, labelled, cfg.selfteach_multiplier)?;
    let s3 = run_phase3(s2, unlabelled, &mut st, cfg, None)?;
    Ok(GansferRun { p1, p2, p3: s3.generator.clone(), state: s3 })
}

/// Disjoint consecutive groups of six subjects.
pub fn multi_gan_groups(n: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if n != 12 && n != 24 {
        return Err(Error::BadBudget(n));
    }
    Ok((0..n / 6).map(|g| g * 6..(g + 1) * 6).collect())
}

/// One GANsfer run per group of six labelled subjects. `labelled[i]` holds
/// the slices of subject `i`. Each group gets its own seed derived from the
/// configured one.
pub fn run_multi_gan(labelled: &[Vec<MultiChannelSlice>], unlabelled: &[Image], cfg: &GansferConfig) -> Result<Vec<GansferRun>> {
    multi_gan_groups(labelled.len())?
        .into_iter()
        .enumerate()
        .map(|(gi, range)| {
            let slices: Vec<MultiChannelSlice> = labelled[range].iter().flatten().cloned().collect();
            let mut c = cfg.clone();
            c.train.seed = derive_seed(cfg.train.seed, gi as u64);
            run_all(&slices, unlabelled, &c)
        })
        .collect()
}

/// Independent child seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(index + 1);
    r.random()
}

/// Mean pairwise Euclidean distance among the MR channels of `n` images
/// generated from latents seeded by `latent_seed`.
pub fn mr_diversity(gen: &GeneratorNet<f32>, n: usize, latent_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
    let out = generate_batched(gen, n, &mut rng, 32)?;
    let (_, c, h, w) = out.dims4();
    let plane = h * w;
    let mr: Vec<&[f32]> = (0..n).map(|i| &out.data()[i * c * plane..i * c * plane + plane]).collect();
    let mut total = 0.0;
    let mut pairs = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            total += mr[i].iter().zip(mr[j]).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Marks a generator block name for logs.
pub fn block_name(i: usize) -> String {
    block_group(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Source;
    use crate::gan::checkpoint::hash_of;

    fn slices(n: usize, res: usize) -> Vec<MultiChannelSlice> {
        (0..n)
            .map(|i| MultiChannelSlice {
                channels: (0..N_CHANNELS)
                    .map(|c| Image::from_fn(res, res, |y, x| (((y * 3 + x * 5 + i * 7 + c) % 11) as f32) / 11.0))
                    .collect(),
                slice_index: i,
                source: Source::Real,
            })
            .collect()
    }

    fn mr(n: usize, res: usize) -> Vec<Image> {
        (0..n).map(|i| Image::from_fn(res, res, |y, x| ((y + x + i) % 5) as f32 / 5.0)).collect()
    }

    fn tiny() -> GansferConfig {
        let arch = GanArch::uniform(8, 4, 16, 4).unwrap();
        let train = GanTrainConfig { images_per_stage: 16, batch_size: 4, seed: 3, ..Default::default() };
        let mut c = GansferConfig::new(arch, train);
        c.phase2_images = 32;
        c.phase3_images = 40;
        c.unfreeze_every = 16;
        c.warmup_cycles = 2;
        c.warmup_ratio = 3;
        c.frozen_final_blocks = 2;
        c.selfteach_multiplier = 2;
        c
    }

    #[test]
    fn phases_run_and_audit() {
        let cfg = tiny();
        let lab = slices(4, 16);
        let un = mr(6, 16);
        let run = run_all(&lab, &un, &cfg).unwrap();
        let p1 = run.state.log(Phase::P1).unwrap();
        assert_eq!(p1.cycles.len(), 3 * 4);
        let p2 = run.state.log(Phase::P2).unwrap();
        assert_eq!(p2.cycles[0].critic_updates, vec![3]);
        assert_eq!(p2.cycles[2].critic_updates, vec![1]);
        assert_eq!(p2.frozen_max_abs_change, 0.0);
        assert_eq!(run.state.frozen_layers, vec!["block1", "block2", "to_output0", "to_output1", "to_output2"]);
        let p3 = run.state.log(Phase::P3).unwrap();
        assert_eq!(run.state.unfreeze_schedule, vec![(16, "block1".to_string()), (32, "block2".to_string())]);
        for (at, g) in &run.state.unfreeze_schedule {
            if let Some(&first) = p3.first_change.get(g) {
                assert!(first > *at, "{g} changed at {first}, scheduled {at}");
            }
        }
        let entry = &run.state.snapshots["p2_entry"];
        let end = &run.state.snapshots["p3_final"];
        for g in run.state.generator.output_groups() {
            assert!(entry.group_bits_equal(end, &g), "{g} moved");
        }
    }

    #[test]
    fn schedule_rejects_output_layers() {
        let cfg = tiny();
        let s1 = run_phase1(&slices(2, 16), &cfg).unwrap();
        let mut s2 = run_phase2(s1, &mr(2, 16), &cfg).unwrap();
        let mut st = build_selfteach_set(&mut s2, &slices(2, 16), 2).unwrap();
        let bad = vec![(8, "to_output2".to_string())];
        let err = run_phase3(s2, &mr(2, 16), &mut st, &cfg, Some(bad)).unwrap_err();
        assert!(matches!(err, Error::ScheduleExhaustsFinalLayer(_)));
    }

    #[test]
    fn reload_resumes_identically() {
        let cfg = tiny();
        let s1 = run_phase1(&slices(2, 16), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p1.ckpt");
        s1.save(&path).unwrap();
        let back = PhaseState::load(&path).unwrap();
        let a = run_phase2(s1, &mr(3, 16), &cfg).unwrap();
        let b = run_phase2(back, &mr(3, 16), &cfg).unwrap();
        assert_eq!(hash_of(&a), hash_of(&b));
    }

    #[test]
    fn selfteach_epochs_are_balanced() {
        let real = ImagePool::new(vec![vec![0.0; 4]; 3], [1, 2, 2]).unwrap();
        let synth = ImagePool::new(vec![vec![1.0; 4]; 30], [1, 2, 2]).unwrap();
        let mut s = SelfTeachSet::new(real, synth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..4 {
            let e = s.epoch(&mut rng);
            assert_eq!(e.iter().filter(|(syn, _)| *syn).count(), 3);
            assert_eq!(e.len(), 6);
        }
    }

    #[test]
    fn multi_gan_budget() {
        assert!(matches!(multi_gan_groups(10), Err(Error::BadBudget(10))));
        assert_eq!(multi_gan_groups(24).unwrap().len(), 4);
        assert_eq!(multi_gan_groups(12).unwrap()[1], 6..12);
    }
}
