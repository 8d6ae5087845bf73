//! Executable acceptance checks. Each `criterion_*` function returns an
//! [`Outcome`]; the expensive ones take their training runs as arguments
//! so callers can share fixtures between criteria.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::data_model::{Cdr, MultiChannelSlice, Source, N_CHANNELS, N_STRUCTURES};
use crate::error::Result;
use crate::evaluation::{classify_cdr, dsc, dsc_report, paired_ttest};
use crate::gan::critic::{Critic, CriticConfig, CriticNet};
use crate::gan::generator::{sample_latents, GeneratorConfig, GeneratorNet};
use crate::gan::loss::critic_loss;
use crate::gan::GanTrainConfig;
use crate::gansfer::{
    build_selfteach_set, derive_seed, mr_diversity, multi_gan_groups, run_multi_gan, run_phase1, run_phase2, run_phase3,
    GanArch, GansferConfig, GansferRun, PhaseState, Phase,
};
use crate::grid::{Grid2, Grid3, Image, Mask};
use crate::morphology::{components, dilate_metric, fill_holes, holes};
use crate::phantom::{generate_cohort, generate_group, Geometry, PhantomSpec};
use crate::pipeline::{evaluate, kept_seg_slices, mean_overall, synthesize, train_segmenter, unlabelled_images, LabelledData};
use crate::segmenter::{MixedSampler, Ratio, SegNetConfig};
use crate::synth::{filter_by_quality, generate_raw, postprocess, quality_score, GeneratorSource, Provenance, StructureMasks, SyntheticSample, MIN_COMPONENT_AREA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(criterion: u8, name: &str, passed: bool, detail: String) -> Self {
        Self { criterion, name: name.into(), passed, detail }
    }

    fn error(criterion: u8, name: &str, e: impl fmt::Display) -> Self {
        Self::new(criterion, name, false, format!("error: {e}"))
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "criterion {:>2} {verdict} {}: {}", self.criterion, self.name, self.detail)
    }
}

/// Phantom MR slices and labelled GAN slices at the default 32x32 geometry.
pub struct PhantomData {
    pub labelled: LabelledData,
    pub unlabelled: Vec<Image>,
}

pub fn phantom_data(n_unlabelled: usize, seed: u64) -> Result<PhantomData> {
    let spec = PhantomSpec { n_subjects: n_unlabelled, n_labelled: 1, seed, ..Default::default() };
    let cohort = generate_cohort(&spec)?;
    let lab = cohort.labelled.iter().map(|p| p.roi_sample()).collect::<Result<Vec<_>>>()?;
    let unl = cohort.unlabelled.iter().map(|p| p.roi_sample()).collect::<Result<Vec<_>>>()?;
    Ok(PhantomData { labelled: LabelledData::new(lab)?, unlabelled: unlabelled_images(&unl) })
}

/// Narrow 32x32 GAN for the phase-contract criteria. Two final blocks are
/// frozen so that the unfreeze order can be audited.
pub fn freeze_config(seed: u64) -> Result<GansferConfig> {
    let arch = GanArch::uniform(16, 4, 32, 8)?;
    let train = GanTrainConfig { images_per_stage: 400, batch_size: 4, seed, ..Default::default() };
    let mut cfg = GansferConfig::new(arch, train);
    cfg.frozen_final_blocks = 2;
    cfg.phase2_images = 10_000 * cfg.train.batch_size;
    cfg.phase3_images = 1200;
    cfg.unfreeze_every = 400;
    Ok(cfg)
}

/// Phases 1 to 3 of the phase-contract fixture, with the wall time taken.
pub struct FreezeRun {
    pub cfg: GansferConfig,
    pub state: PhaseState,
    pub elapsed: Duration,
}

pub fn freeze_run(seed: u64) -> Result<FreezeRun> {
    let cfg = freeze_config(seed)?;
    let data = phantom_data(50, seed)?;
    let start = Instant::now();
    let slices = data.labelled.all_gan_slices();
    let s1 = run_phase1(&slices, &cfg)?;
    let mut s2 = run_phase2(s1, &data.unlabelled, &cfg)?;
    let mut teach = build_selfteach_set(&mut s2, &slices, cfg.selfteach_multiplier)?;
    let state = run_phase3(s2, &data.unlabelled, &mut teach, &cfg, None)?;
    Ok(FreezeRun { cfg, state, elapsed: start.elapsed() })
}

const C1: &str = "freeze contracts";

pub fn criterion_1(run: &FreezeRun) -> Outcome {
    let st = &run.state;
    let snap = |k: &str| st.snapshots.get(k);
    let (Some(p1), Some(p2_entry), Some(p2), Some(p3)) = (snap("p1_final"), snap("p2_entry"), snap("p2_final"), snap("p3_final")) else {
        return Outcome::new(1, C1, false, "missing phase snapshots".into());
    };
    let Some(log2) = st.log(Phase::P2) else { return Outcome::new(1, C1, false, "no phase 2 log".into()) };
    let updates = log2.cycles.len();
    let res = st.generator.resolution();
    let frozen_ok = !st.frozen_layers.is_empty() && st.frozen_layers.iter().all(|g| p1.group_bits_equal(p2, g));
    let outputs = st.generator.output_groups();
    let output_ok = outputs.iter().all(|g| p2_entry.group_bits_equal(p3, g));
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    let passed = frozen_ok && output_ok && updates >= 10_000 && res == 32 && minutes <= 30.0;
    Outcome::new(
        1,
        C1,
        passed,
        format!(
            "{updates} phase-2 updates at {res}x{res}; {} frozen groups bit-identical: {frozen_ok}; {} output groups unchanged through phase 3: {output_ok}; {minutes:.1} min",
            st.frozen_layers.len(),
            outputs.len()
        ),
    )
}

const C2: &str = "warm-up protocol";

pub fn criterion_2(run: &FreezeRun) -> Outcome {
    let Some(log) = run.state.log(Phase::P2) else { return Outcome::new(2, C2, false, "no phase 2 log".into()) };
    let warm = run.cfg.warmup_cycles;
    let ratio = run.cfg.train.critic_updates_per_gen;
    let head: Vec<usize> = log.cycles.iter().take(warm).map(|c| c.critic_updates.iter().sum()).collect();
    let bad_tail = log.cycles.iter().skip(warm).filter(|c| c.critic_updates != [ratio]).count();
    let passed = warm == 5 && head == [100; 5] && log.cycles.len() > warm && bad_tail == 0;
    Outcome::new(2, C2, passed, format!("first {warm} cycles {head:?}; {bad_tail} later cycles differ from {ratio}"))
}

const C3: &str = "unfreeze schedule";

pub fn criterion_3(run: &FreezeRun) -> Outcome {
    let st = &run.state;
    let Some(log) = st.log(Phase::P3) else { return Outcome::new(3, C3, false, "no phase 3 log".into()) };
    let sched = &st.unfreeze_schedule;
    let block_idx = |g: &str| g.strip_prefix("block").and_then(|s| s.parse::<usize>().ok());
    let mut problems = Vec::new();
    if sched.is_empty() {
        problems.push("empty schedule".to_string());
    }
    let mut prev: Option<(u64, usize, u64)> = None;
    for (at, g) in sched {
        let Some(idx) = block_idx(g) else {
            problems.push(format!("{g} is not a block"));
            continue;
        };
        match log.first_change.get(g) {
            None => problems.push(format!("{g} never changed")),
            Some(&first) => {
                if first <= *at {
                    problems.push(format!("{g} changed at {first} before its budget {at}"));
                }
                if let Some((pat, pidx, pfirst)) = prev {
                    if !(pat < *at && pidx < idx && pfirst <= first) {
                        problems.push(format!("{g} out of earliest-first order"));
                    }
                }
                prev = Some((*at, idx, first));
            }
        }
    }
    let entry = st.snapshots.get("p3_entry");
    let end = st.snapshots.get("p3_final");
    for g in st.generator.output_groups() {
        let unchanged = matches!((entry, end), (Some(a), Some(b)) if a.group_bits_equal(b, &g));
        if log.first_change.contains_key(&g) || !unchanged {
            problems.push(format!("output layer {g} changed"));
        }
    }
    let detail = format!(
        "schedule {:?}; first changes {:?}; {}",
        sched,
        sched.iter().map(|(_, g)| log.first_change.get(g).copied()).collect::<Vec<_>>(),
        if problems.is_empty() { "ok".to_string() } else { problems.join("; ") }
    );
    Outcome::new(3, C3, problems.is_empty(), detail)
}

fn upsample2(t: &[f32], n: usize, c: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * c * 4 * r * r];
    for nc in 0..n * c {
        for y in 0..2 * r {
            for x in 0..2 * r {
                out[nc * 4 * r * r + y * 2 * r + x] = t[nc * r * r + (y / 2) * r + x / 2];
            }
        }
    }
    out
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

const C4: &str = "fade-in continuity";

pub fn criterion_4() -> Outcome {
    let run = || -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = GeneratorConfig { latent_dim: 16, base_res: 4, target_res: 32, out_channels: N_CHANNELS, widths: vec![16, 16, 8, 8] };
        let mut gen = GeneratorNet::<f32>::build(cfg, &mut rng)?;
        let z = sample_latents(6, 16, &mut rng);
        let (mut worst_grow, mut worst_ratio) = (0.0f64, 0.0f64);
        let steps = 100;
        while gen.stage() + 1 < gen.n_stages() {
            gen.alpha = 1.0;
            let before = gen.generate(&z)?;
            let r = gen.resolution();
            gen.grow(&mut rng)?;
            gen.alpha = 0.0;
            let after = gen.generate(&z)?;
            worst_grow = worst_grow.max(max_abs(after.data(), &upsample2(before.data(), 6, N_CHANNELS, r)));
            gen.alpha = 1.0;
            let full = gen.generate(&z)?;
            // A linear blend moves by at most this much per alpha step.
            let expected = max_abs(full.data(), after.data()) / steps as f64;
            let mut prev = after;
            for k in 1..=steps {
                gen.alpha = k as f64 / steps as f64;
                let cur = gen.generate(&z)?;
                let jump = max_abs(cur.data(), prev.data());
                worst_ratio = worst_ratio.max(jump / expected.max(f64::MIN_POSITIVE));
                prev = cur;
            }
        }
        Ok((worst_grow, worst_ratio))
    };
    match run() {
        Ok((grow, ratio)) => Outcome::new(
            4,
            C4,
            grow <= 1e-5 && ratio <= 10.0,
            format!("max |out(alpha=0) - up(prev)| = {grow:.2e}; largest step jump = {ratio:.3} x per-step effect"),
        ),
        Err(e) => Outcome::error(4, C4, e),
    }
}

const C5: &str = "gradient penalty";

pub fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = CriticConfig { in_channels: 2, base_res: 4, target_res: 8, widths: vec![3, 3] };
    let critic = match CriticNet::<f64>::build_full(cfg, &mut rng) {
        Ok(c) => c,
        Err(e) => return Outcome::error(5, C5, e),
    };
    let shape = [3, 2, 8, 8];
    let n: usize = shape.iter().product();
    let real = gansfer_nn::Tensor::from_vec(&shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect());
    let fake = gansfer_nn::Tensor::from_vec(&shape, (0..n).map(|i| (i as f64 * 0.11).cos() * 0.5).collect());
    let eps = [0.2, 0.5, 0.9];
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for alpha in [0.4, 1.0] {
        let mut c = critic.clone();
        c.alpha = alpha;
        let (_, grads) = critic_loss(&c, &real, &fake, &eps, 10.0, 0.001);
        for (id, g) in &grads {
            for k in 0..g.numel() {
                let h = 1e-6;
                let mut plus = c.clone();
                plus.params_mut().value_mut(*id).data_mut()[k] += h;
                let mut minus = c.clone();
                minus.params_mut().value_mut(*id).data_mut()[k] -= h;
                let fd = (critic_loss(&plus, &real, &fake, &eps, 10.0, 0.001).0.total
                    - critic_loss(&minus, &real, &fake, &eps, 10.0, 0.001).0.total)
                    / (2.0 * h);
                let a = g.data()[k];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                count += 1;
            }
        }
    }
    Outcome::new(5, C5, count > 0 && worst < 1e-3, format!("{count} partials, max relative error {worst:.2e}"))
}

fn random_map(rng: &mut ChaCha8Rng) -> Vec<u8> {
    // Mostly background so that empty classes occur too.
    (0..64).map(|_| if rng.random_bool(0.5) { 0 } else { rng.random_range(1..=N_STRUCTURES as u8) }).collect()
}

fn oracle_dsc(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

const C6: &str = "DSC oracle";

pub fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let (p, r) = (random_map(&mut rng), random_map(&mut rng));
        let set = |m: &[u8], f: &dyn Fn(u8) -> bool| -> HashSet<usize> { (0..m.len()).filter(|&i| f(m[i])).collect() };
        let Ok(rep) = dsc_report(&p, &r, "x", 0.0, Cdr::Zero) else {
            mismatches += 1;
            continue;
        };
        for s in 1..=N_STRUCTURES as u8 {
            let expect = oracle_dsc(&set(&p, &|v| v == s), &set(&r, &|v| v == s));
            let a: Vec<bool> = p.iter().map(|&v| v == s).collect();
            let b: Vec<bool> = r.iter().map(|&v| v == s).collect();
            if rep.per_structure[s as usize - 1] != expect || dsc(&a, &b).ok() != Some(expect) {
                mismatches += 1;
            }
        }
        let overall = oracle_dsc(&set(&p, &|v| v > 0), &set(&r, &|v| v > 0));
        let mean: f64 = (1..=N_STRUCTURES as u8).map(|s| oracle_dsc(&set(&p, &|v| v == s), &set(&r, &|v| v == s))).sum::<f64>() / N_STRUCTURES as f64;
        if rep.overall != overall || rep.mean_of_structures != mean {
            mismatches += 1;
        }
    }
    Outcome::new(6, C6, mismatches == 0, format!("1000 pairs, {mismatches} mismatches"))
}

/// Clopper-Pearson interval for `k` successes in `n` trials.
pub fn exact_binomial_ci(k: u64, n: u64, level: f64) -> (f64, f64) {
    let a = (1.0 - level) / 2.0;
    let lo = if k == 0 { 0.0 } else { Beta::new(k as f64, (n - k + 1) as f64).map_or(0.0, |b| b.inverse_cdf(a)) };
    let hi = if k == n { 1.0 } else { Beta::new((k + 1) as f64, (n - k) as f64).map_or(1.0, |b| b.inverse_cdf(1.0 - a)) };
    (lo, hi)
}

const C7: &str = "sampler ratios";

pub fn criterion_7() -> Outcome {
    let slice = |v: u8| crate::data_model::SegSlice {
        mr: Image::filled(4, 4, v as f32),
        labels: Grid2::filled(4, 4, v),
        slice_index: 0,
    };
    let mut parts = Vec::new();
    let mut passed = true;
    for r in [100u32, 10, 2, 1] {
        let n = 100_000u64;
        let mut sampler = match MixedSampler::new(vec![slice(0)], vec![slice(1)], Ratio::RealPerSynthetic(r), 70 + r as u64) {
            Ok(s) => s,
            Err(e) => return Outcome::error(7, C7, e),
        };
        let k = (0..n).filter(|_| sampler.draw_source() == Source::Synthetic).count() as u64;
        let p = 1.0 / (r as f64 + 1.0);
        let (lo, hi) = exact_binomial_ci(k, n, 0.99);
        let ok = lo <= p && p <= hi;
        passed &= ok;
        parts.push(format!("r={r}: {:.5} in [{lo:.5}, {hi:.5}] for p={p:.5}", k as f64 / n as f64));
    }
    Outcome::new(7, C7, passed, parts.join("; "))
}

/// One randomly corrupted 8-channel sample on a `res x res` slice with
/// ground-truth structure blobs and their 3D masks.
fn corrupted_case(rng: &mut ChaCha8Rng, res: usize, spacing: [f64; 3]) -> (Vec<Image>, StructureMasks, Vec<Mask>) {
    let depth = 3;
    let z = 1;
    let mut truth3: Vec<Grid3<bool>> = Vec::new();
    let mut truth2 = Vec::new();
    for _ in 0..N_STRUCTURES {
        let (cy, cx) = (rng.random_range(3.0..res as f64 - 3.0), rng.random_range(3.0..res as f64 - 3.0));
        let (ry, rx) = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0));
        let m = Grid2::from_fn(res, res, |y, x| ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0);
        let mut g = Grid3::filled(depth, res, res, false);
        for y in 0..res {
            for x in 0..res {
                if *m.get(y, x) {
                    g.set(z, y, x, true);
                }
            }
        }
        truth3.push(g);
        truth2.push(m);
    }
    let radius = 10.0;
    let masks = StructureMasks {
        masks: truth3.iter().map(|t| dilate_metric(t, radius, spacing)).collect(),
        provenance: vec!["case".into()],
        radius_mm: radius,
        spacing,
        contrast_floor: Vec::new(),
    };
    let mut mr = Grid2::from_fn(res, res, |_, _| rng.random_range(-0.3f32..0.3));
    for (s, t) in truth2.iter().enumerate() {
        let level = 0.5 + 0.1 * s as f32;
        for i in 0..res * res {
            if t.data[i] {
                mr.data[i] = level + rng.random_range(-0.05f32..0.05);
            }
        }
    }
    // Intensity outliers anywhere.
    for _ in 0..rng.random_range(0..6) {
        let i = rng.random_range(0..res * res);
        mr.data[i] = if rng.random_bool(0.5) { 3.0 } else { -3.0 };
    }
    let mut channels = vec![mr.clone()];
    for t in &truth2 {
        let mut ch = Grid2::from_fn(res, res, |y, x| if *t.get(y, x) { rng.random_range(0.6f32..1.0) } else { rng.random_range(0.0f32..0.05) });
        // Interior dropouts, spurious specks and blobs outside the structure.
        for _ in 0..rng.random_range(0..4) {
            let i = rng.random_range(0..res * res);
            ch.data[i] = 0.0;
        }
        for _ in 0..rng.random_range(0..5) {
            let i = rng.random_range(0..res * res);
            ch.data[i] = rng.random_range(0.6f32..1.0);
        }
        if rng.random_bool(0.5) {
            let (y0, x0) = (rng.random_range(0..res - 2), rng.random_range(0..res - 2));
            for y in y0..y0 + 2 {
                for x in x0..x0 + 2 {
                    ch.set(y, x, 0.9);
                }
            }
        }
        channels.push(ch);
    }
    (channels, masks, truth2)
}

/// Pixels within `radius` mm of `truth` in-plane, plus what that region
/// encloses.
fn within_radius(truth: &Mask, radius: f64, sxy: f64) -> Mask {
    let pts: Vec<(usize, usize)> = (0..truth.h).flat_map(|y| (0..truth.w).map(move |x| (y, x))).filter(|&(y, x)| *truth.get(y, x)).collect();
    let near = Grid2::from_fn(truth.h, truth.w, |y, x| {
        pts.iter().any(|&(ty, tx)| ((y as f64 - ty as f64) * sxy).powi(2) + ((x as f64 - tx as f64) * sxy).powi(2) <= radius * radius)
    });
    fill_holes(&near)
}

const C8: &str = "postprocessing properties";

pub fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spacing = [3.0, 2.5, 2.5];
    let (mut holes_bad, mut small_bad, mut gate_bad, mut contain_bad, mut refilled) = (0, 0, 0, 0, 0usize);
    for _ in 0..500 {
        let (channels, masks, truth) = corrupted_case(&mut rng, 24, spacing);
        let out = match postprocess(&channels, 1, &masks) {
            Ok(o) => o,
            Err(e) => return Outcome::error(8, C8, e),
        };
        let mr = &channels[0];
        for (s, r) in out.iter().enumerate() {
            holes_bad += holes(&r.mask).count();
            small_bad += components(&r.mask).iter().filter(|c| c.len() < MIN_COMPONENT_AREA).count();
            if let Some((lo, hi)) = r.gate {
                for i in 0..r.mask.data.len() {
                    if r.mask.data[i] && !r.refilled.data[i] {
                        let v = mr.data[i] as f64;
                        gate_bad += usize::from(v < lo || v > hi);
                    }
                }
            }
            refilled += r.refilled.count();
            let allowed = within_radius(&truth[s], masks.radius_mm, spacing[1]);
            contain_bad += usize::from(!r.mask.is_subset_of(&allowed) || !r.mask.is_subset_of(&masks.slice(s, 1)));
        }
    }
    let passed = holes_bad == 0 && small_bad == 0 && gate_bad == 0 && contain_bad == 0;
    Outcome::new(
        8,
        C8,
        passed,
        format!(
            "3500 channels: {holes_bad} hole px, {small_bad} small components, {gate_bad} gated px outside mean +- 2 sd ({refilled} interior px restored by the final fill), {contain_bad} containment failures"
        ),
    )
}

fn scored(score: f64) -> SyntheticSample {
    SyntheticSample {
        channels: Vec::new(),
        slice_index: 0,
        binary_labels: Vec::new(),
        quality_score: score,
        kept: true,
        provenance: Provenance { phase: Phase::P2, gan_id: 0, latent_seed: 0, index: 0 },
    }
}

const C9: &str = "quality filter";

pub fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = (1.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let mut v: Vec<SyntheticSample> = (0..n).map(|_| scored(rng.random_range(0..20) as f64)).collect();
        let frac = filter_by_quality(&mut v) as f64 / n as f64;
        worst = (worst.0.min(frac), worst.1.max(frac));
    }
    let mut four: Vec<SyntheticSample> = [1.0, 2.0, 3.0, 10.0].into_iter().map(scored).collect();
    filter_by_quality(&mut four);
    let kept: Vec<bool> = four.iter().map(|s| s.kept).collect();
    let pool: Vec<Image> = (0..5).map(|i| Image::from_fn(8, 8, |y, x| ((y * 8 + x + i) % 7) as f32)).collect();
    let self_score = quality_score(&pool[3], &pool).unwrap_or(f64::NAN);
    let passed = worst.0 >= 0.75 && worst.1 <= 1.0 && kept == [true, true, true, false] && self_score == 0.0;
    Outcome::new(9, C9, passed, format!("kept fraction in [{:.3}, {:.3}]; kept {kept:?}; pool member scores {self_score}", worst.0, worst.1))
}

/// Per-seed diversity of the post-phase generators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

pub fn diversity_of(run: &GansferRun, latent_seed: u64) -> Result<Diversity> {
    Ok(Diversity { p1: mr_diversity(&run.p1, 256, latent_seed)?, p2: mr_diversity(&run.p2, 256, latent_seed)?, p3: mr_diversity(&run.p3, 256, latent_seed)? })
}

const C10: &str = "diversity ordering";

pub fn criterion_10(per_seed: &[Diversity]) -> Outcome {
    let p1: Vec<f64> = per_seed.iter().map(|d| d.p1).collect();
    let test = |later: &[f64]| paired_ttest(later, &p1).ok().filter(|t| t.t > 0.0 && t.p < 0.05);
    let p2: Vec<f64> = per_seed.iter().map(|d| d.p2).collect();
    let p3: Vec<f64> = per_seed.iter().map(|d| d.p3).collect();
    let (t2, t3) = (test(&p2), test(&p3));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    let p = |t: Option<crate::evaluation::TTest>, v: &[f64]| match t {
        Some(t) => format!("p={:.4}", t.p),
        None => paired_ttest(v, &p1).map_or("no test".into(), |t| format!("t={:.2} p={:.4}", t.t, t.p)),
    };
    Outcome::new(
        10,
        C10,
        per_seed.len() >= 3 && t2.is_some() && t3.is_some(),
        format!("P1 {} P2 {} ({}) P3 {} ({})", fmt(&p1), fmt(&p2), p(t2, &p2), fmt(&p3), p(t3, &p3)),
    )
}

/// Settings of one end-to-end phantom run.
#[derive(Clone, Debug)]
pub struct EndToEndConfig {
    pub gansfer: GansferConfig,
    pub seg: SegNetConfig,
    pub n_unlabelled: usize,
    pub n_synthetic: usize,
    pub n_aged: usize,
    pub n_young: usize,
    pub ratio: Ratio,
}

impl EndToEndConfig {
    /// CPU preset sized so three seeds fit the runtime budget.
    pub fn small(seed: u64) -> Result<Self> {
        let arch = GanArch::tapered(64, 4, 32, 32)?;
        let train = GanTrainConfig { images_per_stage: 16_000, batch_size: 8, seed, ..Default::default() };
        let mut gansfer = GansferConfig::new(arch, train);
        gansfer.phase2_images = 16_000;
        gansfer.phase3_images = 16_000;
        gansfer.unfreeze_every = gansfer.phase3_images / 2;
        let seg = SegNetConfig { steps: 1500, seed, ..Default::default() };
        Ok(Self { gansfer, seg, n_unlabelled: 200, n_synthetic: 600, n_aged: 20, n_young: 20, ratio: Ratio::RealPerSynthetic(2) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    pub seed: u64,
    pub baseline_aged: f64,
    pub baseline_young: f64,
    pub augmented_aged: f64,
    pub augmented_young: f64,
    pub kept_synthetic: usize,
    pub diversity: Diversity,
    pub seconds: f64,
}

/// One labelled young subject plus an unlabelled mixed-age pool: GANsfer,
/// synthesis, then a baseline and an augmented segmenter scored on held-out
/// aged and young phantoms.
pub fn end_to_end(cfg: &EndToEndConfig) -> Result<EndToEnd> {
    let start = Instant::now();
    let seed = cfg.gansfer.train.seed;
    let geo = Geometry::default();
    let data = phantom_data(cfg.n_unlabelled, seed)?;
    let roi = |v: Vec<crate::phantom::PhantomSample>| v.iter().map(|p| p.roi_sample()).collect::<Result<Vec<_>>>();
    let aged = roi(generate_group(derive_seed(seed, 101), cfg.n_aged, (70.0, 90.0), &[Cdr::Half, Cdr::One, Cdr::Two], geo, 0.02))?;
    let young = roi(generate_group(derive_seed(seed, 102), cfg.n_young, (18.0, 30.0), &[Cdr::Zero], geo, 0.02))?;
    let (sz, sxy) = geo.spacing();
    let masks = data.labelled.structure_masks([sz, sxy, sxy])?;
    let run = crate::gansfer::run_all(&data.labelled.all_gan_slices(), &data.unlabelled, &cfg.gansfer)?;
    let diversity = diversity_of(&run, derive_seed(seed, 103))?;
    let synth = synthesize(std::slice::from_ref(&run), cfg.n_synthetic, &data.labelled, &masks, &data.unlabelled, derive_seed(seed, 104))?;
    let kept = kept_seg_slices(&synth);
    let score = |ratio: Ratio| -> Result<(f64, f64)> {
        let m = train_segmenter(&data.labelled.seg_slices, &kept, ratio, &cfg.seg)?;
        Ok((mean_overall(&evaluate(&m, &aged)?), mean_overall(&evaluate(&m, &young)?)))
    };
    let (baseline_aged, baseline_young) = score(Ratio::Baseline)?;
    let (augmented_aged, augmented_young) = score(cfg.ratio)?;
    Ok(EndToEnd {
        seed,
        baseline_aged,
        baseline_young,
        augmented_aged,
        augmented_young,
        kept_synthetic: kept.len(),
        diversity,
        seconds: start.elapsed().as_secs_f64(),
    })
}

const C11: &str = "end-to-end direction";

pub fn criterion_11(runs: &[EndToEnd]) -> Outcome {
    let n = runs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EndToEnd) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let gain_aged = mean(&|r| r.augmented_aged - r.baseline_aged);
    let gain_young = mean(&|r| r.augmented_young - r.baseline_young);
    let hours = runs.iter().map(|r| r.seconds).sum::<f64>() / 3600.0;
    let per: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: aged {:.4}->{:.4} young {:.4}->{:.4}", r.seed, r.baseline_aged, r.augmented_aged, r.baseline_young, r.augmented_young))
        .collect();
    Outcome::new(
        11,
        C11,
        runs.len() >= 3 && gain_aged >= 0.02 && gain_aged > gain_young && hours <= 4.0,
        format!("aged gain {gain_aged:+.4}, young gain {gain_young:+.4}, {hours:.2} h; {}", per.join("; ")),
    )
}

/// `n` 7-d feature rows; component 0 is shifted by `d` standard deviations
/// for the positive class.
pub fn separable_features(n_neg: usize, n_pos: usize, d: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n_neg + n_pos {
        let pos = i >= n_neg;
        let row: Vec<f64> = (0..N_STRUCTURES)
            .map(|j| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                if j == 0 && pos {
                    z + d
                } else {
                    z
                }
            })
            .collect();
        x.push(row);
        y.push(pos);
    }
    (x, y)
}

const C12: &str = "classification harness";

/// Mean AUC over `repeats` cross-validations, each with its own label
/// permutation, as a null reference.
pub fn permuted_auc(features: &[Vec<f64>], labels: &[bool], repeats: usize, folds: usize, seed: u64) -> Result<Vec<f64>> {
    (0..repeats)
        .map(|r| {
            let mut perm = labels.to_vec();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64)));
            Ok(classify_cdr(features, &perm, 1, folds, derive_seed(seed ^ 0x9e37, r as u64))?.auc)
        })
        .collect()
}

pub fn criterion_12() -> Outcome {
    let (x, y) = separable_features(69, 30, 1.0, 12);
    let run = || -> Result<String> {
        let real = classify_cdr(&x, &y, 100, 5, 21)?;
        let null = permuted_auc(&x, &y, 100, 5, 1212)?;
        let null_mean = null.iter().sum::<f64>() / null.len() as f64;
        let aucs: Vec<f64> = real.per_repeat.iter().map(|p| p.1).collect();
        let t = paired_ttest(&aucs, &null)?;
        let detail = format!(
            "d=1 AUC {:.3} (acc {:.1}%), permuted AUC {null_mean:.3}; paired t-test p={:.2e}",
            real.auc, real.accuracy, t.p
        );
        if real.per_repeat.len() == 100 && real.auc >= 0.75 && (0.45..=0.55).contains(&null_mean) && t.significant {
            Ok(detail)
        } else {
            Err(crate::error::Error::BadCount(detail))
        }
    };
    match run() {
        Ok(d) => Outcome::new(12, C12, true, d),
        Err(crate::error::Error::BadCount(d)) => Outcome::new(12, C12, false, d),
        Err(e) => Outcome::error(12, C12, e),
    }
}

fn tiny_slices(subject: usize, res: usize) -> Vec<MultiChannelSlice> {
    (0..2)
        .map(|k| MultiChannelSlice {
            channels: (0..N_CHANNELS)
                .map(|c| Image::from_fn(res, res, |y, x| (((y * 3 + x * 5 + subject * 7 + k + c) % 11) as f32) / 11.0))
                .collect(),
            slice_index: k,
            source: Source::Real,
        })
        .collect()
}

const C13: &str = "multi-GAN split";

pub fn criterion_13() -> Outcome {
    let run = || -> Result<String> {
        let arch = GanArch::uniform(8, 4, 8, 4)?;
        let train = GanTrainConfig { images_per_stage: 8, batch_size: 4, seed: 13, ..Default::default() };
        let mut cfg = GansferConfig::new(arch, train);
        cfg.warmup_ratio = 2;
        cfg.selfteach_multiplier = 1;
        let unl: Vec<Image> = (0..6).map(|i| Image::from_fn(8, 8, |y, x| ((y + x + i) % 5) as f32 / 5.0)).collect();
        let mut parts = Vec::new();
        for (budget, expect) in [(12usize, 2usize), (24, 4)] {
            let groups = multi_gan_groups(budget)?;
            let mut seen = BTreeSet::new();
            let disjoint = groups.iter().all(|g| g.len() == 6 && g.clone().all(|i| seen.insert(i))) && seen.len() == budget;
            let labelled: Vec<Vec<MultiChannelSlice>> = (0..budget).map(|s| tiny_slices(s, 8)).collect();
            let runs = run_multi_gan(&labelled, &unl, &cfg)?;
            let sources: Vec<GeneratorSource<'_>> = runs
                .iter()
                .enumerate()
                .flat_map(|(i, r)| [GeneratorSource { generator: &r.p2, phase: Phase::P2, gan_id: i }, GeneratorSource { generator: &r.p3, phase: Phase::P3, gan_id: i }])
                .collect();
            let raw = generate_raw(&sources, 4 * runs.len(), 13)?;
            let ids: BTreeSet<usize> = raw.iter().map(|r| r.provenance.gan_id).collect();
            if !(runs.len() == expect && groups.len() == expect && disjoint && ids == (0..expect).collect()) {
                return Err(crate::error::Error::BadCount(format!("budget {budget}: {} runs, groups disjoint {disjoint}, provenance {ids:?}", runs.len())));
            }
            parts.push(format!("budget {budget}: {expect} runs over disjoint groups of 6, provenance {ids:?}"));
        }
        Ok(parts.join("; "))
    };
    match run() {
        Ok(d) => Outcome::new(13, C13, true, d),
        Err(e) => Outcome::error(13, C13, e),
    }
}

/// The criteria that need no GAN training beyond toy sizes.
pub fn quick_criteria() -> Vec<Outcome> {
    vec![criterion_4(), criterion_5(), criterion_6(), criterion_7(), criterion_8(), criterion_9(), criterion_12(), criterion_13()]
}
