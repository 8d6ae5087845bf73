//! Declarative experiment runner: folds x labelled budgets x mixing ratios on
//! one dataset, every stage checkpointed under a single output root.
//!
//! Layout of the output root:
//!
//! ```text
//! data/{labelled,unlabelled,truth}/      phantom cohort (when generated)
//! folds.json
//! fold{f}/budget{n}/split.json
//! fold{f}/budget{n}/gan{g}/p{1,2,3}.ckpt, metrics_p{1,2,3}.json
//! fold{f}/budget{n}/synth/{raw,post,pool}/s00000/...
//! fold{f}/budget{n}/seg_{ratio}/{model.json,metrics.json,dsc.json,classification.json}
//! tables/table1.csv, tables/table2.csv, plots/*.svg
//! manifest.json
//! ```
//!
//! A stage is skipped when its output already exists, so an interrupted run
//! resumes where it stopped. Downstream stages always read their inputs back
//! from disk, which makes a resumed run produce the same tables as an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{seg_slices, Cdr, DatasetSplit, LabelledSample, N_STRUCTURES};
use crate::error::{Error, Result};
use crate::evaluation::{classify_cdr, dsc_report, make_folds, volumes_from_seg, with_budget, ClassifierResult, DscReport};
use crate::gan::checkpoint::{hash_of, hex, load_json, save_json_pretty};
use crate::gan::GanTrainConfig;
use crate::gansfer::{
    build_selfteach_set, derive_seed, multi_gan_groups, run_phase1, run_phase2, run_phase3, GanArch, GansferConfig, Phase, PhaseState,
};
use crate::io::{list_subjects, read_meta, read_raw, read_subject, read_synthetic, sample_dirs, sample_name, write_labels, write_raw, write_subject, write_synthetic};
use crate::phantom::{generate_cohort, Geometry, PhantomSpec};
use crate::pipeline::{train_segmenter, unlabelled_images, LabelledData};
use crate::segmenter::{segment, Ratio, SegNetConfig, TrainedSegNet};
use crate::synth::{filter_per_source, finish_sample, generate_raw, GeneratorSource};

/// Environment variable that overrides `output_root`.
pub const OUTPUT_ENV: &str = "GANSFER_OUTPUT";
/// Labelled budgets the matrix may use.
pub const BUDGETS: [usize; 5] = [1, 3, 6, 12, 24];

/// Compute presets. `tiny` is for smoke tests, `small` fits a laptop CPU in
/// minutes per GAN, `desk` is the largest preset meant for a CPU-only box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    #[default]
    Small,
    Desk,
}

impl Preset {
    /// GAN settings for slices of side `target_res`.
    pub fn gansfer(self, target_res: usize) -> Result<GansferConfig> {
        let (arch, ips, batch) = match self {
            Preset::Tiny => (GanArch::uniform(16, 4, target_res, 8)?, 400, 4),
            Preset::Small => (GanArch::tapered(64, 4, target_res, 32)?, 16_000, 8),
            Preset::Desk => (GanArch::tapered(128, 4, target_res, 64)?, 32_000, 8),
        };
        let train = GanTrainConfig { images_per_stage: ips, batch_size: batch, ..Default::default() };
        let mut cfg = GansferConfig::new(arch, train);
        if self == Preset::Desk {
            // 10k generator updates in phase 2.
            cfg.phase2_images = 80_000;
        }
        cfg.unfreeze_every = cfg.phase3_images / 2;
        Ok(cfg)
    }

    pub fn seg(self) -> SegNetConfig {
        let steps = match self {
            Preset::Tiny => 100,
            Preset::Small => 1500,
            Preset::Desk => 3000,
        };
        SegNetConfig { steps, ..Default::default() }
    }

    pub fn n_synthetic(self) -> usize {
        match self {
            Preset::Tiny => 40,
            Preset::Small => 600,
            Preset::Desk => 1000,
        }
    }

    pub fn classify_repeats(self) -> usize {
        match self {
            Preset::Tiny => 10,
            _ => 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n_subjects: usize,
    pub n_labelled: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub roi_size: usize,
    pub roi_depth: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let d = PhantomSpec::default();
        Self {
            n_subjects: d.n_subjects,
            n_labelled: d.n_labelled,
            noise_sigma: d.noise_sigma,
            seed: d.seed,
            roi_size: d.geometry.roi_size,
            roi_depth: d.geometry.roi_depth,
        }
    }
}

impl PhantomSection {
    pub fn spec(&self) -> PhantomSpec {
        PhantomSpec {
            n_subjects: self.n_subjects,
            n_labelled: self.n_labelled,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            geometry: Geometry { roi_size: self.roi_size, roi_depth: self.roi_depth },
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Subjects with label maps, split into folds.
    pub labelled: PathBuf,
    /// MR-only subjects used by phases 2 and 3 and for quality scoring.
    pub unlabelled: PathBuf,
    /// Withheld label maps of unlabelled subjects; read only by evaluation.
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanOverrides {
    pub images_per_stage: Option<usize>,
    pub phase2_images: Option<usize>,
    pub phase3_images: Option<usize>,
    pub unfreeze_every: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub latent_dim: Option<usize>,
    /// Widest stage of a tapered architecture.
    pub max_width: Option<usize>,
    pub critic_updates: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegOverrides {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    pub repeats: Option<usize>,
    pub folds: usize,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self { repeats: None, folds: 5 }
    }
}

fn default_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_root: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub fold_seed: u64,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    /// Folds to run; empty means all.
    #[serde(default)]
    pub folds: Vec<usize>,
    pub budgets: Vec<usize>,
    /// `baseline`, `100`, `10`, `2` or `1`.
    pub ratios: Vec<String>,
    #[serde(default)]
    pub preset: Preset,
    /// Generate a phantom cohort under `output_root/data` before anything else.
    pub phantom: Option<PhantomSection>,
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub gan: GanOverrides,
    #[serde(default)]
    pub seg: SegOverrides,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub classify: ClassifySection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the [`OUTPUT_ENV`] override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(root) = std::env::var(OUTPUT_ENV) {
            if !root.is_empty() {
                cfg.output_root = PathBuf::from(root);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("budgets and ratios must be non-empty".into()));
        }
        if let Some(b) = self.budgets.iter().find(|b| !BUDGETS.contains(b)) {
            return Err(Error::Config(format!("budget {b} is not one of {BUDGETS:?}")));
        }
        self.ratios()?;
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if let Some(f) = self.folds.iter().find(|&&f| f >= self.n_folds) {
            return Err(Error::Config(format!("fold {f} out of range for {} folds", self.n_folds)));
        }
        if self.phantom.is_none() && self.data.is_none() {
            return Err(Error::Config("either [phantom] or [data] is required".into()));
        }
        if let Some(p) = &self.phantom {
            p.spec().validate(4)?;
        }
        Ok(())
    }

    pub fn ratios(&self) -> Result<Vec<Ratio>> {
        self.ratios.iter().map(|r| r.parse()).collect()
    }

    pub fn fold_ids(&self) -> Vec<usize> {
        if self.folds.is_empty() {
            (0..self.n_folds).collect()
        } else {
            self.folds.clone()
        }
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.output_root.clone() }
    }

    pub fn data_paths(&self) -> DataPaths {
        self.data.clone().unwrap_or_else(|| {
            let d = self.layout().data();
            DataPaths { labelled: d.join("labelled"), unlabelled: d.join("unlabelled"), truth: Some(d.join("truth")) }
        })
    }

    /// Preset GAN settings with the overrides applied.
    pub fn gansfer(&self, target_res: usize, seed: u64) -> Result<GansferConfig> {
        let o = &self.gan;
        let mut c = self.preset.gansfer(target_res)?;
        if o.latent_dim.is_some() || o.max_width.is_some() {
            let lat = o.latent_dim.unwrap_or(c.arch.latent_dim);
            c.arch = match o.max_width {
                Some(w) => GanArch::tapered(lat, c.arch.base_res, target_res, w)?,
                None => GanArch { latent_dim: lat, ..c.arch },
            };
        }
        if let Some(v) = o.images_per_stage {
            c.train.images_per_stage = v;
        }
        if let Some(v) = o.phase2_images {
            c.phase2_images = v;
        }
        if let Some(v) = o.phase3_images {
            c.phase3_images = v;
            c.unfreeze_every = (v / 2).max(1);
        }
        if let Some(v) = o.unfreeze_every {
            c.unfreeze_every = v;
        }
        if let Some(v) = o.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            c.train.lr_generator = v;
            c.train.lr_critic = v;
        }
        if let Some(v) = o.critic_updates {
            c.train.critic_updates_per_gen = v;
        }
        c.train.seed = seed;
        c.validate()?;
        Ok(c)
    }

    pub fn seg_config(&self, seed: u64) -> Result<SegNetConfig> {
        let mut c = self.preset.seg();
        if let Some(v) = self.seg.steps {
            c.steps = v;
        }
        if let Some(v) = self.seg.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seg.lr {
            c.lr = v;
        }
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }

    pub fn n_synthetic(&self) -> usize {
        self.synth.n_samples.unwrap_or(self.preset.n_synthetic())
    }

    pub fn classify_repeats(&self) -> usize {
        self.classify.repeats.unwrap_or(self.preset.classify_repeats())
    }
}

/// One cell of the experiment matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub fold: usize,
    pub budget: usize,
}

impl Cell {
    /// Seed shared by everything trained in this cell.
    pub fn seed(&self, master: u64) -> u64 {
        derive_seed(derive_seed(master, self.fold as u64), self.budget as u64)
    }
}

/// Paths inside the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.json")
    }

    pub fn cell(&self, c: Cell) -> PathBuf {
        self.root.join(format!("fold{}", c.fold)).join(format!("budget{}", c.budget))
    }

    pub fn gan(&self, c: Cell, g: usize) -> PathBuf {
        self.cell(c).join(format!("gan{g}"))
    }

    pub fn checkpoint(&self, c: Cell, g: usize, phase: Phase) -> PathBuf {
        self.gan(c, g).join(format!("p{}.ckpt", phase_number(phase)))
    }

    pub fn synth(&self, c: Cell, stage: &str) -> PathBuf {
        self.cell(c).join("synth").join(stage)
    }

    pub fn seg(&self, c: Cell, r: Ratio) -> PathBuf {
        self.cell(c).join(format!("seg_{}", r.label()))
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

pub fn phase_number(p: Phase) -> usize {
    match p {
        Phase::P1 => 1,
        Phase::P2 => 2,
        Phase::P3 => 3,
    }
}

const DONE: &str = "done.json";

fn done(dir: &Path) -> bool {
    dir.join(DONE).is_file()
}

fn mark_done<T: Serialize>(dir: &Path, info: &T) -> Result<()> {
    save_json_pretty(&dir.join(DONE), info)
}

/// Writes the phantom cohort under `output_root/data` unless it is already
/// there. Returns whether anything was generated.
pub fn phantom_gen(cfg: &ExperimentConfig) -> Result<bool> {
    let Some(section) = &cfg.phantom else { return Ok(false) };
    let dir = cfg.layout().data();
    if done(&dir) {
        return Ok(false);
    }
    let spec = section.spec();
    let cohort = generate_cohort(&spec)?;
    let (sz, sxy) = spec.geometry.spacing();
    let spacing = [sz, sxy, sxy];
    for p in &cohort.labelled {
        write_subject(&dir.join("labelled"), &p.roi_sample()?, spacing, true)?;
    }
    for p in &cohort.unlabelled {
        let s = p.roi_sample()?;
        write_subject(&dir.join("unlabelled"), &s, spacing, false)?;
        write_labels(&dir.join("truth"), &s)?;
    }
    mark_done(&dir, &spec)?;
    Ok(true)
}

/// Subjects of one dataset. Unlabelled subjects carry empty masks: their
/// ground truth stays on disk until evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub labelled: Vec<LabelledSample>,
    pub unlabelled: Vec<LabelledSample>,
    /// Voxel size `[z, y, x]` in mm.
    pub spacing: [f64; 3],
    pub truth: Option<PathBuf>,
}

impl Dataset {
    pub fn labelled_by_id(&self, ids: &[String]) -> Result<Vec<LabelledSample>> {
        ids.iter()
            .map(|id| {
                self.labelled.iter().find(|s| &s.subject_id == id).cloned().ok_or_else(|| Error::Config(format!("unknown subject {id}")))
            })
            .collect()
    }

    pub fn roi_size(&self) -> usize {
        self.labelled[0].mr.shape()[1]
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())))
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let paths = cfg.data_paths();
    require_dir(&paths.labelled)?;
    require_dir(&paths.unlabelled)?;
    if let Some(t) = &paths.truth {
        require_dir(t)?;
    }
    let lab_dirs = list_subjects(&paths.labelled)?;
    if lab_dirs.is_empty() {
        return Err(Error::EmptyPool("labelled subjects"));
    }
    let spacing = read_meta(&lab_dirs[0])?.spacing;
    let labelled = lab_dirs
        .iter()
        .map(|d| {
            let (s, has) = read_subject(d, None)?;
            if !has {
                return Err(Error::Config(format!("{} has no label maps", d.display())));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let unlabelled = list_subjects(&paths.unlabelled)?.iter().map(|d| Ok(read_subject(d, None)?.0)).collect::<Result<Vec<_>>>()?;
    if unlabelled.is_empty() {
        return Err(Error::EmptyPool("unlabelled subjects"));
    }
    Ok(Dataset { labelled, unlabelled, spacing, truth: paths.truth })
}

/// Cross-validation folds over the labelled subjects, written once.
pub fn folds(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<DatasetSplit>> {
    let path = cfg.layout().folds();
    if path.is_file() {
        return load_json(&path);
    }
    let ids: Vec<String> = ds.labelled.iter().map(|s| s.subject_id.clone()).collect();
    let f = make_folds(&ids, cfg.n_folds, cfg.fold_seed)?;
    save_json_pretty(&path, &f)?;
    Ok(f)
}

/// The fold's split restricted to the cell's labelled budget.
pub fn cell_split(cfg: &ExperimentConfig, ds: &Dataset, cell: Cell) -> Result<DatasetSplit> {
    let path = cfg.layout().cell(cell).join("split.json");
    if path.is_file() {
        return load_json(&path);
    }
    let all = folds(cfg, ds)?;
    let split = all.get(cell.fold).ok_or_else(|| Error::Config(format!("no fold {}", cell.fold)))?;
    let s = with_budget(split, cell.budget, derive_seed(cfg.fold_seed, cell.budget as u64))?;
    save_json_pretty(&path, &s)?;
    Ok(s)
}

/// Subject index ranges trained by separate GANs: groups of six for budgets
/// 12 and 24, a single GAN otherwise.
pub fn gan_groups(budget: usize) -> Vec<std::ops::Range<usize>> {
    multi_gan_groups(budget).unwrap_or_else(|_| vec![0..budget])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedSlice {
    pub subject_id: String,
    pub slice_index: usize,
    pub quantisation: Vec<crate::io::Quantisation>,
}

/// Writes the 8-channel GAN inputs of the cell's labelled subset to
/// `preprocessed/s{i}/ch{c}.png` for inspection. Training recomputes them.
pub fn preprocess_stage(cfg: &ExperimentConfig, ds: &Dataset, cell: Cell) -> Result<usize> {
    let dir = cfg.layout().cell(cell).join("preprocessed");
    if done(&dir) {
        return Ok(sample_dirs(&dir)?.len());
    }
    let split = cell_split(cfg, ds, cell)?;
    let wm = crate::data_model::WmEstimation::default();
    let mut i = 0;
    for s in ds.labelled_by_id(&split.labelled_subset)? {
        for slice in crate::data_model::multichannel_slices(&s, &wm)? {
            let d = dir.join(sample_name(i));
            let quantisation = crate::io::write_channels(&d, &slice.channels)?;
            save_json_pretty(&d.join("meta.json"), &PreprocessedSlice { subject_id: s.subject_id.clone(), slice_index: slice.slice_index, quantisation })?;
            i += 1;
        }
    }
    mark_done(&dir, &i)?;
    Ok(i)
}

/// Trains every GAN of the cell up to and including `upto`, resuming from
/// the newest checkpoint on disk. Returns the GAN directories.
pub fn train_gans(cfg: &ExperimentConfig, ds: &Dataset, cell: Cell, upto: Phase) -> Result<Vec<PathBuf>> {
    let layout = cfg.layout();
    let split = cell_split(cfg, ds, cell)?;
    let subjects = ds.labelled_by_id(&split.labelled_subset)?;
    let unl = unlabelled_images(&ds.unlabelled);
    let mut dirs = Vec::new();
    for (g, range) in gan_groups(cell.budget).into_iter().enumerate() {
        let data = LabelledData::new(subjects[range].to_vec())?;
        let slices = data.all_gan_slices();
        let gcfg = cfg.gansfer(ds.roi_size(), derive_seed(cell.seed(cfg.master_seed), g as u64))?;
        let ckpt = |p| layout.checkpoint(cell, g, p);
        let metrics = |p: Phase, st: &PhaseState| -> Result<()> {
            let log = st.log(p).ok_or_else(|| Error::Phase(format!("{p:?} log missing")))?;
            save_json_pretty(&layout.gan(cell, g).join(format!("metrics_p{}.json", phase_number(p))), log)
        };
        if !ckpt(Phase::P1).is_file() {
            let st = run_phase1(&slices, &gcfg)?;
            st.save(&ckpt(Phase::P1))?;
            metrics(Phase::P1, &st)?;
        }
        if upto >= Phase::P2 && !ckpt(Phase::P2).is_file() {
            let st = run_phase2(PhaseState::load(&ckpt(Phase::P1))?, &unl, &gcfg)?;
            st.save(&ckpt(Phase::P2))?;
            metrics(Phase::P2, &st)?;
        }
        if upto >= Phase::P3 && !ckpt(Phase::P3).is_file() {
            let mut st = PhaseState::load(&ckpt(Phase::P2))?;
            let mut teach = build_selfteach_set(&mut st, &slices, gcfg.selfteach_multiplier)?;
            let st = run_phase3(st, &unl, &mut teach, &gcfg, None)?;
            st.save(&ckpt(Phase::P3))?;
            metrics(Phase::P3, &st)?;
        }
        dirs.push(layout.gan(cell, g));
    }
    Ok(dirs)
}

/// Raw samples from the phase-2 and phase-3 generators of every GAN in the cell.
pub fn synth_stage(cfg: &ExperimentConfig, cell: Cell) -> Result<usize> {
    let layout = cfg.layout();
    let dir = layout.synth(cell, "raw");
    if done(&dir) {
        return Ok(sample_dirs(&dir)?.len());
    }
    let n_gans = gan_groups(cell.budget).len();
    let mut gens = Vec::new();
    for g in 0..n_gans {
        for p in [Phase::P2, Phase::P3] {
            let path = layout.checkpoint(cell, g, p);
            if !path.is_file() {
                return Err(Error::MissingResults(format!("{} (run train-gan first)", path.display())));
            }
            gens.push((PhaseState::load(&path)?.generator, p, g));
        }
    }
    let sources: Vec<GeneratorSource<'_>> = gens.iter().map(|(gen, p, g)| GeneratorSource { generator: gen, phase: *p, gan_id: *g }).collect();
    let raw = generate_raw(&sources, cfg.n_synthetic(), derive_seed(cell.seed(cfg.master_seed), 7))?;
    for (i, r) in raw.iter().enumerate() {
        write_raw(&dir, &sample_name(i), r)?;
    }
    mark_done(&dir, &raw.len())?;
    Ok(raw.len())
}

/// Slice assignment, postprocessing and quality scores for the raw samples.
pub fn postprocess_stage(cfg: &ExperimentConfig, ds: &Dataset, cell: Cell) -> Result<usize> {
    let layout = cfg.layout();
    let (src, dir) = (layout.synth(cell, "raw"), layout.synth(cell, "post"));
    if done(&dir) {
        return Ok(sample_dirs(&dir)?.len());
    }
    if !done(&src) {
        return Err(Error::MissingResults(format!("{} (run synth first)", src.display())));
    }
    let split = cell_split(cfg, ds, cell)?;
    let data = LabelledData::new(ds.labelled_by_id(&split.labelled_subset)?)?;
    let masks = data.structure_masks(ds.spacing)?;
    let pool = data.indexed_mr();
    let score_pool = unlabelled_images(&ds.unlabelled);
    let raw = sample_dirs(&src)?;
    for (i, d) in raw.iter().enumerate() {
        let s = finish_sample(read_raw(d)?, &masks, &pool, &score_pool)?;
        write_synthetic(&dir, &sample_name(i), &s)?;
    }
    mark_done(&dir, &raw.len())?;
    Ok(raw.len())
}

/// Per-source 75th-percentile quality filter. Returns the number kept.
pub fn filter_stage(cfg: &ExperimentConfig, cell: Cell) -> Result<usize> {
    let layout = cfg.layout();
    let (src, dir) = (layout.synth(cell, "post"), layout.synth(cell, "pool"));
    if done(&dir) {
        return load_json(&dir.join(DONE));
    }
    if !done(&src) {
        return Err(Error::MissingResults(format!("{} (run postprocess first)", src.display())));
    }
    let mut samples = sample_dirs(&src)?.iter().map(|d| read_synthetic(d)).collect::<Result<Vec<_>>>()?;
    let kept = filter_per_source(&mut samples);
    for (i, s) in samples.iter().enumerate() {
        write_synthetic(&dir, &sample_name(i), s)?;
    }
    mark_done(&dir, &kept)?;
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub ratio: String,
    pub loss_curve: Vec<f64>,
    pub synthetic_draws: usize,
    pub total_draws: usize,
    pub n_real_slices: usize,
    pub n_synthetic_slices: usize,
}

/// Trains the segmenter of one ratio. Every ratio of a cell starts from the
/// same initialisation, so the comparison between ratios is paired.
pub fn train_seg_stage(cfg: &ExperimentConfig, ds: &Dataset, cell: Cell, ratio: Ratio) -> Result<PathBuf> {
    let layout = cfg.layout();
    let dir = layout.seg(cell, ratio);
    let model_path = dir.join("model.json");
    if model_path.is_file() {
        return Ok(model_path);
    }
    let split = cell_split(cfg, ds, cell)?;
    let real: Vec<_> = ds.labelled_by_id(&split.labelled_subset)?.iter().flat_map(seg_slices).collect();
    let synthetic = if ratio == Ratio::Baseline {
        Vec::new()
    } else {
        let pool = layout.synth(cell, "pool");
        if !done(&pool) {
            return Err(Error::MissingResults(format!("{} (run filter first)", pool.display())));
        }
        let mut v = Vec::new();
        for d in sample_dirs(&pool)? {
            let s = read_synthetic(&d)?;
            if s.kept {
                v.push(s.seg_slice());
            }
        }
        v
    };
    let seg_cfg = cfg.seg_config(derive_seed(cell.seed(cfg.master_seed), 11))?;
    let model = train_segmenter(&real, &synthetic, ratio, &seg_cfg)?;
    let metrics = SegMetrics {
        ratio: ratio.label(),
        loss_curve: model.loss_curve.clone(),
        synthetic_draws: model.synthetic_draws,
        total_draws: model.total_draws,
        n_real_slices: real.len(),
        n_synthetic_slices: synthetic.len(),
    };
    save_json_pretty(&dir.join("metrics.json"), &metrics)?;
    crate::gan::checkpoint::save_json(&model_path, &model)?;
    Ok(model_path)
}

/// Predicted structure volumes of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub age: f64,
    pub cdr: Cdr,
    pub volumes: [f64; N_STRUCTURES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Held-out labelled subjects of the fold.
    pub in_domain: Vec<DscReport>,
    /// Unlabelled subjects scored against the withheld ground truth.
    pub out_of_domain: Vec<DscReport>,
    /// Predicted volumes of every unlabelled subject.
    pub volumes: Vec<VolumeRecord>,
}

/// Segments the fold's test subjects and the unlabelled pool. This is the
/// only stage that reads test labels and withheld ground truth.
pub fn evaluate_stage(cfg: &ExperimentConfig, ds: &Dataset, cell: Cell, ratio: Ratio) -> Result<EvalResult> {
    let dir = cfg.layout().seg(cell, ratio);
    let out = dir.join("dsc.json");
    if out.is_file() {
        return load_json(&out);
    }
    let model_path = dir.join("model.json");
    if !model_path.is_file() {
        return Err(Error::MissingResults(format!("{} (run train-seg first)", model_path.display())));
    }
    let model: TrainedSegNet = load_json(&model_path)?;
    let split = cell_split(cfg, ds, cell)?;
    let mut in_domain = Vec::new();
    for s in ds.labelled_by_id(&split.test_ids)? {
        let pred = segment(&model.net, &s.mr, Some(s.mr.shape()))?;
        in_domain.push(dsc_report(&pred.data, &s.label_map().data, &s.subject_id, s.age, s.cdr)?);
    }
    let mut out_of_domain = Vec::new();
    let mut volumes = Vec::new();
    for s in &ds.unlabelled {
        let pred = segment(&model.net, &s.mr, Some(s.mr.shape()))?;
        volumes.push(VolumeRecord { subject_id: s.subject_id.clone(), age: s.age, cdr: s.cdr, volumes: volumes_from_seg(&pred, ds.spacing) });
        if let Some(truth) = &ds.truth {
            let tdir = truth.join(&s.subject_id);
            if tdir.is_dir() {
                let subject_dir = cfg.data_paths().unlabelled.join(&s.subject_id);
                let (t, _) = read_subject(&subject_dir, Some(&tdir))?;
                out_of_domain.push(dsc_report(&pred.data, &t.label_map().data, &s.subject_id, s.age, s.cdr)?);
            }
        }
    }
    let r = EvalResult { in_domain, out_of_domain, volumes };
    save_json_pretty(&out, &r)?;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClassificationOutcome {
    Done(ClassifierResult),
    /// Too few subjects of one class among the unlabelled pool.
    Skipped(String),
}

/// CDR 0.5 versus CDR >= 1 from predicted volumes. All cells share the
/// repeat seeds, so per-repeat AUCs can be compared with a paired test.
pub fn classify_stage(cfg: &ExperimentConfig, cell: Cell, ratio: Ratio) -> Result<ClassificationOutcome> {
    let dir = cfg.layout().seg(cell, ratio);
    let out = dir.join("classification.json");
    if out.is_file() {
        return load_json(&out);
    }
    let eval_path = dir.join("dsc.json");
    if !eval_path.is_file() {
        return Err(Error::MissingResults(format!("{} (run evaluate first)", eval_path.display())));
    }
    let eval: EvalResult = load_json(&eval_path)?;
    let rows: Vec<&VolumeRecord> = eval.volumes.iter().filter(|v| v.cdr > Cdr::Zero).collect();
    let x: Vec<Vec<f64>> = rows.iter().map(|v| v.volumes.to_vec()).collect();
    let y: Vec<bool> = rows.iter().map(|v| v.cdr >= Cdr::One).collect();
    let outcome = match classify_cdr(&x, &y, cfg.classify_repeats(), cfg.classify.folds, derive_seed(cfg.master_seed, 13)) {
        Ok(r) => ClassificationOutcome::Done(r),
        Err(e @ (Error::DegenerateClass | Error::BadCount(_))) => ClassificationOutcome::Skipped(e.to_string()),
        Err(e) => return Err(e),
    };
    save_json_pretty(&out, &outcome)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub cell: Cell,
    pub seed: u64,
    pub gan_seeds: Vec<u64>,
    pub labelled_subset: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub cells: Vec<CellManifest>,
    /// SHA-256 of every checkpoint and model under the output root, keyed by relative path.
    pub checkpoints: BTreeMap<String, String>,
}

fn file_hashes(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).map_err(Error::io(&dir))? {
            let p = e.map_err(Error::io(&dir))?.path();
            if p.is_dir() {
                if p != root.join("data") {
                    stack.push(p);
                }
            } else if p.extension().is_some_and(|x| x == "ckpt") || p.file_name().is_some_and(|n| n == "model.json") {
                let bytes = fs::read(&p).map_err(Error::io(&p))?;
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, hex(&Sha256::digest(bytes)));
            }
        }
    }
    Ok(out)
}

pub fn write_manifest(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Manifest> {
    let mut cells = Vec::new();
    for cell in cells_of(cfg) {
        let split = cell_split(cfg, ds, cell)?;
        let seed = cell.seed(cfg.master_seed);
        cells.push(CellManifest {
            cell,
            seed,
            gan_seeds: (0..gan_groups(cell.budget).len()).map(|g| derive_seed(seed, g as u64)).collect(),
            labelled_subset: split.labelled_subset,
            test_ids: split.test_ids,
        });
    }
    let m = Manifest { config: cfg.clone(), config_hash: cfg.hash(), cells, checkpoints: file_hashes(&cfg.output_root)? };
    save_json_pretty(&cfg.layout().manifest(), &m)?;
    Ok(m)
}

pub fn cells_of(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut v = Vec::new();
    for fold in cfg.fold_ids() {
        for &budget in &cfg.budgets {
            v.push(Cell { fold, budget });
        }
    }
    v
}

/// Runs the whole matrix, then writes the report and the manifest.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<crate::report::ReportSummary> {
    cfg.validate()?;
    if phantom_gen(cfg)? {
        log("generated phantom cohort");
    }
    let ds = load_dataset(cfg)?;
    let ratios = cfg.ratios()?;
    let needs_synth = ratios.iter().any(|r| *r != Ratio::Baseline);
    for cell in cells_of(cfg) {
        log(&format!("fold {} budget {}", cell.fold, cell.budget));
        if needs_synth {
            train_gans(cfg, &ds, cell, Phase::P3)?;
            synth_stage(cfg, cell)?;
            postprocess_stage(cfg, &ds, cell)?;
            let kept = filter_stage(cfg, cell)?;
            log(&format!("  {kept} synthetic samples kept"));
        }
        for &r in &ratios {
            train_seg_stage(cfg, &ds, cell, r)?;
            let e = evaluate_stage(cfg, &ds, cell, r)?;
            classify_stage(cfg, cell, r)?;
            let mean = |v: &[DscReport]| v.iter().map(|d| d.overall).sum::<f64>() / v.len().max(1) as f64;
            log(&format!("  ratio {}: in-domain {:.4}, out-of-domain {:.4}", r.label(), mean(&e.in_domain), mean(&e.out_of_domain)));
        }
    }
    let summary = crate::report::report(cfg)?;
    write_manifest(cfg, &ds)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        "output_root = \"out\"\nbudgets = [1]\nratios = [\"baseline\", \"1\"]\n[phantom]\nn_subjects = 4\nn_labelled = 5\n".into()
    }

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::from_toml(&base()).unwrap();
        assert_eq!(c.ratios().unwrap(), vec![Ratio::Baseline, Ratio::RealPerSynthetic(1)]);
        assert_eq!(c.preset, Preset::Small);
        assert_eq!(c.fold_ids(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(ExperimentConfig::from_toml(&base().replace("[1]", "[5]")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml(&base().replace("\"1\"]", "\"3\"]")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml(&base().replace("budgets = [1]", "budgets = []")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("output_root = \"x\"\nbudgets = [1]\nratios = [\"1\"]\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml(&format!("{}bogus = 1\n", base())), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let text = format!("{}[gan]\nphase3_images = 1000\nmax_width = 16\n[seg]\nsteps = 7\n", base());
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let g = c.gansfer(32, 5).unwrap();
        assert_eq!(g.phase3_images, 1000);
        assert_eq!(g.unfreeze_every, 500);
        assert_eq!(g.arch.generator_widths, vec![16, 16, 8, 4]);
        assert_eq!(g.train.seed, 5);
        assert_eq!(c.seg_config(1).unwrap().steps, 7);
    }

    #[test]
    fn multi_gan_cells_and_seeds() {
        assert_eq!(gan_groups(12).len(), 2);
        assert_eq!(gan_groups(24).len(), 4);
        assert_eq!(gan_groups(6), vec![0..6]);
        let a = Cell { fold: 0, budget: 1 };
        let b = Cell { fold: 1, budget: 1 };
        assert_ne!(a.seed(0), b.seed(0));
        assert_eq!(a.seed(3), a.seed(3));
    }
}
