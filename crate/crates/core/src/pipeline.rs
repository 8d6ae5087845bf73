//! Glue between stages: dataset preparation, synthesis from trained runs and
//! segmentation training plus evaluation on held-out subjects.

use crate::data_model::{multichannel_slices, mr_slices, seg_slices, LabelledSample, MultiChannelSlice, SegSlice, WmEstimation};
use crate::error::{Error, Result};
use crate::evaluation::{dsc_report, DscReport};
use crate::gansfer::{GansferRun, Phase};
use crate::grid::Image;
use crate::segmenter::{segment, train_segnet, MixedSampler, Ratio, SegNetConfig, TrainedSegNet};
use crate::synth::{build_structure_masks, generate_synthetic_dataset, GeneratorSource, StructureMasks, SyntheticSample};

/// Anatomical mask radius around the labelled structures.
pub const MASK_RADIUS_MM: f64 = 10.0;

/// GAN and segmentation views of the labelled training subjects.
#[derive(Clone, Debug)]
pub struct LabelledData {
    pub samples: Vec<LabelledSample>,
    /// Per subject, in `samples` order.
    pub gan_slices: Vec<Vec<MultiChannelSlice>>,
    pub seg_slices: Vec<SegSlice>,
}

impl LabelledData {
    pub fn new(samples: Vec<LabelledSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyPool("labelled subjects"));
        }
        let wm = WmEstimation::default();
        let gan_slices = samples.iter().map(|s| multichannel_slices(s, &wm)).collect::<Result<_>>()?;
        let seg_slices = samples.iter().flat_map(seg_slices).collect();
        Ok(Self { samples, gan_slices, seg_slices })
    }

    pub fn all_gan_slices(&self) -> Vec<MultiChannelSlice> {
        self.gan_slices.iter().flatten().cloned().collect()
    }

    /// MR slices with their axial index, for slice assignment.
    pub fn indexed_mr(&self) -> Vec<(usize, Image)> {
        self.seg_slices.iter().map(|s| (s.slice_index, s.mr.clone())).collect()
    }

    pub fn structure_masks(&self, spacing: [f64; 3]) -> Result<StructureMasks> {
        build_structure_masks(&self.samples, MASK_RADIUS_MM, spacing)
    }
}

/// All MR slices of the unlabelled subjects.
pub fn unlabelled_images(samples: &[LabelledSample]) -> Vec<Image> {
    samples.iter().flat_map(|s| mr_slices(&s.mr)).collect()
}

/// Synthetic pool from the post-phase-2 and post-phase-3 generators of every
/// run, in equal shares.
pub fn synthesize(
    runs: &[GansferRun],
    n: usize,
    labelled: &LabelledData,
    masks: &StructureMasks,
    unlabelled: &[Image],
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    let sources: Vec<GeneratorSource<'_>> = runs
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            [
                GeneratorSource { generator: &r.p2, phase: Phase::P2, gan_id: i },
                GeneratorSource { generator: &r.p3, phase: Phase::P3, gan_id: i },
            ]
        })
        .collect();
    generate_synthetic_dataset(&sources, n, masks, &labelled.indexed_mr(), unlabelled, seed)
}

pub fn kept_seg_slices(samples: &[SyntheticSample]) -> Vec<SegSlice> {
    samples.iter().filter(|s| s.kept).map(|s| s.seg_slice()).collect()
}

/// Trains one segmenter on `real` plus `synthetic` at `ratio`.
pub fn train_segmenter(real: &[SegSlice], synthetic: &[SegSlice], ratio: Ratio, cfg: &SegNetConfig) -> Result<TrainedSegNet> {
    let synth = if ratio == Ratio::Baseline { Vec::new() } else { synthetic.to_vec() };
    let mut sampler = MixedSampler::new(real.to_vec(), synth, ratio, cfg.seed ^ 0x5eed)?;
    train_segnet(cfg, &mut sampler)
}

/// DSC of the segmenter's prediction for each test subject.
pub fn evaluate(model: &TrainedSegNet, test: &[LabelledSample]) -> Result<Vec<DscReport>> {
    test.iter()
        .map(|s| {
            let pred = segment(&model.net, &s.mr, Some(s.mr.shape()))?;
            dsc_report(&pred.data, &s.label_map().data, &s.subject_id, s.age, s.cdr)
        })
        .collect()
}

pub fn mean_overall(reports: &[DscReport]) -> f64 {
    reports.iter().map(|r| r.overall).sum::<f64>() / reports.len().max(1) as f64
}
