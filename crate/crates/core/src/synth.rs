//! From raw generator output to labelled training slices: slice assignment,
//! anatomical masking, binarisation and repair, intensity gating and
//! distance-based quality filtering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{label_map_from_masks, multichannel_slices, LabelledSample, SegSlice, WmEstimation, N_CHANNELS, N_STRUCTURES};
use crate::error::{Error, Result};
use crate::gan::GeneratorNet;
use crate::gansfer::{generate_batched, Phase};
use crate::grid::{check_same_shape, Grid2, Grid3, Image, Mask, Mask3};
use crate::morphology::{binarize_above, closing, dilate_metric, fill_holes, opening, remove_small_components};

/// Smallest connected component kept by [`postprocess`].
pub const MIN_COMPONENT_AREA: usize = 4;
/// Fraction of a structure's median real contrast below which generated
/// channel values never count as foreground.
pub const CONTRAST_FLOOR_FRACTION: f32 = 0.5;
/// Quality percentile above which samples are dropped.
pub const QUALITY_PERCENTILE: f64 = 75.0;

fn sq_distance(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

/// `slice_index` of the pool slice nearest to `synth_mr`; ties go to the
/// lowest slice index.
pub fn assign_slice(synth_mr: &Image, pool: &[(usize, Image)]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (k, img) in pool {
        check_same_shape(synth_mr, img)?;
        let d = sq_distance(synth_mr, img);
        let better = match best {
            None => true,
            Some((bd, bk)) => d < bd || (d == bd && *k < bk),
        };
        if better {
            best = Some((d, *k));
        }
    }
    best.map(|(_, k)| k).ok_or(Error::EmptyPool("slice pool"))
}

/// Per-structure anatomical masks: the union of the training labels dilated
/// by a metric radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMasks {
    pub masks: Vec<Mask3>,
    pub provenance: Vec<String>,
    pub radius_mm: f64,
    /// Voxel size in mm as (z, y, x).
    pub spacing: [f64; 3],
    /// Per structure, the lowest seg-channel value binarisation accepts.
    /// Empty means no floor.
    #[serde(default)]
    pub contrast_floor: Vec<f32>,
}

impl StructureMasks {
    /// Mask of structure `s` on axial slice `z`, with 2D holes filled.
    pub fn slice(&self, s: usize, z: usize) -> Mask {
        fill_holes(&self.masks[s].plane(z))
    }

    pub fn depth(&self) -> usize {
        self.masks[0].d
    }

    pub fn floor(&self, s: usize) -> f32 {
        self.contrast_floor.get(s).copied().unwrap_or(0.0)
    }
}

/// [`CONTRAST_FLOOR_FRACTION`] of the median positive preprocessed channel
/// value of each structure over the training subjects.
fn contrast_floors(train: &[LabelledSample]) -> Result<Vec<f32>> {
    let wm = WmEstimation::default();
    let mut values = vec![Vec::new(); N_STRUCTURES];
    for s in train {
        for slice in multichannel_slices(s, &wm)? {
            for (v, ch) in values.iter_mut().zip(&slice.channels[1..]) {
                v.extend(ch.data.iter().copied().filter(|&x| x > 0.0));
            }
        }
    }
    Ok(values
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return 0.0;
            }
            let mid = v.len() / 2;
            *v.select_nth_unstable_by(mid, f32::total_cmp).1 * CONTRAST_FLOOR_FRACTION
        })
        .collect())
}

pub fn build_structure_masks(train: &[LabelledSample], radius_mm: f64, spacing: [f64; 3]) -> Result<StructureMasks> {
    let first = train.first().ok_or(Error::EmptyPool("labelled training samples"))?;
    let shape = first.mr.shape();
    let mut union: Vec<Mask3> = (0..N_STRUCTURES).map(|_| Grid3::filled(shape[0], shape[1], shape[2], false)).collect();
    for s in train {
        s.validate()?;
        if s.mr.shape() != shape {
            return Err(Error::ShapeMismatch(format!("{} is {:?}, expected {shape:?}", s.subject_id, s.mr.shape())));
        }
        for (u, m) in union.iter_mut().zip(&s.labels) {
            for (a, &b) in u.data.iter_mut().zip(&m.data) {
                *a |= b;
            }
        }
    }
    Ok(StructureMasks {
        masks: union.iter().map(|u| dilate_metric(u, radius_mm, spacing)).collect(),
        provenance: train.iter().map(|s| s.subject_id.clone()).collect(),
        radius_mm,
        spacing,
        contrast_floor: contrast_floors(train)?,
    })
}

/// Where a synthetic sample came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub phase: Phase,
    pub gan_id: usize,
    pub latent_seed: u64,
    /// Position within the batch drawn from `latent_seed`.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub channels: Vec<Image>,
    pub slice_index: usize,
    pub binary_labels: Vec<Mask>,
    pub quality_score: f64,
    pub kept: bool,
    pub provenance: Provenance,
}

impl SyntheticSample {
    pub fn seg_slice(&self) -> SegSlice {
        SegSlice { mr: self.channels[0].clone(), labels: label_map_from_masks(&self.binary_labels), slice_index: self.slice_index }
    }
}

/// One channel's postprocessing result with the audit trail of the
/// intensity gate.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelResult {
    pub mask: Mask,
    /// `(low, high)` MR window of step 4, `None` when the channel was empty.
    pub gate: Option<(f64, f64)>,
    /// Pixels re-added by the final hole fill.
    pub refilled: Mask,
}

fn gate_by_intensity(mr: &Image, mask: &Mask) -> (Mask, Option<(f64, f64)>) {
    let vals: Vec<f64> = mr.data.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
    if vals.is_empty() {
        return (mask.clone(), None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = (mean - 2.0 * sd, mean + 2.0 * sd);
    let data = mr.data.iter().zip(&mask.data).map(|(&v, &m)| m && (v as f64) >= lo && (v as f64) <= hi).collect();
    (Grid2 { h: mask.h, w: mask.w, data }, Some((lo, hi)))
}

/// Cleans one segmentation channel against its anatomical mask slice.
/// Channel values at or below `floor` are background.
pub fn postprocess_channel(channel: &Image, mr: &Image, anatomy: &Mask, floor: f32) -> Result<ChannelResult> {
    check_same_shape(channel, mr)?;
    check_same_shape(channel, anatomy)?;
    let masked = Grid2 {
        h: channel.h,
        w: channel.w,
        data: channel.data.iter().zip(&anatomy.data).map(|(&v, &a)| if a { v } else { 0.0 }).collect(),
    };
    let bin = binarize_above(&masked, floor);
    let repaired = fill_holes(&closing(&bin)).and(anatomy);
    let (gated, gate) = gate_by_intensity(mr, &repaired);
    let filled = fill_holes(&gated);
    let refilled = Grid2 { h: filled.h, w: filled.w, data: filled.data.iter().zip(&gated.data).map(|(&f, &g)| f && !g).collect() };
    let opened = opening(&filled).and(anatomy);
    let mask = remove_small_components(&opened, MIN_COMPONENT_AREA);
    Ok(ChannelResult { refilled: refilled.and(&mask), mask, gate })
}

/// Seven cleaned label masks for an 8-channel sample on slice `slice_index`.
pub fn postprocess(channels: &[Image], slice_index: usize, masks: &StructureMasks) -> Result<Vec<ChannelResult>> {
    if channels.len() != N_CHANNELS {
        return Err(Error::ShapeMismatch(format!("{} channels, expected {N_CHANNELS}", channels.len())));
    }
    if slice_index >= masks.depth() {
        return Err(Error::ShapeMismatch(format!("slice {slice_index} outside {}-slice masks", masks.depth())));
    }
    (0..N_STRUCTURES).map(|s| postprocess_channel(&channels[s + 1], &channels[0], &masks.slice(s, slice_index), masks.floor(s))).collect()
}

/// Smallest Euclidean distance from `synth_mr` to any pool image.
pub fn quality_score(synth_mr: &Image, pool: &[Image]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for img in pool {
        check_same_shape(synth_mr, img)?;
        best = best.min(sq_distance(synth_mr, img));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool("quality pool"));
    }
    Ok(best.sqrt())
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// data at or below it.
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Marks samples with a score strictly above the 75th percentile as dropped.
/// Returns the number kept.
pub fn filter_by_quality(samples: &mut [SyntheticSample]) -> usize {
    let scores: Vec<f64> = samples.iter().map(|s| s.quality_score).collect();
    let Some(cut) = nearest_rank(&scores, QUALITY_PERCENTILE) else { return 0 };
    for s in samples.iter_mut() {
        s.kept = s.quality_score <= cut;
    }
    samples.iter().filter(|s| s.kept).count()
}

/// A trained generator and its provenance labels.
pub struct GeneratorSource<'a> {
    pub generator: &'a GeneratorNet<f32>,
    pub phase: Phase,
    pub gan_id: usize,
}

/// Generator output before any postprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub channels: Vec<Image>,
    pub provenance: Provenance,
}

/// Draws `n` samples split evenly across `sources` (remainder to the first
/// ones). Source `i` draws its latents from `derive_seed(seed, i)`.
pub fn generate_raw(sources: &[GeneratorSource<'_>], n: usize, seed: u64) -> Result<Vec<RawSample>> {
    if sources.is_empty() {
        return Err(Error::EmptyPool("generators"));
    }
    let k = sources.len();
    let mut out = Vec::with_capacity(n);
    for (si, src) in sources.iter().enumerate() {
        let count = n / k + usize::from(si < n % k);
        if count == 0 {
            continue;
        }
        let latent_seed = crate::gansfer::derive_seed(seed, si as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
        let t = generate_batched(src.generator, count, &mut rng, 32)?;
        let (_, c, h, w) = t.dims4();
        if c != N_CHANNELS {
            return Err(Error::ShapeMismatch(format!("generator emits {c} channels")));
        }
        for i in 0..count {
            let channels = (0..c)
                .map(|ch| {
                    let off = (i * c + ch) * h * w;
                    Grid2 { h, w, data: t.data()[off..off + h * w].to_vec() }
                })
                .collect();
            out.push(RawSample { channels, provenance: Provenance { phase: src.phase, gan_id: src.gan_id, latent_seed, index: i } });
        }
    }
    Ok(out)
}

/// Slice assignment, postprocessing and quality scoring of one raw sample.
/// The sample starts out kept; [`filter_per_source`] decides.
pub fn finish_sample(raw: RawSample, masks: &StructureMasks, slice_pool: &[(usize, Image)], score_pool: &[Image]) -> Result<SyntheticSample> {
    let slice_index = assign_slice(&raw.channels[0], slice_pool)?;
    let binary_labels = postprocess(&raw.channels, slice_index, masks)?.into_iter().map(|r| r.mask).collect();
    let quality_score = quality_score(&raw.channels[0], score_pool)?;
    Ok(SyntheticSample { channels: raw.channels, slice_index, binary_labels, quality_score, kept: true, provenance: raw.provenance })
}

/// Quality filter applied to each `(phase, gan_id)` source separately, so the
/// kept pool keeps the source proportions. Returns the number kept.
pub fn filter_per_source(samples: &mut [SyntheticSample]) -> usize {
    let mut sources: Vec<(Phase, usize)> = samples.iter().map(|s| (s.provenance.phase, s.provenance.gan_id)).collect();
    sources.sort();
    sources.dedup();
    for src in sources {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| (samples[i].provenance.phase, samples[i].provenance.gan_id) == src).collect();
        let mut group: Vec<SyntheticSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        filter_by_quality(&mut group);
        for (&i, g) in idx.iter().zip(group) {
            samples[i].kept = g.kept;
        }
    }
    samples.iter().filter(|s| s.kept).count()
}

/// [`generate_raw`], [`finish_sample`] and [`filter_per_source`] in one go.
pub fn generate_synthetic_dataset(
    sources: &[GeneratorSource<'_>],
    n: usize,
    masks: &StructureMasks,
    slice_pool: &[(usize, Image)],
    score_pool: &[Image],
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    let raw = generate_raw(sources, n, seed)?;
    let mut out = raw.into_iter().map(|r| finish_sample(r, masks, slice_pool, score_pool)).collect::<Result<Vec<_>>>()?;
    filter_per_source(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{components, holes};
    use proptest::prelude::*;

    fn disc(n: usize, cy: f64, cx: f64, r: f64) -> Mask {
        Grid2::from_fn(n, n, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
    }

    fn sample(score: f64) -> SyntheticSample {
        SyntheticSample {
            channels: vec![],
            slice_index: 0,
            binary_labels: vec![],
            quality_score: score,
            kept: true,
            provenance: Provenance { phase: Phase::P2, gan_id: 0, latent_seed: 0, index: 0 },
        }
    }

    #[test]
    fn assign_exact_and_ties() {
        let pool: Vec<(usize, Image)> = (0..20).map(|k| (k, Image::filled(4, 4, k as f32))).collect();
        assert_eq!(assign_slice(&Image::filled(4, 4, 17.0), &pool).unwrap(), 17);
        assert_eq!(assign_slice(&Image::filled(4, 4, 6.0), &[(9, Image::filled(4, 4, 9.0)), (3, Image::filled(4, 4, 3.0))]).unwrap(), 3);
        let noisy = Image::from_fn(4, 4, |y, x| 17.0 + 0.01 * ((y * 4 + x) as f32).sin());
        assert_eq!(assign_slice(&noisy, &pool).unwrap(), 17);
        assert!(matches!(assign_slice(&noisy, &[]), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn quality_examples() {
        let pool = vec![Image::filled(10, 10, 0.0)];
        assert_eq!(quality_score(&Image::filled(10, 10, 1.0), &pool).unwrap(), 10.0);
        assert_eq!(quality_score(&pool[0], &pool).unwrap(), 0.0);
        let mut bigger = pool.clone();
        bigger.push(Image::filled(10, 10, 0.5));
        assert!(quality_score(&Image::filled(10, 10, 1.0), &bigger).unwrap() <= 10.0);
    }

    #[test]
    fn filter_examples() {
        let mut s: Vec<_> = [1.0, 2.0, 3.0, 10.0].map(sample).to_vec();
        assert_eq!(filter_by_quality(&mut s), 3);
        assert!(!s[3].kept);
        let mut same: Vec<_> = [2.0; 5].map(sample).to_vec();
        assert_eq!(filter_by_quality(&mut same), 5);
        let mut one = vec![sample(7.0)];
        assert_eq!(filter_by_quality(&mut one), 1);
    }

    #[test]
    fn solid_disc_is_a_fixed_point() {
        let d = disc(16, 8.0, 8.0, 5.0);
        let ch = d.map(|&b| if b { 1.0 } else { 0.0 });
        let mr = Image::filled(16, 16, 0.4);
        let r = postprocess_channel(&ch, &mr, &Grid2::filled(16, 16, true), 0.0).unwrap();
        assert_eq!(r.mask, d);
    }

    #[test]
    fn noise_below_floor_is_background() {
        let noise = Grid2::from_fn(16, 16, |y, x| ((y * 7 + x * 3) % 5) as f32 * 0.01);
        let mr = Image::filled(16, 16, 0.4);
        let all = Grid2::filled(16, 16, true);
        // Without a floor Otsu splits the noise itself.
        assert!(postprocess_channel(&noise, &mr, &all, 0.0).unwrap().mask.count() > 0);
        assert_eq!(postprocess_channel(&noise, &mr, &all, 0.5).unwrap().mask.count(), 0);
        let d = disc(16, 8.0, 8.0, 5.0);
        let ch = Grid2::from_fn(16, 16, |y, x| if *d.get(y, x) { 1.0 } else { 0.0 } + *noise.get(y, x));
        assert_eq!(postprocess_channel(&ch, &mr, &all, 0.5).unwrap().mask, d);
    }

    #[test]
    fn hole_and_outside_blob() {
        let d = disc(16, 8.0, 8.0, 5.0);
        let anatomy = disc(16, 8.0, 8.0, 6.0);
        let mut ch = d.map(|&b| if b { 1.0 } else { 0.0 });
        ch.set(7, 7, 0.0);
        for (y, x) in [(0, 0), (0, 1), (1, 0)] {
            ch.set(y, x, 1.0);
        }
        let mr = Image::filled(16, 16, 0.4);
        let r = postprocess_channel(&ch, &mr, &anatomy, 0.0).unwrap();
        assert_eq!(r.mask, d);
    }

    #[test]
    fn intensity_outliers_removed_then_refilled() {
        let d = disc(16, 8.0, 8.0, 5.0);
        let ch = d.map(|&b| if b { 1.0 } else { 0.0 });
        let mut mr = Image::filled(16, 16, 0.0);
        let inside: Vec<(usize, usize)> = (0..16).flat_map(|y| (0..16).map(move |x| (y, x))).filter(|&(y, x)| *d.get(y, x)).collect();
        for (i, &(y, x)) in inside.iter().enumerate() {
            mr.set(y, x, if i % 2 == 0 { 0.9 } else { 1.1 });
        }
        let outliers = [(7, 7), (7, 8), (8, 7), (8, 8), (8, 4)];
        for &(y, x) in &outliers {
            mr.set(y, x, 3.0);
        }
        let vals: Vec<f64> = inside.iter().map(|&(y, x)| *mr.get(y, x) as f64).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(3.0 > m + 2.0 * sd);
        let r = postprocess_channel(&ch, &mr, &Grid2::filled(16, 16, true), 0.0).unwrap();
        let (lo, hi) = r.gate.unwrap();
        assert!((lo - (m - 2.0 * sd)).abs() < 1e-9 && (hi - (m + 2.0 * sd)).abs() < 1e-9);
        // All five are interior, so all come back through the hole fill.
        assert_eq!(r.mask, d);
        assert_eq!(r.refilled.count(), 5);
    }

    #[test]
    fn masks_contain_union_and_radius_zero_is_union() {
        let mk = |id: &str, z: usize| {
            let mut labels: Vec<Mask3> = (0..N_STRUCTURES).map(|_| Grid3::filled(3, 8, 8, false)).collect();
            labels[2].set(z, 4, 4, true);
            LabelledSample {
                subject_id: id.into(),
                mr: Grid3::filled(3, 8, 8, 1.0),
                labels,
                age: 20.0,
                cdr: crate::data_model::Cdr::Zero,
                is_repeat: false,
            }
        };
        let a = mk("a", 0);
        let b = mk("b", 2);
        let exact = build_structure_masks(&[a.clone(), b.clone()], 0.0, [1.0; 3]).unwrap();
        assert_eq!(exact.masks[2].count(), 2);
        let wide = build_structure_masks(&[a.clone(), b.clone()], 2.0, [1.0; 3]).unwrap();
        assert!(a.labels[2].is_subset_of(&wide.masks[2]) && b.labels[2].is_subset_of(&wide.masks[2]));
        assert_eq!(wide.provenance, vec!["a", "b"]);
    }

    proptest! {
        #[test]
        fn postprocess_properties(
            seed in any::<u64>(),
            noise in proptest::collection::vec(0.0f32..1.0, 256),
            flips in proptest::collection::vec(any::<bool>(), 256),
        ) {
            let d = disc(16, 7.0 + (seed % 3) as f64, 8.0, 3.0 + (seed % 4) as f64);
            let anatomy = disc(16, 8.0, 8.0, 7.0);
            let ch = Grid2::from_fn(16, 16, |y, x| {
                let i = y * 16 + x;
                let on = *d.get(y, x) ^ (flips[i] && noise[i] > 0.8);
                if on { 0.5 + noise[i] } else { 0.3 * noise[i] }
            });
            let mr = Image::from_fn(16, 16, |y, x| noise[(y * 16 + x + seed as usize % 7) % 256]);
            let r = postprocess_channel(&ch, &mr, &anatomy, 0.0).unwrap();
            prop_assert_eq!(holes(&r.mask).count(), 0);
            prop_assert!(components(&r.mask).iter().all(|c| c.len() >= MIN_COMPONENT_AREA));
            prop_assert!(r.mask.is_subset_of(&anatomy));
            if let Some((lo, hi)) = r.gate {
                for i in 0..256 {
                    if r.mask.data[i] && !r.refilled.data[i] {
                        let v = mr.data[i] as f64;
                        prop_assert!(v >= lo && v <= hi);
                    }
                }
            }
        }
    }
}
