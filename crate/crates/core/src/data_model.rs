use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_same_shape, Grid2, Grid3, Image, Mask, Mask3, Volume};

pub const N_STRUCTURES: usize = 7;
/// MR plus one contrast channel per structure.
pub const N_CHANNELS: usize = N_STRUCTURES + 1;

/// Deep grey-matter structures. Label id in a label map is `index + 1`; 0 is background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    Accumbens,
    Amygdala,
    Caudate,
    Hippocampus,
    Pallidum,
    Putamen,
    Thalamus,
}

impl Structure {
    pub const ALL: [Structure; N_STRUCTURES] = [
        Structure::Accumbens,
        Structure::Amygdala,
        Structure::Caudate,
        Structure::Hippocampus,
        Structure::Pallidum,
        Structure::Putamen,
        Structure::Thalamus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Structure::Accumbens => "Ac",
            Structure::Amygdala => "Am",
            Structure::Caudate => "Ca",
            Structure::Hippocampus => "Hi",
            Structure::Pallidum => "Pa",
            Structure::Putamen => "Pu",
            Structure::Thalamus => "Th",
        }
    }
}

/// Clinical Dementia Rating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Cdr {
    Zero,
    Half,
    One,
    Two,
    Three,
}

impl Cdr {
    pub const ALL: [Cdr; 5] = [Cdr::Zero, Cdr::Half, Cdr::One, Cdr::Two, Cdr::Three];

    pub fn value(self) -> f64 {
        match self {
            Cdr::Zero => 0.0,
            Cdr::Half => 0.5,
            Cdr::One => 1.0,
            Cdr::Two => 2.0,
            Cdr::Three => 3.0,
        }
    }
}

impl From<Cdr> for f64 {
    fn from(c: Cdr) -> f64 {
        c.value()
    }
}

impl TryFrom<f64> for Cdr {
    type Error = String;

    fn try_from(v: f64) -> std::result::Result<Self, String> {
        Cdr::ALL.into_iter().find(|c| c.value() == v).ok_or_else(|| format!("{v} is not a CDR level"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledSample {
    pub subject_id: String,
    pub mr: Volume,
    /// One mask per structure, in [`Structure::ALL`] order.
    pub labels: Vec<Mask3>,
    pub age: f64,
    pub cdr: Cdr,
    pub is_repeat: bool,
}

impl LabelledSample {
    /// Checks mask count, shapes and pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != N_STRUCTURES {
            return Err(Error::ShapeMismatch(format!("{} label masks, expected {N_STRUCTURES}", self.labels.len())));
        }
        for m in &self.labels {
            if m.shape() != self.mr.shape() {
                return Err(Error::ShapeMismatch(format!("mask {:?} vs volume {:?}", m.shape(), self.mr.shape())));
            }
        }
        for i in 0..self.mr.data.len() {
            if self.labels.iter().filter(|m| m.data[i]).count() > 1 {
                return Err(Error::ShapeMismatch(format!("structures overlap at voxel {i}")));
            }
        }
        Ok(())
    }

    /// Label map with values 0..=7.
    pub fn label_map(&self) -> Grid3<u8> {
        let mut out = self.mr.map(|_| 0u8);
        for (s, m) in Structure::ALL.iter().zip(&self.labels) {
            for (o, &b) in out.data.iter_mut().zip(&m.data) {
                if b {
                    *o = s.label();
                }
            }
        }
        out
    }
}

/// Splits a label map into one binary mask per structure.
pub fn masks_from_label_map(map: &Grid2<u8>) -> Vec<Mask> {
    Structure::ALL.iter().map(|s| map.map(|&v| v == s.label())).collect()
}

pub fn label_map_from_masks(masks: &[Mask]) -> Grid2<u8> {
    let mut out = masks[0].map(|_| 0u8);
    for (s, m) in Structure::ALL.iter().zip(masks) {
        for (o, &b) in out.data.iter_mut().zip(&m.data) {
            if b {
                *o = s.label();
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

/// One axial slice as seen by the GAN: channel 0 is MR, channels 1..8 are
/// the preprocessed structure contrasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelSlice {
    pub channels: Vec<Image>,
    pub slice_index: usize,
    pub source: Source,
}

impl MultiChannelSlice {
    pub fn mr(&self) -> &Image {
        &self.channels[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.channels[0].h, self.channels[0].w)
    }

    /// Channel-major values for `channels[range]`.
    pub fn flat(&self, range: std::ops::Range<usize>) -> Vec<f32> {
        self.channels[range].iter().flat_map(|c| c.data.iter().copied()).collect()
    }
}

/// A labelled 2D slice for segmentation training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegSlice {
    pub mr: Image,
    pub labels: Grid2<u8>,
    pub slice_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold_id: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub labelled_budget: usize,
    pub labelled_subset: Vec<String>,
}

/// Zero-mean unit-variance over non-background voxels; background becomes 0.
pub fn normalize_intensity(volume: &Volume, background: &Mask3) -> Result<Volume> {
    if volume.shape() != background.shape() {
        return Err(Error::ShapeMismatch(format!("volume {:?} vs mask {:?}", volume.shape(), background.shape())));
    }
    let fg: Vec<f64> =
        volume.data.iter().zip(&background.data).filter(|(_, &b)| !b).map(|(&v, _)| v as f64).collect();
    if fg.len() < 2 {
        return Err(Error::EmptyForeground);
    }
    let (mean, std) = mean_std(&fg);
    if std == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mut out = volume.clone();
    for (o, &b) in out.data.iter_mut().zip(&background.data) {
        *o = if b { 0.0 } else { ((*o as f64 - mean) / std) as f32 };
    }
    Ok(out)
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Axis-aligned crop box: origin `(z, y, x)` and size `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl RoiBox {
    /// Box of size `(d, h, w)` centred in a volume of `shape`.
    pub fn centred(shape: [usize; 3], d: usize, h: usize, w: usize) -> Self {
        Self {
            z: shape[0].saturating_sub(d) / 2,
            y: shape[1].saturating_sub(h) / 2,
            x: shape[2].saturating_sub(w) / 2,
            d,
            h,
            w,
        }
    }
}

pub fn extract_roi<T: Clone>(volume: &Grid3<T>, roi: &RoiBox) -> Result<Grid3<T>> {
    if roi.z + roi.d > volume.d || roi.y + roi.h > volume.h || roi.x + roi.w > volume.w {
        return Err(Error::OutOfBounds { roi: format!("{roi:?}"), shape: volume.shape() });
    }
    let mut data = Vec::with_capacity(roi.d * roi.h * roi.w);
    for z in roi.z..roi.z + roi.d {
        for y in roi.y..roi.y + roi.h {
            let start = volume.idx(z, y, roi.x);
            data.extend_from_slice(&volume.data[start..start + roi.w]);
        }
    }
    Ok(Grid3 { d: roi.d, h: roi.h, w: roi.w, data })
}

pub fn slice_axial<T: Clone>(volume: &Grid3<T>) -> Vec<(usize, Grid2<T>)> {
    (0..volume.d).map(|z| (z, volume.plane(z))).collect()
}

/// Inverse of [`slice_axial`]; slices must be in index order and equally shaped.
pub fn restack<T: Clone>(slices: &[(usize, Grid2<T>)]) -> Result<Grid3<T>> {
    let first = &slices.first().ok_or(Error::EmptyPool("slices"))?.1;
    let mut data = Vec::with_capacity(slices.len() * first.data.len());
    for (k, (idx, s)) in slices.iter().enumerate() {
        if *idx != k {
            return Err(Error::BadCount(format!("slice {idx} found at position {k}")));
        }
        check_same_shape(first, s)?;
        data.extend_from_slice(&s.data);
    }
    Ok(Grid3 { d: slices.len(), h: first.h, w: first.w, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmEstimation {
    pub bins: usize,
}

impl Default for WmEstimation {
    fn default() -> Self {
        Self { bins: 64 }
    }
}

/// White-matter intensity as the histogram mode over the brighter half of the
/// foreground. The histogram is lightly smoothed; the result is the mean of
/// the samples falling in the modal bin, so an exactly uniform input returns
/// its own value.
pub fn estimate_wm_intensity(slice: &Image, foreground: &Mask, spec: &WmEstimation) -> Result<f32> {
    check_same_shape(slice, foreground)?;
    let mut fg: Vec<f32> = slice.data.iter().zip(&foreground.data).filter(|(_, &f)| f).map(|(&v, _)| v).collect();
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    fg.sort_by(f32::total_cmp);
    let upper = &fg[fg.len() / 2..];
    let (lo, hi) = (upper[0], upper[upper.len() - 1]);
    if hi <= lo {
        return Ok(lo);
    }
    let bins = spec.bins.max(1);
    let width = (hi - lo) as f64 / bins as f64;
    let bin_of = |v: f32| (((v - lo) as f64 / width) as usize).min(bins - 1);
    let mut counts = vec![0.0f64; bins];
    for &v in upper {
        counts[bin_of(v)] += 1.0;
    }
    let smooth: Vec<f64> = (0..bins)
        .map(|i| {
            let l = if i > 0 { counts[i - 1] } else { 0.0 };
            let r = if i + 1 < bins { counts[i + 1] } else { 0.0 };
            l + 2.0 * counts[i] + r
        })
        .collect();
    // Ties go to the brighter bin.
    let mode = (0..bins).rev().max_by(|&a, &b| smooth[a].total_cmp(&smooth[b])).unwrap_or(0);
    let in_bin: Vec<f64> = upper.iter().filter(|&&v| bin_of(v) == mode).map(|&v| v as f64).collect();
    if in_bin.is_empty() {
        return Ok((lo as f64 + (mode as f64 + 0.5) * width) as f32);
    }
    Ok((in_bin.iter().sum::<f64>() / in_bin.len() as f64) as f32)
}

/// Copies `mr - wm` into each structure's channel, flipping a structure's sign
/// when its mean difference is negative. Pixels that still end up negative
/// after the flip are clamped to 0 so the channels stay non-negative.
pub fn preprocess_seg_channels(mr: &Image, labels: &[Mask], wm: f32) -> Result<Vec<Image>> {
    labels
        .iter()
        .map(|mask| {
            check_same_shape(mr, mask)?;
            let diffs: Vec<f64> =
                mr.data.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(&v, _)| (v - wm) as f64).collect();
            let sign = if !diffs.is_empty() && diffs.iter().sum::<f64>() < 0.0 { -1.0f32 } else { 1.0 };
            let data = mr
                .data
                .iter()
                .zip(&mask.data)
                .map(|(&v, &m)| if m { (sign * (v - wm)).max(0.0) } else { 0.0 })
                .collect();
            Ok(Grid2 { h: mr.h, w: mr.w, data })
        })
        .collect()
}

/// Foreground of a normalised slice: every pixel not exactly at the background constant.
pub fn foreground_of(mr: &Image) -> Mask {
    mr.map(|&v| v != 0.0)
}

/// GAN training slices (MR + contrast channels) of a normalised ROI sample.
pub fn multichannel_slices(sample: &LabelledSample, wm: &WmEstimation) -> Result<Vec<MultiChannelSlice>> {
    let masks: Vec<Vec<(usize, Mask)>> = sample.labels.iter().map(slice_axial).collect();
    slice_axial(&sample.mr)
        .into_iter()
        .map(|(k, mr)| {
            let wm_value = estimate_wm_intensity(&mr, &foreground_of(&mr), wm)?;
            let labels: Vec<Mask> = masks.iter().map(|m| m[k].1.clone()).collect();
            let mut channels = vec![mr.clone()];
            channels.extend(preprocess_seg_channels(&mr, &labels, wm_value)?);
            Ok(MultiChannelSlice { channels, slice_index: k, source: Source::Real })
        })
        .collect()
}

pub fn seg_slices(sample: &LabelledSample) -> Vec<SegSlice> {
    let map = sample.label_map();
    slice_axial(&sample.mr)
        .into_iter()
        .map(|(k, mr)| SegSlice { mr, labels: map.plane(k), slice_index: k })
        .collect()
}

/// MR-only slices of a volume, as used for unlabelled data.
pub fn mr_slices(volume: &Volume) -> Vec<Image> {
    slice_axial(volume).into_iter().map(|(_, s)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: &[f32]) -> Volume {
        Grid3 { d: 1, h: 1, w: values.len(), data: values.to_vec() }
    }

    #[test]
    fn normalize_matches_hand_values() {
        let v = vol(&[1.0, 2.0, 3.0, 99.0]);
        let bg = Grid3 { d: 1, h: 1, w: 4, data: vec![false, false, false, true] };
        let n = normalize_intensity(&v, &bg).unwrap();
        let z = 1.0 / (2.0f64 / 3.0).sqrt();
        for (got, want) in n.data.iter().zip([-z, 0.0, z, 0.0]) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
        let again = normalize_intensity(&n, &bg).unwrap();
        for (a, b) in again.data.iter().zip(&n.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_constant_and_bad_shape() {
        let bg = Grid3 { d: 1, h: 1, w: 3, data: vec![false; 3] };
        assert!(matches!(normalize_intensity(&vol(&[5.0, 5.0, 5.0]), &bg), Err(Error::ZeroVariance)));
        let bg2 = Grid3 { d: 1, h: 1, w: 2, data: vec![false; 2] };
        assert!(matches!(normalize_intensity(&vol(&[1.0, 2.0, 3.0]), &bg2), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn roi_crop_and_shift() {
        let v = Grid3 { d: 4, h: 5, w: 6, data: (0..120).map(|i| i as f32).collect() };
        let full = RoiBox { z: 0, y: 0, x: 0, d: 4, h: 5, w: 6 };
        assert_eq!(extract_roi(&v, &full).unwrap(), v);
        let a = extract_roi(&v, &RoiBox { z: 0, y: 1, x: 1, d: 2, h: 2, w: 2 }).unwrap();
        let b = extract_roi(&v, &RoiBox { z: 1, y: 1, x: 1, d: 2, h: 2, w: 2 }).unwrap();
        assert_eq!(a.shape(), [2, 2, 2]);
        assert_eq!(a.plane(1), b.plane(0));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(y - x, 30.0);
        }
        let bad = RoiBox { z: 1, y: 0, x: 0, d: 4, h: 5, w: 6 };
        assert!(matches!(extract_roi(&v, &bad), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn slice_restack_round_trip() {
        let v = Grid3 { d: 3, h: 2, w: 2, data: (0..12).map(|i| i as f32 * 0.1).collect() };
        let s = slice_axial(&v);
        assert_eq!(s.len(), 3);
        assert_eq!(restack(&s).unwrap(), v);
    }

    #[test]
    fn wm_estimates() {
        let fg = Grid2::filled(4, 4, true);
        let uniform = Grid2::filled(4, 4, 0.37f32);
        assert_eq!(estimate_wm_intensity(&uniform, &fg, &WmEstimation::default()).unwrap(), 0.37);
        let bimodal = Grid2::from_fn(4, 4, |y, _| if y < 2 { 0.2f32 } else { 0.8 });
        assert_eq!(estimate_wm_intensity(&bimodal, &fg, &WmEstimation::default()).unwrap(), 0.8);
        let none = Grid2::filled(4, 4, false);
        assert!(matches!(estimate_wm_intensity(&uniform, &none, &WmEstimation::default()), Err(Error::EmptyForeground)));
    }

    #[test]
    fn seg_channel_hand_cases() {
        let mr = Grid2::from_vec(1, 4, vec![0.2f32, 0.3, 0.9, 1.0]).unwrap();
        let dark = Grid2::from_vec(1, 4, vec![true, true, false, false]).unwrap();
        let bright = Grid2::from_vec(1, 4, vec![false, false, true, true]).unwrap();
        let empty = Grid2::filled(1, 4, false);
        let ch = preprocess_seg_channels(&mr, &[dark, bright, empty], 0.6).unwrap();
        let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6);
        assert!(close(&ch[0].data, &[0.4, 0.3, 0.0, 0.0]));
        assert!(close(&ch[1].data, &[0.0, 0.0, 0.3, 0.4]));
        assert!(ch[2].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cdr_serde_as_number() {
        assert_eq!(serde_json::to_string(&Cdr::Half).unwrap(), "0.5");
        assert_eq!(serde_json::from_str::<Cdr>("2.0").unwrap(), Cdr::Two);
        assert!(serde_json::from_str::<Cdr>("0.7").is_err());
    }
}
