//! Dataset directories: one directory per subject holding a 16-bit PNG per
//! axial MR slice, an 8-bit label-map PNG per slice when labels are present,
//! and a `meta.json` sidecar. Intensities are quantised linearly between the
//! volume minimum and maximum recorded in the sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::data_model::{masks_from_label_map, Cdr, LabelledSample, N_CHANNELS, N_STRUCTURES};
use crate::error::{Error, Result};
use crate::gan::checkpoint::{load_json, save_json_pretty};
use crate::grid::{Grid2, Grid3, Image, Mask3};
use crate::synth::{Provenance, RawSample, SyntheticSample};

const META: &str = "meta.json";

/// Linear 16-bit quantisation: `value = offset + q * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantisation {
    pub offset: f64,
    pub scale: f64,
}

impl Quantisation {
    pub fn fit(values: &[f32]) -> Self {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        if !lo.is_finite() || hi <= lo {
            return Self { offset: if lo.is_finite() { lo } else { 0.0 }, scale: 1.0 };
        }
        Self { offset: lo, scale: (hi - lo) / 65535.0 }
    }

    pub fn encode(&self, v: f32) -> u16 {
        ((v as f64 - self.offset) / self.scale).round().clamp(0.0, 65535.0) as u16
    }

    pub fn decode(&self, q: u16) -> f32 {
        (self.offset + q as f64 * self.scale) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub subject_id: String,
    pub age: f64,
    pub cdr: Cdr,
    pub is_repeat: bool,
    /// `[depth, height, width]`.
    pub shape: [usize; 3],
    /// Voxel size in mm, `[z, y, x]`.
    pub spacing: [f64; 3],
    pub quantisation: Quantisation,
    pub has_labels: bool,
}

fn write_u16(path: &Path, w: usize, h: usize, data: Vec<u16>) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).ok_or_else(|| Error::ShapeMismatch("pixel buffer size".into()))?;
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

fn write_u8(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).ok_or_else(|| Error::ShapeMismatch("pixel buffer size".into()))?;
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

fn read_u16(path: &Path, h: usize, w: usize) -> Result<Vec<u16>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.into_luma16();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::ShapeMismatch(format!("{} is {}x{}, expected {h}x{w}", path.display(), img.height(), img.width())));
    }
    Ok(img.into_raw())
}

fn read_u8(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.into_luma8();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::ShapeMismatch(format!("{} is {}x{}, expected {h}x{w}", path.display(), img.height(), img.width())));
    }
    Ok(img.into_raw())
}

fn mr_name(z: usize) -> String {
    format!("mr_{z:03}.png")
}

fn label_name(z: usize) -> String {
    format!("labels_{z:03}.png")
}

/// Writes `sample` under `root/<subject_id>`. Labels are written only when
/// `with_labels` is set.
pub fn write_subject(root: &Path, sample: &LabelledSample, spacing: [f64; 3], with_labels: bool) -> Result<PathBuf> {
    let dir = root.join(&sample.subject_id);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let [d, h, w] = sample.mr.shape();
    let q = Quantisation::fit(&sample.mr.data);
    for z in 0..d {
        let plane = &sample.mr.data[z * h * w..(z + 1) * h * w];
        write_u16(&dir.join(mr_name(z)), w, h, plane.iter().map(|&v| q.encode(v)).collect())?;
    }
    if with_labels {
        let map = sample.label_map();
        for z in 0..d {
            write_u8(&dir.join(label_name(z)), w, h, map.data[z * h * w..(z + 1) * h * w].to_vec())?;
        }
    }
    let meta = SubjectMeta {
        subject_id: sample.subject_id.clone(),
        age: sample.age,
        cdr: sample.cdr,
        is_repeat: sample.is_repeat,
        shape: [d, h, w],
        spacing,
        quantisation: q,
        has_labels: with_labels,
    };
    save_json_pretty(&dir.join(META), &meta)?;
    Ok(dir)
}

/// Reads a subject directory. Labels come from `label_dir` when given (the
/// withheld ground truth of an unlabelled subject), else from the subject's
/// own directory; subjects without labels get empty masks.
pub fn read_subject(dir: &Path, label_dir: Option<&Path>) -> Result<(LabelledSample, bool)> {
    let meta = read_meta(dir)?;
    let [d, h, w] = meta.shape;
    let mut mr = Grid3::filled(d, h, w, 0.0f32);
    for z in 0..d {
        let px = read_u16(&dir.join(mr_name(z)), h, w)?;
        for (o, q) in mr.data[z * h * w..(z + 1) * h * w].iter_mut().zip(px) {
            *o = meta.quantisation.decode(q);
        }
    }
    let labels_from = match label_dir {
        Some(l) => Some(l.to_path_buf()),
        None if meta.has_labels => Some(dir.to_path_buf()),
        None => None,
    };
    let mut labels: Vec<Mask3> = (0..N_STRUCTURES).map(|_| Grid3::filled(d, h, w, false)).collect();
    if let Some(ld) = &labels_from {
        for z in 0..d {
            let map = Grid2 { h, w, data: read_u8(&ld.join(label_name(z)), h, w)? };
            for (m, plane) in labels.iter_mut().zip(masks_from_label_map(&map)) {
                m.data[z * h * w..(z + 1) * h * w].copy_from_slice(&plane.data);
            }
        }
    }
    let sample = LabelledSample { subject_id: meta.subject_id, mr, labels, age: meta.age, cdr: meta.cdr, is_repeat: meta.is_repeat };
    Ok((sample, labels_from.is_some()))
}

pub fn read_meta(dir: &Path) -> Result<SubjectMeta> {
    load_json(&dir.join(META))
}

/// Writes only the label maps of `sample` into `root/<subject_id>`.
pub fn write_labels(root: &Path, sample: &LabelledSample) -> Result<PathBuf> {
    let dir = root.join(&sample.subject_id);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let [d, h, w] = sample.mr.shape();
    let map = sample.label_map();
    for z in 0..d {
        write_u8(&dir.join(label_name(z)), w, h, map.data[z * h * w..(z + 1) * h * w].to_vec())?;
    }
    Ok(dir)
}

/// Subject directories under `root`, sorted by name.
pub fn list_subjects(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META).is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// Writes `channels` as `ch{c}.png` into `dir`, each with its own quantisation.
pub fn write_channels(dir: &Path, channels: &[Image]) -> Result<Vec<Quantisation>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    channels
        .iter()
        .enumerate()
        .map(|(c, ch)| {
            let q = Quantisation::fit(&ch.data);
            write_u16(&dir.join(format!("ch{c}.png")), ch.w, ch.h, ch.data.iter().map(|&v| q.encode(v)).collect())?;
            Ok(q)
        })
        .collect()
}

pub fn read_channels(dir: &Path, quantisation: &[Quantisation], h: usize, w: usize) -> Result<Vec<Image>> {
    quantisation
        .iter()
        .enumerate()
        .map(|(c, q)| Ok(Grid2 { h, w, data: read_u16(&dir.join(format!("ch{c}.png")), h, w)?.into_iter().map(|v| q.decode(v)).collect() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub provenance: Provenance,
    pub quantisation: Vec<Quantisation>,
    pub shape: [usize; 2],
}

pub fn write_raw(root: &Path, name: &str, s: &RawSample) -> Result<PathBuf> {
    let dir = root.join(name);
    let quantisation = write_channels(&dir, &s.channels)?;
    let meta = RawMeta { provenance: s.provenance.clone(), quantisation, shape: [s.channels[0].h, s.channels[0].w] };
    save_json_pretty(&dir.join(META), &meta)?;
    Ok(dir)
}

pub fn read_raw(dir: &Path) -> Result<RawSample> {
    let meta: RawMeta = load_json(&dir.join(META))?;
    let [h, w] = meta.shape;
    Ok(RawSample { channels: read_channels(dir, &meta.quantisation, h, w)?, provenance: meta.provenance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub slice_index: usize,
    pub quality_score: f64,
    pub kept: bool,
    pub provenance: Provenance,
    pub quantisation: Vec<Quantisation>,
    pub shape: [usize; 2],
}

/// Writes one synthetic sample as `root/<name>/` with a PNG per channel and
/// its label map.
pub fn write_synthetic(root: &Path, name: &str, s: &SyntheticSample) -> Result<PathBuf> {
    let dir = root.join(name);
    let (h, w) = (s.channels[0].h, s.channels[0].w);
    let quantisation = write_channels(&dir, &s.channels)?;
    write_u8(&dir.join("labels.png"), w, h, s.seg_slice().labels.data)?;
    let meta = SyntheticMeta {
        slice_index: s.slice_index,
        quality_score: s.quality_score,
        kept: s.kept,
        provenance: s.provenance.clone(),
        quantisation,
        shape: [h, w],
    };
    save_json_pretty(&dir.join(META), &meta)?;
    Ok(dir)
}

pub fn read_synthetic(dir: &Path) -> Result<SyntheticSample> {
    let meta: SyntheticMeta = load_json(&dir.join(META))?;
    let [h, w] = meta.shape;
    if meta.quantisation.len() != N_CHANNELS {
        return Err(Error::ShapeMismatch(format!("{} channels in {}", meta.quantisation.len(), dir.display())));
    }
    let channels = read_channels(dir, &meta.quantisation, h, w)?;
    let map = Grid2 { h, w, data: read_u8(&dir.join("labels.png"), h, w)? };
    Ok(SyntheticSample {
        channels,
        slice_index: meta.slice_index,
        binary_labels: masks_from_label_map(&map),
        quality_score: meta.quality_score,
        kept: meta.kept,
        provenance: meta.provenance,
    })
}

/// Numbered sample directories `s00000, s00001, ...` under `root`, in order.
pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META).is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn sample_name(i: usize) -> String {
    format!("s{i:05}")
}

/// Grid of MR channels, one tile per image, scaled to 8 bits per image.
pub fn contact_sheet(path: &Path, images: &[&Image], columns: usize) -> Result<()> {
    let Some(first) = images.first() else { return Err(Error::EmptyPool("contact sheet images")) };
    let (h, w) = (first.h, first.w);
    let cols = columns.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let (sh, sw) = (rows * (h + 1), cols * (w + 1));
    let mut buf = vec![0u8; sh * sw];
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        let lo = img.data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = img.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for y in 0..h.min(img.h) {
            for x in 0..w.min(img.w) {
                buf[(oy + y) * sw + ox + x] = (((img.get(y, x) - lo) / span) * 255.0).round() as u8;
            }
        }
    }
    write_u8(path, sw, sh, buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gansfer::Phase;
    use crate::phantom::{generate_phantom, Geometry};

    #[test]
    fn subject_round_trip() {
        let p = generate_phantom(3, 45.0, Cdr::Half, Geometry::default(), 0.02).roi_sample().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sub = write_subject(dir.path(), &p, [3.0, 2.5, 2.5], true).unwrap();
        let (back, labelled) = read_subject(&sub, None).unwrap();
        assert!(labelled);
        assert_eq!(back.labels, p.labels);
        assert_eq!((back.age, back.cdr, back.subject_id.as_str()), (p.age, p.cdr, p.subject_id.as_str()));
        let q = Quantisation::fit(&p.mr.data);
        let err = back.mr.data.iter().zip(&p.mr.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!((err as f64) <= q.scale * 0.5 + 1e-6, "{err}");
        assert_eq!(list_subjects(dir.path()).unwrap(), vec![sub.clone()]);

        let hidden = tempfile::tempdir().unwrap();
        let truth = tempfile::tempdir().unwrap();
        let sub = write_subject(hidden.path(), &p, [3.0, 2.5, 2.5], false).unwrap();
        write_labels(truth.path(), &p).unwrap();
        let (blind, has) = read_subject(&sub, None).unwrap();
        assert!(!has && blind.labels.iter().all(|m| m.count() == 0));
        let (seen, has) = read_subject(&sub, Some(&truth.path().join(&p.subject_id))).unwrap();
        assert!(has);
        assert_eq!(seen.labels, p.labels);
    }

    #[test]
    fn synthetic_round_trip() {
        let channels: Vec<Image> = (0..N_CHANNELS).map(|c| Image::from_fn(8, 8, |y, x| (y * 8 + x + c) as f32 / 10.0)).collect();
        let mut labels = vec![Grid2::filled(8, 8, false); N_STRUCTURES];
        labels[4].set(2, 3, true);
        let s = SyntheticSample {
            channels,
            slice_index: 5,
            binary_labels: labels,
            quality_score: 1.5,
            kept: false,
            provenance: Provenance { phase: Phase::P3, gan_id: 1, latent_seed: 9, index: 2 },
        };
        let dir = tempfile::tempdir().unwrap();
        let p = write_synthetic(dir.path(), "s0", &s).unwrap();
        let back = read_synthetic(&p).unwrap();
        assert_eq!(back.binary_labels, s.binary_labels);
        assert_eq!(back.provenance, s.provenance);
        assert!(back.channels[3].data.iter().zip(&s.channels[3].data).all(|(a, b)| (a - b).abs() < 1e-4));
        contact_sheet(&dir.path().join("sheet.png"), &[&s.channels[0], &s.channels[1], &s.channels[2]], 2).unwrap();
    }
}
