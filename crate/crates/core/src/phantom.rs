//! Synthetic cohort with age- and CDR-dependent anatomy.
//!
//! Every subject is a brain ellipsoid with a grey-matter rim, lateral
//! ventricles, temporal horns and seven bilateral structure ellipsoids. The
//! ventricles grow with age and CDR and push the caudate laterally; the
//! hippocampus and amygdala shrink with CDR. Masks come from painting one
//! label map, so they are disjoint by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{extract_roi, normalize_intensity, Cdr, LabelledSample, RoiBox, Structure, N_STRUCTURES};
use crate::error::{Error, Result};
use crate::grid::{Grid3, Mask3, Volume};

/// Physical field of view of the ROI in millimetres, in-plane and axial.
pub const ROI_FIELD_MM: f64 = 80.0;
pub const ROI_DEPTH_MM: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// In-plane ROI size in pixels.
    pub roi_size: usize,
    /// Number of axial ROI slices.
    pub roi_depth: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { roi_size: 32, roi_depth: 20 }
    }
}

impl Geometry {
    /// Full-size 80x80x60 ROI.
    pub fn full_scale() -> Self {
        Self { roi_size: 80, roi_depth: 60 }
    }

    /// Pixel spacing `(axial, in-plane)` in mm.
    pub fn spacing(&self) -> (f64, f64) {
        (ROI_DEPTH_MM / self.roi_depth as f64, ROI_FIELD_MM / self.roi_size as f64)
    }

    /// Shape of the raw volume the ROI is cropped from.
    pub fn volume_shape(&self) -> [usize; 3] {
        let side = self.roi_size * 3 / 2;
        [self.roi_depth + 4, side, side]
    }

    pub fn roi(&self) -> RoiBox {
        RoiBox::centred(self.volume_shape(), self.roi_depth, self.roi_size, self.roi_size)
    }
}

/// Axis-aligned ellipsoid in millimetres, `(z, y, x)` order, relative to the volume centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Area of the axial cross-section through the centre.
    pub fn mid_area(&self) -> f64 {
        std::f64::consts::PI * self.radii[1] * self.radii[2]
    }

    fn mirrored(&self) -> Self {
        Self { center: [self.center[0], self.center[1], -self.center[2]], radii: self.radii }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureParams {
    pub structure: Structure,
    /// Left and right copies.
    pub parts: [Ellipsoid; 2],
    pub intensity: f64,
}

/// Ground-truth generative parameters; [`render`] turns them into images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub seed: u64,
    pub age: f64,
    pub cdr: Cdr,
    pub geometry: Geometry,
    pub ventricle_scale: f64,
    pub medial_temporal_scale: f64,
    pub wm_intensity: f64,
    pub gm_intensity: f64,
    pub csf_intensity: f64,
    pub noise_sigma: f64,
    pub brain: Ellipsoid,
    pub ventricles: [Ellipsoid; 2],
    pub temporal_horns: [Ellipsoid; 2],
    pub structures: Vec<StructureParams>,
}

impl PhantomParams {
    pub fn ventricle_area(&self) -> f64 {
        self.ventricles.iter().map(Ellipsoid::mid_area).sum()
    }

    pub fn structure_area(&self, s: Structure) -> f64 {
        self.structures.iter().find(|p| p.structure == s).map_or(0.0, |p| p.parts.iter().map(Ellipsoid::mid_area).sum())
    }

    pub fn structure(&self, s: Structure) -> &StructureParams {
        self.structures.iter().find(|p| p.structure == s).expect("every structure is generated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSample {
    /// Raw (unnormalised) full volume and masks.
    pub sample: LabelledSample,
    pub background: Mask3,
    pub params: PhantomParams,
}

impl PhantomSample {
    /// Normalised ROI crop, the form every downstream stage consumes.
    pub fn roi_sample(&self) -> Result<LabelledSample> {
        let roi = self.params.geometry.roi();
        let normalized = normalize_intensity(&self.sample.mr, &self.background)?;
        Ok(LabelledSample {
            subject_id: self.sample.subject_id.clone(),
            mr: extract_roi(&normalized, &roi)?,
            labels: self.sample.labels.iter().map(|m| extract_roi(m, &roi)).collect::<Result<_>>()?,
            age: self.sample.age,
            cdr: self.sample.cdr,
            is_repeat: false,
        })
    }
}

/// Ventricle scale: 1 at age 20 and CDR 0, strictly increasing in both.
pub fn ventricle_scale(age: f64, cdr: Cdr) -> f64 {
    1.0 + 0.01 * (age - 20.0) + 0.2 * cdr.value()
}

/// Hippocampus/amygdala scale: strictly decreasing in CDR and age.
pub fn medial_temporal_scale(age: f64, cdr: Cdr) -> f64 {
    (1.0 - 0.1 * cdr.value() - 0.0015 * (age - 20.0)).max(0.45)
}

/// Raw white-matter intensity before noise.
pub fn wm_intensity(age: f64, cdr: Cdr) -> f64 {
    0.8 - 0.0015 * (age - 20.0) - 0.02 * cdr.value()
}

pub fn phantom_params(seed: u64, age: f64, cdr: Cdr, geometry: Geometry, noise_sigma: f64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |scale: f64| rng.random_range(-1.0..=1.0) * scale;
    let shift = [jitter(1.5), jitter(2.0), jitter(1.5)];
    let sv = ventricle_scale(age, cdr);
    let sh = medial_temporal_scale(age, cdr);
    let wm = wm_intensity(age, cdr) + jitter(0.02);
    let at = |c: [f64; 3], r: [f64; 3], size: f64| Ellipsoid {
        center: [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]],
        radii: [r[0] * size, r[1] * size, r[2] * size],
    };
    let pair = |e: Ellipsoid| [e, e.mirrored_about(shift[2])];

    let vent = at([10.0, -6.0, 6.0 + jitter(0.5)], [10.0, 12.0 * sv.sqrt(), 4.0 * sv], 1.0);
    let horn_grow = 1.0 + 1.5 * (1.0 - sh);
    let horn = at([-18.0, 12.0, 28.0], [5.0 * horn_grow, 6.0 * horn_grow, 2.0 * horn_grow], 1.0);

    // Caudate hugs the lateral wall of the ventricle.
    let caudate_x = 6.0 + 4.0 * sv + 4.5;
    let specs: [(Structure, [f64; 3], [f64; 3], f64, f64); N_STRUCTURES] = [
        (Structure::Thalamus, [4.0, 14.0, 8.0], [9.0, 10.0, 7.0], 1.0, 0.18),
        (Structure::Putamen, [2.0, 0.0, 24.0], [10.0, 10.0, 4.5], 1.0, 0.20),
        (Structure::Pallidum, [0.0, 0.0, 18.0], [6.0, 6.0, 3.0], 1.0, 0.11),
        (Structure::Caudate, [8.0, -14.0, caudate_x], [9.0, 7.0, 4.5], 1.0, 0.25),
        (Structure::Accumbens, [-10.0, -18.0, 9.0], [5.0, 4.0, 3.5], 1.0, 0.28),
        (Structure::Hippocampus, [-18.0, 18.0, 22.0], [7.0, 12.0, 5.0], sh, 0.32),
        (Structure::Amygdala, [-20.0, 2.0, 21.0], [5.0, 5.0, 5.0], sh, 0.30),
    ];
    let mut structures: Vec<StructureParams> = specs
        .iter()
        .map(|&(structure, c, r, size, contrast)| {
            let size = size * (1.0 + jitter(0.06));
            let c = [c[0], c[1] + jitter(1.0), c[2] + jitter(0.75)];
            StructureParams { structure, parts: pair(at(c, r, size)), intensity: wm - contrast + jitter(0.015) }
        })
        .collect();
    structures.sort_by_key(|s| s.structure);

    PhantomParams {
        seed,
        age,
        cdr,
        geometry,
        ventricle_scale: sv,
        medial_temporal_scale: sh,
        wm_intensity: wm,
        gm_intensity: 0.5 + jitter(0.02),
        csf_intensity: 0.12 + jitter(0.01),
        noise_sigma,
        brain: at([0.0, 0.0, 0.0], [45.0, 58.0, 56.0], 1.0),
        ventricles: pair(vent),
        temporal_horns: pair(horn),
        structures,
    }
}

impl Ellipsoid {
    /// Mirror image about the sagittal plane `x = axis`.
    fn mirrored_about(&self, axis: f64) -> Self {
        let mut e = self.mirrored();
        e.center[2] += 2.0 * axis;
        e
    }
}

/// Order in which structures are painted; later ones win where they touch.
const PAINT_ORDER: [Structure; N_STRUCTURES] = [
    Structure::Thalamus,
    Structure::Putamen,
    Structure::Pallidum,
    Structure::Caudate,
    Structure::Accumbens,
    Structure::Hippocampus,
    Structure::Amygdala,
];

#[derive(Clone, Copy, PartialEq)]
enum Tissue {
    Background,
    Gm,
    Wm,
    Csf,
    Structure(Structure),
}

fn tissue_map(p: &PhantomParams) -> Grid3<u8> {
    let [d, h, w] = p.geometry.volume_shape();
    let (sz, sxy) = p.geometry.spacing();
    let (cz, cy, cx) = ((d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rim = Ellipsoid {
        center: p.brain.center,
        radii: [p.brain.radii[0] - 6.0, p.brain.radii[1] - 6.0, p.brain.radii[2] - 6.0],
    };
    let mut out = Grid3::filled(d, h, w, encode(Tissue::Background));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pt = [(z as f64 - cz) * sz, (y as f64 - cy) * sxy, (x as f64 - cx) * sxy];
                if !p.brain.contains(pt) {
                    continue;
                }
                let mut t = if rim.contains(pt) { Tissue::Wm } else { Tissue::Gm };
                if p.ventricles.iter().chain(&p.temporal_horns).any(|e| e.contains(pt)) {
                    t = Tissue::Csf;
                }
                for s in PAINT_ORDER {
                    if p.structure(s).parts.iter().any(|e| e.contains(pt)) {
                        t = Tissue::Structure(s);
                    }
                }
                out.set(z, y, x, encode(t));
            }
        }
    }
    out
}

fn encode(t: Tissue) -> u8 {
    match t {
        Tissue::Background => 0,
        Tissue::Gm => 1,
        Tissue::Wm => 2,
        Tissue::Csf => 3,
        Tissue::Structure(s) => 10 + s.index() as u8,
    }
}

/// Structure masks implied by `p`, in [`Structure::ALL`] order.
pub fn render_masks(p: &PhantomParams) -> Vec<Mask3> {
    let tissue = tissue_map(p);
    Structure::ALL.iter().map(|s| tissue.map(|&t| t == encode(Tissue::Structure(*s)))).collect()
}

/// Noise-free MR, structure masks and background mask implied by `p`.
pub fn render(p: &PhantomParams) -> (Volume, Vec<Mask3>, Mask3) {
    let tissue = tissue_map(p);
    let value = |t: u8| -> f64 {
        match t {
            0 => 0.0,
            1 => p.gm_intensity,
            2 => p.wm_intensity,
            3 => p.csf_intensity,
            s => p.structures[(s - 10) as usize].intensity,
        }
    };
    let mr = tissue.map(|&t| value(t) as f32);
    let masks = Structure::ALL.iter().map(|s| tissue.map(|&t| t == encode(Tissue::Structure(*s)))).collect();
    let background = tissue.map(|&t| t == 0);
    (mr, masks, background)
}

pub fn generate_phantom(seed: u64, age: f64, cdr: Cdr, geometry: Geometry, noise_sigma: f64) -> PhantomSample {
    let params = phantom_params(seed, age, cdr, geometry, noise_sigma);
    let (mut mr, labels, background) = render(&params);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        for (v, &bg) in mr.data.iter_mut().zip(&background.data) {
            if !bg {
                *v += normal.sample(&mut noise_rng) as f32;
            }
        }
    }
    let sample = LabelledSample { subject_id: format!("phantom-{seed}"), mr, labels, age, cdr, is_repeat: false };
    PhantomSample { sample, background, params }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Size of the unlabelled pool.
    pub n_subjects: usize,
    pub n_labelled: usize,
    pub age_range: (f64, f64),
    pub labelled_age_range: (f64, f64),
    pub cdr_distribution: Vec<(Cdr, f64)>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub geometry: Geometry,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            n_labelled: 30,
            age_range: (18.0, 96.0),
            labelled_age_range: (18.0, 30.0),
            cdr_distribution: vec![(Cdr::Zero, 0.77), (Cdr::Half, 0.16), (Cdr::One, 0.065), (Cdr::Two, 0.005)],
            noise_sigma: 0.02,
            seed: 0,
            geometry: Geometry::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self, base_res: usize) -> Result<()> {
        let total: f64 = self.cdr_distribution.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 || self.cdr_distribution.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::Config(format!("CDR probabilities sum to {total}")));
        }
        let r = self.geometry.roi_size;
        if base_res == 0 || r % base_res != 0 || !(r / base_res).is_power_of_two() {
            return Err(Error::NonDyadic { base: base_res, target: r });
        }
        if self.age_range.0 > self.age_range.1 || self.labelled_age_range.0 > self.labelled_age_range.1 {
            return Err(Error::Config("empty age range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub labelled: Vec<PhantomSample>,
    /// Masks are kept as evaluation ground truth; training code only reads `mr`.
    pub unlabelled: Vec<PhantomSample>,
}

fn sample_cdr(rng: &mut ChaCha8Rng, dist: &[(Cdr, f64)]) -> Cdr {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(c, p) in dist {
        acc += p;
        if u < acc {
            return c;
        }
    }
    dist.iter().rev().find(|(_, p)| *p > 0.0).map_or(Cdr::Zero, |(c, _)| *c)
}

/// Labelled pool: young, CDR 0. Unlabelled pool: full age range and CDR mix.
pub fn generate_cohort(spec: &PhantomSpec) -> Result<Cohort> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |n: usize, ages: (f64, f64), healthy: bool, rng: &mut ChaCha8Rng| -> Vec<PhantomSample> {
        (0..n)
            .map(|_| {
                let seed: u64 = rng.random();
                let age = if ages.1 > ages.0 { rng.random_range(ages.0..=ages.1) } else { ages.0 };
                let cdr = if healthy { Cdr::Zero } else { sample_cdr(rng, &spec.cdr_distribution) };
                generate_phantom(seed, age, cdr, spec.geometry, spec.noise_sigma)
            })
            .collect()
    };
    let labelled = draw(spec.n_labelled, spec.labelled_age_range, true, &mut rng);
    let unlabelled = draw(spec.n_subjects, spec.age_range, false, &mut rng);
    Ok(Cohort { labelled, unlabelled })
}

/// Subjects with ages drawn from `ages` and CDR levels drawn uniformly from `cdrs`.
pub fn generate_group(seed: u64, n: usize, ages: (f64, f64), cdrs: &[Cdr], geometry: Geometry, noise: f64) -> Vec<PhantomSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s: u64 = rng.random();
            let age = rng.random_range(ages.0..=ages.1);
            let cdr = cdrs[rng.random_range(0..cdrs.len())];
            generate_phantom(s, age, cdr, geometry, noise)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{estimate_wm_intensity, WmEstimation};
    use proptest::prelude::*;

    #[test]
    fn deterministic() {
        let a = generate_phantom(7, 40.0, Cdr::Half, Geometry::default(), 0.02);
        let b = generate_phantom(7, 40.0, Cdr::Half, Geometry::default(), 0.02);
        assert_eq!(a, b);
    }

    #[test]
    fn masks_regenerate_from_params() {
        let p = generate_phantom(3, 70.0, Cdr::One, Geometry::default(), 0.02);
        assert_eq!(render_masks(&p.params), p.sample.labels);
        p.sample.validate().unwrap();
    }

    #[test]
    fn ventricles_grow_with_age_and_hippocampus_shrinks_with_cdr() {
        let g = Geometry::default();
        let young = phantom_params(5, 20.0, Cdr::Zero, g, 0.02);
        let old = phantom_params(5, 90.0, Cdr::Zero, g, 0.02);
        assert!(old.ventricle_area() > young.ventricle_area());
        let healthy = phantom_params(5, 60.0, Cdr::Zero, g, 0.02);
        let ad = phantom_params(5, 60.0, Cdr::One, g, 0.02);
        assert!(ad.structure_area(Structure::Hippocampus) < healthy.structure_area(Structure::Hippocampus));
        // Caudate moves outward with the ventricles.
        let cx = |p: &PhantomParams| p.structure(Structure::Caudate).parts[0].center[2];
        assert!(cx(&old) > cx(&young));
    }

    #[test]
    fn wm_estimate_recovers_ground_truth() {
        let p = generate_phantom(11, 30.0, Cdr::Zero, Geometry::default(), 0.02);
        let roi = p.params.geometry.roi();
        let mr = extract_roi(&p.sample.mr, &roi).unwrap();
        let bg = extract_roi(&p.background, &roi).unwrap();
        for z in [5, 10, 15] {
            let fg = bg.plane(z).map(|&b| !b);
            let est = estimate_wm_intensity(&mr.plane(z), &fg, &WmEstimation::default()).unwrap() as f64;
            assert!((est - p.params.wm_intensity).abs() <= 0.02, "slice {z}: {est} vs {}", p.params.wm_intensity);
        }
    }

    #[test]
    fn cohort_pools() {
        let spec = PhantomSpec { n_subjects: 40, n_labelled: 10, seed: 2, ..PhantomSpec::default() };
        spec.validate(4).unwrap();
        let c = generate_cohort(&spec).unwrap();
        assert_eq!((c.labelled.len(), c.unlabelled.len()), (10, 40));
        let median = |v: &[PhantomSample]| {
            let mut a: Vec<f64> = v.iter().map(|s| s.sample.age).collect();
            a.sort_by(f64::total_cmp);
            a[a.len() / 2]
        };
        assert!(median(&c.labelled) < median(&c.unlabelled));
        assert!(c.labelled.iter().all(|s| s.sample.cdr == Cdr::Zero));

        let healthy = PhantomSpec { n_subjects: 1, n_labelled: 0, cdr_distribution: vec![(Cdr::Zero, 1.0)], ..spec };
        let c = generate_cohort(&healthy).unwrap();
        assert_eq!(c.unlabelled.len(), 1);
        assert_eq!(c.unlabelled[0].sample.cdr, Cdr::Zero);
    }

    #[test]
    fn spec_validation() {
        let bad = PhantomSpec { cdr_distribution: vec![(Cdr::Zero, 0.5)], ..PhantomSpec::default() };
        assert!(bad.validate(4).is_err());
        let odd = PhantomSpec { geometry: Geometry { roi_size: 24, roi_depth: 20 }, ..PhantomSpec::default() };
        assert!(matches!(odd.validate(4), Err(Error::NonDyadic { .. })));
        assert!(PhantomSpec { geometry: Geometry::full_scale(), ..PhantomSpec::default() }.validate(5).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn monotone_covariates_and_non_empty_disjoint_masks(
            seed in any::<u64>(),
            age in 18.0f64..96.0,
            dage in 0.5f64..20.0,
            cdr_i in 0usize..4,
        ) {
            let g = Geometry::default();
            let cdr = Cdr::ALL[cdr_i];
            let a = phantom_params(seed, age, cdr, g, 0.02);
            let b = phantom_params(seed, (age + dage).min(96.0).max(age + 0.1), cdr, g, 0.02);
            prop_assert!(b.ventricle_area() > a.ventricle_area());
            let c = phantom_params(seed, age, Cdr::ALL[cdr_i + 1], g, 0.02);
            prop_assert!(c.structure_area(Structure::Hippocampus) < a.structure_area(Structure::Hippocampus));
            prop_assert!(c.structure_area(Structure::Amygdala) < a.structure_area(Structure::Amygdala));

            let masks = render_masks(&a);
            let roi = g.roi();
            for (s, m) in Structure::ALL.iter().zip(&masks) {
                let inside = extract_roi(m, &roi).unwrap();
                prop_assert!(inside.count() > 0, "{s:?} empty at age {age} cdr {cdr:?}");
            }
            for i in 0..masks[0].data.len() {
                prop_assert!(masks.iter().filter(|m| m.data[i]).count() <= 1);
            }
        }
    }
}
