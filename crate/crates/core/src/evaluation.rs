//! Overlap metrics, cross-validation folds, volume features, CDR
//! classification, paired testing and kernel smoothing.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data_model::{Cdr, DatasetSplit, Structure, N_STRUCTURES};
use crate::error::{Error, Result};
use crate::gansfer::derive_seed;
use crate::grid::Grid3;

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscReport {
    pub subject_id: String,
    /// In [`Structure::ALL`] order.
    pub per_structure: [f64; N_STRUCTURES],
    /// All seven structures merged into one foreground.
    pub overall: f64,
    pub mean_of_structures: f64,
    pub age: f64,
    pub cdr: Cdr,
}

/// Per-structure, merged-foreground and mean DSC of two label maps.
pub fn dsc_report(pred: &[u8], reference: &[u8], subject_id: &str, age: f64, cdr: Cdr) -> Result<DscReport> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!("label maps of {} and {} voxels", pred.len(), reference.len())));
    }
    if let Some(v) = pred.iter().chain(reference).find(|&&v| v as usize > N_STRUCTURES) {
        return Err(Error::ShapeMismatch(format!("label {v} outside 0..=7")));
    }
    let mut per = [0.0; N_STRUCTURES];
    for s in Structure::ALL {
        let a: Vec<bool> = pred.iter().map(|&v| v == s.label()).collect();
        let b: Vec<bool> = reference.iter().map(|&v| v == s.label()).collect();
        per[s.index()] = dsc(&a, &b)?;
    }
    let fa: Vec<bool> = pred.iter().map(|&v| v > 0).collect();
    let fb: Vec<bool> = reference.iter().map(|&v| v > 0).collect();
    Ok(DscReport {
        subject_id: subject_id.to_string(),
        per_structure: per,
        overall: dsc(&fa, &fb)?,
        mean_of_structures: per.iter().sum::<f64>() / N_STRUCTURES as f64,
        age,
        cdr,
    })
}

/// `k` folds with test sets of near-equal size; every id is tested once.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::BadCount("subject ids must be unique".into()));
    }
    if k < 2 || ids.len() < k {
        return Err(Error::BadCount(format!("{} subjects cannot form {k} folds", ids.len())));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let test: Vec<String> = order.iter().skip(f).step_by(k).cloned().collect();
            let train: Vec<String> = order.iter().filter(|id| !test.contains(id)).cloned().collect();
            DatasetSplit { fold_id: f, labelled_budget: train.len(), labelled_subset: train.clone(), train_ids: train, test_ids: test }
        })
        .collect())
}

/// Restricts a split's labelled subset to `budget` training subjects chosen by `seed`.
pub fn with_budget(split: &DatasetSplit, budget: usize, seed: u64) -> Result<DatasetSplit> {
    if budget == 0 || budget > split.train_ids.len() {
        return Err(Error::BadCount(format!("budget {budget} with {} training subjects", split.train_ids.len())));
    }
    let mut pick = split.train_ids.clone();
    pick.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pick.truncate(budget);
    Ok(DatasetSplit { labelled_budget: budget, labelled_subset: pick, ..split.clone() })
}

/// Per-structure volume: voxel count times voxel volume.
pub fn volumes_from_seg(map: &Grid3<u8>, spacing: [f64; 3]) -> [f64; N_STRUCTURES] {
    let voxel = spacing.iter().product::<f64>();
    let mut out = [0.0; N_STRUCTURES];
    for &v in &map.data {
        if v >= 1 && v as usize <= N_STRUCTURES {
            out[v as usize - 1] += voxel;
        }
    }
    out
}

/// Area under the ROC curve, counting ties as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// L2-regularised logistic regression fitted by Newton's method. The
/// intercept is not penalised.
#[derive(Clone, Debug)]
pub struct Logistic {
    pub weights: DVector<f64>,
    pub intercept: f64,
}

impl Logistic {
    pub fn fit(x: &DMatrix<f64>, y: &[bool], lambda: f64) -> Self {
        let (n, d) = x.shape();
        let mut design = DMatrix::from_element(n, d + 1, 1.0);
        design.view_mut((0, 1), (n, d)).copy_from(x);
        let t = DVector::from_iterator(n, y.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        let mut beta = DVector::zeros(d + 1);
        let mut penalty = DMatrix::identity(d + 1, d + 1) * lambda;
        penalty[(0, 0)] = 0.0;
        for _ in 0..100 {
            let p = (&design * &beta).map(|z| 1.0 / (1.0 + (-z).exp()));
            let w = p.map(|v| (v * (1.0 - v)).max(1e-10));
            let grad = design.transpose() * (&p - &t) + &penalty * &beta;
            let mut h = &penalty + DMatrix::identity(d + 1, d + 1) * 1e-9;
            for i in 0..n {
                let row = design.row(i);
                h += row.transpose() * row * w[i];
            }
            let Some(step) = h.lu().solve(&grad) else { break };
            beta -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        Self { intercept: beta[0], weights: beta.rows(1, d).into_owned() }
    }

    pub fn decision(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (x * &self.weights).iter().map(|z| z + self.intercept).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResult {
    /// Mean accuracy over repeats, in percent.
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub auc: f64,
    pub auc_std: f64,
    /// `(accuracy %, auc)` per repeat, each averaged over its folds.
    pub per_repeat: Vec<(f64, f64)>,
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[bool], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut fold = vec![0; labels.len()];
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = j % k;
        }
    }
    fold
}

fn standardise(train: &[&[f64]], test: &[&[f64]]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let s = (train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    let build = |rows: &[&[f64]]| DMatrix::from_fn(rows.len(), d, |i, j| (rows[i][j] - mean[j]) / sd[j]);
    (build(train), build(test))
}

/// Repeated stratified cross-validation of L2 logistic regression.
pub fn classify_cdr(features: &[Vec<f64>], labels: &[bool], repeats: usize, folds: usize, seed: u64) -> Result<ClassifierResult> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::ShapeMismatch("one label per feature row".into()));
    }
    if features.len() < 10 || repeats == 0 || folds < 2 {
        return Err(Error::BadCount(format!("{} rows, {repeats} repeats, {folds} folds", features.len())));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    if npos < folds || labels.len() - npos < folds {
        return Err(Error::DegenerateClass);
    }
    let mut per_repeat = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let fold = stratified_folds(labels, folds, &mut rng);
        let (mut accs, mut aucs) = (Vec::new(), Vec::new());
        for f in 0..folds {
            let tr: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
            let te: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] == f).collect();
            let rows = |ix: &[usize]| ix.iter().map(|&i| features[i].as_slice()).collect::<Vec<_>>();
            let (xtr, xte) = standardise(&rows(&tr), &rows(&te));
            let ytr: Vec<bool> = tr.iter().map(|&i| labels[i]).collect();
            let yte: Vec<bool> = te.iter().map(|&i| labels[i]).collect();
            let model = Logistic::fit(&xtr, &ytr, 1.0);
            let z = model.decision(&xte);
            let correct = z.iter().zip(&yte).filter(|(&s, &y)| (s > 0.0) == y).count();
            accs.push(100.0 * correct as f64 / yte.len() as f64);
            if let Some(a) = auc(&z, &yte) {
                aucs.push(a);
            }
        }
        per_repeat.push((mean(&accs), mean(&aucs)));
    }
    let a: Vec<f64> = per_repeat.iter().map(|p| p.0).collect();
    let u: Vec<f64> = per_repeat.iter().map(|p| p.1).collect();
    Ok(ClassifierResult { accuracy: mean(&a), accuracy_std: sd(&a), auc: mean(&u), auc_std: sd(&u), per_repeat })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

/// Two-tailed paired t-test at the 5% level. Identical inputs give p = 1.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::BadCount(format!("paired test needs equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = (d.len() - 1) as f64;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest { t: 0.0, df, p: 1.0, significant: false });
    }
    let s = sd(&d);
    if s == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let t = mean(&d) / (s / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0);
    Ok(TTest { t, df, p, significant: p < 0.05 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothPoint {
    pub x: f64,
    pub y: f64,
    /// Sum of kernel weights at `x`; tiny values mean no nearby data.
    pub weight: f64,
    pub degenerate: bool,
}

/// Weight sum below which a grid point counts as far from the data.
pub const DEGENERATE_WEIGHT: f64 = 1e-6;

/// Gaussian Nadaraya-Watson smoother on `n_grid` points spanning the data.
/// The bandwidth defaults to a tenth of the covariate range.
pub fn kernel_regression(x: &[f64], y: &[f64], bandwidth: Option<f64>, n_grid: usize) -> Result<Vec<SmoothPoint>> {
    if x.is_empty() || x.len() != y.len() || n_grid == 0 {
        return Err(Error::BadCount("kernel regression needs paired points and a grid".into()));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = bandwidth.unwrap_or(if hi > lo { 0.1 * (hi - lo) } else { 1.0 });
    if !(h > 0.0) {
        return Err(Error::Config("bandwidth must be positive".into()));
    }
    let grid: Vec<f64> =
        if n_grid == 1 { vec![(lo + hi) / 2.0] } else { (0..n_grid).map(|i| lo + (hi - lo) * i as f64 / (n_grid - 1) as f64).collect() };
    Ok(grid.into_iter().map(|g| smooth_at(x, y, h, g)).collect())
}

/// Nadaraya-Watson estimate at one query point.
pub fn smooth_at(x: &[f64], y: &[f64], h: f64, q: f64) -> SmoothPoint {
    let z: Vec<f64> = x.iter().map(|&xi| ((q - xi) / h).powi(2) * -0.5).collect();
    // Shift by the largest exponent so far-away queries still get a finite estimate.
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
    let sw: f64 = w.iter().sum();
    let est = w.iter().zip(y).map(|(wi, yi)| wi * yi).sum::<f64>() / sw;
    let weight = sw * zmax.exp();
    SmoothPoint { x: q, y: est.clamp(min(y), max(y)), weight, degenerate: weight < DEGENERATE_WEIGHT }
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dsc_examples() {
        let a = [true, true, true, true, false, false, false];
        let b = [true, true, true, false, true, true, true];
        assert_eq!(dsc(&a, &b).unwrap(), 0.6);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dsc(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dsc(&[true], &[true, false]).is_err());
    }

    #[test]
    fn report_examples() {
        let r: Vec<u8> = (0..64).map(|i| (i % 8) as u8).collect();
        let same = dsc_report(&r, &r, "s", 70.0, Cdr::One).unwrap();
        assert!(same.per_structure.iter().all(|&v| v == 1.0) && same.overall == 1.0 && same.mean_of_structures == 1.0);
        let bg = dsc_report(&[0; 64], &r, "s", 70.0, Cdr::One).unwrap();
        assert_eq!(bg.overall, 0.0);
        assert!(dsc_report(&[9; 64], &r, "s", 0.0, Cdr::Zero).is_err());
    }

    #[test]
    fn folds_cover_once() {
        let ids: Vec<String> = (0..30).map(|i| format!("s{i:02}")).collect();
        let f = make_folds(&ids, 5, 11).unwrap();
        assert_eq!(f.len(), 5);
        let mut tested: Vec<String> = f.iter().flat_map(|s| s.test_ids.clone()).collect();
        tested.sort();
        assert_eq!(tested, ids);
        assert!(f.iter().all(|s| s.train_ids.len() == 24 && s.test_ids.len() == 6));
        assert_eq!(f, make_folds(&ids, 5, 11).unwrap());
        let mut dup = ids.clone();
        dup[1] = dup[0].clone();
        assert!(matches!(make_folds(&dup, 5, 0), Err(Error::BadCount(_))));
        let b = with_budget(&f[0], 6, 3).unwrap();
        assert_eq!(b.labelled_subset.len(), 6);
        assert!(b.labelled_subset.iter().all(|id| f[0].train_ids.contains(id)));
    }

    #[test]
    fn volumes() {
        let mut m = Grid3::filled(2, 4, 4, 0u8);
        assert_eq!(volumes_from_seg(&m, [1.0; 3]), [0.0; 7]);
        for i in 0..10 {
            m.data[i] = 4;
        }
        assert_eq!(volumes_from_seg(&m, [1.0; 3])[3], 10.0);
        assert_eq!(volumes_from_seg(&m, [2.0, 1.0, 0.5])[3], 10.0);
    }

    #[test]
    fn ttest_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_ttest(&a, &a).unwrap().p, 1.0);
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x - 1.0 + 1e-9 * i as f64).collect();
        assert!(paired_ttest(&a, &b).unwrap().p < 1e-6);
        assert!(matches!(paired_ttest(&[2.0, 3.0], &[1.0, 2.0]), Err(Error::DegenerateVariance)));
        // Differences 1,2,3,4,5 -> t = 3 / (sqrt(2.5) / sqrt(5)) = 4.2426 with 4 df.
        let x = [2.0, 4.0, 6.0, 8.0, 10.0];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_ttest(&x, &y).unwrap();
        assert!((r.t - 18f64.sqrt()).abs() < 1e-12);
        // Table value: t(0.995, 4) = 4.604, t(0.99, 4) = 3.747, so 0.01 < p < 0.02.
        assert!(r.p > 0.01 && r.p < 0.02, "{}", r.p);
    }

    #[test]
    fn smoothing_examples() {
        let c = kernel_regression(&[0.0, 1.0, 5.0], &[2.0, 2.0, 2.0], None, 20).unwrap();
        assert!(c.iter().all(|p| (p.y - 2.0).abs() < 1e-12));
        let one = kernel_regression(&[3.0], &[7.0], Some(0.5), 5).unwrap();
        assert!(one.iter().all(|p| p.y == 7.0));
        let mid = smooth_at(&[0.0, 1.0], &[0.0, 1.0], 0.5, 0.5);
        assert!((mid.y - 0.5).abs() < 1e-12);
        let far = smooth_at(&[0.0], &[1.0], 0.1, 100.0);
        assert!(far.degenerate && far.y == 1.0);
    }

    #[test]
    fn auc_and_separable_classifier() {
        assert_eq!(auc(&[0.1, 0.2, 0.9, 0.8], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let feats: Vec<Vec<f64>> = labels.iter().enumerate().map(|(i, &l)| vec![if l { 5.0 } else { 0.0 } + (i % 5) as f64 * 0.1, (i * 7 % 11) as f64]).collect();
        let r = classify_cdr(&feats, &labels, 5, 5, 1).unwrap();
        assert!(r.auc > 0.99 && r.accuracy > 95.0, "{r:?}");
        assert!(matches!(classify_cdr(&feats, &[false; 40], 5, 5, 1), Err(Error::DegenerateClass)));
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            let d = dsc(&a, &b).unwrap();
            prop_assert_eq!(d, dsc(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn smoother_stays_in_range(pts in proptest::collection::vec((0.0f64..100.0, -5.0f64..5.0), 1..20)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for p in kernel_regression(&x, &y, None, 25).unwrap() {
                prop_assert!(p.y >= lo - 1e-9 && p.y <= hi + 1e-9);
            }
        }
    }
}
