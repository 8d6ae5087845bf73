//! Tables and plots from a finished (or partly finished) result tree.
//!
//! Output is byte-identical for identical inputs: every collection is
//! ordered and every number is printed with a fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_model::{Cdr, Structure, N_STRUCTURES};
use crate::error::{Error, Result};
use crate::evaluation::{kernel_regression, paired_ttest, DscReport};
use crate::experiment::{cells_of, ClassificationOutcome, EvalResult, ExperimentConfig};
use crate::gan::checkpoint::load_json;
use crate::segmenter::Ratio;

/// Columns of the segmentation table after the row keys.
pub fn table1_header() -> Vec<String> {
    let mut h = vec!["Total".to_string()];
    h.extend(Structure::ALL.iter().map(|s| format!("{}.", s.abbrev())));
    h.push("Avg".into());
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub table1: PathBuf,
    pub table2: PathBuf,
    pub plots: Vec<PathBuf>,
    /// Mean overall DSC per `(budget, ratio label, set)`.
    pub overall: BTreeMap<(usize, String, String), f64>,
}

/// Mean of `total, per-structure..., avg` over reports.
fn mean_row(reports: &[&DscReport]) -> Vec<f64> {
    let n = reports.len().max(1) as f64;
    let mut row = vec![reports.iter().map(|r| r.overall).sum::<f64>() / n];
    for s in 0..N_STRUCTURES {
        row.push(reports.iter().map(|r| r.per_structure[s]).sum::<f64>() / n);
    }
    row.push(reports.iter().map(|r| r.mean_of_structures).sum::<f64>() / n);
    row
}

struct Loaded {
    ratio: Ratio,
    budget: usize,
    eval: EvalResult,
    classification: Option<ClassificationOutcome>,
}

fn load_results(cfg: &ExperimentConfig) -> Result<Vec<Loaded>> {
    let layout = cfg.layout();
    let mut out = Vec::new();
    for cell in cells_of(cfg) {
        for ratio in cfg.ratios()? {
            let dir = layout.seg(cell, ratio);
            let eval_path = dir.join("dsc.json");
            if !eval_path.is_file() {
                continue;
            }
            let cls = dir.join("classification.json");
            out.push(Loaded {
                ratio,
                budget: cell.budget,
                eval: load_json(&eval_path)?,
                classification: if cls.is_file() { Some(load_json(&cls)?) } else { None },
            });
        }
    }
    Ok(out)
}

/// Writes `tables/table1.csv`, `tables/table2.csv` and the plots.
pub fn report(cfg: &ExperimentConfig) -> Result<ReportSummary> {
    let results = load_results(cfg)?;
    if results.is_empty() {
        return Err(Error::MissingResults(format!("no evaluation results under {}", cfg.output_root.display())));
    }
    let layout = cfg.layout();
    let tables = layout.tables();
    let plots = layout.plots();
    fs::create_dir_all(&tables).map_err(Error::io(&tables))?;
    fs::create_dir_all(&plots).map_err(Error::io(&plots))?;
    let ratios = cfg.ratios()?;
    let mut budgets = cfg.budgets.clone();
    budgets.sort();
    budgets.dedup();

    // Segmentation table.
    let mut overall = BTreeMap::new();
    let mut t1 = format!("budget,ratio,set,n,{}\n", table1_header().join(","));
    for &b in &budgets {
        for &r in &ratios {
            for set in ["in_domain", "out_of_domain"] {
                let reports: Vec<&DscReport> = results
                    .iter()
                    .filter(|l| l.budget == b && l.ratio == r)
                    .flat_map(|l| if set == "in_domain" { &l.eval.in_domain } else { &l.eval.out_of_domain })
                    .collect();
                if reports.is_empty() {
                    continue;
                }
                let row = mean_row(&reports);
                overall.insert((b, r.label(), set.to_string()), row[0]);
                let cells: Vec<String> = row.iter().map(|v| format!("{:.2}", v * 100.0)).collect();
                writeln!(t1, "{b},{},{set},{},{}", r.label(), reports.len(), cells.join(",")).expect("string write");
            }
        }
    }
    let table1 = tables.join("table1.csv");
    fs::write(&table1, t1).map_err(Error::io(&table1))?;

    // Classification table. Per-repeat values are averaged over folds; the
    // repeat seeds are shared, so each ratio is compared with the baseline
    // of the same budget by a paired test over repeats.
    let mut t2 = String::from("budget,ratio,folds,accuracy,accuracy_std,auc,auc_std,p_accuracy,p_auc,significant\n");
    for &b in &budgets {
        let per_ratio: Vec<(Ratio, Vec<(f64, f64)>, usize)> = ratios
            .iter()
            .filter_map(|&r| {
                let runs: Vec<&Vec<(f64, f64)>> = results
                    .iter()
                    .filter(|l| l.budget == b && l.ratio == r)
                    .filter_map(|l| match &l.classification {
                        Some(ClassificationOutcome::Done(c)) => Some(&c.per_repeat),
                        _ => None,
                    })
                    .collect();
                let n = runs.iter().map(|v| v.len()).min()?;
                let avg = (0..n)
                    .map(|i| {
                        let k = runs.len() as f64;
                        (runs.iter().map(|v| v[i].0).sum::<f64>() / k, runs.iter().map(|v| v[i].1).sum::<f64>() / k)
                    })
                    .collect();
                Some((r, avg, runs.len()))
            })
            .collect();
        let baseline = per_ratio.iter().find(|(r, _, _)| *r == Ratio::Baseline).map(|(_, v, _)| v.clone());
        for (r, reps, folds) in &per_ratio {
            let acc: Vec<f64> = reps.iter().map(|p| p.0).collect();
            let auc: Vec<f64> = reps.iter().map(|p| p.1).collect();
            let (ma, sa) = mean_sd(&acc);
            let (mu, su) = mean_sd(&auc);
            let (pa, pu) = match (&baseline, *r == Ratio::Baseline) {
                (Some(base), false) if base.len() == reps.len() => {
                    let ba: Vec<f64> = base.iter().map(|p| p.0).collect();
                    let bu: Vec<f64> = base.iter().map(|p| p.1).collect();
                    (paired_ttest(&acc, &ba).ok().map(|t| t.p), paired_ttest(&auc, &bu).ok().map(|t| t.p))
                }
                _ => (None, None),
            };
            let fmt = |p: Option<f64>| p.map_or(String::new(), |p| format!("{p:.4}"));
            let sig = pa.is_some_and(|p| p < 0.05) || pu.is_some_and(|p| p < 0.05);
            writeln!(t2, "{b},{},{folds},{ma:.2},{sa:.2},{:.2},{:.2},{},{},{sig}", r.label(), mu * 100.0, su * 100.0, fmt(pa), fmt(pu))
                .expect("string write");
        }
    }
    let table2 = tables.join("table2.csv");
    fs::write(&table2, t2).map_err(Error::io(&table2))?;

    let mut written = Vec::new();
    written.push(ratio_study(&plots, &budgets, &ratios, &overall)?);
    written.push(covariate_plot(&plots, &results, &budgets, &ratios, Covariate::Age)?);
    written.push(covariate_plot(&plots, &results, &budgets, &ratios, Covariate::Cdr)?);
    Ok(ReportSummary { table1, table2, plots: written, overall })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Minimal SVG canvas with a fixed plotting area and data-space mapping.
struct Svg {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

impl Svg {
    fn new(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let mut s = Self { body: String::new(), x, y };
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        writeln!(s.body, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0).unwrap();
        writeln!(s.body, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{title}</text>"#, (x0 + x1) / 2.0).unwrap();
        writeln!(s.body, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{xlabel}</text>"#, (x0 + x1) / 2.0, H - 10.0).unwrap();
        writeln!(
            s.body,
            r#"<text x="15" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {})">{ylabel}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0
        )
        .unwrap();
        for i in 0..=4 {
            let v = y.0 + (y.1 - y.0) * i as f64 / 4.0;
            let py = s.py(v);
            writeln!(s.body, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#, x0 - 4.0, py + 3.0).unwrap();
        }
        s
    }

    fn px(&self, v: f64) -> f64 {
        let span = if self.x.1 > self.x.0 { self.x.1 - self.x.0 } else { 1.0 };
        LEFT + (v - self.x.0) / span * (W - RIGHT - LEFT)
    }

    fn py(&self, v: f64) -> f64 {
        let span = if self.y.1 > self.y.0 { self.y.1 - self.y.0 } else { 1.0 };
        H - BOTTOM - (v - self.y.0) / span * (H - BOTTOM - TOP)
    }

    fn xtick(&mut self, v: f64, label: &str) {
        let px = self.px(v);
        writeln!(self.body, r#"<text x="{px:.1}" y="{}" text-anchor="middle" font-size="10">{label}</text>"#, H - BOTTOM + 14.0).unwrap();
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let p: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y))).collect();
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        writeln!(self.body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, p.join(" ")).unwrap();
    }

    fn rect(&mut self, x0: f64, x1: f64, y: f64, color: &str) {
        let (a, b) = (self.px(x0), self.px(x1));
        let (top, base) = (self.py(y), self.py(self.y.0));
        writeln!(self.body, r#"<rect x="{a:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#, b - a, base - top).unwrap();
    }

    fn legend(&mut self, i: usize, label: &str, color: &str) {
        let y = TOP + 14.0 * i as f64 + 8.0;
        let x = W - RIGHT + 10.0;
        writeln!(self.body, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 8.0).unwrap();
        writeln!(self.body, r#"<text x="{}" y="{y}" font-size="10">{label}</text>"#, x + 14.0).unwrap();
    }

    fn save(&self, path: &Path) -> Result<()> {
        let doc = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        );
        fs::write(path, doc).map_err(Error::io(path))
    }
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.01);
    ((lo - pad).max(0.0), (hi + pad).min(1.0))
}

/// Bar chart of mean overall DSC per ratio, one bar per budget. Uses the
/// out-of-domain set when present, else the held-out labelled subjects.
fn ratio_study(dir: &Path, budgets: &[usize], ratios: &[Ratio], overall: &BTreeMap<(usize, String, String), f64>) -> Result<PathBuf> {
    let value = |b: usize, r: Ratio| {
        overall.get(&(b, r.label(), "out_of_domain".into())).or_else(|| overall.get(&(b, r.label(), "in_domain".into()))).copied()
    };
    let (lo, hi) = y_range(budgets.iter().flat_map(|&b| ratios.iter().filter_map(move |&r| value(b, r))));
    let mut svg = Svg::new("Ratio study", "real:synthetic ratio", "overall DSC", (0.0, ratios.len() as f64), (lo, hi));
    let width = 0.8 / budgets.len().max(1) as f64;
    for (ri, &r) in ratios.iter().enumerate() {
        svg.xtick(ri as f64 + 0.5, &r.label());
        for (bi, &b) in budgets.iter().enumerate() {
            if let Some(v) = value(b, r) {
                let x0 = ri as f64 + 0.1 + bi as f64 * width;
                svg.rect(x0, x0 + width * 0.9, v, PALETTE[bi % PALETTE.len()]);
            }
        }
    }
    for (bi, &b) in budgets.iter().enumerate() {
        svg.legend(bi, &format!("N={b}"), PALETTE[bi % PALETTE.len()]);
    }
    let path = dir.join("ratio_study.svg");
    svg.save(&path)?;
    Ok(path)
}

#[derive(Clone, Copy, PartialEq)]
enum Covariate {
    Age,
    Cdr,
}

/// Smoothed overall DSC against age, or mean DSC per CDR level, one curve
/// per `(budget, ratio)` on the out-of-domain subjects.
fn covariate_plot(dir: &Path, results: &[Loaded], budgets: &[usize], ratios: &[Ratio], cov: Covariate) -> Result<PathBuf> {
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for &b in budgets {
        for &r in ratios {
            let pts: Vec<(f64, f64)> = results
                .iter()
                .filter(|l| l.budget == b && l.ratio == r)
                .flat_map(|l| l.eval.out_of_domain.iter())
                .map(|d| (if cov == Covariate::Age { d.age } else { d.cdr.value() }, d.overall))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let curve = match cov {
                Covariate::Age => {
                    let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
                    kernel_regression(&x, &y, None, 60)?.into_iter().filter(|p| !p.degenerate).map(|p| (p.x, p.y)).collect()
                }
                Covariate::Cdr => Cdr::ALL
                    .iter()
                    .filter_map(|c| {
                        let v: Vec<f64> = pts.iter().filter(|p| p.0 == c.value()).map(|p| p.1).collect();
                        (!v.is_empty()).then(|| (c.value(), v.iter().sum::<f64>() / v.len() as f64))
                    })
                    .collect(),
            };
            curves.push((format!("N={b} {}", r.label()), curve));
        }
    }
    let xs = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (x0, x1) = if x0.is_finite() { (x0, x1) } else { (0.0, 1.0) };
    let (lo, hi) = y_range(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)));
    let (title, xlabel, name) = match cov {
        Covariate::Age => ("DSC against age", "age (years)", "dsc_vs_age.svg"),
        Covariate::Cdr => ("DSC against CDR", "CDR", "dsc_vs_cdr.svg"),
    };
    let mut svg = Svg::new(title, xlabel, "overall DSC", (x0, x1), (lo, hi));
    for i in 0..=4 {
        let v = x0 + (x1 - x0) * i as f64 / 4.0;
        svg.xtick(v, &format!("{v:.1}"));
    }
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.polyline(c, color, label.ends_with("baseline"));
        svg.legend(i, label, color);
    }
    let path = dir.join(name);
    svg.save(&path)?;
    Ok(path)
}
