//! Binary morphology on 2D masks and metric dilation of 3D masks. All 2D
//! operations use 4-connectivity. Dilation sees the outside of the grid as
//! background and erosion as foreground, so closing never loses and opening
//! never gains pixels.

use std::collections::VecDeque;

use crate::grid::{Grid2, Image, Mask, Mask3};

const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

fn at(m: &Mask, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < m.h && (x as usize) < m.w && *m.get(y as usize, x as usize)
}

/// Threshold maximising between-class variance over a 256-bin histogram.
/// Pixels strictly above the threshold form the upper class. `None` when the
/// values do not split into two non-empty classes.
pub fn otsu_threshold(values: &[f32]) -> Option<f32> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) as f64 / BINS as f64;
    let bin = |v: f32| (((v - lo) as f64 / width) as usize).min(BINS - 1);
    let mut hist = [0u64; BINS];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(f64, usize)> = None;
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, i));
        }
    }
    let (between, i) = best?;
    if between <= 0.0 {
        return None;
    }
    // Largest lower-class value, so `v > t` is exactly the upper class.
    values.iter().copied().filter(|&v| bin(v) <= i).reduce(f32::max)
}

/// Otsu binarisation, falling back to half the maximum when Otsu degenerates.
/// A channel with no positive value gives an empty mask.
pub fn binarize(channel: &Image) -> Mask {
    binarize_above(channel, 0.0)
}

/// [`binarize`] with the threshold raised to at least `floor`. Otsu always
/// splits a channel in two, so a structure-free channel holding only
/// low-level noise needs the floor to come out empty.
pub fn binarize_above(channel: &Image, floor: f32) -> Mask {
    let max = channel.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > floor.max(0.0)) {
        return channel.map(|_| false);
    }
    let t = otsu_threshold(&channel.data).unwrap_or(max / 2.0).max(floor);
    channel.map(|&v| v > t)
}

pub fn dilate(m: &Mask) -> Mask {
    Grid2::from_fn(m.h, m.w, |y, x| CROSS.iter().any(|&(dy, dx)| at(m, y as isize + dy, x as isize + dx)))
}

pub fn erode(m: &Mask) -> Mask {
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < m.h && (x as usize) < m.w;
    Grid2::from_fn(m.h, m.w, |y, x| {
        CROSS.iter().all(|&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            !inside(ny, nx) || at(m, ny, nx)
        })
    })
}

pub fn closing(m: &Mask) -> Mask {
    erode(&dilate(m))
}

pub fn opening(m: &Mask) -> Mask {
    dilate(&erode(m))
}

/// Background pixels reachable from the grid border.
pub fn outside(m: &Mask) -> Mask {
    let mut seen = m.map(|_| false);
    let mut queue = VecDeque::new();
    for y in 0..m.h {
        for x in 0..m.w {
            if (y == 0 || x == 0 || y + 1 == m.h || x + 1 == m.w) && !*m.get(y, x) {
                seen.set(y, x, true);
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for &(dy, dx) in &CROSS[1..] {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny as usize >= m.h || nx as usize >= m.w {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !*m.get(ny, nx) && !*seen.get(ny, nx) {
                seen.set(ny, nx, true);
                queue.push_back((ny, nx));
            }
        }
    }
    seen
}

/// Sets every background pixel not connected to the border.
pub fn fill_holes(m: &Mask) -> Mask {
    outside(m).map(|&o| !o)
}

/// Interior background pixels.
pub fn holes(m: &Mask) -> Mask {
    let out = outside(m);
    Grid2 { h: m.h, w: m.w, data: m.data.iter().zip(&out.data).map(|(&f, &o)| !f && !o).collect() }
}

/// Foreground components as lists of flat indices.
pub fn components(m: &Mask) -> Vec<Vec<usize>> {
    let mut label = vec![false; m.data.len()];
    let mut out = Vec::new();
    for start in 0..m.data.len() {
        if !m.data[start] || label[start] {
            continue;
        }
        label[start] = true;
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            let (y, x) = (comp[i] / m.w, comp[i] % m.w);
            for &(dy, dx) in &CROSS[1..] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if at(m, ny, nx) {
                    let j = ny as usize * m.w + nx as usize;
                    if !label[j] {
                        label[j] = true;
                        comp.push(j);
                    }
                }
            }
            i += 1;
        }
        out.push(comp);
    }
    out
}

pub fn remove_small_components(m: &Mask, min_area: usize) -> Mask {
    let mut out = m.map(|_| false);
    for c in components(m).into_iter().filter(|c| c.len() >= min_area) {
        for i in c {
            out.data[i] = true;
        }
    }
    out
}

/// Every voxel within `radius` (same unit as `spacing`, given as z, y, x)
/// of a set voxel.
pub fn dilate_metric(m: &Mask3, radius: f64, spacing: [f64; 3]) -> Mask3 {
    let reach = |s: f64| (radius / s).floor() as isize;
    let (rz, ry, rx) = (reach(spacing[0]), reach(spacing[1]), reach(spacing[2]));
    let mut ball = Vec::new();
    for dz in -rz..=rz {
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let d2 = (dz as f64 * spacing[0]).powi(2) + (dy as f64 * spacing[1]).powi(2) + (dx as f64 * spacing[2]).powi(2);
                if d2 <= radius * radius {
                    ball.push((dz, dy, dx));
                }
            }
        }
    }
    let mut out = m.map(|_| false);
    for z in 0..m.d {
        for y in 0..m.h {
            for x in 0..m.w {
                if !*m.get(z, y, x) {
                    continue;
                }
                for &(dz, dy, dx) in &ball {
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if nz >= 0 && ny >= 0 && nx >= 0 && (nz as usize) < m.d && (ny as usize) < m.h && (nx as usize) < m.w {
                        out.set(nz as usize, ny as usize, nx as usize, true);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Grid2::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn otsu_splits_bimodal() {
        let v = [0.0, 0.0, 0.1, 1.0, 1.1, 0.9];
        let t = otsu_threshold(&v).unwrap();
        assert!(t >= 0.1 && t < 0.9, "{t}");
        assert_eq!(v.iter().filter(|&&x| x > t).count(), 3);
        assert!(otsu_threshold(&[2.0; 5]).is_none());
    }

    #[test]
    fn binarize_fallback_and_empty() {
        let flat = Image::filled(3, 3, 0.0);
        assert_eq!(binarize(&flat).count(), 0);
        let one = Image::filled(2, 2, 0.5);
        assert_eq!(binarize(&one).count(), 4);
    }

    #[test]
    fn hole_filling() {
        let m = mask(&["#####", "#...#", "#.#.#", "#...#", "#####"]);
        assert_eq!(holes(&m).count(), 8);
        assert_eq!(fill_holes(&m).count(), 25);
        let open = mask(&["##.##", "#...#", "#####"]);
        assert_eq!(fill_holes(&open), open);
    }

    #[test]
    fn opening_removes_spur() {
        let m = mask(&[".......", ".###...", ".#######", ".###...", "......."].map(|r| &r[..7]));
        let o = opening(&m);
        assert!(!*o.get(2, 5) && !*o.get(2, 6));
        assert!(*o.get(2, 2));
    }

    #[test]
    fn components_and_removal() {
        let m = mask(&["##..#", "##..#", "....#", "#...."]);
        let mut sizes: Vec<usize> = components(&m).iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 3, 4]);
        assert_eq!(remove_small_components(&m, 4).count(), 4);
    }

    #[test]
    fn metric_disc_area() {
        let mut m = Grid3::filled(1, 41, 41, false);
        m.set(0, 20, 20, true);
        let d = dilate_metric(&m, 10.0, [1.0, 1.0, 1.0]);
        let area = d.count() as f64;
        let exact = std::f64::consts::PI * 100.0;
        // Lattice points inside a radius-10 circle stay within one pixel ring.
        assert!((area - exact).abs() < 2.0 * std::f64::consts::PI * 10.0, "{area}");
        let zero = dilate_metric(&m, 0.0, [1.0, 1.0, 1.0]);
        assert_eq!(zero, m);
    }

    #[test]
    fn metric_dilation_is_anisotropic() {
        let mut m = Grid3::filled(5, 9, 9, false);
        m.set(2, 4, 4, true);
        let d = dilate_metric(&m, 3.0, [3.0, 1.0, 1.0]);
        assert!(*d.get(1, 4, 4) && *d.get(3, 4, 4));
        assert!(!*d.get(1, 4, 5));
        assert!(*d.get(2, 4, 7) && !*d.get(2, 4, 8));
    }

    proptest! {
        #[test]
        fn fill_leaves_no_holes(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = Grid2 { h: 8, w: 8, data: bits };
            let f = fill_holes(&m);
            prop_assert_eq!(holes(&f).count(), 0);
            prop_assert!(m.is_subset_of(&f));
            prop_assert!(opening(&m).is_subset_of(&m));
            prop_assert!(m.is_subset_of(&closing(&m)));
            prop_assert_eq!(holes(&opening(&f)).count(), 0);
        }
    }
}
