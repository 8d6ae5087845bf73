use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2D grid, `data[y * w + x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

/// 3D grid stored plane by plane, `data[(z * h + y) * w + x]`; `z` is the axial index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

pub type Image = Grid2<f32>;
pub type Mask = Grid2<bool>;
pub type Volume = Grid3<f32>;
pub type Mask3 = Grid3<bool>;

impl<T: Clone> Grid2<T> {
    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Self { h, w, data: vec![value; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!("{} values for a {h}x{w} grid", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.w + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Grid2<U>) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid2<U> {
        Grid2 { h: self.h, w: self.w, data: self.data.iter().map(f).collect() }
    }

    /// Left/right mirror.
    pub fn flip_lr(&self) -> Self {
        Self::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x).clone())
    }
}

pub fn check_same_shape<A: Clone, B: Clone>(a: &Grid2<A>, b: &Grid2<B>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Grid2 { h: self.h, w: self.w, data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect() }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Grid2 { h: self.h, w: self.w, data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect() }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }
}

impl<T: Clone> Grid3<T> {
    pub fn filled(d: usize, h: usize, w: usize, value: T) -> Self {
        Self { d, h, w, data: vec![value; d * h * w] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> &T {
        &self.data[self.idx(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.idx(z, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, z: usize) -> Grid2<T> {
        let n = self.h * self.w;
        Grid2 { h: self.h, w: self.w, data: self.data[z * n..(z + 1) * n].to_vec() }
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid3<U> {
        Grid3 { d: self.d, h: self.h, w: self.w, data: self.data.iter().map(f).collect() }
    }
}

impl Mask3 {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask3) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }
}
