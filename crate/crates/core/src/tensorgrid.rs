//! Dense batched `(n, c, h, w)` arrays and exact tile partitioning.
//!
//! Storage is a flat row-major `Vec<f64>`: element `(n, c, y, x)` lives at
//! `((n * c_count + c) * h + y) * w + x`. The dataset and checkpoint formats
//! rely on this layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one group member (`c * h * w`).
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    shape: Shape4,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::filled(Shape4::new(n, c, h, w), 0.0)
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn filled(shape: Shape4, value: f64) -> Self {
        assert!(
            shape.n > 0 && shape.c > 0 && shape.h > 0 && shape.w > 0,
            "FeatureBatch dimensions must be >= 1, got {shape}"
        );
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::Shape(format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        debug_assert!(n < s.n && c < s.c && y < s.h && x < s.w);
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// All channels of group member `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.shape.plane_len();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    /// Stacks single items (each with `n == 1`, or any `n`) along the batch axis.
    pub fn concat(parts: &[&FeatureBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero batches".into()))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape(format!("cannot concatenate {s} with {first}")));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(Shape4::new(n, first.c, first.h, first.w), data)
    }

    /// Copies members `range` into a new batch.
    pub fn slice_items(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape.n {
            return Err(Error::OutOfRange {
                index: start + count,
                len: self.shape.n,
            });
        }
        let len = self.shape.item_len();
        let data = self.data[start * len..(start + count) * len].to_vec();
        Self::from_vec(Shape4 { n: count, ..self.shape }, data)
    }

    pub fn same_shape(&self, other: &FeatureBatch) -> bool {
        self.shape == other.shape
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn add_assign(&mut self, other: &FeatureBatch) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureBatch) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`, equates identical NaNs).
    pub fn bit_eq(&self, other: &FeatureBatch) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileRegion {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl TileRegion {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

/// Splits an `h x w` plane into `grid_h x grid_w` equal tiles, row-major.
pub fn tile_bounds(grid_h: usize, grid_w: usize, h: usize, w: usize) -> Result<Vec<TileRegion>> {
    if grid_h == 0 || h == 0 || h % grid_h != 0 {
        return Err(Error::config(
            "height",
            format!("{h} rows not divisible into {grid_h} tiles"),
        ));
    }
    if grid_w == 0 || w == 0 || w % grid_w != 0 {
        return Err(Error::config(
            "width",
            format!("{w} columns not divisible into {grid_w} tiles"),
        ));
    }
    let (th, tw) = (h / grid_h, w / grid_w);
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for i in 0..grid_h {
        for j in 0..grid_w {
            out.push(TileRegion {
                y0: i * th,
                y1: (i + 1) * th,
                x0: j * tw,
                x1: (j + 1) * tw,
            });
        }
    }
    Ok(out)
}

/// Copies every channel of `region` from `src[src_index]` into `dst[dst_index]`.
pub fn copy_tile(
    src: &FeatureBatch,
    src_index: usize,
    dst: &mut FeatureBatch,
    dst_index: usize,
    region: TileRegion,
) -> Result<()> {
    let (s, d) = (src.shape(), dst.shape());
    if (s.c, s.h, s.w) != (d.c, d.h, d.w) {
        return Err(Error::Shape(format!(
            "copy_tile between incompatible shapes {s} and {d}"
        )));
    }
    if src_index >= s.n {
        return Err(Error::OutOfRange { index: src_index, len: s.n });
    }
    if dst_index >= d.n {
        return Err(Error::OutOfRange { index: dst_index, len: d.n });
    }
    if region.y0 >= region.y1 || region.x0 >= region.x1 || region.y1 > s.h || region.x1 > s.w {
        return Err(Error::Shape(format!("tile {region:?} outside {}x{} plane", s.h, s.w)));
    }
    let width = region.width();
    for c in 0..s.c {
        for y in region.y0..region.y1 {
            let from = src.offset(src_index, c, y, region.x0);
            let to = dst.offset(dst_index, c, y, region.x0);
            dst.data_mut()[to..to + width].copy_from_slice(&src.data()[from..from + width]);
        }
    }
    Ok(())
}
