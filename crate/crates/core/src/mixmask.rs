//! Tile-permutation masks for group mixing and their stacked inverses.
//!
//! A [`MixingMask`] holds one permutation of group members per tile cell.
//! Masks use gather semantics: in cell `(i, j)` with permutation `sigma`,
//! output member `g` receives the tile of input member `sigma[g]`. Masks are
//! defined on tile indices, so the same mask applies to any resolution that
//! the tile grid divides.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorgrid::{copy_tile, tile_bounds, FeatureBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    /// Images per group.
    pub n_group: usize,
    /// Tiles along the vertical axis.
    pub n_tiles_h: usize,
    /// Tiles along the horizontal axis.
    pub n_tiles_w: usize,
    /// Probability of a feature-level mix after each eligible encoder stage.
    pub mix_prob: f64,
    pub seed: u64,
    /// Debug switch: every generated mask is the identity.
    pub identity_masks: bool,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            n_group: 4,
            n_tiles_h: 3,
            n_tiles_w: 4,
            mix_prob: 0.5,
            seed: 0,
            identity_masks: false,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_group < 2 {
            return Err(Error::config("mix.n_group", "must be at least 2"));
        }
        if self.n_tiles_h == 0 {
            return Err(Error::config("mix.n_tiles_h", "must be at least 1"));
        }
        if self.n_tiles_w == 0 {
            return Err(Error::config("mix.n_tiles_w", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return Err(Error::config("mix.mix_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.n_tiles_h * self.n_tiles_w
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixingMask {
    n_group: usize,
    grid_h: usize,
    grid_w: usize,
    perms: Vec<Vec<usize>>,
}

impl MixingMask {
    pub fn identity(n_group: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            n_group,
            grid_h,
            grid_w,
            perms: vec![(0..n_group).collect(); grid_h * grid_w],
        }
    }

    /// Builds a mask from row-major cell permutations, checking each is a bijection.
    pub fn from_perms(grid_h: usize, grid_w: usize, perms: Vec<Vec<usize>>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || perms.len() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "{} permutations for a {grid_h}x{grid_w} grid",
                perms.len()
            )));
        }
        let n_group = perms[0].len();
        for (cell, p) in perms.iter().enumerate() {
            if !is_permutation(p) || p.len() != n_group {
                return Err(Error::config(
                    "mask",
                    format!("cell {cell} holds {p:?}, not a permutation of 0..{n_group}"),
                ));
            }
        }
        Ok(Self {
            n_group,
            grid_h,
            grid_w,
            perms,
        })
    }

    pub fn n_group(&self) -> usize {
        self.n_group
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn cell(&self, i: usize, j: usize) -> &[usize] {
        &self.perms[i * self.grid_w + j]
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(g, &s)| g == s))
    }

    pub fn is_valid(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.len() == self.n_group && is_permutation(p))
    }

    /// Cellwise inverse permutation.
    pub fn invert(&self) -> MixingMask {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (g, &s) in p.iter().enumerate() {
                    inv[s] = g;
                }
                inv
            })
            .collect();
        MixingMask { perms, ..*self }
    }

    /// Cellwise composition: `mix(x, a.then(b)) == mix(mix(x, a), b)`.
    pub fn then(&self, next: &MixingMask) -> MixingMask {
        assert_eq!(self.grid(), next.grid());
        assert_eq!(self.n_group, next.n_group);
        let perms = self
            .perms
            .iter()
            .zip(&next.perms)
            .map(|(a, b)| b.iter().map(|&s| a[s]).collect())
            .collect();
        MixingMask { perms, ..*self }
    }

    /// Text form: one line per cell, `i j : s0 s1 ...`.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cells: Vec<(usize, usize, Vec<usize>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Corrupt(format!("mask line {}: `{line}`", lineno + 1));
            let (head, tail) = line.split_once(':').ok_or_else(bad)?;
            let idx: Vec<usize> = head
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let perm: Vec<usize> = tail
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            if idx.len() != 2 {
                return Err(bad());
            }
            cells.push((idx[0], idx[1], perm));
        }
        let grid_h = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let grid_w = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if cells.len() != grid_h * grid_w {
            return Err(Error::Corrupt(format!(
                "{} mask lines for a {grid_h}x{grid_w} grid",
                cells.len()
            )));
        }
        let mut perms = vec![Vec::new(); grid_h * grid_w];
        for (i, j, p) in cells {
            perms[i * grid_w + j] = p;
        }
        Self::from_perms(grid_h, grid_w, perms)
    }
}

impl fmt::Display for MixingMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.grid_h {
            for j in 0..self.grid_w {
                write!(f, "{i} {j} :")?;
                for s in self.cell(i, j) {
                    write!(f, " {s}")?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &s in p {
        if s >= p.len() || seen[s] {
            return false;
        }
        seen[s] = true;
    }
    true
}

/// Draws an independent uniform permutation for every tile cell.
pub fn generate_mask<R: Rng + ?Sized>(spec: &MixSpec, rng: &mut R) -> Result<MixingMask> {
    spec.validate()?;
    let mut mask = MixingMask::identity(spec.n_group, spec.n_tiles_h, spec.n_tiles_w);
    if !spec.identity_masks {
        for p in &mut mask.perms {
            p.shuffle(rng);
        }
    }
    Ok(mask)
}

/// Where in the network a mask was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixSite {
    Image,
    /// After encoder stage `k` (1-based).
    AfterStage(usize),
}

impl fmt::Display for MixSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixSite::Image => write!(f, "image"),
            MixSite::AfterStage(k) => write!(f, "stage{k}"),
        }
    }
}

/// Masks in application order; [`unmix`] consumes them last-to-first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskStack {
    entries: Vec<(MixSite, MixingMask)>,
}

impl MaskStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, site: MixSite, mask: MixingMask) {
        self.entries.push((site, mask));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(MixSite, MixingMask)] {
        &self.entries
    }

    pub fn masks(&self) -> impl DoubleEndedIterator<Item = &MixingMask> {
        self.entries.iter().map(|(_, m)| m)
    }

    /// The single mask equivalent to applying every entry in order.
    pub fn composed(&self) -> Option<MixingMask> {
        let mut it = self.masks();
        let first = it.next()?.clone();
        Some(it.fold(first, |acc, m| acc.then(m)))
    }
}

fn check_compat(batch: &FeatureBatch, mask: &MixingMask, groups: usize) -> Result<()> {
    let s = batch.shape();
    if s.n != mask.n_group * groups {
        return Err(Error::config(
            "mix.n_group",
            format!(
                "batch of {} members is not {groups} group(s) of {}",
                s.n, mask.n_group
            ),
        ));
    }
    Ok(())
}

/// Applies `masks[k]` to group `k` of a batch laid out as consecutive groups.
pub fn mix_groups(batch: &FeatureBatch, masks: &[MixingMask]) -> Result<FeatureBatch> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Shape("no masks given".into()))?;
    check_compat(batch, first, masks.len())?;
    let s = batch.shape();
    let (gh, gw) = first.grid();
    let tiles = tile_bounds(gh, gw, s.h, s.w)?;
    let mut out = batch.clone();
    for (k, mask) in masks.iter().enumerate() {
        if mask.grid() != (gh, gw) || mask.n_group != first.n_group {
            return Err(Error::Shape("masks within one mix call disagree".into()));
        }
        if mask.is_identity() {
            continue;
        }
        let base = k * mask.n_group;
        for (cell, region) in tiles.iter().enumerate() {
            for (g, &src) in mask.perms[cell].iter().enumerate() {
                if g != src {
                    copy_tile(batch, base + src, &mut out, base + g, *region)?;
                }
            }
        }
    }
    Ok(out)
}

/// Output member `g` of tile `(i, j)` takes input member `mask.cell(i, j)[g]`.
pub fn mix(batch: &FeatureBatch, mask: &MixingMask) -> Result<FeatureBatch> {
    mix_groups(batch, std::slice::from_ref(mask))
}

/// Applies the inverse of every stack entry, last to first.
pub fn unmix(batch: &FeatureBatch, stack: &MaskStack) -> Result<FeatureBatch> {
    let mut out = batch.clone();
    for mask in stack.masks().rev() {
        out = mix(&out, &mask.invert())?;
    }
    Ok(out)
}

/// Per-group [`unmix`]; all stacks must have equal depth.
pub fn unmix_groups(batch: &FeatureBatch, stacks: &[MaskStack]) -> Result<FeatureBatch> {
    let depth = stacks.first().map_or(0, MaskStack::len);
    if stacks.iter().any(|s| s.len() != depth) {
        return Err(Error::Shape("mask stacks of unequal depth".into()));
    }
    let mut out = batch.clone();
    for level in (0..depth).rev() {
        let inverses: Vec<MixingMask> = stacks.iter().map(|s| s.entries[level].1.invert()).collect();
        out = mix_groups(&out, &inverses)?;
    }
    Ok(out)
}
