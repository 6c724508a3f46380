//! Synthetic upper-body stick figures with Gaussian heatmap targets.
//!
//! Keypoints: 0 head (root), 1 neck, 2/3 left/right shoulder, 4/5 left/right
//! elbow, 6/7 left/right wrist. The figure faces the camera, so its left side
//! is drawn on the image right.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorgrid::{FeatureBatch, Shape4};

pub const DATASET_MAGIC: &[u8; 4] = b"SPD1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    pub parent: Vec<Option<usize>>,
    /// (min, max) bone length in pixels.
    pub limb_length_range: (f64, f64),
    /// Limb line thickness in pixels.
    pub thickness: f64,
    /// Index pairs exchanged by a horizontal flip.
    pub flip_pairs: Vec<(usize, usize)>,
    /// Probability that a non-root keypoint is marked invisible.
    pub invisible_prob: f64,
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self {
            parent: vec![None, Some(0), Some(1), Some(1), Some(2), Some(3), Some(4), Some(5)],
            limb_length_range: (5.0, 10.0),
            thickness: 2.0,
            flip_pairs: vec![(2, 3), (4, 5), (6, 7)],
            invisible_prob: 0.1,
        }
    }
}

impl SkeletonSpec {
    pub fn n_keypoints(&self) -> usize {
        self.parent.len()
    }

    /// Parents must precede children, which also rules out cycles.
    pub fn validate(&self) -> Result<()> {
        if self.parent.is_empty() || self.parent[0].is_some() {
            return Err(Error::config("data.skeleton", "keypoint 0 must be the root"));
        }
        for (k, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => return Err(Error::config("data.skeleton", format!("keypoint {k} needs a parent with a smaller index"))),
            }
        }
        let (lo, hi) = self.limb_length_range;
        if !(0.0..=hi).contains(&lo) {
            return Err(Error::config("data.limb_length_range", format!("invalid range ({lo}, {hi})")));
        }
        for &(a, b) in &self.flip_pairs {
            if a >= self.n_keypoints() || b >= self.n_keypoints() {
                return Err(Error::config("data.flip_pairs", format!("pair ({a}, {b}) out of range")));
            }
        }
        if !(0.0..=1.0).contains(&self.invisible_prob) {
            return Err(Error::config("data.invisible_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Direction of bone `k` relative to its parent bone, or absolute for the
    /// neck and shoulders. Angles are in image coordinates (y down).
    fn bone_angle<R: Rng + ?Sized>(&self, k: usize, parent_angle: f64, rng: &mut R) -> f64 {
        use std::f64::consts::FRAC_PI_2;
        match k {
            1 => FRAC_PI_2 + rng.gen_range(-0.4..0.4),
            2 => parent_angle - FRAC_PI_2 + rng.gen_range(-0.3..0.3),
            3 => parent_angle + FRAC_PI_2 + rng.gen_range(-0.3..0.3),
            _ => parent_angle + rng.gen_range(-1.4..1.4),
        }
    }
}

/// Where the heatmap Gaussian is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Nearest heatmap pixel; the peak sample is exactly 1.
    #[default]
    Rounded,
    /// Exact scaled location.
    Subpixel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSpec {
    pub image_size: (usize, usize),
    pub heatmap_size: (usize, usize),
    /// In heatmap pixels.
    pub sigma: f64,
    pub centering: Centering,
    /// Background noise amplitude.
    pub noise: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            image_size: (48, 64),
            heatmap_size: (12, 16),
            sigma: 2.0,
            centering: Centering::Rounded,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    /// (x, y) in pixels.
    pub keypoints: Vec<(f64, f64)>,
    pub visibility: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    /// Shape (1, 1, h, w), values in [0, 1].
    pub image: FeatureBatch,
    pub keypoints: Vec<(f64, f64)>,
    pub visibility: Vec<bool>,
    /// Shape (1, K, h', w').
    pub heatmaps: FeatureBatch,
}

impl PoseSample {
    pub fn n_keypoints(&self) -> usize {
        self.keypoints.len()
    }
}

/// Pose with the root at the origin, before placement.
fn sample_relative<R: Rng + ?Sized>(spec: &SkeletonSpec, rng: &mut R) -> Vec<(f64, f64)> {
    let k = spec.n_keypoints();
    let mut pts = vec![(0.0, 0.0); k];
    let mut angle = vec![0.0; k];
    let (lo, hi) = spec.limb_length_range;
    for j in 1..k {
        let p = spec.parent[j].expect("validated");
        angle[j] = spec.bone_angle(j, angle[p], rng);
        let len = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        pts[j] = (pts[p].0 + len * angle[j].cos(), pts[p].1 + len * angle[j].sin());
    }
    pts
}

/// Samples a pose whose keypoints all lie at least one pixel inside an image
/// of `size = (h, w)`. Falls back to centring the figure if it never fits.
pub fn sample_pose<R: Rng + ?Sized>(spec: &SkeletonSpec, size: (usize, usize), rng: &mut R) -> Pose {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let margin = 1.0;
    let mut rel = sample_relative(spec, rng);
    for _ in 0..100 {
        let (x0, x1, y0, y1) = bbox(&rel);
        let (free_x, free_y) = ((w - 1.0 - 2.0 * margin) - (x1 - x0), (h - 1.0 - 2.0 * margin) - (y1 - y0));
        if free_x >= 0.0 && free_y >= 0.0 {
            let ox = margin - x0 + rng.gen_range(0.0..=free_x);
            let oy = margin - y0 + rng.gen_range(0.0..=free_y);
            let keypoints = rel.iter().map(|(x, y)| (x + ox, y + oy)).collect();
            let visibility = (0..rel.len())
                .map(|k| k == 0 || !rng.gen_bool(spec.invisible_prob))
                .collect();
            return Pose { keypoints, visibility };
        }
        rel = sample_relative(spec, rng);
    }
    let (x0, x1, y0, y1) = bbox(&rel);
    let (ox, oy) = ((w - 1.0) / 2.0 - (x0 + x1) / 2.0, (h - 1.0) / 2.0 - (y0 + y1) / 2.0);
    let keypoints: Vec<(f64, f64)> = rel.iter().map(|(x, y)| (x + ox, y + oy)).collect();
    let visibility = keypoints.iter().map(|&p| in_bounds(p, size)).collect();
    Pose { keypoints, visibility }
}

fn bbox(pts: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    pts.iter().fold((f64::MAX, f64::MIN, f64::MAX, f64::MIN), |(a, b, c, d), &(x, y)| {
        (a.min(x), b.max(x), c.min(y), d.max(y))
    })
}

fn in_bounds((x, y): (f64, f64), (h, w): (usize, usize)) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Anti-aliased limbs plus a blob per visible joint, on a noisy background.
pub fn render_image<R: Rng + ?Sized>(pose: &Pose, spec: &SkeletonSpec, render: &RenderSpec, rng: &mut R) -> FeatureBatch {
    let (h, w) = render.image_size;
    let mut img = FeatureBatch::zeros(1, 1, h, w);
    let kp = &pose.keypoints;
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let mut v: f64 = 0.0;
            for (j, par) in spec.parent.iter().enumerate() {
                if let Some(par) = *par {
                    let d = segment_distance(p, kp[par], kp[j]);
                    v = v.max(0.6 * (spec.thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0));
                }
            }
            for (j, &(kx, ky)) in kp.iter().enumerate() {
                if !pose.visibility[j] {
                    continue;
                }
                let s: f64 = if j == 0 { 2.5 } else { 1.2 };
                let d2 = (p.0 - kx).powi(2) + (p.1 - ky).powi(2);
                v = v.max((-d2 / (2.0 * s * s)).exp());
            }
            if render.noise > 0.0 {
                v += rng.gen_range(0.0..render.noise);
            }
            img.set(0, 0, y, x, v.clamp(0.0, 1.0));
        }
    }
    img
}

/// Image pixel coordinate to heatmap pixel coordinate, treating pixels as
/// unit squares whose centres sit at integer positions.
pub fn to_heatmap_coords((x, y): (f64, f64), image: (usize, usize), heatmap: (usize, usize)) -> (f64, f64) {
    (
        (x + 0.5) * heatmap.1 as f64 / image.1 as f64 - 0.5,
        (y + 0.5) * heatmap.0 as f64 / image.0 as f64 - 0.5,
    )
}

pub fn from_heatmap_coords((x, y): (f64, f64), image: (usize, usize), heatmap: (usize, usize)) -> (f64, f64) {
    (
        (x + 0.5) * image.1 as f64 / heatmap.1 as f64 - 0.5,
        (y + 0.5) * image.0 as f64 / heatmap.0 as f64 - 0.5,
    )
}

/// `exp(-d^2 / (2 sigma^2))` per visible keypoint; invisible channels are zero.
pub fn render_heatmaps(keypoints: &[(f64, f64)], visibility: &[bool], render: &RenderSpec) -> FeatureBatch {
    let (hh, hw) = render.heatmap_size;
    let k = keypoints.len();
    let mut out = FeatureBatch::zeros(1, k, hh, hw);
    let inv = 1.0 / (2.0 * render.sigma * render.sigma);
    for j in 0..k {
        if !visibility[j] {
            continue;
        }
        let (mut cx, mut cy) = to_heatmap_coords(keypoints[j], render.image_size, render.heatmap_size);
        if render.centering == Centering::Rounded {
            cx = cx.round();
            cy = cy.round();
        }
        for y in 0..hh {
            for x in 0..hw {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                out.set(0, j, y, x, (-d2 * inv).exp());
            }
        }
    }
    out
}

/// Full sample from a fresh pose.
pub fn generate_sample<R: Rng + ?Sized>(spec: &SkeletonSpec, render: &RenderSpec, rng: &mut R) -> PoseSample {
    let pose = sample_pose(spec, render.image_size, rng);
    let image = render_image(&pose, spec, render, rng);
    let heatmaps = render_heatmaps(&pose.keypoints, &pose.visibility, render);
    PoseSample {
        image,
        keypoints: pose.keypoints,
        visibility: pose.visibility,
        heatmaps,
    }
}

/// One shared geometric transform about the image centre:
/// `p' = c + scale * (flip(p) - c) + shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub shift: (f64, f64),
    pub scale: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { shift: (0.0, 0.0), scale: 1.0, flip: false };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Shift uniform in `[-max_shift, max_shift]` per axis, log-uniform scale.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, max_shift: f64, max_scale: f64, flip_prob: f64) -> Self {
        let shift = if max_shift > 0.0 {
            (rng.gen_range(-max_shift..=max_shift), rng.gen_range(-max_shift..=max_shift))
        } else {
            (0.0, 0.0)
        };
        let scale = if max_scale > 1.0 {
            rng.gen_range(-max_scale.ln()..=max_scale.ln()).exp()
        } else {
            1.0
        };
        AffineParams { shift, scale, flip: rng.gen_bool(flip_prob.clamp(0.0, 1.0)) }
    }

    pub fn apply(&self, (x, y): (f64, f64), (h, w): (usize, usize)) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let x = if self.flip { w as f64 - 1.0 - x } else { x };
        (cx + self.scale * (x - cx) + self.shift.0, cy + self.scale * (y - cy) + self.shift.1)
    }

    pub fn invert_point(&self, (x, y): (f64, f64), (h, w): (usize, usize)) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let sx = cx + (x - self.shift.0 - cx) / self.scale;
        let sy = cy + (y - self.shift.1 - cy) / self.scale;
        (if self.flip { w as f64 - 1.0 - sx } else { sx }, sy)
    }

    /// The same transform expressed in heatmap pixels.
    pub fn to_heatmap_space(&self, image: (usize, usize), heatmap: (usize, usize)) -> Self {
        AffineParams {
            shift: (
                self.shift.0 * heatmap.1 as f64 / image.1 as f64,
                self.shift.1 * heatmap.0 as f64 / image.0 as f64,
            ),
            ..*self
        }
    }

    /// Bilinear warp of every channel of every item; samples outside are zero.
    pub fn warp(&self, src: &FeatureBatch) -> FeatureBatch {
        if self.is_identity() {
            return src.clone();
        }
        let s = src.shape();
        let mut out = FeatureBatch::zeros(s.n, s.c, s.h, s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                let (sx, sy) = self.invert_point((x as f64, y as f64), (s.h, s.w));
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let taps = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let plane = src.plane(n, c);
                        let mut v = 0.0;
                        for &(tx, ty, wgt) in &taps {
                            if wgt != 0.0 && tx >= 0.0 && ty >= 0.0 && (tx as usize) < s.w && (ty as usize) < s.h {
                                v += wgt * plane[ty as usize * s.w + tx as usize];
                            }
                        }
                        out.set(n, c, y, x, v);
                    }
                }
            }
        }
        out
    }
}

/// Swaps heatmap channels (or keypoint entries) of each flip pair.
pub fn swap_flip_pairs<T>(items: &mut [T], pairs: &[(usize, usize)]) {
    for &(a, b) in pairs {
        items.swap(a, b);
    }
}

/// Applies `params` to image and keypoints and re-renders the heatmaps.
/// Keypoints pushed outside the image become invisible.
pub fn apply_affine(sample: &PoseSample, params: &AffineParams, spec: &SkeletonSpec, render: &RenderSpec) -> PoseSample {
    if params.is_identity() {
        return sample.clone();
    }
    let size = render.image_size;
    let image = params.warp(&sample.image);
    let mut keypoints: Vec<(f64, f64)> = sample.keypoints.iter().map(|&p| params.apply(p, size)).collect();
    let mut visibility: Vec<bool> = sample
        .visibility
        .iter()
        .zip(&keypoints)
        .map(|(&v, &p)| v && in_bounds(p, size))
        .collect();
    if params.flip {
        swap_flip_pairs(&mut keypoints, &spec.flip_pairs);
        swap_flip_pairs(&mut visibility, &spec.flip_pairs);
    }
    let heatmaps = render_heatmaps(&keypoints, &visibility, render);
    PoseSample { image, keypoints, visibility, heatmaps }
}

/// Draws random affine parameters and applies them.
pub fn affine_weak_augment<R: Rng + ?Sized>(
    sample: &PoseSample,
    rng: &mut R,
    aug: &AugmentSpec,
    spec: &SkeletonSpec,
    render: &RenderSpec,
) -> PoseSample {
    let params = AffineParams::sample(rng, aug.max_shift, aug.max_scale, aug.flip_prob);
    apply_affine(sample, &params, spec, render)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    /// Pixels.
    pub max_shift: f64,
    /// Scale drawn from `[1/max_scale, max_scale]`.
    pub max_scale: f64,
    pub flip_prob: f64,
    pub cutout_joints: usize,
    /// Side of the square zeroed around each chosen joint, in pixels.
    pub cutout_patch: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_shift: 4.0,
            max_scale: 1.1,
            flip_prob: 0.5,
            cutout_joints: 2,
            cutout_patch: 9,
        }
    }
}

/// Zeroes a `patch x patch` square (clipped to the image) around up to
/// `n_joints` distinct visible keypoints chosen uniformly. Works on item
/// `index` of `images`.
pub fn cutout_at_joints<R: Rng + ?Sized>(
    images: &mut FeatureBatch,
    index: usize,
    keypoints: &[(f64, f64)],
    visibility: &[bool],
    n_joints: usize,
    patch: usize,
    rng: &mut R,
) {
    let visible: Vec<usize> = (0..keypoints.len()).filter(|&k| visibility[k]).collect();
    let n = n_joints.min(visible.len());
    if n == 0 || patch == 0 {
        return;
    }
    let s = images.shape();
    let half = (patch / 2) as i64;
    for pick in sample_indices(rng, visible.len(), n) {
        let (kx, ky) = keypoints[visible[pick]];
        let (cx, cy) = (kx.round() as i64, ky.round() as i64);
        let (y0, x0) = ((cy - half).max(0), (cx - half).max(0));
        let (y1, x1) = ((cy - half + patch as i64).min(s.h as i64), (cx - half + patch as i64).min(s.w as i64));
        for c in 0..s.c {
            for y in y0..y1 {
                for x in x0..x1 {
                    images.set(index, c, y as usize, x as usize, 0.0);
                }
            }
        }
    }
}

/// Image-only Cutout at keypoints; labels untouched.
pub fn joint_cutout<R: Rng + ?Sized>(sample: &PoseSample, rng: &mut R, n_joints: usize, patch: usize) -> PoseSample {
    let mut out = sample.clone();
    cutout_at_joints(&mut out.image, 0, &sample.keypoints, &sample.visibility, n_joints, patch, rng);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub seed: u64,
    pub skeleton: SkeletonSpec,
    pub render: RenderSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_labeled: 100,
            n_unlabeled: 1900,
            n_val: 500,
            seed: 0,
            skeleton: SkeletonSpec::default(),
            render: RenderSpec::default(),
        }
    }
}

/// Labeled, unlabeled and validation samples. Unlabeled ground truth is kept
/// for analysis and persistence but [`DatasetSplit::train_view`] hides it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<PoseSample>,
    unlabeled: Vec<PoseSample>,
    pub val: Vec<PoseSample>,
}

/// What a trainer may see: labeled samples and unlabeled images only.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub labeled: &'a [PoseSample],
    unlabeled: &'a [PoseSample],
}

impl<'a> TrainView<'a> {
    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn unlabeled_image(&self, i: usize) -> &'a FeatureBatch {
        &self.unlabeled[i].image
    }
}

impl DatasetSplit {
    pub fn new(labeled: Vec<PoseSample>, unlabeled: Vec<PoseSample>, val: Vec<PoseSample>) -> Self {
        Self { labeled, unlabeled, val }
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            labeled: &self.labeled,
            unlabeled: &self.unlabeled,
        }
    }

    /// Unlabeled samples including their hidden labels. Not for training.
    pub fn unlabeled_with_labels(&self) -> &[PoseSample] {
        &self.unlabeled
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.labeled.len(), self.unlabeled.len(), self.val.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        for n in [self.labeled.len(), self.unlabeled.len(), self.val.len()] {
            put_u32(&mut out, n as u32);
        }
        for s in self.labeled.iter().chain(&self.unlabeled).chain(&self.val) {
            let (is, hs) = (s.image.shape(), s.heatmaps.shape());
            for v in [s.n_keypoints(), is.h, is.w, hs.h, hs.w] {
                put_u32(&mut out, v as u32);
            }
            for v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &(x, y) in &s.keypoints {
                out.extend_from_slice(&x.to_le_bytes());
                out.extend_from_slice(&y.to_le_bytes());
            }
            out.extend(s.visibility.iter().map(|&v| v as u8));
            for v in s.heatmaps.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Corrupt("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Corrupt(format!("unsupported dataset version {version}")));
        }
        let counts = [r.u32()?, r.u32()?, r.u32()?];
        let mut parts: Vec<Vec<PoseSample>> = Vec::new();
        for n in counts {
            let mut v = Vec::new();
            for _ in 0..n {
                v.push(r.sample()?);
            }
            parts.push(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let val = parts.pop().unwrap_or_default();
        let unlabeled = parts.pop().unwrap_or_default();
        let labeled = parts.pop().unwrap_or_default();
        Ok(Self { labeled, unlabeled, val })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "dataset truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn sample(&mut self) -> Result<PoseSample> {
        let k = self.u32()? as usize;
        let (h, w, hh, hw) = (self.u32()? as usize, self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
        if k == 0 || h == 0 || w == 0 || hh == 0 || hw == 0 {
            return Err(Error::Corrupt("zero dimension in sample header".into()));
        }
        let image = FeatureBatch::from_vec(Shape4::new(1, 1, h, w), self.f64s(h * w)?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        let kp = self.f64s(2 * k)?;
        let keypoints = kp.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let visibility = self
            .take(k)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Corrupt(format!("visibility byte {other}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let heatmaps = FeatureBatch::from_vec(Shape4::new(1, k, hh, hw), self.f64s(k * hh * hw)?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(PoseSample { image, keypoints, visibility, heatmaps })
    }
}

/// Deterministic in `cfg`: sample `i` of the concatenated
/// (labeled, unlabeled, val) list uses its own stream of the seeded generator.
pub fn generate_dataset(cfg: &DataConfig) -> Result<DatasetSplit> {
    cfg.skeleton.validate()?;
    let total = cfg.n_labeled + cfg.n_unlabeled + cfg.n_val;
    let mut all: Vec<PoseSample> = (0..total)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_sample(&cfg.skeleton, &cfg.render, &mut rng)
        })
        .collect();
    let val = all.split_off(cfg.n_labeled + cfg.n_unlabeled);
    let unlabeled = all.split_off(cfg.n_labeled);
    Ok(DatasetSplit::new(all, unlabeled, val))
}

/// Stacks the images of `samples` into one batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a FeatureBatch>) -> Result<FeatureBatch> {
    let v: Vec<&FeatureBatch> = images.into_iter().collect();
    FeatureBatch::concat(&v)
}
