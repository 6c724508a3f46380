//! Four-stage encoder, two-block decoder heatmap network with mix hook points.
//!
//! Each encoder stage is `conv3x3(stride) -> batch norm -> ReLU`. The decoder is
//! `upsample x2 -> conv -> batch norm -> ReLU` followed by
//! `upsample x2 -> conv` producing one heatmap per keypoint.
//!
//! In the mixed (student) forward pass the input group is tile-mixed before
//! stage 1, further masks may be applied after intermediate stages, and all
//! masks are undone in reverse order at the configured unmix site. Feature
//! mixes are only eligible at stage boundaries strictly before the unmix site.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mixmask::{generate_mask, mix_groups, MaskStack, MixSite, MixSpec, MixingMask};
use crate::nnkit::{
    relu_backward, relu_forward, upsample2_backward, upsample2_forward, BatchNorm2d, BnCache, BnMode,
    Checkpoint, Conv2d, ConvCache, Parameterized,
};
use crate::tensorgrid::{tile_bounds, FeatureBatch};

pub const STAGES: usize = 4;
const BLOCK_NAMES: [&str; 6] = ["enc1", "enc2", "enc3", "enc4", "dec1", "head"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnmixSite {
    AfterLayer2,
    AfterEncoder,
    AfterDecoder,
}

impl UnmixSite {
    /// Number of encoder stages whose output may receive a feature-level mix.
    pub fn eligible_stages(self) -> usize {
        match self {
            UnmixSite::AfterLayer2 => 1,
            UnmixSite::AfterEncoder => 3,
            UnmixSite::AfterDecoder => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnmixSite::AfterLayer2 => "after_layer2",
            UnmixSite::AfterEncoder => "after_encoder",
            UnmixSite::AfterDecoder => "after_decoder",
        }
    }
}

impl std::str::FromStr for UnmixSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "after_layer2" => Ok(UnmixSite::AfterLayer2),
            "after_encoder" => Ok(UnmixSite::AfterEncoder),
            "after_decoder" => Ok(UnmixSite::AfterDecoder),
            other => Err(Error::config("net.unmix_site", format!("unknown site `{other}`"))),
        }
    }
}

/// Image-level mixing only (MUM) or image-level plus stochastic feature mixes (Pose-MUM).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixMode {
    Mum,
    PoseMum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetConfig {
    pub stage_channels: [usize; STAGES],
    pub stage_strides: [usize; STAGES],
    pub decoder_channels: usize,
    pub n_keypoints: usize,
    /// `(h, w)` of the input images.
    pub input_size: (usize, usize),
    /// `(h, w)` of the predicted heatmaps.
    pub heatmap_size: (usize, usize),
    pub unmix_site: UnmixSite,
    /// Whether Pose-MUM also mixes at image level before stage 1.
    pub pose_mum_image_mix: bool,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 32],
            stage_strides: [2, 2, 2, 2],
            decoder_channels: 32,
            n_keypoints: 8,
            input_size: (48, 64),
            heatmap_size: (12, 16),
            unmix_site: UnmixSite::AfterEncoder,
            pose_mum_image_mix: true,
        }
    }
}

impl PoseNetConfig {
    /// Spatial size after each encoder stage.
    pub fn stage_sizes(&self) -> [(usize, usize); STAGES] {
        let mut out = [(0, 0); STAGES];
        let (mut h, mut w) = self.input_size;
        for k in 0..STAGES {
            let s = self.stage_strides[k];
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
            out[k] = (h, w);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_strides.iter().any(|s| *s != 1 && *s != 2) {
            return Err(Error::config("net.stage_strides", "each stride must be 1 or 2"));
        }
        if self.stage_channels.iter().any(|c| *c == 0) || self.decoder_channels == 0 {
            return Err(Error::config("net.stage_channels", "channel counts must be positive"));
        }
        if self.n_keypoints == 0 {
            return Err(Error::config("net.n_keypoints", "must be positive"));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::config("net.input_size", "must be positive"));
        }
        let (h, w) = self.stage_sizes()[STAGES - 1];
        if (4 * h, 4 * w) != self.heatmap_size {
            return Err(Error::config(
                "net.heatmap_size",
                format!(
                    "decoder produces {}x{} but heatmap_size is {}x{}",
                    4 * h,
                    4 * w,
                    self.heatmap_size.0,
                    self.heatmap_size.1
                ),
            ));
        }
        Ok(())
    }

    /// Checks divisibility at every site where a mask may be applied or undone.
    pub fn validate_mixing(&self, spec: &MixSpec) -> Result<()> {
        spec.validate()?;
        let sizes = self.stage_sizes();
        let check = |what: &str, (h, w): (usize, usize)| {
            tile_bounds(spec.n_tiles_h, spec.n_tiles_w, h, w)
                .map(|_| ())
                .map_err(|e| Error::config("mix.n_tiles", format!("{what} ({h}x{w}): {e}")))
        };
        check("input", self.input_size)?;
        for (k, size) in sizes.iter().enumerate().take(self.unmix_site.eligible_stages()) {
            check(&format!("stage {} output", k + 1), *size)?;
        }
        match self.unmix_site {
            UnmixSite::AfterLayer2 => check("unmix after stage 2", sizes[1]),
            UnmixSite::AfterEncoder => check("unmix after stage 4", sizes[3]),
            UnmixSite::AfterDecoder => check("unmix after decoder", self.heatmap_size),
        }
    }
}

/// Per-site mask choices for one forward call; one mask per group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MixPlan {
    pub image: Option<Vec<MixingMask>>,
    pub stages: [Option<Vec<MixingMask>>; STAGES],
}

impl MixPlan {
    pub fn none() -> Self {
        Self::default()
    }

    /// Draws the plan for `mode`: image masks first, then one coin per
    /// eligible stage followed by that stage's masks when the coin lands.
    /// A probability of exactly 0 or 1 consumes no coin draws.
    pub fn draw<R: Rng + ?Sized>(
        cfg: &PoseNetConfig,
        spec: &MixSpec,
        mode: MixMode,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let masks = |rng: &mut R| -> Result<Vec<MixingMask>> {
            (0..groups).map(|_| generate_mask(spec, rng)).collect()
        };
        let mut plan = MixPlan::none();
        if mode == MixMode::Mum || cfg.pose_mum_image_mix {
            plan.image = Some(masks(rng)?);
        }
        if mode == MixMode::PoseMum {
            for k in 0..cfg.unmix_site.eligible_stages() {
                let hit = if spec.mix_prob <= 0.0 {
                    false
                } else if spec.mix_prob >= 1.0 {
                    true
                } else {
                    rng.gen_bool(spec.mix_prob)
                };
                if hit {
                    plan.stages[k] = Some(masks(rng)?);
                }
            }
        }
        Ok(plan)
    }

    pub fn depth(&self) -> usize {
        self.image.is_some() as usize + self.stages.iter().filter(|s| s.is_some()).count()
    }
}

#[derive(Debug, Clone)]
enum TapeOp {
    Conv { layer: usize, cache: ConvCache },
    Bn { layer: usize, cache: BnCache },
    BnEval { layer: usize, input: FeatureBatch },
    Relu { output: FeatureBatch },
    Upsample,
    Mix { masks: Vec<MixingMask> },
    Unmix { stacks: Vec<MaskStack> },
}

/// Everything needed to run the backward pass of one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    tape: Vec<TapeOp>,
    version: u64,
    /// Whether each potential mix site fired, in execution order.
    pub decisions: Vec<(MixSite, bool)>,
    /// Masks applied per group, in application order.
    pub stacks: Vec<MaskStack>,
    /// Number of unmix operations executed (0 or 1).
    pub unmix_count: usize,
}

pub struct StudentOutput {
    pub heatmaps: FeatureBatch,
    pub decoder_input: FeatureBatch,
    /// Output of each encoder stage after any mix applied there.
    pub stage_features: Vec<FeatureBatch>,
    pub stacks: Vec<MaskStack>,
    pub trace: ForwardTrace,
}

/// Gradients in [`Parameterized::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(net: &PoseNet) -> Self {
        Gradients(net.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.0 {
            for v in t.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    cfg: PoseNetConfig,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
    version: u64,
}

impl PoseNet {
    pub fn new<R: Rng + ?Sized>(cfg: PoseNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(6);
        let mut bns = Vec::with_capacity(5);
        let mut in_c = 1;
        for k in 0..STAGES {
            convs.push(Conv2d::init(in_c, cfg.stage_channels[k], cfg.stage_strides[k], rng));
            bns.push(BatchNorm2d::new(cfg.stage_channels[k]));
            in_c = cfg.stage_channels[k];
        }
        convs.push(Conv2d::init(in_c, cfg.decoder_channels, 1, rng));
        bns.push(BatchNorm2d::new(cfg.decoder_channels));
        convs.push(Conv2d::init(cfg.decoder_channels, cfg.n_keypoints, 1, rng));
        Ok(Self {
            cfg,
            convs,
            bns,
            version: 0,
        })
    }

    pub fn config(&self) -> &PoseNetConfig {
        &self.cfg
    }

    pub fn set_unmix_site(&mut self, site: UnmixSite) {
        self.cfg.unmix_site = site;
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn bns(&self) -> &[BatchNorm2d] {
        &self.bns
    }

    pub fn bns_mut(&mut self) -> &mut [BatchNorm2d] {
        &mut self.bns
    }

    /// Incremented on every mutable parameter access; traces from older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bn_stat_names(&self) -> Vec<String> {
        self.bns
            .iter()
            .enumerate()
            .flat_map(|(i, _)| {
                let b = BLOCK_NAMES[i];
                [format!("{b}.bn.running_mean"), format!("{b}.bn.running_var")]
            })
            .collect()
    }

    /// Running means and variances, interleaved per BN layer.
    pub fn bn_stats(&self) -> Vec<&[f64]> {
        self.bns
            .iter()
            .flat_map(|b| [b.running_mean.as_slice(), b.running_var.as_slice()])
            .collect()
    }

    pub fn bn_stats_mut(&mut self) -> Vec<&mut [f64]> {
        self.bns
            .iter_mut()
            .flat_map(|b| [b.running_mean.as_mut_slice(), b.running_var.as_mut_slice()])
            .collect()
    }

    fn check_input(&self, images: &FeatureBatch) -> Result<()> {
        let s = images.shape();
        if s.c != 1 || (s.h, s.w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "network expects (n, 1, {}, {}) images, got {s}",
                self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        Ok(())
    }

    /// Draws a fresh [`MixPlan`] and runs the mixed forward pass with train-mode BN.
    pub fn forward_student<R: Rng + ?Sized>(
        &mut self,
        images: &FeatureBatch,
        spec: &MixSpec,
        mode: MixMode,
        rng: &mut R,
    ) -> Result<StudentOutput> {
        if images.shape().n % spec.n_group != 0 {
            return Err(Error::config(
                "mix.n_group",
                format!("batch of {} is not a whole number of groups of {}", images.shape().n, spec.n_group),
            ));
        }
        self.cfg.validate_mixing(spec)?;
        let groups = images.shape().n / spec.n_group;
        let plan = MixPlan::draw(&self.cfg, spec, mode, groups, rng)?;
        self.forward_with_plan(images, &plan, BnMode::Train)
    }

    /// Plain encoder -> decoder pass. Train mode updates BN running statistics.
    pub fn forward_plain(&mut self, images: &FeatureBatch, mode: BnMode) -> Result<FeatureBatch> {
        match mode {
            BnMode::Train => Ok(self.forward_with_plan(images, &MixPlan::none(), BnMode::Train)?.heatmaps),
            BnMode::Eval => self.infer(images),
        }
    }

    /// Plain train-mode pass that keeps the trace for backward.
    pub fn forward_train(&mut self, images: &FeatureBatch) -> Result<(FeatureBatch, ForwardTrace)> {
        let out = self.forward_with_plan(images, &MixPlan::none(), BnMode::Train)?;
        Ok((out.heatmaps, out.trace))
    }

    /// Eval-mode pass; never mutates the network.
    pub fn infer(&self, images: &FeatureBatch) -> Result<FeatureBatch> {
        self.check_input(images)?;
        let mut h = images.clone();
        for k in 0..=STAGES {
            if k == STAGES {
                h = upsample2_forward(&h);
            }
            h = self.convs[k].infer(&h)?;
            h = relu_forward(&self.bns[k].forward_eval(&h)?);
        }
        h = upsample2_forward(&h);
        self.convs[STAGES + 1].infer(&h)
    }

    /// Runs the forward pass applying exactly the masks in `plan`.
    pub fn forward_with_plan(&mut self, images: &FeatureBatch, plan: &MixPlan, bn_mode: BnMode) -> Result<StudentOutput> {
        self.check_input(images)?;
        let groups = plan
            .image
            .iter()
            .chain(plan.stages.iter().flatten())
            .map(Vec::len)
            .next()
            .unwrap_or(1);
        let eligible = self.cfg.unmix_site.eligible_stages();
        if plan.stages.iter().skip(eligible).any(Option::is_some) {
            return Err(Error::config(
                "net.unmix_site",
                "plan mixes after the unmix site",
            ));
        }
        let mut tape = Vec::new();
        let mut stacks = vec![MaskStack::new(); groups];
        let mut decisions = Vec::new();
        let mut unmix_count = 0;
        let mut stage_features = Vec::with_capacity(STAGES);

        let mut h = images.clone();
        decisions.push((MixSite::Image, plan.image.is_some()));
        if let Some(masks) = &plan.image {
            h = self.apply_mix(&h, masks, MixSite::Image, &mut stacks, &mut tape)?;
        }
        for k in 0..STAGES {
            h = self.conv_bn_relu(k, &h, bn_mode, &mut tape)?;
            if k < eligible {
                let site = MixSite::AfterStage(k + 1);
                decisions.push((site, plan.stages[k].is_some()));
                if let Some(masks) = &plan.stages[k] {
                    h = self.apply_mix(&h, masks, site, &mut stacks, &mut tape)?;
                }
            }
            stage_features.push(h.clone());
            let unmix_here = matches!(
                (self.cfg.unmix_site, k),
                (UnmixSite::AfterLayer2, 1) | (UnmixSite::AfterEncoder, 3)
            );
            if unmix_here {
                h = apply_unmix(&h, &stacks, &mut tape, &mut unmix_count)?;
            }
        }
        let decoder_input = h.clone();
        h = upsample2_forward(&h);
        tape.push(TapeOp::Upsample);
        h = self.conv_bn_relu(STAGES, &h, bn_mode, &mut tape)?;
        h = upsample2_forward(&h);
        tape.push(TapeOp::Upsample);
        let (out, cache) = self.convs[STAGES + 1].forward(&h)?;
        tape.push(TapeOp::Conv { layer: STAGES + 1, cache });
        h = out;
        if self.cfg.unmix_site == UnmixSite::AfterDecoder {
            h = apply_unmix(&h, &stacks, &mut tape, &mut unmix_count)?;
        }
        Ok(StudentOutput {
            heatmaps: h,
            decoder_input,
            stage_features,
            stacks: stacks.clone(),
            trace: ForwardTrace {
                tape,
                version: self.version,
                decisions,
                stacks,
                unmix_count,
            },
        })
    }

    /// Decoder input (encoder output after any unmixing scheduled before it).
    pub fn encode_with_plan(&mut self, images: &FeatureBatch, plan: &MixPlan, bn_mode: BnMode) -> Result<FeatureBatch> {
        Ok(self.forward_with_plan(images, plan, bn_mode)?.decoder_input)
    }

    fn apply_mix(
        &self,
        h: &FeatureBatch,
        masks: &[MixingMask],
        site: MixSite,
        stacks: &mut [MaskStack],
        tape: &mut Vec<TapeOp>,
    ) -> Result<FeatureBatch> {
        if masks.len() != stacks.len() {
            return Err(Error::Shape("plan sites disagree on group count".into()));
        }
        let out = mix_groups(h, masks)?;
        for (stack, mask) in stacks.iter_mut().zip(masks) {
            stack.push(site, mask.clone());
        }
        tape.push(TapeOp::Mix { masks: masks.to_vec() });
        Ok(out)
    }

    fn conv_bn_relu(&mut self, k: usize, x: &FeatureBatch, bn_mode: BnMode, tape: &mut Vec<TapeOp>) -> Result<FeatureBatch> {
        let (h, cache) = self.convs[k].forward(x)?;
        tape.push(TapeOp::Conv { layer: k, cache });
        let h = match bn_mode {
            BnMode::Train => {
                let (y, cache) = self.bns[k].forward_train(&h)?;
                tape.push(TapeOp::Bn { layer: k, cache });
                y
            }
            BnMode::Eval => {
                let y = self.bns[k].forward_eval(&h)?;
                tape.push(TapeOp::BnEval { layer: k, input: h });
                y
            }
        };
        let out = relu_forward(&h);
        tape.push(TapeOp::Relu { output: out.clone() });
        Ok(out)
    }

    /// Exact parameter gradients of the traced forward pass.
    pub fn backward(&self, trace: &ForwardTrace, grad_heatmaps: &FeatureBatch) -> Result<Gradients> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                current: self.version,
            });
        }
        let mut conv_grads: Vec<(Vec<f64>, Vec<f64>)> =
            self.convs.iter().map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()])).collect();
        let mut bn_grads: Vec<(Vec<f64>, Vec<f64>)> =
            self.bns.iter().map(|b| (vec![0.0; b.channels()], vec![0.0; b.channels()])).collect();
        let mut g = grad_heatmaps.clone();
        for op in trace.tape.iter().rev() {
            g = match op {
                TapeOp::Conv { layer, cache } => {
                    let (gx, grads) = self.convs[*layer].backward(cache, &g)?;
                    add_into(&mut conv_grads[*layer].0, &grads.weight);
                    add_into(&mut conv_grads[*layer].1, &grads.bias);
                    gx
                }
                TapeOp::Bn { layer, cache } => {
                    let (gx, grads) = self.bns[*layer].backward(cache, &g)?;
                    add_into(&mut bn_grads[*layer].0, &grads.gamma);
                    add_into(&mut bn_grads[*layer].1, &grads.beta);
                    gx
                }
                TapeOp::BnEval { layer, input } => bn_eval_backward(&self.bns[*layer], input, g, &mut bn_grads[*layer]),
                TapeOp::Relu { output } => relu_backward(output, &g),
                TapeOp::Upsample => upsample2_backward(&g),
                TapeOp::Mix { masks } => {
                    let inv: Vec<MixingMask> = masks.iter().map(MixingMask::invert).collect();
                    mix_groups(&g, &inv)?
                }
                TapeOp::Unmix { stacks } => {
                    let depth = stacks.first().map_or(0, MaskStack::len);
                    for level in 0..depth {
                        let fwd: Vec<MixingMask> = stacks.iter().map(|s| s.entries()[level].1.clone()).collect();
                        g = mix_groups(&g, &fwd)?;
                    }
                    g
                }
            };
        }
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2 * self.bns.len());
        for (i, (w, b)) in conv_grads.into_iter().enumerate() {
            out.push(w);
            out.push(b);
            if i < self.bns.len() {
                let (gg, gb) = std::mem::take(&mut bn_grads[i]);
                out.push(gg);
                out.push(gb);
            }
        }
        Ok(Gradients(out))
    }

    /// Parameters and BN running statistics as named checkpoint entries.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (n, p) in self.param_names().into_iter().zip(self.params()) {
            c.insert(n, p.to_vec());
        }
        for (n, p) in self.bn_stat_names().into_iter().zip(self.bn_stats()) {
            c.insert(n, p.to_vec());
        }
        c
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let names = self.param_names();
        let stat_names = self.bn_stat_names();
        for (n, p) in names.iter().zip(self.params_mut()) {
            copy_entry(ckpt, n, p)?;
        }
        for (n, p) in stat_names.iter().zip(self.bn_stats_mut()) {
            copy_entry(ckpt, n, p)?;
        }
        Ok(())
    }
}

fn copy_entry(ckpt: &Checkpoint, name: &str, dst: &mut [f64]) -> Result<()> {
    let src = ckpt.require(name)?;
    if src.len() != dst.len() {
        return Err(Error::Corrupt(format!(
            "entry `{name}` has {} values, network expects {}",
            src.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn apply_unmix(h: &FeatureBatch, stacks: &[MaskStack], tape: &mut Vec<TapeOp>, count: &mut usize) -> Result<FeatureBatch> {
    *count += 1;
    if stacks.iter().all(MaskStack::is_empty) {
        return Ok(h.clone());
    }
    let out = crate::mixmask::unmix_groups(h, stacks)?;
    tape.push(TapeOp::Unmix { stacks: stacks.to_vec() });
    Ok(out)
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn bn_eval_backward(bn: &BatchNorm2d, input: &FeatureBatch, mut g: FeatureBatch, acc: &mut (Vec<f64>, Vec<f64>)) -> FeatureBatch {
    let s = g.shape();
    let plane = s.plane_len();
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = 1.0 / (bn.running_var[c] + bn.eps).sqrt();
            let start = (n * s.c + c) * plane;
            let xs = &input.data()[start..start + plane];
            for (gv, xv) in g.data_mut()[start..start + plane].iter_mut().zip(xs) {
                acc.0[c] += *gv * (xv - bn.running_mean[c]) * inv;
                acc.1[c] += *gv;
                *gv *= bn.gamma[c] * inv;
            }
        }
    }
    g
}

impl Parameterized for PoseNet {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in BLOCK_NAMES.iter().enumerate() {
            names.push(format!("{b}.conv.weight"));
            names.push(format!("{b}.conv.bias"));
            if i < self.bns.len() {
                names.push(format!("{b}.bn.gamma"));
                names.push(format!("{b}.bn.beta"));
            }
        }
        names
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(&c.weight);
            out.push(&c.bias);
            if let Some(b) = self.bns.get(i) {
                out.push(&b.gamma);
                out.push(&b.beta);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut bns = self.bns.iter_mut();
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            if let Some(b) = bns.next() {
                out.push(&mut b.gamma);
                out.push(&mut b.beta);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixmask::unmix;
    use crate::nnkit::{gradcheck, mse_backward, mse_forward};
    use crate::tensorgrid::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(seed: u64, n: usize, h: usize, w: usize) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape4::new(n, 1, h, w);
        FeatureBatch::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn small_cfg() -> PoseNetConfig {
        PoseNetConfig {
            stage_channels: [3, 4, 4, 5],
            stage_strides: [1, 2, 1, 2],
            decoder_channels: 3,
            n_keypoints: 2,
            input_size: (12, 16),
            heatmap_size: (12, 16),
            unmix_site: UnmixSite::AfterEncoder,
            pose_mum_image_mix: true,
        }
    }

    fn small_spec() -> MixSpec {
        MixSpec { n_group: 2, n_tiles_h: 3, n_tiles_w: 4, mix_prob: 1.0, ..MixSpec::default() }
    }

    #[test]
    fn default_config_is_consistent() {
        let cfg = PoseNetConfig::default();
        cfg.validate().unwrap();
        cfg.validate_mixing(&MixSpec::default()).unwrap();
        assert_eq!(cfg.stage_sizes(), [(24, 32), (12, 16), (6, 8), (3, 4)]);
        for site in [UnmixSite::AfterLayer2, UnmixSite::AfterDecoder] {
            PoseNetConfig { unmix_site: site, ..cfg.clone() }.validate_mixing(&MixSpec::default()).unwrap();
        }
    }

    #[test]
    fn invalid_configs() {
        let bad_heatmap = PoseNetConfig { heatmap_size: (24, 32), ..PoseNetConfig::default() };
        assert!(matches!(bad_heatmap.validate(), Err(Error::Config { field, .. }) if field == "net.heatmap_size"));
        let bad_grid = MixSpec { n_tiles_h: 4, n_tiles_w: 4, ..MixSpec::default() };
        assert!(PoseNetConfig::default().validate_mixing(&bad_grid).is_err());
    }

    #[test]
    fn output_shape_and_eval_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PoseNet::new(PoseNetConfig::default(), &mut rng).unwrap();
        let x = images(1, 3, 48, 64);
        let before = net.clone();
        let a = net.forward_plain(&x, BnMode::Eval).unwrap();
        let b = net.forward_plain(&x, BnMode::Eval).unwrap();
        assert_eq!(a.shape(), Shape4::new(3, 8, 12, 16));
        assert!(a.bit_eq(&b));
        assert_eq!(net, before);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PoseNet::new(small_cfg(), &mut rng).unwrap();
        let x = images(2, 2, 12, 16);
        let before = net.bns()[0].clone();
        let (_, trace) = net.forward_train(&x).unwrap();
        let after = &net.bns()[0];
        let TapeOp::Bn { cache, .. } = &trace.tape[1] else { panic!("expected bn on tape") };
        for c in 0..after.channels() {
            assert_eq!(after.running_mean[c], 0.9 * before.running_mean[c] + 0.1 * cache.batch_mean[c]);
            assert_eq!(after.running_var[c], 0.9 * before.running_var[c] + 0.1 * cache.batch_var[c]);
        }
    }

    #[test]
    fn identity_masks_match_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PoseNet::new(small_cfg(), &mut rng).unwrap();
        let x = images(4, 4, 12, 16);
        let spec = MixSpec { identity_masks: true, ..small_spec() };

        let mut a = net.clone();
        let out = a.forward_student(&x, &spec, MixMode::PoseMum, &mut rng).unwrap();
        assert_eq!(out.stacks.len(), 2);
        assert_eq!(out.stacks[0].len(), 4);
        let mut b = net.clone();
        let (plain, plain_trace) = b.forward_train(&x).unwrap();
        assert!(out.heatmaps.bit_eq(&plain));
        assert_eq!(a.bns(), b.bns());

        let target = images(5, 4, 12, 16).slice_items(0, 4).unwrap();
        let target = FeatureBatch::from_vec(plain.shape(), target.data().iter().cycle().take(plain.shape().len()).copied().collect()).unwrap();
        let g1 = a.backward(&out.trace, &mse_backward(&out.heatmaps, &target).unwrap()).unwrap();
        let g2 = b.backward(&plain_trace, &mse_backward(&plain, &target).unwrap()).unwrap();
        assert!(g1.max_abs_diff(&g2) <= 1e-12);
    }

    #[test]
    fn mum_mode_stacks_one_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = PoseNet::new(PoseNetConfig::default(), &mut rng).unwrap();
        let x = images(7, 4, 48, 64);
        let out = net.forward_student(&x, &MixSpec::default(), MixMode::Mum, &mut rng).unwrap();
        assert_eq!(out.stacks.len(), 1);
        assert_eq!(out.stacks[0].len(), 1);
        assert_eq!(out.stacks[0].entries()[0].0, MixSite::Image);
        assert_eq!(out.trace.unmix_count, 1);
        assert_eq!(out.heatmaps.shape(), Shape4::new(4, 8, 12, 16));
    }

    #[test]
    fn pose_mum_with_zero_probability_equals_mum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = PoseNet::new(PoseNetConfig::default(), &mut rng).unwrap();
        let x = images(9, 8, 48, 64);
        let spec = MixSpec { mix_prob: 0.0, ..MixSpec::default() };
        let mut a = net.clone();
        let mut b = net.clone();
        let mut ra = ChaCha8Rng::seed_from_u64(10);
        let mut rb = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let oa = a.forward_student(&x, &spec, MixMode::PoseMum, &mut ra).unwrap();
            let ob = b.forward_student(&x, &spec, MixMode::Mum, &mut rb).unwrap();
            assert!(oa.heatmaps.bit_eq(&ob.heatmaps));
            assert_eq!(oa.stacks, ob.stacks);
        }
    }

    #[test]
    fn stack_discipline_per_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MixSpec { mix_prob: 1.0, ..MixSpec::default() };
        for (site, depth) in [(UnmixSite::AfterLayer2, 2), (UnmixSite::AfterEncoder, 4), (UnmixSite::AfterDecoder, 5)] {
            let cfg = PoseNetConfig { unmix_site: site, ..PoseNetConfig::default() };
            let mut net = PoseNet::new(cfg, &mut rng).unwrap();
            let out = net.forward_student(&images(12, 4, 48, 64), &spec, MixMode::PoseMum, &mut rng).unwrap();
            assert_eq!(out.stacks[0].len(), depth, "{site:?}");
            assert_eq!(out.trace.unmix_count, 1);
            assert_eq!(out.trace.decisions.iter().filter(|d| d.1).count(), depth);
            assert!(unmix(&out.heatmaps, &MaskStack::new()).unwrap().bit_eq(&out.heatmaps));
        }
    }

    #[test]
    fn mixing_commutes_with_tile_interiors() {
        // stride-1 encoder with frozen BN: away from tile borders, mix -> encode -> unmix
        // equals plain encoding
        let cfg = PoseNetConfig {
            stage_channels: [2, 3, 2, 2],
            stage_strides: [1, 1, 1, 1],
            decoder_channels: 2,
            n_keypoints: 1,
            input_size: (24, 24),
            heatmap_size: (96, 96),
            unmix_site: UnmixSite::AfterEncoder,
            pose_mum_image_mix: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut net = PoseNet::new(cfg, &mut rng).unwrap();
        let x = images(14, 3, 24, 24);
        let fixed = MixingMask::from_perms(2, 2, vec![vec![1, 2, 0], vec![2, 0, 1], vec![0, 2, 1], vec![1, 0, 2]]).unwrap();
        let plan = MixPlan { image: Some(vec![fixed]), ..MixPlan::none() };
        let mixed = net.encode_with_plan(&x, &plan, BnMode::Eval).unwrap();
        let plain = net.encode_with_plan(&x, &MixPlan::none(), BnMode::Eval).unwrap();
        // receptive radius of four 3x3 convs is 4; tiles are 12x12
        let s = plain.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for ty in 0..2 {
                    for tx in 0..2 {
                        for y in 4..8 {
                            for xx in 4..8 {
                                let (py, px) = (ty * 12 + y, tx * 12 + xx);
                                assert_eq!(mixed.at(n, c, py, px).to_bits(), plain.at(n, c, py, px).to_bits());
                            }
                        }
                    }
                }
            }
        }
        assert!(mixed.max_abs_diff(&plain) > 0.0, "tile borders should differ");
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut net = PoseNet::new(small_cfg(), &mut rng).unwrap();
        let out = net.forward_student(&images(16, 2, 12, 16), &small_spec(), MixMode::PoseMum, &mut rng).unwrap();
        let g = net.backward(&out.trace, &FeatureBatch::zeros(2, 2, 12, 16)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut net = PoseNet::new(small_cfg(), &mut rng).unwrap();
        let (y, trace) = net.forward_train(&images(18, 2, 12, 16)).unwrap();
        net.params_mut()[0][0] += 0.1;
        assert!(matches!(net.backward(&trace, &y), Err(Error::StaleTrace { .. })));
    }

    #[test]
    fn mixed_forward_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for site in [UnmixSite::AfterLayer2, UnmixSite::AfterEncoder, UnmixSite::AfterDecoder] {
            let cfg = PoseNetConfig { unmix_site: site, ..small_cfg() };
            let mut net = PoseNet::new(cfg.clone(), &mut rng).unwrap();
            let x = images(20, 4, 12, 16);
            let target = images(21, 4 * 2, 12, 16);
            let target = FeatureBatch::from_vec(Shape4::new(4, 2, 12, 16), target.into_vec()).unwrap();
            let spec = small_spec();
            let plan = MixPlan::draw(&cfg, &spec, MixMode::PoseMum, 2, &mut rng).unwrap();
            let out = net.forward_with_plan(&x, &plan, BnMode::Train).unwrap();
            let grads = net.backward(&out.trace, &mse_backward(&out.heatmaps, &target).unwrap()).unwrap();
            let report = gradcheck(&mut net, &grads.0, |n: &mut PoseNet| {
                let y = n.forward_with_plan(&x, &plan, BnMode::Train).unwrap().heatmaps;
                mse_forward(&y, &target).unwrap()
            });
            assert!(report.passes(1e-4), "{site:?}: {report:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut net = PoseNet::new(small_cfg(), &mut rng).unwrap();
        net.forward_train(&images(23, 2, 12, 16)).unwrap();
        let ckpt = net.to_checkpoint();
        let mut other = PoseNet::new(small_cfg(), &mut rng).unwrap();
        assert_ne!(other.params(), net.params());
        other.load_checkpoint(&ckpt).unwrap();
        assert_eq!(other.params(), net.params());
        assert_eq!(other.bn_stats(), net.bn_stats());
        let mut wrong = PoseNet::new(PoseNetConfig::default(), &mut rng).unwrap();
        assert!(wrong.load_checkpoint(&ckpt).is_err());
    }
}
