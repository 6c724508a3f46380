//! `key=value` run configuration and the subcommands of the `mumkit` binary.
//!
//! A config file holds one `key = value` per line; `#` starts a comment and
//! missing keys keep their defaults. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradsuite;
use crate::mixmask::{generate_mask, mix_groups};
use crate::nnkit::{BnMode, Checkpoint};
use crate::posenet::{MixMode, MixPlan, PoseNet, UnmixSite};
use crate::ssltrain::{
    ablation_grid, evaluate, run_ablation, run_experiment, AugmentMode, ExperimentOptions, TrainConfig, Trainer,
    ABLATION_GRIDS, CHECKPOINT_FILE,
};
use crate::synthpose::{generate_dataset, stack_images, Centering, DataConfig, DatasetSplit};
use crate::teacher::TeacherMode;
use crate::tensorgrid::FeatureBatch;

/// Environment variable that replaces the `seed` key.
pub const SEED_ENV: &str = "MUMKIT_SEED";
/// Effective configuration written next to training outputs.
pub const CONFIG_FILE: &str = "config.txt";

/// Everything one run needs: training, dataset generation and ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub ablate_grids: Vec<String>,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            train: TrainConfig::default(),
            n_labeled: data.n_labeled,
            n_unlabeled: data.n_unlabeled,
            n_val: data.n_val,
            ablate_grids: vec!["table2".into(), "table4".into()],
            ablate_seeds: 3,
        }
    }
}

/// Every accepted key with a short description, in dump order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seeds dataset generation and training"),
    ("data.n_labeled", "labeled training samples"),
    ("data.n_unlabeled", "unlabeled training samples"),
    ("data.n_val", "validation samples"),
    ("data.image_h", "image height (also the network input)"),
    ("data.image_w", "image width"),
    ("data.heatmap_h", "heatmap height (also the network output)"),
    ("data.heatmap_w", "heatmap width"),
    ("data.sigma", "heatmap Gaussian sigma in heatmap pixels"),
    ("data.centering", "rounded | subpixel heatmap peaks"),
    ("data.noise", "background noise amplitude"),
    ("data.limb_min", "shortest bone in pixels"),
    ("data.limb_max", "longest bone in pixels"),
    ("data.thickness", "limb line thickness in pixels"),
    ("data.invisible_prob", "chance a non-root keypoint is invisible"),
    ("net.stage_channels", "four comma-separated encoder widths"),
    ("net.stage_strides", "four comma-separated strides (1 or 2)"),
    ("net.decoder_channels", "decoder width"),
    ("net.n_keypoints", "heatmap channels; must match the skeleton"),
    ("net.unmix_site", "after_layer2 | after_encoder | after_decoder"),
    ("net.image_mix", "Pose-MUM also mixes at image level"),
    ("mix.n_group", "images per mixing group"),
    ("mix.n_tiles_h", "tile rows"),
    ("mix.n_tiles_w", "tile columns"),
    ("mix.mix_prob", "chance of a feature mix at each eligible stage"),
    ("mix.identity_masks", "debug: every mask is the identity"),
    ("teacher.mode", "single | ema | eman"),
    ("teacher.decay", "teacher decay in [0, 1]"),
    ("teacher.average_std", "EMAN averages standard deviations instead of variances"),
    ("train.mode", "supervised_only | affine | joint_cutout | mum | pose_mum"),
    ("train.affine", "weak affine view for teacher and labeled batches"),
    ("train.lambda_u", "unlabeled loss weight"),
    ("train.epochs", "training epochs"),
    ("train.batch_groups", "mixing groups per unlabeled batch"),
    ("train.sup_batch", "labeled batch size"),
    ("train.lr", "Adam learning rate"),
    ("train.lr_milestones", "comma-separated epochs where the rate drops"),
    ("train.lr_decay_factor", "rate multiplier at each milestone"),
    ("aug.max_shift", "weak affine shift in pixels"),
    ("aug.max_scale", "weak affine scale bound (>= 1)"),
    ("aug.flip_prob", "horizontal flip probability"),
    ("aug.cutout_joints", "joints occluded by joint cutout"),
    ("aug.cutout_patch", "joint cutout square side in pixels"),
    ("ablate.grids", "comma-separated grids: table1 table2 table3 table4 lambda modes"),
    ("ablate.seeds", "seeds per ablation cell"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    let list: Vec<usize> = parse_list(key, v)?;
    list.try_into().map_err(|_| Error::config(key, "expected four comma-separated values"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn centering_str(c: Centering) -> &'static str {
    match c {
        Centering::Rounded => "rounded",
        Centering::Subpixel => "subpixel",
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "data.n_labeled" => self.n_labeled = parse(key, v)?,
            "data.n_unlabeled" => self.n_unlabeled = parse(key, v)?,
            "data.n_val" => self.n_val = parse(key, v)?,
            "data.image_h" => {
                t.render.image_size.0 = parse(key, v)?;
                t.net.input_size.0 = t.render.image_size.0;
            }
            "data.image_w" => {
                t.render.image_size.1 = parse(key, v)?;
                t.net.input_size.1 = t.render.image_size.1;
            }
            "data.heatmap_h" => {
                t.render.heatmap_size.0 = parse(key, v)?;
                t.net.heatmap_size.0 = t.render.heatmap_size.0;
            }
            "data.heatmap_w" => {
                t.render.heatmap_size.1 = parse(key, v)?;
                t.net.heatmap_size.1 = t.render.heatmap_size.1;
            }
            "data.sigma" => t.render.sigma = parse(key, v)?,
            "data.centering" => {
                t.render.centering = match v.to_ascii_lowercase().as_str() {
                    "rounded" => Centering::Rounded,
                    "subpixel" => Centering::Subpixel,
                    _ => return Err(Error::config(key, format!("expected rounded or subpixel, got `{v}`"))),
                }
            }
            "data.noise" => t.render.noise = parse(key, v)?,
            "data.limb_min" => t.skeleton.limb_length_range.0 = parse(key, v)?,
            "data.limb_max" => t.skeleton.limb_length_range.1 = parse(key, v)?,
            "data.thickness" => t.skeleton.thickness = parse(key, v)?,
            "data.invisible_prob" => t.skeleton.invisible_prob = parse(key, v)?,
            "net.stage_channels" => t.net.stage_channels = parse_four(key, v)?,
            "net.stage_strides" => t.net.stage_strides = parse_four(key, v)?,
            "net.decoder_channels" => t.net.decoder_channels = parse(key, v)?,
            "net.n_keypoints" => t.net.n_keypoints = parse(key, v)?,
            "net.unmix_site" => t.net.unmix_site = v.parse::<UnmixSite>()?,
            "net.image_mix" => t.net.pose_mum_image_mix = parse_bool(key, v)?,
            "mix.n_group" => t.mix.n_group = parse(key, v)?,
            "mix.n_tiles_h" => t.mix.n_tiles_h = parse(key, v)?,
            "mix.n_tiles_w" => t.mix.n_tiles_w = parse(key, v)?,
            "mix.mix_prob" => t.mix.mix_prob = parse(key, v)?,
            "mix.identity_masks" => t.mix.identity_masks = parse_bool(key, v)?,
            "teacher.mode" => t.teacher.mode = v.parse::<TeacherMode>()?,
            "teacher.decay" => t.teacher.decay = parse(key, v)?,
            "teacher.average_std" => t.teacher.average_std = parse_bool(key, v)?,
            "train.mode" => t.mode = v.parse::<AugmentMode>()?,
            "train.affine" => t.affine = parse_bool(key, v)?,
            "train.lambda_u" => t.lambda_u = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_groups" => t.batch_groups = parse(key, v)?,
            "train.sup_batch" => t.sup_batch = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lr_milestones" => t.lr_milestones = parse_list(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "aug.max_shift" => t.aug.max_shift = parse(key, v)?,
            "aug.max_scale" => t.aug.max_scale = parse(key, v)?,
            "aug.flip_prob" => t.aug.flip_prob = parse(key, v)?,
            "aug.cutout_joints" => t.aug.cutout_joints = parse(key, v)?,
            "aug.cutout_patch" => t.aug.cutout_patch = parse(key, v)?,
            "ablate.grids" => self.ablate_grids = parse_list(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Value of `key` as it would be written by [`RunConfig::dump`].
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "data.n_labeled" => self.n_labeled.to_string(),
            "data.n_unlabeled" => self.n_unlabeled.to_string(),
            "data.n_val" => self.n_val.to_string(),
            "data.image_h" => t.render.image_size.0.to_string(),
            "data.image_w" => t.render.image_size.1.to_string(),
            "data.heatmap_h" => t.render.heatmap_size.0.to_string(),
            "data.heatmap_w" => t.render.heatmap_size.1.to_string(),
            "data.sigma" => t.render.sigma.to_string(),
            "data.centering" => centering_str(t.render.centering).into(),
            "data.noise" => t.render.noise.to_string(),
            "data.limb_min" => t.skeleton.limb_length_range.0.to_string(),
            "data.limb_max" => t.skeleton.limb_length_range.1.to_string(),
            "data.thickness" => t.skeleton.thickness.to_string(),
            "data.invisible_prob" => t.skeleton.invisible_prob.to_string(),
            "net.stage_channels" => join(&t.net.stage_channels),
            "net.stage_strides" => join(&t.net.stage_strides),
            "net.decoder_channels" => t.net.decoder_channels.to_string(),
            "net.n_keypoints" => t.net.n_keypoints.to_string(),
            "net.unmix_site" => t.net.unmix_site.as_str().into(),
            "net.image_mix" => t.net.pose_mum_image_mix.to_string(),
            "mix.n_group" => t.mix.n_group.to_string(),
            "mix.n_tiles_h" => t.mix.n_tiles_h.to_string(),
            "mix.n_tiles_w" => t.mix.n_tiles_w.to_string(),
            "mix.mix_prob" => t.mix.mix_prob.to_string(),
            "mix.identity_masks" => t.mix.identity_masks.to_string(),
            "teacher.mode" => t.teacher.mode.as_str().into(),
            "teacher.decay" => t.teacher.decay.to_string(),
            "teacher.average_std" => t.teacher.average_std.to_string(),
            "train.mode" => t.mode.as_str().into(),
            "train.affine" => t.affine.to_string(),
            "train.lambda_u" => t.lambda_u.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_groups" => t.batch_groups.to_string(),
            "train.sup_batch" => t.sup_batch.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_milestones" => join(&t.lr_milestones),
            "train.lr_decay_factor" => t.lr_decay_factor.to_string(),
            "aug.max_shift" => t.aug.max_shift.to_string(),
            "aug.max_scale" => t.aug.max_scale.to_string(),
            "aug.flip_prob" => t.aug.flip_prob.to_string(),
            "aug.cutout_joints" => t.aug.cutout_joints.to_string(),
            "aug.cutout_patch" => t.aug.cutout_patch.to_string(),
            "ablate.grids" => self.ablate_grids.join(","),
            "ablate.seeds" => self.ablate_seeds.to_string(),
            _ => return None,
        })
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), format!("expected key = value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line; parsing the output gives back `self`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_labeled == 0 {
            return Err(Error::config("data.n_labeled", "must be positive"));
        }
        if self.n_val == 0 {
            return Err(Error::config("data.n_val", "must be positive"));
        }
        if self.ablate_seeds == 0 {
            return Err(Error::config("ablate.seeds", "must be positive"));
        }
        for g in &self.ablate_grids {
            if !ABLATION_GRIDS.contains(&g.as_str()) {
                return Err(Error::config("ablate.grids", format!("unknown grid `{g}`")));
            }
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            n_val: self.n_val,
            seed: self.train.seed,
            skeleton: self.train.skeleton.clone(),
            render: self.train.render,
        }
    }

    /// Replaces the seed when `value` is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }
}

fn defaults_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Config keys (key = value, one per line, # comments) and defaults:\n");
    for (k, desc) in KEYS {
        let _ = writeln!(s, "  {k:<22} {:<14} {desc}", d.get(k).expect("listed key"));
    }
    let _ = write!(s, "\n{SEED_ENV} overrides `seed` when set.\nExit codes: 0 ok, 2 config, 3 I/O, 4 numeric or gradcheck failure.");
    s
}

#[derive(Debug, Parser)]
#[command(name = "mumkit", version, about = "Tile mix/unmix semi-supervised keypoint training", after_help = defaults_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train; resumes when the output directory holds a checkpoint of the same config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate student and teacher of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the ablation grids listed under `ablate.grids`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write inputs, mixed inputs and per-stage feature montages as PGM files.
    VizMix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer and the mixed network.
    Gradcheck,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sidecar holding the config a checkpoint was trained with.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = generate_dataset(&cfg.data_config())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    data.save(out)?;
    let (l, u, v) = data.counts();
    println!("wrote {} ({l} labeled, {u} unlabeled, {v} val)", out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let data = DatasetSplit::load(data)?;
    create_dir(out)?;
    let dump = cfg.dump();
    let cfg_path = out.join(CONFIG_FILE);
    let ckpt = out.join(CHECKPOINT_FILE);
    let resume = ckpt.exists();
    if resume {
        let old = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        if old != dump {
            return Err(Error::config(
                "train",
                format!("{} holds a checkpoint of a different config; use a fresh output directory", out.display()),
            ));
        }
    }
    write_file(&cfg_path, dump.as_bytes())?;
    write_file(&sidecar_path(&ckpt), dump.as_bytes())?;
    let rows = run_experiment(&cfg.train, &data, out, ExperimentOptions { resume, stop_after: None })?;
    if let Some(r) = rows.last() {
        println!(
            "epoch {}: loss {:.6} pck@0.1 {:.4} pck@0.2 {:.4} map {:.4} teacher pck@0.1 {:.4}",
            r.epoch, r.loss_total, r.pck01, r.pck02, r.map, r.teacher_pck01
        );
    }
    Ok(())
}

pub fn cmd_eval(ckpt: &Path, data: &Path) -> Result<()> {
    let side = sidecar_path(ckpt);
    let cfg = RunConfig::load(&side)?;
    let data = DatasetSplit::load(data)?;
    let mut trainer = Trainer::new(cfg.train)?;
    trainer.restore(&Checkpoint::load(ckpt)?)?;
    for (name, net) in [("student", trainer.student()), ("teacher", trainer.teacher().network())] {
        let r = evaluate(net, &data.val)?;
        if ![r.pck01, r.pck02, r.map].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("{name} metrics are not finite")));
        }
        println!("{name}: pck@0.1 {:.4} pck@0.2 {:.4} map {:.4}", r.pck01, r.pck02, r.map);
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let data = DatasetSplit::load(data)?;
    for grid in &cfg.ablate_grids {
        let cells = ablation_grid(grid, &cfg.train)?;
        let summary = run_ablation(&cells, cfg.ablate_seeds, &data, &out.join(grid))?;
        println!("{grid}:");
        for r in summary {
            println!("  {:<20} n={} pck@0.1 {:.4} +- {:.4}", r.variant, r.seed_count, r.pck01_mean, r.pck01_sd);
        }
    }
    Ok(())
}

/// Binary greymap bytes with one header comment line.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8], comment: &str) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n# {comment}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Image `n` of a one-channel batch at a fixed `[0, 1]` to `0..=255` scale.
fn image_pixels(batch: &FeatureBatch, n: usize) -> Vec<u8> {
    batch.plane(n, 0).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// All channels of item `n` side by side, one blank column between them,
/// min-max scaled over the whole montage.
fn montage(batch: &FeatureBatch, n: usize) -> (usize, usize, Vec<u8>, String) {
    let s = batch.shape();
    let width = s.c * s.w + s.c.saturating_sub(1);
    let item = batch.item(n);
    let lo = item.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = item.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut px = vec![0u8; width * s.h];
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = (batch.at(n, c, y, x) - lo) / span;
                px[y * width + c * (s.w + 1) + x] = (v * 255.0).round() as u8;
            }
        }
    }
    let note = format!("per-montage min-max scaling to 0-255, min {lo} max {hi}, {} channels", s.c);
    (width, s.h, px, note)
}

/// Writes one mixing group: `input_k.pgm`, `mixed_k.pgm` and
/// `stage{s}_k.pgm` montages from a freshly initialized network.
pub fn cmd_viz_mix(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let data = DatasetSplit::load(data)?;
    let t = &cfg.train;
    let g = t.mix.n_group;
    if data.val.len() < g {
        return Err(Error::config("mix.n_group", format!("needs {g} validation images, dataset has {}", data.val.len())));
    }
    create_dir(out)?;
    let images = stack_images(data.val[..g].iter().map(|s| &s.image))?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut net = PoseNet::new(t.net.clone(), &mut rng)?;
    let mut plan = MixPlan::draw(&t.net, &t.mix, MixMode::PoseMum, 1, &mut rng)?;
    if plan.image.is_none() {
        plan.image = Some(vec![generate_mask(&t.mix, &mut rng)?]);
    }
    let mixed = mix_groups(&images, plan.image.as_deref().unwrap_or_default())?;
    let (h, w) = t.net.input_size;
    for k in 0..g {
        let note = "fixed scaling: value 0 -> 0, 1 -> 255, clamped";
        write_file(&out.join(format!("input_{k}.pgm")), &pgm_bytes(w, h, &image_pixels(&images, k), note))?;
        write_file(&out.join(format!("mixed_{k}.pgm")), &pgm_bytes(w, h, &image_pixels(&mixed, k), note))?;
    }
    let fwd = net.forward_with_plan(&images, &plan, BnMode::Eval)?;
    for (s, feat) in fwd.stage_features.iter().enumerate() {
        for k in 0..g {
            let (mw, mh, px, note) = montage(feat, k);
            write_file(&out.join(format!("stage{}_{k}.pgm", s + 1)), &pgm_bytes(mw, mh, &px, &note))?;
        }
    }
    let fired: Vec<String> = plan
        .stages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_some())
        .map(|(s, _)| format!("stage{}", s + 1))
        .collect();
    println!("wrote {} images to {} (feature mixes at: {})", g * (2 + fwd.stage_features.len()), out.display(), fired.join(" "));
    Ok(())
}

/// Prints one line per check; fails with a numeric error if any check misses its bound.
pub fn cmd_gradcheck() -> Result<()> {
    let lines = gradsuite::run_suite()?;
    let mut bad = Vec::new();
    for l in &lines {
        let verdict = if l.passed() { "ok" } else { "FAIL" };
        println!("{verdict:<4} {:<56} checked {:>5}  max rel err {:.3e} < {:.0e}", l.name, l.checked, l.max_rel_err, l.tolerance);
        if !l.passed() {
            bad.push(l.name.clone());
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", bad.join(", "))))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&load_config(&config)?, &out),
        Command::Train { config, data, out } => cmd_train(&load_config(&config)?, &data, &out),
        Command::Eval { ckpt, data } => cmd_eval(&ckpt, &data),
        Command::Ablate { config, data, out } => cmd_ablate(&load_config(&config)?, &data, &out),
        Command::VizMix { config, data, out } => cmd_viz_mix(&load_config(&config)?, &data, &out),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
