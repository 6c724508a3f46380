use std::fs;
use std::path::{Path, PathBuf};

use super::trainer::{MetricsRow, Trainer};
use super::{AugmentMode, TrainConfig};
use crate::error::{Error, Result};
use crate::nnkit::Checkpoint;
use crate::synthpose::DatasetSplit;
use crate::teacher::TeacherMode;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmk";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METRICS_HEADER: &str = "epoch,loss_sup,loss_unsup,loss_total,pck01,pck02,map,teacher_pck01";
pub const SUMMARY_HEADER: &str = "variant,seed_count,pck01_mean,pck01_sd";
/// First line of every CSV written here.
pub const SIMPLIFIED_AP_NOTE: &str =
    "# map: mean over similarity thresholds 0.50..0.95 of the fraction of visible keypoints with exp(-d^2/(2 s^2 k^2)) >= t, k=0.1, s=box diagonal; not COCO AP";

#[derive(Debug, Clone, Copy, Default)]
pub struct ExperimentOptions {
    /// Continue from `out_dir/checkpoint.mmk` when present.
    pub resume: bool,
    /// Stop after this many epochs in total (for staged runs).
    pub stop_after: Option<usize>,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn metrics_text(rows: &[MetricsRow]) -> String {
    let mut s = format!("{SIMPLIFIED_AP_NOTE}\n{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Rows of a metrics CSV, skipping `#` comments and the header.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => return Err(Error::Corrupt(format!("{} lacks the metrics header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse_csv).collect()
}

/// Trains `cfg` on the dataset, writing `metrics.csv` and `checkpoint.mmk`
/// into `out_dir` after every epoch. Non-finite losses leave a
/// `nan_dump.txt` next to them.
pub fn run_experiment(cfg: &TrainConfig, data: &DatasetSplit, out_dir: &Path, opts: ExperimentOptions) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut rows = Vec::new();
    if opts.resume && ckpt_path.exists() {
        trainer.restore(&Checkpoint::load(&ckpt_path)?)?;
        rows = read_metrics_csv(&metrics_path)?;
        rows.truncate(trainer.epoch());
        if rows.len() != trainer.epoch() {
            return Err(Error::Corrupt(format!(
                "{} has {} rows but the checkpoint is at epoch {}",
                metrics_path.display(),
                rows.len(),
                trainer.epoch()
            )));
        }
    }
    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let view = data.train_view();
    while trainer.epoch() < stop {
        let row = match trainer.train_epoch(&view, &data.val) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                write(&out_dir.join("nan_dump.txt"), format!("{msg}\n").as_bytes())?;
                return Err(Error::Numeric(msg));
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
        let tmp = out_dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        trainer.to_checkpoint().save(&tmp)?;
        fs::rename(&tmp, &ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
        write(&metrics_path, metrics_text(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// One named configuration of an ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: String,
    pub cfg: TrainConfig,
}

pub const ABLATION_GRIDS: [&str; 6] = ["table1", "table2", "table3", "table4", "lambda", "modes"];

/// Named grids built around `base`:
/// `table1` group size and unmix site, `table2` teacher update rule,
/// `table3` strong augmentation, `table4` EMAN decay, `lambda` unlabeled
/// weight, `modes` supervised only against Pose-MUM with EMAN.
pub fn ablation_grid(name: &str, base: &TrainConfig) -> Result<Vec<AblationCell>> {
    use crate::posenet::UnmixSite;
    let cell = |variant: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        AblationCell { variant, cfg }
    };
    let teacher = |mode: TeacherMode, decay: f64| {
        move |c: &mut TrainConfig| {
            c.teacher.mode = mode;
            c.teacher.decay = decay;
        }
    };
    let cells = match name {
        "table1" => {
            let mut v = Vec::new();
            for g in [2, 3, 4] {
                v.push(cell(format!("n_group={g}"), &|c: &mut TrainConfig| c.mix.n_group = g));
            }
            for site in [UnmixSite::AfterLayer2, UnmixSite::AfterEncoder, UnmixSite::AfterDecoder] {
                v.push(cell(format!("unmix={}", site.as_str()), &|c: &mut TrainConfig| c.net.unmix_site = site));
            }
            v
        }
        "table2" => vec![
            cell("single".into(), &teacher(TeacherMode::Single, base.teacher.decay)),
            cell("ema_0.999".into(), &teacher(TeacherMode::Ema, 0.999)),
            cell("ema_0.6".into(), &teacher(TeacherMode::Ema, 0.6)),
            cell("eman_0.6".into(), &teacher(TeacherMode::Eman, 0.6)),
        ],
        "table3" => {
            let mut v = Vec::new();
            for mode in AugmentMode::ALL {
                v.push(cell(mode.as_str().into(), &|c: &mut TrainConfig| {
                    c.mode = mode;
                    c.affine = true;
                }));
            }
            v.push(cell("pose_mum_no_affine".into(), &|c: &mut TrainConfig| {
                c.mode = AugmentMode::PoseMum;
                c.affine = false;
            }));
            v
        }
        "table4" => [0.999, 0.99, 0.9, 0.6, 0.5]
            .into_iter()
            .map(|d| cell(format!("eman_{d}"), &teacher(TeacherMode::Eman, d)))
            .collect(),
        "lambda" => [0.5, 1.0, 2.0]
            .into_iter()
            .map(|l| cell(format!("lambda_u={l}"), &|c: &mut TrainConfig| c.lambda_u = l))
            .collect(),
        "modes" => vec![
            cell("supervised_only".into(), &|c: &mut TrainConfig| c.mode = AugmentMode::SupervisedOnly),
            cell("pose_mum+eman".into(), &|c: &mut TrainConfig| {
                c.mode = AugmentMode::PoseMum;
                c.teacher.mode = TeacherMode::Eman;
            }),
        ],
        other => {
            return Err(Error::config(
                "ablate.grid",
                format!("unknown grid `{other}` (one of {})", ABLATION_GRIDS.join(", ")),
            ))
        }
    };
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    /// Seeds that finished.
    pub seed_count: usize,
    /// Final val PCK@0.1, mean and sample standard deviation over seeds.
    pub pck01_mean: f64,
    pub pck01_sd: f64,
}

impl SummaryRow {
    pub fn from_scores(variant: &str, scores: &[f64]) -> Self {
        let n = scores.len();
        let mean = if n == 0 { f64::NAN } else { scores.iter().sum::<f64>() / n as f64 };
        let sd = match n {
            0 => f64::NAN,
            1 => 0.0,
            _ => (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
        };
        Self { variant: variant.into(), seed_count: n, pck01_mean: mean, pck01_sd: sd }
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut s = format!("{SIMPLIFIED_AP_NOTE}\n{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, r.seed_count, r.pck01_mean, r.pck01_sd));
    }
    write(path, s.as_bytes())
}

/// Runs every cell for seeds `base_seed..base_seed + seeds` into
/// `out_dir/<variant>/seed<k>/`, then writes `out_dir/summary.csv`. A failing
/// seed is logged to `out_dir/failures.txt` and the grid carries on.
pub fn run_ablation(cells: &[AblationCell], seeds: usize, data: &DatasetSplit, out_dir: &Path) -> Result<Vec<SummaryRow>> {
    if seeds == 0 {
        return Err(Error::config("ablate.seeds", "must be positive"));
    }
    for c in cells {
        c.cfg.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = Vec::new();
    let mut failures = String::new();
    for c in cells {
        let mut scores = Vec::new();
        for k in 0..seeds as u64 {
            let mut cfg = c.cfg.clone();
            cfg.seed = c.cfg.seed + k;
            let dir: PathBuf = out_dir.join(sanitize(&c.variant)).join(format!("seed{}", cfg.seed));
            match run_experiment(&cfg, data, &dir, ExperimentOptions::default()) {
                Ok(rows) => scores.push(rows.last().map_or(0.0, |r| r.pck01)),
                Err(e) => failures.push_str(&format!("{},{},{}\n", c.variant, cfg.seed, e)),
            }
        }
        summary.push(SummaryRow::from_scores(&c.variant, &scores));
    }
    write_summary_csv(&out_dir.join(SUMMARY_FILE), &summary)?;
    if !failures.is_empty() {
        write(&out_dir.join("failures.txt"), failures.as_bytes())?;
    }
    Ok(summary)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = TrainConfig::default();
        assert_eq!(ablation_grid("modes", &base).unwrap().len(), 2);
        assert_eq!(ablation_grid("table2", &base).unwrap().len(), 4);
        let t4 = ablation_grid("table4", &base).unwrap();
        assert_eq!(t4.iter().map(|c| c.cfg.teacher.decay).collect::<Vec<_>>(), vec![0.999, 0.99, 0.9, 0.6, 0.5]);
        assert!(t4.iter().all(|c| c.cfg.teacher.mode == TeacherMode::Eman));
        assert!(matches!(ablation_grid("nope", &base), Err(Error::Config { .. })));
        for g in ABLATION_GRIDS {
            for c in ablation_grid(g, &base).unwrap() {
                c.cfg.validate().unwrap();
            }
        }
    }

    #[test]
    fn summary_statistics() {
        let r = SummaryRow::from_scores("x", &[0.2, 0.4, 0.6]);
        assert_eq!(r.seed_count, 3);
        assert!((r.pck01_mean - 0.4).abs() < 1e-15);
        assert!((r.pck01_sd - 0.2).abs() < 1e-15);
        assert!(SummaryRow::from_scores("y", &[]).pck01_mean.is_nan());
    }
}
