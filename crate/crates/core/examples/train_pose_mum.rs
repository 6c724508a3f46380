// A short Pose-MUM run with an EMAN teacher on a small synthetic split,
// stopped after two epochs and resumed from the checkpoint on disk.

use mumkit::ssltrain::{run_experiment, read_metrics_csv, AugmentMode, ExperimentOptions, TrainConfig, METRICS_FILE};
use mumkit::synthpose::{generate_dataset, DataConfig};
use mumkit::teacher::TeacherMode;

fn main() -> mumkit::Result<()> {
    let data = generate_dataset(&DataConfig { n_labeled: 16, n_unlabeled: 32, n_val: 16, seed: 5, ..DataConfig::default() })?;
    let mut cfg = TrainConfig { epochs: 4, lr_milestones: vec![3], mode: AugmentMode::PoseMum, ..TrainConfig::default() };
    cfg.teacher.mode = TeacherMode::Eman;

    let dir = tempfile::tempdir().map_err(|e| mumkit::Error::io("tempdir", e))?;
    run_experiment(&cfg, &data, dir.path(), ExperimentOptions { resume: false, stop_after: Some(2) })?;
    let rows = run_experiment(&cfg, &data, dir.path(), ExperimentOptions { resume: true, stop_after: None })?;
    assert_eq!(read_metrics_csv(&dir.path().join(METRICS_FILE))?.len(), rows.len());
    println!("epoch  loss_sup  loss_unsup  pck@0.1  teacher pck@0.1");
    for r in &rows {
        println!("{:>5}  {:.5}   {:.5}     {:.3}    {:.3}", r.epoch, r.loss_sup, r.loss_unsup, r.pck01, r.teacher_pck01);
    }
    Ok(())
}
