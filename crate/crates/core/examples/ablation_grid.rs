// The teacher-update grid (single, EMA, EMAN) over two seeds at toy size,
// with the per-variant summary it writes.

use mumkit::ssltrain::{ablation_grid, run_ablation, TrainConfig, SUMMARY_FILE};
use mumkit::synthpose::{generate_dataset, DataConfig};

fn main() -> mumkit::Result<()> {
    let data = generate_dataset(&DataConfig { n_labeled: 8, n_unlabeled: 16, n_val: 8, seed: 2, ..DataConfig::default() })?;
    let base = TrainConfig { epochs: 2, lr_milestones: vec![1], ..TrainConfig::default() };
    let cells = ablation_grid("table2", &base)?;
    let dir = tempfile::tempdir().map_err(|e| mumkit::Error::io("tempdir", e))?;
    let summary = run_ablation(&cells, 2, &data, dir.path())?;
    for r in &summary {
        println!("{:<10} seeds={} pck@0.1 {:.3} +- {:.3}", r.variant, r.seed_count, r.pck01_mean, r.pck01_sd);
    }
    let text = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).map_err(|e| mumkit::Error::io(SUMMARY_FILE, e))?;
    print!("{text}");
    Ok(())
}
