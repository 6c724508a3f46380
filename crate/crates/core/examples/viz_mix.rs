// Write one mixing group's inputs, image-level mixes and per-stage feature
// montages as binary greymaps.

use mumkit::cli::{cmd_viz_mix, RunConfig};
use mumkit::synthpose::generate_dataset;

fn main() -> mumkit::Result<()> {
    let mut cfg = RunConfig::parse("data.n_labeled = 4\ndata.n_unlabeled = 4\ndata.n_val = 8\nmix.mix_prob = 1\n")?;
    cfg.train.seed = 11;
    let dir = tempfile::tempdir().map_err(|e| mumkit::Error::io("tempdir", e))?;
    let data_path = dir.path().join("data.spd");
    generate_dataset(&cfg.data_config())?.save(&data_path)?;
    let out = dir.path().join("viz");
    cmd_viz_mix(&cfg, &data_path, &out)?;
    let mut names: Vec<_> = std::fs::read_dir(&out).map_err(|e| mumkit::Error::io(&out, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.sort();
    println!("{}", names.join(" "));
    Ok(())
}
