// Parse a key=value run configuration, override a few keys and dump the
// effective config that `mumkit train` would write next to its outputs.

use mumkit::cli::RunConfig;

fn main() -> mumkit::Result<()> {
    let text = "# small Pose-MUM run\nseed = 3\ntrain.epochs = 10\ntrain.lr_milestones = 6,8\nmix.n_group = 2\n";
    let mut cfg = RunConfig::parse(text)?;
    cfg.apply_seed_override(std::env::var("MUMKIT_SEED").ok().as_deref())?;
    let dumped = cfg.dump();
    print!("{dumped}");
    assert_eq!(RunConfig::parse(&dumped)?, cfg);
    match RunConfig::parse("train.speed = 3") {
        Err(e) => println!("rejected: {e} (exit code {})", e.exit_code()),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
