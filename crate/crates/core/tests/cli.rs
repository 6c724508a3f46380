use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mumkit");

fn mumkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).env_remove("MUMKIT_SEED").args(args).output().expect("spawn mumkit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &str = "data.n_labeled = 8\ndata.n_unlabeled = 16\ndata.n_val = 8\ntrain.epochs = 2\ntrain.lr_milestones = 1\n";

fn pgm_dims(bytes: &[u8]) -> (usize, usize, usize) {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(200)]).into_owned();
    let mut fields = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(fields.next(), Some("P5"));
    let dims: Vec<usize> = fields.next().unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields.next(), Some("255"));
    let header_len = bytes.len() - dims[0] * dims[1];
    (dims[0], dims[1], header_len)
}

#[test]
fn pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.txt"), SMALL).unwrap();
    let o = mumkit(d, &["gen-data", "--config", "c.txt", "--out", "data.spd"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mumkit(d, &["train", "--config", "c.txt", "--data", "data.spd", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2);
    assert_eq!(code(&mumkit(d, &["eval", "--ckpt", "run/checkpoint.mmk", "--data", "data.spd"])), 0);

    // a different config must not silently resume
    fs::write(d.join("c2.txt"), format!("{SMALL}train.lr = 0.01\n")).unwrap();
    assert_eq!(code(&mumkit(d, &["train", "--config", "c2.txt", "--data", "data.spd", "--out", "run"])), 2);

    fs::write(d.join("bad.txt"), "train.nonsense = 1\n").unwrap();
    assert_eq!(code(&mumkit(d, &["gen-data", "--config", "bad.txt", "--out", "x.spd"])), 2);
    assert_eq!(code(&mumkit(d, &["gen-data", "--config", "missing.txt", "--out", "x.spd"])), 3);
    assert_eq!(code(&mumkit(d, &["train", "--config", "c.txt", "--data", "missing.spd", "--out", "r"])), 3);
    fs::write(d.join("junk.spd"), b"not a dataset").unwrap();
    assert_eq!(code(&mumkit(d, &["eval", "--ckpt", "run/checkpoint.mmk", "--data", "junk.spd"])), 3);
    assert_eq!(code(&mumkit(d, &["train", "--config", "c.txt"])), 2);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.txt"), format!("{SMALL}seed = 4\n")).unwrap();
    fs::write(d.join("c9.txt"), format!("{SMALL}seed = 9\n")).unwrap();
    let run = |cfg: &str, out: &str, env: Option<&str>| {
        let mut c = Command::new(BIN);
        c.current_dir(d).env_remove("MUMKIT_SEED").args(["gen-data", "--config", cfg, "--out", out]);
        if let Some(v) = env {
            c.env("MUMKIT_SEED", v);
        }
        assert!(c.status().unwrap().success());
        fs::read(d.join(out)).unwrap()
    };
    let a = run("c.txt", "a.spd", Some("9"));
    let b = run("c9.txt", "b.spd", None);
    let c = run("c.txt", "c.spd", None);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn viz_mix_writes_valid_greymaps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.txt"), format!("{SMALL}mix.mix_prob = 1\n")).unwrap();
    fs::write(d.join("id.txt"), format!("{SMALL}mix.identity_masks = true\n")).unwrap();
    assert_eq!(code(&mumkit(d, &["gen-data", "--config", "c.txt", "--out", "data.spd"])), 0);
    assert_eq!(code(&mumkit(d, &["viz-mix", "--config", "c.txt", "--data", "data.spd", "--out", "viz"])), 0);
    assert_eq!(code(&mumkit(d, &["viz-mix", "--config", "id.txt", "--data", "data.spd", "--out", "vid"])), 0);
    let mut n = 0;
    for e in fs::read_dir(d.join("viz")).unwrap() {
        let bytes = fs::read(e.unwrap().path()).unwrap();
        let (w, h, header) = pgm_dims(&bytes);
        assert_eq!(bytes.len(), header + w * h);
        n += 1;
    }
    assert_eq!(n, 4 * 6);
    let mut mixed_differs = false;
    for k in 0..4 {
        let input = fs::read(d.join(format!("vid/input_{k}.pgm"))).unwrap();
        assert_eq!(pgm_dims(&input).0, 64);
        assert_eq!(input, fs::read(d.join(format!("vid/mixed_{k}.pgm"))).unwrap());
        mixed_differs |= fs::read(d.join(format!("viz/mixed_{k}.pgm"))).unwrap() != input;
    }
    assert!(mixed_differs);
}

#[test]
fn help_lists_defaults() {
    let o = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["train.lambda_u", "teacher.decay", "mix.mix_prob", "MUMKIT_SEED"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn default_pipeline_writes_thirty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("defaults.txt"), "# all defaults\n").unwrap();
    assert_eq!(code(&mumkit(d, &["gen-data", "--config", "defaults.txt", "--out", "data.spd"])), 0);
    let o = mumkit(d, &["train", "--config", "defaults.txt", "--data", "data.spd", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).skip(1).count();
    assert!(rows >= 30, "{rows} rows");
}
