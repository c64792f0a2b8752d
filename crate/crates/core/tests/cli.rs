//! End-to-end checks of the `semod` binary: exit codes, output files and
//! determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use semod::config::RunConfig;
use semod::trainer::init_model;
use semod::world::WorldConfig;

fn semod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semod")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn write_config(dir: &Path, config: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, config.to_toml()).unwrap();
    path
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A desk-length run on the leakage-free world, trained once.
fn clean_run() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::desk();
        c.world = WorldConfig { epsilon: 0.0, ..c.world };
        let cfg = write_config(dir.path(), &c);
        let run = dir.path().join("run");
        let o = semod(&["train", "--config", arg(&cfg), "--out", arg(&run)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dir
    })
    .path()
}

fn run_file(name: &str) -> PathBuf {
    clean_run().join("run").join(name)
}

#[test]
fn train_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RunConfig::smoke());
    let metrics = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = semod(&["train", "--config", arg(&cfg), "--out", arg(&out), "--seed", seed]);
        assert_eq!(code(&o), 0);
        (std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("checkpoint.ffc")).unwrap())
    };
    let a = metrics("3", "a");
    assert_eq!(a, metrics("3", "b"));
    assert_ne!(a.0, metrics("4", "c").0);
    let rows = String::from_utf8(a.0).unwrap();
    assert_eq!(rows.lines().next(), Some("iter,lr,total,sp,t,embd,norm,id,bg"));
    assert_eq!(rows.lines().count(), 51);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = RunConfig::smoke().to_toml().replace("batch_size = 8\n", "");
    let cfg = dir.path().join("broken.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = semod(&["train", "--config", arg(&cfg), "--out", arg(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));

    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&semod(&["train", "--config", arg(&missing)])), 1);
    assert_eq!(code(&semod(&["gradcheck", "--dims", "3by4"])), 2);
    assert_eq!(code(&semod(&["train", "--bogus"])), 2);
}

#[test]
fn unknown_prompt_exits_with_2() {
    let out = tempfile::tempdir().unwrap();
    let (ckpt, world) = (run_file("checkpoint.ffc"), run_file("world.ffw"));
    for prompt in ["attr9:+1", "attr0:+2", "smile"] {
        let o = semod(&[
            "edit",
            "--checkpoint",
            arg(&ckpt),
            "--world",
            arg(&world),
            "--prompt",
            prompt,
            "--out",
            arg(out.path()),
        ]);
        assert_eq!(code(&o), 2, "{prompt}");
    }
}

#[test]
fn gradcheck_passes() {
    let o = semod(&["gradcheck", "--trials", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn edit_with_no_samples_writes_only_headers() {
    let out = tempfile::tempdir().unwrap();
    let (ckpt, world) = (run_file("checkpoint.ffc"), run_file("world.ffw"));
    let o = semod(&[
        "edit",
        "--checkpoint",
        arg(&ckpt),
        "--world",
        arg(&world),
        "--prompt",
        "attr0:+1",
        "--samples",
        "0",
        "--out",
        arg(out.path()),
    ]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&out.path().join("edit.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].join(","), semod::runner::EDIT_HEADER);
}

#[test]
fn trained_edits_beat_the_unedited_code() {
    let out = tempfile::tempdir().unwrap();
    let (ckpt, world) = (run_file("checkpoint.ffc"), run_file("world.ffw"));
    for prompt in ["attr0:+1", "attr2:-1"] {
        let o = semod(&[
            "edit",
            "--checkpoint",
            arg(&ckpt),
            "--world",
            arg(&world),
            "--prompt",
            prompt,
            "--out",
            arg(out.path()),
        ]);
        assert_eq!(code(&o), 0);
        let rows = read_csv(&out.path().join("edit.csv"));
        let header = &rows[0];
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        let (t, unedited) = (col("t"), col("unedited_t"));
        let body = &rows[1..];
        assert_eq!(body.len(), 64);
        let improved =
            body.iter().filter(|r| r[t].parse::<f64>().unwrap() < r[unedited].parse::<f64>().unwrap()).count();
        assert!(improved * 10 >= body.len() * 9, "{prompt}: {improved}/64");

        let scales = read_csv(&out.path().join("edit_scales.csv"));
        assert_eq!(scales.len(), 1 + 64 * 4);
        for r in &scales[1..] {
            let sum: f64 = r[2..].iter().map(|x| x.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn two_step_interpolation_is_the_endpoints() {
    let out = tempfile::tempdir().unwrap();
    let (ckpt, world) = (run_file("checkpoint.ffc"), run_file("world.ffw"));
    let base = [
        "interpolate",
        "--checkpoint",
        arg(&ckpt),
        "--world",
        arg(&world),
        "--prompt",
        "attr0:+1",
        "--prompt",
        "attr1:-1",
        "--out",
        arg(out.path()),
    ];
    let o = semod(&[&base[..], &["--lambda-steps", "2"]].concat());
    assert_eq!(code(&o), 0);
    let rows = read_csv(&out.path().join("interpolate.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[2][1].parse::<f64>().unwrap(), 1.0);
    assert_eq!(code(&semod(&[&base[..], &["--lambda-steps", "1"]].concat())), 2);
    assert_eq!(code(&semod(&[&base[..7], &base[9..]].concat())), 2);
}

#[test]
fn eval_separates_trained_from_untrained() {
    let out = tempfile::tempdir().unwrap();
    let world = run_file("world.ffw");
    let gap = |ckpt: &Path| {
        let o = semod(&["eval", "--checkpoint", arg(ckpt), "--world", arg(&world), "--out", arg(out.path())]);
        assert_eq!(code(&o), 0);
        let rows = read_csv(&out.path().join("eval.csv"));
        let col = |name: &str| rows[0].iter().position(|h| h == name).unwrap();
        let (t, oracle, unedited) = (col("t"), col("oracle_t"), col("unedited_t"));
        let mean =
            |c: usize| rows[1..].iter().map(|r| r[c].parse::<f64>().unwrap()).sum::<f64>() / (rows.len() - 1) as f64;
        (mean(t), mean(oracle), mean(unedited))
    };
    let (t, oracle, unedited) = gap(&run_file("checkpoint.ffc"));
    assert!(t - oracle < 0.10, "trained gap {}", t - oracle);

    let fresh = out.path().join("fresh.ffc");
    init_model(RunConfig::desk().stack, 0).unwrap().save(&fresh).unwrap();
    let (t0, _, unedited0) = gap(&fresh);
    assert_eq!(unedited0, unedited);
    assert!(t0 > 0.5 * unedited && t0 > t + 0.3, "untrained {t0} vs unedited {unedited}, trained {t}");
}

#[test]
fn ablation_table_has_nine_columns_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::smoke();
    c.train.iterations = 10;
    let cfg = write_config(dir.path(), &c);
    let summary = |name: &str| {
        let out = dir.path().join(name);
        let o = semod(&["ablate", "--config", arg(&cfg), "--out", arg(&out), "--seed", "2"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("ablation_summary.csv")).unwrap()
    };
    let a = summary("a");
    assert_eq!(a, summary("b"));
    let header: Vec<&str> = a.lines().next().unwrap().split(',').skip(1).collect();
    assert_eq!(header, ["full", "no_s", "no_t", "no_st", "k0", "k2", "k4", "k6", "k10"]);
}

#[test]
fn defaults_print_a_loadable_config() {
    let o = semod(&["defaults"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::desk());
}
