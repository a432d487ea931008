use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use hoi_cli::ablate::Grid;
use hoi_cli::config::RunConfig;
use hoi_cli::run::param_count;
use hoi_core::archive::Archive;
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().to_string()
}

fn hoi(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoi"))
        .args(args)
        .env("HOI_OUT", out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = hoi(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).to_string()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn smoke_config_trains_within_two_minutes() {
    let out = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    ok(out.path(), &["train", &config("gen_smoke.toml")]);
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "smoke training took {secs:.1}s");
    let log = jsonl(&out.path().join("gen_smoke/seed-0/train_log.jsonl"));
    assert_eq!(log.len(), 200);
    let first = log[0]["loss"].as_f64().unwrap();
    let last = log[199]["loss"].as_f64().unwrap();
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn resume_reproduces_the_remaining_losses() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config("pcd_smoke.toml");
    let base = ["train", cfg.as_str(), "--set", "train.steps=30", "--set", "train.checkpoint_every=10"];
    ok(a.path(), &base);
    let mut first = base.to_vec();
    first.extend(["--until", "20"]);
    ok(b.path(), &first);
    let mut second = base.to_vec();
    second.push("--resume");
    let msg = ok(b.path(), &second);
    assert!(msg.contains("resumed at 20"), "{msg}");
    for f in ["train_log.jsonl", "checkpoint.safetensors"] {
        let x = fs::read(a.path().join("pcd_smoke/seed-0").join(f)).unwrap();
        let y = fs::read(b.path().join("pcd_smoke/seed-0").join(f)).unwrap();
        assert!(x == y, "{f} differs after resume");
    }
}

#[test]
fn resume_under_another_config_is_refused() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("gen_smoke.toml");
    ok(out.path(), &["train", &cfg, "--set", "train.steps=5"]);
    let o = hoi(out.path(), &["train", &cfg, "--set", "train.steps=6", "--set", "train.lr=0.01", "--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn baseline_parameter_counts_are_matched() {
    for name in ["gen_online.toml", "gen_memory.toml", "pcd_memory.toml", "gen_smoke.toml"] {
        let m = RunConfig::load(&configs().join(name), &[]).unwrap();
        let t = RunConfig::load(&configs().join(name), &["model=\"causal_transformer\"".into()]).unwrap();
        let (pm, pt) = (param_count(&m).unwrap() as f64, param_count(&t).unwrap() as f64);
        assert!((pt - pm).abs() / pm <= 0.10, "{name}: mamba {pm} vs transformer {pt}");
    }
}

#[test]
fn ground_truth_scores_perfectly() {
    let out = tempfile::tempdir().unwrap();
    ok(out.path(), &["eval", &config("pcd_smoke.toml"), "--ground-truth"]);
    let rows = jsonl(&out.path().join("pcd_smoke/eval_gt.jsonl"));
    for m in ["acc", "edit", "f1@10", "f1@25", "f1@50"] {
        assert_eq!(rows[0]["metrics"][m].as_f64(), Some(100.0), "{m}");
    }
    ok(out.path(), &["eval", &config("gen_smoke.toml"), "--ground-truth"]);
    let rows = jsonl(&out.path().join("gen_smoke/eval_gt.jsonl"));
    assert!(rows[0]["metrics"]["fid"].as_f64().unwrap().abs() < 1e-6);
    assert_eq!(rows[0]["metrics"]["recon_mse"].as_f64(), Some(0.0));
}

#[test]
fn reports_echo_config_hash_and_seed() {
    let out = tempfile::tempdir().unwrap();
    let path = configs().join("gen_smoke.toml");
    let cfg = RunConfig::load(&path, &["train.steps=20".into(), "seeds=[4]".into()]).unwrap();
    let p = path.to_string_lossy();
    let args = ["--set", "train.steps=20", "--set", "seeds=[4]"];
    ok(out.path(), &[&["train", &p][..], &args].concat());
    ok(out.path(), &[&["eval", &p][..], &args].concat());
    let row = &jsonl(&out.path().join("gen_smoke/eval.jsonl"))[0];
    assert_eq!(row["config_hash"].as_str(), Some(cfg.hash().as_str()));
    assert_eq!(row["seed"].as_u64(), Some(4));
    assert_eq!(row["causality_guard"].as_str(), Some("pass"));
    let echoed: RunConfig = serde_json::from_value(row["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    let csv = fs::read_to_string(out.path().join("gen_smoke/eval.csv")).unwrap();
    assert!(csv.contains(&cfg.hash()));
    let a = Archive::load(&out.path().join("gen_smoke/seed-4/checkpoint.safetensors")).unwrap();
    assert_eq!(a.get_meta("config_hash").unwrap(), cfg.hash());
    assert_eq!(a.get_meta("seed").unwrap(), "4");
    assert!(a.get_meta("content_version").unwrap().len() == 64);
    for r in jsonl(&out.path().join("gen_smoke/seed-4/train_log.jsonl")) {
        assert_eq!(r["config_hash"].as_str(), Some(cfg.hash().as_str()));
    }
}

#[test]
fn exit_codes_separate_config_and_numerical_failures() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("gen_smoke.toml");
    let code = |args: &[&str]| hoi(out.path(), args).status.code();
    assert_eq!(code(&["train", &cfg, "--set", "trian.steps=3"]), Some(2));
    assert_eq!(code(&["train", &cfg, "--memory", "sometimes"]), Some(2));
    assert_eq!(code(&["train", &cfg, "--set", "short_capacity=0"]), Some(2));
    assert_eq!(code(&["train", "/no/such/config.toml"]), Some(2));
    assert_eq!(code(&["eval", &cfg]), Some(2), "eval without a checkpoint");
    assert_eq!(code(&["frobnicate"]), Some(2));
    let o = hoi(out.path(), &["train", &cfg, "--set", "train.lr=1e300", "--set", "train.steps=20"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
}

#[test]
fn task_checkpoint_mismatch_is_a_config_error() {
    let out = tempfile::tempdir().unwrap();
    ok(out.path(), &["train", &config("pcd_smoke.toml"), "--set", "train.steps=2"]);
    let o = hoi(out.path(), &["eval", &config("gen_smoke.toml"), "--set", "name=\"pcd_smoke\""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("perception model"));
}

fn write_grid(dir: &Path, extra: &str) -> PathBuf {
    let base = config("gen_smoke.toml").replace('\\', "/");
    let text = format!(
        "base_config = \"{base}\"\n\n[set]\n\"train.steps\" = 15\nseeds = [0, 1, 2]\n\n[[family]]\nname = \"memory\"\naxes = {{ memory = [\"off\", \"me\"] }}\n{extra}"
    );
    let p = dir.join("grid.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn ablation_grid_is_order_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_grid(dir.path(), "");
    let g = grid.to_string_lossy();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let table = ok(a.path(), &["ablate", &g]);
    ok(b.path(), &["ablate", &g, "--shuffle", "11"]);
    let runs = jsonl(&a.path().join("gen_smoke/ablate_runs.jsonl"));
    assert_eq!(runs.len(), 6);
    assert!(runs.iter().all(|r| r["error"].is_null()));
    assert_eq!(table.matches("| memory=").count(), 2, "{table}");
    for f in ["ablate.md", "ablate.jsonl", "ablate_runs.jsonl", "ablate_memory.csv"] {
        let x = fs::read(a.path().join("gen_smoke").join(f)).unwrap();
        let y = fs::read(b.path().join("gen_smoke").join(f)).unwrap();
        assert!(x == y, "{f} depends on execution order");
    }
}

#[test]
fn ablation_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_grid(
        dir.path(),
        "\n[[family]]\nname = \"capacity\"\naxes = { short_capacity = [0, 2] }\n",
    );
    let out = tempfile::tempdir().unwrap();
    let table = ok(out.path(), &["ablate", &grid.to_string_lossy()]);
    let cells = jsonl(&out.path().join("gen_smoke/ablate.jsonl"));
    assert_eq!(cells.len(), 4);
    let bad = cells.iter().find(|c| c["cell"] == "short_capacity=0").unwrap();
    assert_eq!(bad["failed"].as_u64(), Some(1));
    let good = cells.iter().find(|c| c["cell"] == "short_capacity=2").unwrap();
    assert_eq!(good["failed"].as_u64(), Some(0));
    assert!(good["metrics"]["fid"]["mean"].is_number());
    assert!(table.contains("| short_capacity=0 | 0/1 |"), "{table}");
}

#[test]
fn plots_are_deterministic_and_complete() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("gen_smoke.toml");
    ok(out.path(), &["train", &cfg, "--set", "train.steps=10"]);
    ok(out.path(), &["eval", &cfg, "--set", "train.steps=10"]);
    let run = out.path().join("gen_smoke");
    let reports = [
        run.join("seed-0/train_log.jsonl"),
        run.join("seed-0/trajectory.jsonl"),
        run.join("eval.jsonl"),
    ];
    let mut broken = jsonl(&reports[1])[0].clone();
    broken.as_object_mut().unwrap().remove("generated");
    let broken_path = out.path().join("broken.jsonl");
    fs::write(&broken_path, format!("{broken}\n")).unwrap();
    let mut args: Vec<String> = vec!["plot".into()];
    args.extend(reports.iter().map(|p| p.to_string_lossy().to_string()));
    args.push(broken_path.to_string_lossy().to_string());
    let figs = |dir: &str| {
        let mut a = args.clone();
        a.extend(["--out".into(), out.path().join(dir).to_string_lossy().to_string()]);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        let o = hoi(out.path(), &refs);
        assert!(o.status.success());
        (String::from_utf8_lossy(&o.stdout).to_string(), String::from_utf8_lossy(&o.stderr).to_string())
    };
    let (listing, warnings) = figs("a");
    figs("b");
    assert!(warnings.contains("lacks matching series"), "{warnings}");
    // one loss curve, one trajectory, one bar chart per metric
    assert_eq!(listing.lines().count(), 8, "{listing}");
    let names: Vec<_> = fs::read_dir(out.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    for n in &names {
        let x = fs::read(out.path().join("a").join(n)).unwrap();
        let y = fs::read(out.path().join("b").join(n)).unwrap();
        assert!(x == y, "{n:?} differs between runs");
        assert!(String::from_utf8_lossy(&x).contains("config_hash: "));
    }
    let traj = names.iter().find(|n| n.to_string_lossy().contains("trajectory")).unwrap();
    let svg = fs::read_to_string(out.path().join("a").join(traj)).unwrap();
    assert!(svg.contains("per-frame error") && svg.contains("<polygon"));
}

#[test]
fn datagen_manifest_round_trips() {
    let out = tempfile::tempdir().unwrap();
    for name in ["gen_smoke.toml", "pcd_smoke.toml"] {
        let cfg = config(name);
        let d1 = out.path().join(format!("{name}.d1"));
        let d2 = out.path().join(format!("{name}.d2"));
        let m1 = ok(out.path(), &["datagen", &cfg, "--out", &d1.to_string_lossy()]);
        let m2 = ok(out.path(), &["datagen", &cfg, "--out", &d2.to_string_lossy()]);
        assert_eq!(m1.split(" in ").next(), m2.split(" in ").next());
        let stem = name.trim_end_matches(".toml");
        let memory = out.path().join("mem");
        let disk = out.path().join("disk");
        let data = format!("paths.data=\"{}\"", d1.to_string_lossy().replace('\\', "/"));
        ok(&memory, &["train", &cfg, "--set", "train.steps=3"]);
        ok(&disk, &["train", &cfg, "--set", "train.steps=3", "--set", &data]);
        let a = Archive::load(&memory.join(stem).join("seed-0/checkpoint.safetensors")).unwrap();
        let b = Archive::load(&disk.join(stem).join("seed-0/checkpoint.safetensors")).unwrap();
        assert_eq!(a.tensors, b.tensors, "{name}: data read from disk differs");
        let victim = fs::read_dir(d1.join("train")).unwrap().next().unwrap().unwrap().path();
        fs::write(&victim, "0 1.0\n").unwrap();
        let o = hoi(&disk, &["train", &cfg, "--set", "train.steps=3", "--set", &data]);
        assert_eq!(o.status.code(), Some(2), "{name}: tampered data accepted");
    }
}

#[test]
fn shipped_grids_have_valid_cells() {
    let expect = [
        ("ablate_model.toml", 6),
        ("ablate_memory_gen.toml", 6),
        ("ablate_memory_pcd.toml", 6),
        ("ablate_full_gen.toml", 33),
        ("ablate_full_pcd.toml", 33),
    ];
    for (name, runs) in expect {
        let grid = Grid::load(&configs().join(name)).unwrap();
        for c in &grid.cells {
            assert!(c.config.is_ok(), "{name} {}: {:?}", c.label, c.config);
        }
        assert_eq!(grid.jobs().len(), runs, "{name}");
    }
}
