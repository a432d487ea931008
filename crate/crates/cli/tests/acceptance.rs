//! Acceptance gate: one pass/fail line per criterion.
//!
//! Set `HOI_ACCEPTANCE_OUT` to keep the directional runs' reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hoi_cli::ablate::{run_grid, write_reports, Grid, RunRecord};
use hoi_testkit::{criteria, timed, Outcome};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

type ByCell = BTreeMap<String, BTreeMap<u64, f64>>;

/// Runs a shipped grid; any failed run fails the check.
fn grid_runs(file: &str) -> Result<Vec<RunRecord>, String> {
    let grid = Grid::load(&configs().join(file)).map_err(|e| e.to_string())?;
    let report = run_grid(&grid, None, true, |r: &RunRecord| {
        eprintln!("  {file}: {} seed {} {}", r.cell, r.seed, r.error.as_deref().unwrap_or("done"));
    });
    write_reports(&grid, &report).map_err(|e| e.to_string())?;
    match report.runs.iter().find(|r| r.error.is_some()) {
        Some(r) => Err(format!("{} seed {}: {}", r.cell, r.seed, r.error.as_deref().unwrap_or(""))),
        None => Ok(report.runs),
    }
}

/// `metric[cell][seed]`.
fn by_cell(runs: &[RunRecord], metric: &str) -> ByCell {
    let mut out = ByCell::new();
    for r in runs {
        out.entry(r.cell.clone()).or_default().insert(r.seed, r.metrics[metric]);
    }
    out
}

/// Seeds on which `better(a, b)` holds for cells `a` and `b`.
fn wins(m: &ByCell, a: &str, b: &str, better: fn(f64, f64) -> bool) -> (usize, String) {
    let (ma, mb) = (&m[a], &m[b]);
    let mut n = 0;
    let mut parts = Vec::new();
    for (seed, va) in ma {
        let vb = mb[seed];
        if better(*va, vb) {
            n += 1;
        }
        parts.push(format!("s{seed} {va:.4} vs {vb:.4}"));
    }
    (n, parts.join(", "))
}

fn lower(a: f64, b: f64) -> bool {
    a < b
}

fn higher(a: f64, b: f64) -> bool {
    a > b
}

fn mamba_beats_transformer() -> Outcome {
    timed("Directional: online Mamba beats causal transformer", 3600.0, || {
        let runs = match grid_runs("ablate_model.toml") {
            Ok(r) => r,
            Err(e) => return (false, e),
        };
        let (recon, fid) = (by_cell(&runs, "recon_mse"), by_cell(&runs, "fid"));
        let (a, b) = ("model=mamba", "model=causal_transformer");
        let (_, rd) = wins(&recon, a, b, lower);
        let (_, fd) = wins(&fid, a, b, lower);
        let both = recon[a]
            .keys()
            .filter(|s| recon[a][s] < recon[b][s] && fid[a][s] < fid[b][s])
            .count();
        (both >= 2, format!("{both}/3 seeds lower on both; recon [{rd}]; fid [{fd}]"))
    })
}

fn memory_beats_no_memory() -> Outcome {
    timed("Directional: memory=me beats memory=off (generation and perception)", 7200.0, || {
        let gen = match grid_runs("ablate_memory_gen.toml") {
            Ok(r) => by_cell(&r, "recon_mse"),
            Err(e) => return (false, e),
        };
        let pcd = match grid_runs("ablate_memory_pcd.toml") {
            Ok(r) => by_cell(&r, "acc"),
            Err(e) => return (false, e),
        };
        let (gw, gd) = wins(&gen, "memory=me", "memory=off", lower);
        let (pw, pd) = wins(&pcd, "memory=me", "memory=off", higher);
        (
            gw >= 2 && pw >= 2,
            format!("generation recon {gw}/3 [{gd}]; perception acc {pw}/3 [{pd}]"),
        )
    })
}

fn run_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).expect("prefix").to_path_buf(), fs::read(&p).expect("file"));
            }
        }
    }
    out
}

/// Every file written by train and eval of both smoke configs, for one output root.
fn cli_artifacts(out: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    for cfg in ["gen_smoke.toml", "pcd_smoke.toml"] {
        let c = configs().join(cfg);
        for verb in ["train", "eval"] {
            let o = Command::new(env!("CARGO_BIN_EXE_hoi"))
                .args([verb, &c.to_string_lossy(), "--set", "train.steps=40"])
                .env("HOI_OUT", out)
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("{verb} {cfg}: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
    }
    Ok(run_tree(out))
}

fn determinism() -> Outcome {
    timed("Determinism", f64::INFINITY, || {
        let mut fails = criteria::determinism_failures();
        let (a, b) = (tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp"));
        match (cli_artifacts(a.path()), cli_artifacts(b.path())) {
            (Ok(x), Ok(y)) => {
                if x.keys().ne(y.keys()) {
                    fails.push("CLI runs wrote different file sets".into());
                }
                for (k, v) in &x {
                    if y.get(k) != Some(v) {
                        fails.push(format!("CLI artifact {} differs", k.display()));
                    }
                }
                if fails.is_empty() {
                    return (true, format!("library runs and {} CLI artifacts bitwise equal", x.len()));
                }
            }
            (Err(e), _) | (_, Err(e)) => fails.push(e),
        }
        (false, fails.join("; "))
    })
}

fn main() {
    let keep = std::env::var_os("HOI_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("tmp");
    let out = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    std::env::set_var("HOI_OUT", &out);
    let checks: Vec<fn() -> Outcome> = vec![
        criteria::scan_kernel,
        criteria::causality_suite,
        criteria::memory_oracle,
        criteria::diffusion_forward,
        criteria::gradients,
        criteria::metric_oracles,
        mamba_beats_transformer,
        memory_beats_no_memory,
        criteria::overfit,
        determinism,
    ];
    let mut lines = Vec::new();
    let mut failed = 0;
    for check in checks {
        let o = check();
        println!("{}", o.line());
        failed += usize::from(!o.pass);
        lines.push(o.line());
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("{l}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
