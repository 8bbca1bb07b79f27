//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero if any
//! criterion fails. Criteria 8 and 9 train both desk models (several minutes).

use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};
use std::time::Instant;

use otrecon::checks::{self, Check};
use otrecon::commands::{self, PROP1_TOLERANCE};
use otrecon::{run, Command, Config};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Result<Outcome, String>) -> bool {
    let t = Instant::now();
    let o = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    println!(
        "criterion {id:>2} {:<4} {name}: {} [{:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        t.elapsed().as_secs_f64()
    );
    o.pass
}

fn summarize(checks: &[Check]) -> Outcome {
    let bad: Vec<_> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let worst = checks
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}", c.name, c.max_error, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(bad.is_empty(), if bad.is_empty() { worst } else { format!("failed {bad:?}; {worst}") })
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> Result<Config, String> {
    Config::load(&repo().join("configs").join(name)).map_err(|e| e.to_string())
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn binary(args: &[&str], cwd: &Path) -> Result<String, String> {
    let o = Process::new(env!("CARGO_BIN_EXE_otrecon"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("otrecon {args:?}: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

struct Training {
    rows: usize,
    skipped: usize,
    finite: bool,
    seconds: f64,
}

fn desk_training(name: &str, out: &Path) -> Result<Training, String> {
    let c = config(name)?;
    let t = Instant::now();
    run(Command::Train, &c, out).map_err(|e| e.to_string())?;
    let seconds = t.elapsed().as_secs_f64();
    let text = std::fs::read_to_string(out.join("metrics.csv")).map_err(|e| e.to_string())?;
    let mut tr = Training {
        rows: 0,
        skipped: 0,
        finite: true,
        seconds,
    };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        tr.rows += 1;
        match f[1].parse::<f64>() {
            Ok(v) => tr.finite &= v.is_finite(),
            Err(_) if f[1].is_empty() => {}
            Err(_) => tr.finite = false,
        }
        tr.skipped = f[5].parse().map_err(|_| format!("bad skipped field in {line}"))?;
    }
    Ok(tr)
}

fn main() -> ExitCode {
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).expect("scratch directory");
    let mut all = true;

    all &= report(1, "Sinkhorn vs exact transport, 100 instances, under 60 s", || {
        let t = Instant::now();
        let c = checks::sinkhorn_vs_exact(100, 5000, 1).map_err(|e| e.to_string())?;
        let s = t.elapsed().as_secs_f64();
        let mut o = summarize(&[c]);
        o.pass &= s < 60.0;
        o.detail = format!("{}; {s:.1} s", o.detail);
        Ok(o)
    });

    all &= report(2, "spectral kernel products match dense, 128 x 128 under 0.1 s", || {
        let c = checks::fft_vs_dense(&[8, 16, 32, 64], 2).map_err(|e| e.to_string())?;
        let s = checks::spectral_seconds(128).map_err(|e| e.to_string())?;
        let mut o = summarize(&[c]);
        o.pass &= s < 0.1;
        o.detail = format!("{}; 128 x 128 product {:.1} ms", o.detail, s * 1e3);
        Ok(o)
    });

    all &= report(3, "gradients agree with central differences", || {
        Ok(summarize(&checks::gradient_suite(20, 3).map_err(|e| e.to_string())?))
    });

    all &= report(4, "ray transform adjoint identity", || Ok(summarize(&[checks::desk_adjoint(50, 4)])));

    all &= report(5, "L2 minimizer under random shifts is the smoothed signal", || {
        let t = Instant::now();
        let r = otrecon::props::prop1(256, 8.0, 8, 10_000, 5);
        let s = t.elapsed().as_secs_f64();
        Ok(Outcome::new(
            r.discrepancy <= PROP1_TOLERANCE && s < 10.0,
            format!("relative gap {:.2e} (tolerance {PROP1_TOLERANCE}); {s:.2} s", r.discrepancy),
        ))
    });

    all &= report(6, "transport minimizers in one dimension", || {
        let c = Config::parse("seed = 6").map_err(|e| e.to_string())?;
        let r = otrecon::props::prop2(&commands::prop2_config(&c)).map_err(|e| e.to_string())?;
        let bad: Vec<_> = r.rows.iter().filter(|x| !x.pass).map(|x| x.case.clone()).collect();
        Ok(Outcome::new(
            bad.is_empty(),
            format!("{} cases, failed {bad:?}, Sinkhorn residual {:.1e}", r.rows.len(), r.sinkhorn_residual),
        ))
    });

    all &= report(7, "triangle inequality of the transport distance", || {
        let rows: Vec<_> = [1.0, 2.0, 4.0]
            .iter()
            .enumerate()
            .map(|(k, &n)| otrecon::props::metric_check(n, 1_000_000, 7, k as u64))
            .collect();
        let v: u64 = rows.iter().map(|r| r.violations).sum();
        let excess = rows.iter().map(|r| r.max_excess).fold(f64::NEG_INFINITY, f64::max);
        Ok(Outcome::new(
            v == 0,
            format!("10^6 triples for n = 1, 2, 4: {v} violations, largest excess {excess:.2e}"),
        ))
    });

    let l2_dir = work.join("desk_l2");
    let ot_dir = work.join("desk_ot");
    let trained = report(8, "desk trainings finish with finite losses", || {
        let a = desk_training("desk_l2.conf", &l2_dir)?;
        let b = desk_training("desk_ot.conf", &ot_dir)?;
        let ok = |t: &Training| t.rows == 2000 && t.finite && t.skipped * 100 < t.rows && t.seconds <= 4.0 * 3600.0;
        Ok(Outcome::new(
            ok(&a) && ok(&b),
            format!(
                "l2 {} steps, {} skipped, {:.0} s; ot {} steps, {} skipped, {:.0} s",
                a.rows, a.skipped, a.seconds, b.rows, b.skipped, b.seconds
            ),
        ))
    });
    all &= trained;

    all &= report(9, "transport loss reduces smearing", || {
        if !trained {
            return Err("desk trainings unavailable".into());
        }
        let mut c = config("eval_desk.conf")?;
        c.set("checkpoint_l2", l2_dir.join("final.otpd").to_str().unwrap())?;
        c.set("checkpoint_ot", ot_dir.join("final.otpd").to_str().unwrap())?;
        let out = work.join("eval");
        std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
        let mut manifest = otrecon::manifest::RunManifest::new("eval", &c);
        let r = commands::eval(&c, &out, &mut manifest).map_err(|e| e.to_string())?;
        let l2 = r.model("l2").ok_or("no l2 row")?.mean.spread_ratio;
        let ot = r.model("ot").ok_or("no ot row")?.mean.spread_ratio;
        Ok(Outcome::new(
            ot < l2 && l2 > 1.1,
            format!("mean spread ratio l2 {l2:.4} (needs > 1.1), ot {ot:.4} (needs < l2)"),
        ))
    });

    all &= report(10, "runs are bitwise reproducible", || {
        let a = binary(&["selftest", "--out", "st_a"], &work)?;
        let b = binary(&["selftest", "--out", "st_b"], &work)?;
        let smoke = repo().join("configs/smoke.conf");
        let smoke = smoke.to_str().unwrap();
        binary(&["train", "--config", smoke, "--out", "tr_a"], &work)?;
        binary(&["train", "--config", smoke, "--out", "tr_b"], &work)?;
        binary(&["train", "--config", "tr_a/manifest.txt", "--out", "tr_c"], &work)?;
        let st = a == b && snapshot(&work.join("st_a")) == snapshot(&work.join("st_b"));
        let ta = snapshot(&work.join("tr_a"));
        let tr = ta == snapshot(&work.join("tr_b")) && ta == snapshot(&work.join("tr_c"));
        Ok(Outcome::new(
            st && tr,
            format!("selftest identical: {st}; 50-step training and manifest replay identical: {tr}"),
        ))
    });

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
