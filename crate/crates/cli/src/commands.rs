//! The `otrecon` subcommands. Each writes its artifacts and one manifest into the
//! output directory and returns the lines it reports on stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use otrecon_core::datagen::{render_circles, TrainingPair, MANIFEST_HEADER};
use otrecon_core::diffnet::{load_checkpoint, PrimalDualNet};
use otrecon_core::io::{save_measure, save_sinogram};
use otrecon_core::training::{train, validation_set, TrainOutput};
use otrecon_core::DiscreteMeasure;

use crate::checks::{self, Check, CHECK_HEADER};
use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::figures::{save_sheet, Panel};
use crate::manifest::RunManifest;
use crate::metrics::{compare, mean, SampleMetrics};
use crate::props::{self, Prop2Config};
use crate::setup;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Eval,
    Prop1,
    Prop2,
    MetricCheck,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Prop1 => "prop1",
            Command::Prop2 => "prop2",
            Command::MetricCheck => "metric-check",
            Command::Selftest => "selftest",
        }
    }
}

pub fn run(cmd: Command, config: &Config, out: &Path) -> CliResult<Vec<String>> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(cmd.name(), config);
    let result = match cmd {
        Command::Generate => generate(config, out, &mut manifest),
        Command::Train => run_train(config, out, &mut manifest),
        Command::Eval => eval(config, out, &mut manifest).map(|r| r.lines),
        Command::Prop1 => prop1(config, out, &mut manifest),
        Command::Prop2 => prop2(config, out, &mut manifest),
        Command::MetricCheck => metric_check(config, out, &mut manifest),
        Command::Selftest => selftest(config, out, &mut manifest),
    };
    // failed checks still leave a complete record behind
    if result.is_ok() || matches!(result, Err(CliError::CheckFailed(_))) {
        manifest.write(out)?;
    }
    result
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> CliResult<()> {
    let mut s = String::with_capacity(rows.len() * 64);
    writeln!(s, "{header}").unwrap();
    for r in rows {
        writeln!(s, "{r}").unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn shifted_image(pair: &TrainingPair, truth: &DiscreteMeasure) -> DiscreteMeasure {
    let moved: Vec<_> = pair
        .circles
        .iter()
        .zip(&pair.shifts)
        .map(|(c, &d)| c.translated(d))
        .collect();
    render_circles(truth.grid(), &moved)
}

fn image_panel(m: &DiscreteMeasure) -> Panel {
    Panel::new(m.grid().width(), m.grid().height(), m.values().to_vec())
}

pub fn generate(c: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<Vec<String>> {
    let ds = setup::dataset(c)?;
    let n = c.int("pairs");
    let dir = out.join("pairs");
    std::fs::create_dir_all(&dir)?;
    let mut lines = Vec::new();
    for k in 0..n {
        let pair = ds.pair(k)?;
        save_measure(&dir.join(format!("pair_{k:05}_truth.otr")), &pair.truth)?;
        save_sinogram(&dir.join(format!("pair_{k:05}_data.ots")), &pair.data)?;
        lines.push(ds.manifest_line(k, &pair));
        if k == 0 {
            let g = pair.data.geometry();
            save_sheet(
                &out.join("triptych.pgm"),
                &[
                    image_panel(&pair.truth),
                    image_panel(&shifted_image(&pair, &pair.truth)),
                    Panel::new(g.detectors(), g.angles(), pair.data.values().to_vec()),
                ],
            )?;
            manifest.artifacts.push("triptych.pgm".into());
        }
    }
    write_csv(&out.join("dataset.csv"), MANIFEST_HEADER, &lines)?;
    manifest.artifacts.push("dataset.csv".into());
    if n > 0 {
        manifest.artifacts.push(format!("pairs/pair_{{00000..{:05}}}_{{truth.otr,data.ots}}", n - 1));
    }
    Ok(vec![format!("generated {n} pairs in {}", out.display())])
}

pub fn run_train(c: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<Vec<String>> {
    let tc = setup::train(c)?;
    let resume = c.path("checkpoint").map(|p| load_checkpoint(&p)).transpose()?;
    let o = TrainOutput {
        dir: out.to_path_buf(),
    };
    let t = Instant::now();
    let r = train(&tc, resume, Some(&o))?;
    manifest.artifacts.extend(["metrics.csv", "validation.csv", "final.otpd"].map(String::from));
    if tc.checkpoint_every > 0 {
        manifest.artifacts.push("step_NNNNNN.otpd".into());
    }
    let mut lines = vec![format!(
        "trained {} steps ({} skipped) in {:.1} s",
        r.log.len(),
        r.skipped,
        t.elapsed().as_secs_f64()
    )];
    if let Some(v) = r.validation.last() {
        lines.push(format!("validation loss at step {}: {}", v.step, v.loss));
    }
    Ok(lines)
}

#[derive(Debug, Clone)]
pub struct ModelEval {
    pub label: String,
    pub samples: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub models: Vec<ModelEval>,
    pub lines: Vec<String>,
}

impl EvalReport {
    pub fn model(&self, label: &str) -> Option<&ModelEval> {
        self.models.iter().find(|m| m.label == label)
    }
}

fn load_net(c: &Config, path: &Path) -> CliResult<PrimalDualNet<f32>> {
    let cp = load_checkpoint(path)?;
    let want = setup::net(c)?;
    let got = cp.net.config();
    if got.grid != want.grid || got.geometry != want.geometry {
        return Err(otrecon_core::Error::Contract(format!(
            "checkpoint {} was trained on a {}x{} grid with {} angles and {} detectors; \
             the evaluation data uses {}x{} with {} and {}",
            path.display(),
            got.grid.width(),
            got.grid.height(),
            got.geometry.angles(),
            got.geometry.detectors(),
            want.grid.width(),
            want.grid.height(),
            want.geometry.angles(),
            want.geometry.detectors()
        ))
        .into());
    }
    Ok(cp.net)
}

pub const EVAL_HEADER: &str = "model,index,l2,mass_err,centroid,spread_ratio";
pub const EVAL_SUMMARY_HEADER: &str = "model,l2,mass_err,centroid,spread_ratio";

fn metric_fields(m: &SampleMetrics) -> String {
    format!("{},{},{},{}", m.l2, m.mass_err, m.centroid, m.spread_ratio)
}

/// Metrics of each checkpoint on the held-out validation pairs. A model's
/// reconstruction is the positive part of its network output. The `truth` row
/// compares the ground truth with itself.
pub fn eval(c: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<EvalReport> {
    let mut models: Vec<(String, PathBuf)> = Vec::new();
    for (key, label) in [("checkpoint", "model"), ("checkpoint_l2", "l2"), ("checkpoint_ot", "ot")] {
        if let Some(p) = c.path(key) {
            models.push((label.to_string(), p));
        }
    }
    if models.is_empty() {
        return Err(CliError::Config(
            "eval needs checkpoint, checkpoint_l2 or checkpoint_ot".into(),
        ));
    }
    let nets = models
        .iter()
        .map(|(l, p)| Ok((l.clone(), load_net(c, p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let ds = setup::dataset(c)?;
    let pairs = validation_set(&ds, c.usize("validation_size"))?;
    if pairs.is_empty() {
        return Err(CliError::Config("validation_size must be positive for eval".into()));
    }

    let mut report = Vec::new();
    let truth_rows: Vec<SampleMetrics> = pairs.iter().map(|p| compare(&p.truth, &p.truth)).collect();
    report.push(ModelEval {
        label: "truth".into(),
        mean: mean(&truth_rows),
        samples: truth_rows,
    });
    let mut first_recs = Vec::new();
    for (label, net) in &nets {
        let mut rows = Vec::new();
        for (k, p) in pairs.iter().enumerate() {
            let raw = net.reconstruct(&p.data)?;
            let rec = DiscreteMeasure::new(*raw.grid(), raw.values().iter().map(|v| v.max(0.0)).collect())?;
            rows.push(compare(&rec, &p.truth));
            if k == 0 {
                first_recs.push((label.clone(), rec));
            }
        }
        report.push(ModelEval {
            label: label.clone(),
            mean: mean(&rows),
            samples: rows,
        });
    }

    let mut csv = Vec::new();
    let mut summary = Vec::new();
    for m in &report {
        for (k, s) in m.samples.iter().enumerate() {
            csv.push(format!("{},{k},{}", m.label, metric_fields(s)));
        }
        summary.push(format!("{},{}", m.label, metric_fields(&m.mean)));
    }
    write_csv(&out.join("eval.csv"), EVAL_HEADER, &csv)?;
    write_csv(&out.join("eval_summary.csv"), EVAL_SUMMARY_HEADER, &summary)?;
    manifest.artifacts.extend(["eval.csv", "eval_summary.csv"].map(String::from));

    let rec = |l: &str| first_recs.iter().find(|(x, _)| x == l).map(|r| &r.1);
    if let (Some(l2), Some(ot)) = (rec("l2"), rec("ot")) {
        let p = &pairs[0];
        let hi = p.truth.values().iter().cloned().fold(0.0, f64::max);
        let panels: Vec<Panel> = [&p.truth, &shifted_image(p, &p.truth), l2, ot]
            .iter()
            .map(|m| image_panel(m).with_range(0.0, hi))
            .collect();
        save_sheet(&out.join("panels.pgm"), &panels)?;
        manifest.artifacts.push("panels.pgm".into());
    }

    let mut lines = vec![EVAL_SUMMARY_HEADER.to_string()];
    lines.extend(summary);
    lines.push("centroid and spread treat the positive part of each image as a density".into());
    Ok(EvalReport {
        models: report,
        lines,
    })
}

pub fn prop1_report(c: &Config) -> props::Prop1Report {
    props::prop1(
        c.usize("prop1_cells"),
        c.real("prop1_width"),
        c.int("prop1_bound") as i64,
        c.usize("prop1_samples"),
        c.int("seed"),
    )
}

pub const PROP1_TOLERANCE: f64 = 0.02;

pub fn prop1(c: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<Vec<String>> {
    let r = prop1_report(c);
    let rows: Vec<String> = (0..r.g.len())
        .map(|i| format!("{i},{},{},{}", r.g[i], r.empirical[i], r.convolution[i]))
        .collect();
    write_csv(&out.join("prop1.csv"), "cell,g,empirical_minimizer,convolution", &rows)?;
    let pass = r.discrepancy <= PROP1_TOLERANCE;
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "{},{},{},{PROP1_TOLERANCE},{status}",
        c.int("prop1_bound"),
        c.int("prop1_samples"),
        r.discrepancy
    );
    write_csv(&out.join("prop1_summary.csv"), "bound,samples,discrepancy,tolerance,status", &[line])?;
    manifest.artifacts.extend(["prop1.csv", "prop1_summary.csv"].map(String::from));
    let msg = format!(
        "smearing: relative L2 gap between the sampled L2 minimizer and the smoothed signal = {:.3e} (tolerance {PROP1_TOLERANCE}) {status}",
        r.discrepancy
    );
    if pass {
        Ok(vec![msg])
    } else {
        Err(CliError::CheckFailed(msg))
    }
}

pub fn prop2_config(c: &Config) -> Prop2Config {
    Prop2Config {
        half_width: c.real("prop2_half_width"),
        step: c.real("prop2_step"),
        distributions: c.usize("prop2_distributions"),
        sigma: c.real("prop2_sigma"),
        epsilon: c.real("prop2_epsilon"),
        iterations: c.usize("prop2_iterations"),
        background: c.real("prop2_background"),
        seed: c.int("seed"),
    }
}

pub fn prop2(c: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<Vec<String>> {
    let r = props::prop2(&prop2_config(c))?;
    let curve: Vec<String> = r
        .xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            format!(
                "{x},{},{},{}",
                r.uniform_squared[i],
                1.0 / 3.0 + x * x,
                r.uniform_quartic[i]
            )
        })
        .collect();
    write_csv(
        &out.join("prop2_curves.csv"),
        "x,uniform_squared,closed_form,uniform_quartic",
        &curve,
    )?;
    let rows: Vec<String> = r
        .rows
        .iter()
        .map(|row| {
            format!(
                "{},{},{},{},{}",
                row.case,
                row.value,
                row.target,
                row.tolerance,
                if row.pass { "PASS" } else { "FAIL" }
            )
        })
        .collect();
    write_csv(&out.join("prop2_summary.csv"), "case,value,target,tolerance,status", &rows)?;
    manifest.artifacts.extend(["prop2_curves.csv", "prop2_summary.csv"].map(String::from));
    let failed = r.rows.iter().filter(|x| !x.pass).count();
    let msg = format!(
        "concentration: {} checks, {failed} failed; max Sinkhorn marginal residual {:.2e}",
        r.rows.len(),
        r.sinkhorn_residual
    );
    if failed == 0 {
        Ok(vec![msg])
    } else {
        Err(CliError::CheckFailed(msg))
    }
}

pub fn metric_check(c: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<Vec<String>> {
    let exps = c.reals("metric_exponents");
    if let Some(n) = exps.iter().find(|&&n| n < 1.0) {
        return Err(CliError::Config(format!("metric exponent {n} is below 1")));
    }
    let triples = c.int("metric_triples");
    let rows: Vec<_> = exps
        .iter()
        .enumerate()
        .map(|(i, &n)| props::metric_check(n, triples, c.int("seed"), i as u64))
        .collect();
    let csv: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{:e},{:e},{:e}",
                r.exponent, r.triples, r.violations, r.max_excess, r.max_asymmetry, r.max_self_distance
            )
        })
        .collect();
    write_csv(
        &out.join("metric_check.csv"),
        "exponent,triples,violations,max_excess,max_asymmetry,max_self_distance",
        &csv,
    )?;
    manifest.artifacts.push("metric_check.csv".into());
    let violations: u64 = rows.iter().map(|r| r.violations).sum();
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "n = {}: {} triples, {} triangle violations beyond 1e-12",
                r.exponent, r.triples, r.violations
            )
        })
        .collect();
    if violations == 0 {
        Ok(lines)
    } else {
        Err(CliError::CheckFailed(lines.join("; ")))
    }
}

/// The fixed-seed suites run by `selftest`.
pub fn selftest_checks() -> CliResult<Vec<Check>> {
    let mut out = vec![
        checks::fft_vs_dense(&[8, 16, 32], 11)?,
        checks::sinkhorn_vs_exact(5, 5000, 12)?,
        checks::desk_adjoint(5, 13),
    ];
    out.extend(checks::gradient_suite(3, 14)?);
    Ok(out)
}

pub fn selftest(c: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<Vec<String>> {
    let mut lines = Vec::new();
    if let Some(p) = c.path("checkpoint") {
        let cp = load_checkpoint(&p)?;
        lines.push(format!("checkpoint {} loads: {} parameters", p.display(), cp.net.params().len()));
    }
    let results = selftest_checks()?;
    let csv: Vec<String> = results.iter().map(Check::csv).collect();
    write_csv(&out.join("selftest.csv"), CHECK_HEADER, &csv)?;
    manifest.artifacts.push("selftest.csv".into());
    lines.push(CHECK_HEADER.to_string());
    lines.extend(csv);
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(lines)
    } else {
        for l in &lines {
            println!("{l}");
        }
        Err(CliError::CheckFailed(format!("suites failed: {}", failed.join(", "))))
    }
}
