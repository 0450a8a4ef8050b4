//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs the `dvox` binary where a criterion is about a command, and the
//! library directly where it is about an operator or a statistic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dvox::data::{generate_dataset, stack, SynthSpec};
use dvox::eval::{make_folds, paired_test, roc_auc, CvPlan, PairedMethod};
use dvox::model::{load_checkpoint, Model, ModelConfig};
use dvox::ops::{
    bce_with_logits, bce_with_logits_backward, conv3d_forward, deformable_conv3d_forward, trilinear_sample, ConvSpec,
    DeformableConvSpec, Mode,
};
use dvox::train::{Optimizer, OptimizerConfig};
use dvox::{Error, Rng, Shape, Tensor5};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn dvox(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_dvox"))
        .args(args)
        .output()
        .expect("dvox binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read(p: &Path) -> Result<String, String> {
    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

/// Splits a CSV line, honouring double-quoted fields.
fn csv_fields(line: &str) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut quoted = false;
    for ch in line.chars() {
        match ch {
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(String::new()),
            c => out.last_mut().unwrap().push(c),
        }
    }
    out
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header = csv_fields(lines.next().unwrap_or(""));
    lines
        .map(|l| header.iter().cloned().zip(csv_fields(l)).collect())
        .collect()
}

fn gradient_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let run = dvox(&["--out", path_str(dir.path()), "gradcheck"]);
    let secs = start.elapsed().as_secs_f64();
    ensure(run.code == 0, || format!("gradcheck exited {}: {}", run.code, run.stderr.trim()))?;
    let rows = csv_rows(&read(&dir.path().join("gradcheck.csv"))?);
    let ops: std::collections::BTreeSet<&str> = rows.iter().map(|r| r["op"].as_str()).collect();
    let required = ["conv3d", "trilinear", "deformable_conv3d", "batchnorm", "relu", "global_avg_pool", "linear", "sigmoid_bce"];
    ensure(required.iter().all(|op| ops.contains(op)), || format!("operators checked: {ops:?}"))?;
    let worst = rows
        .iter()
        .map(|r| r["max_rel_err"].parse::<f64>().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    let deform = rows.iter().filter(|r| r["op"] == "deformable_conv3d").map(|r| r["group"].as_str());
    let groups: std::collections::BTreeSet<&str> = deform.collect();
    ensure(groups.len() == 5, || format!("deformable groups {groups:?}"))?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    let faulty = dvox(&["--out", path_str(dir.path()), "gradcheck", "--ops", "relu", "--inject-fault", "0.01"]);
    ensure(faulty.code == 1, || format!("perturbed backward exited {}", faulty.code))?;
    Ok(format!(
        "{} groups over {} operators, max rel err {worst:.2e}, {secs:.1}s; perturbed backward exits 1",
        rows.len(),
        ops.len()
    ))
}

fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

fn zero_deformation() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = if pick(&mut rng, 0, 3) == 0 { 1 } else { 3 };
        let spec = ConvSpec::new(pick(&mut rng, 1, 4), pick(&mut rng, 1, 3), [k; 3])
            .with_stride(pick(&mut rng, 1, 2))
            .with_dilation(pick(&mut rng, 1, 2))
            .with_padding([pick(&mut rng, 0, 2), pick(&mut rng, 0, 2), pick(&mut rng, 0, 2)]);
        let reach = (k - 1) * spec.dilation[0] + 1;
        let mut ext = || pick(&mut rng, reach.max(2), 6);
        let (d, h, w) = (ext(), ext(), ext());
        let shape = Shape::new(pick(&mut rng, 1, 2), spec.in_channels, d, h, w);
        let x = Tensor5::<f64>::randn(shape, &mut rng, 0.0, 1.0).map_err(|e| e.to_string())?;
        let wt = Tensor5::<f64>::randn(spec.weight_shape(), &mut rng, 0.0, 1.0).map_err(|e| e.to_string())?;
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.normal()).collect();
        let dspec = DeformableConvSpec::new(spec);
        let ow = Tensor5::<f64>::zeros(dspec.offset_predictor().weight_shape()).map_err(|e| e.to_string())?;
        let ob = vec![0.0; dspec.offset_channels()];
        let (y, _) = deformable_conv3d_forward(&x, &wt, &b, &ow, &ob, &dspec).map_err(|e| e.to_string())?;
        let r = conv3d_forward(&x, &wt, &b, &spec).map_err(|e| e.to_string())?;
        worst = worst.max(y.max_abs_diff(&r).map_err(|e| e.to_string())?);
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 instances, max |deformable - conv3d| = {worst:e}"))
}

fn trilinear_exactness() -> Outcome {
    let mut rng = Rng::new(3);
    let dims = [5usize, 6, 7];
    let x = Tensor5::<f64>::randn(Shape::new(1, 1, 5, 6, 7), &mut rng, 0.0, 1.0).map_err(|e| e.to_string())?;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let v = trilinear_sample(&x, 0, 0, [d as f64, h as f64, w as f64]).map_err(|e| e.to_string())?;
                ensure(v == x.get([0, 0, d, h, w]), || format!("node ({d},{h},{w}) not reproduced"))?;
            }
        }
    }
    let mut hull_violations = 0;
    for _ in 0..10_000 {
        let q = dims.map(|e| rng.uniform_range(0.0, (e - 1) as f64));
        let v = trilinear_sample(&x, 0, 0, q).map_err(|e| e.to_string())?;
        let lo = q.map(|c| c.floor() as usize);
        let corners: Vec<f64> = (0..8)
            .map(|i| [lo[0] + (i >> 2), lo[1] + ((i >> 1) & 1), lo[2] + (i & 1)])
            .filter(|p| (0..3).all(|a| p[a] < dims[a]))
            .map(|p| x.get([0, 0, p[0], p[1], p[2]]))
            .collect();
        let min = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let max = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hull_violations += usize::from(!(min <= v && v <= max));
    }
    ensure(hull_violations == 0, || format!("{hull_violations} hull violations"))?;
    let mut worst_ulp = 0u64;
    for _ in 0..200 {
        let c: Vec<f64> = (0..8).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let f = |d: f64, h: f64, w: f64| {
            c[0] + c[1] * d + c[2] * h + c[3] * w + c[4] * d * h + c[5] * d * w + c[6] * h * w + c[7] * d * h * w
        };
        let mut v = Tensor5::<f64>::zeros(x.shape()).map_err(|e| e.to_string())?;
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    v.set([0, 0, d, h, w], f(d as f64, h as f64, w as f64));
                }
            }
        }
        for _ in 0..50 {
            let q = dims.map(|e| rng.uniform_range(0.0, (e - 1) as f64));
            let got = trilinear_sample(&v, 0, 0, q).map_err(|e| e.to_string())?;
            let want = f(q[0], q[1], q[2]);
            worst_ulp = worst_ulp.max((got.to_bits() as i64 - want.to_bits() as i64).unsigned_abs());
        }
    }
    ensure(worst_ulp <= 4, || format!("multilinear field off by {worst_ulp} ulp"))?;
    Ok(format!("nodes exact, 10^4 hull queries clean, multilinear within {worst_ulp} ulp"))
}

fn auc_oracle() -> Outcome {
    let mut rng = Rng::new(4);
    for case in 0..1000 {
        let n = 2 + (rng.next_u64() % 29) as usize;
        let levels = 1 + rng.next_u64() % 8;
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_u64() % levels) as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure(got == num / pairs, || format!("case {case}: {got} vs {}", num / pairs))?;
    }
    let worked = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    ensure(worked == 0.75, || format!("worked example gave {worked}"))?;
    Ok("1000 instances equal pair counting exactly; worked example = 0.75".into())
}

fn cv_protocol() -> Outcome {
    let labels: Vec<u8> = (0..122).map(|_| 0).chain((0..50).map(|_| 1)).collect();
    let plan = CvPlan { k: 5, repeats: 3, stratified: true, seed: 0 };
    for folds in make_folds(&labels, &plan).map_err(|e| e.to_string())? {
        for f in folds {
            let controls = f.iter().filter(|&&i| labels[i] == 0).count();
            ensure((24..=25).contains(&controls) && f.len() - controls == 10, || {
                format!("fold with {controls} controls and {} patients", f.len() - controls)
            })?;
        }
    }
    let a = [0.80, 0.82, 0.78, 0.85, 0.81];
    let b = [0.74, 0.75, 0.73, 0.79, 0.76];
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let n = 5.0;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let t = mean / (var / n).sqrt();
    let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| e.to_string())?.cdf(t.abs()));
    let r = paired_test(&a, &b, PairedMethod::PairedT).map_err(|e| e.to_string())?;
    ensure((r.statistic - t).abs() < 1e-10 && (r.p_value - p).abs() < 1e-10, || {
        format!("t {} vs {t}, p {} vs {p}", r.statistic, r.p_value)
    })?;
    let degenerate = matches!(paired_test(&a, &a, PairedMethod::PairedT), Err(Error::DegenerateTest(_)));
    ensure(degenerate, || "identical vectors did not raise a degenerate-test error".into())?;
    Ok(format!("122/50 k=5 folds hold 24-25 controls and 10 patients; t = {t:.6}, p = {p:.3e}; a = b is degenerate"))
}

fn checkpoint_transfer() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = |label: &str, seed| {
        ModelConfig { widths: [2, 3, 4, 4, 5, 6], seed, ..ModelConfig::default() }.with_placement(label)
    };
    let mut source = Model::<f64>::new(small("- ; -", 1).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(6);
    for p in source.params_mut() {
        let positive = p.name.ends_with("running_var");
        for v in p.value.data_mut() {
            *v = if positive { rng.uniform_range(0.5, 2.0) } else { 0.3 * rng.normal() };
        }
    }
    let path = dir.path().join("source.ckpt");
    source.save(&path, 5, 1).map_err(|e| e.to_string())?;
    let back = Model::<f64>::load(&path).map_err(|e| e.to_string())?;
    for (x, y) in source.params().iter().zip(back.params()) {
        let bits = |p: &dvox::Parameter<f64>| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(x.name == y.name && bits(x) == bits(y), || format!("{} differs after reload", x.name))?;
    }
    let target_cfg = small("4, 5, 6 ; 2, 3, 4", 99).map_err(|e| e.to_string())?;
    let ckpt = load_checkpoint::<f64>(&path).map_err(|e| e.to_string())?;
    let mut target = Model::<f64>::new(target_cfg).map_err(|e| e.to_string())?;
    let report = target.transfer_from(&ckpt).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = Tensor5::<f64>::randn(Shape::new(1, 1, 16, 16, 16), &mut rng, 0.5, 0.3).map_err(|e| e.to_string())?;
        let a = source.predict(&x).map_err(|e| e.to_string())?[0];
        let b = target.predict(&x).map_err(|e| e.to_string())?[0];
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-12, || format!("logit deviation {worst:e}"))?;
    Ok(format!(
        "bitwise reload; transfer copied {} and zero-initialized {} tensors, max logit deviation {worst:e} on 20 inputs",
        report.copied.len(),
        report.initialized.len()
    ))
}

const ABLATION_CONFIG: &str = "\
[model]
widths = [8, 8, 16, 16, 32, 32]

[train]
epochs = 10
batch_size = 8
early_stop_patience = 2

[eval]
k = 3
repeats = 3
";

fn synthetic_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("ablation.toml");
    std::fs::write(&cfg, ABLATION_CONFIG).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let start = Instant::now();
    let run = dvox(&["--config", path_str(&cfg), "--out", path_str(&out), "ablate", "4, 5 ; 2, 3"]);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    ensure(run.code == 0, || format!("ablate exited {}: {}", run.code, run.stderr.trim()))?;
    let rows = csv_rows(&read(&out.join("ablation.csv"))?);
    ensure(rows.len() == 2, || format!("{} table rows", rows.len()))?;
    let (base, deform) = (&rows[0], &rows[1]);
    ensure(base["config"] == "- ; -" && deform["config"] == "4, 5 ; 2, 3", || "unexpected row labels".into())?;
    let num = |r: &BTreeMap<String, String>, k: &str| r[k].parse::<f64>().map_err(|_| format!("{k} = `{}`", r[k]));
    let (mb, md) = (num(base, "mean")?, num(deform, "mean")?);
    let (tp, wp) = (num(deform, "t_p")?, num(deform, "wilcoxon_p")?);
    let md_table = read(&out.join("ablation.md"))?;
    ensure(md_table.lines().count() == 4, || "markdown table incomplete".into())?;
    ensure(mb > 0.85 && md > 0.85, || format!("means {mb:.3} (baseline) and {md:.3} (stacked)"))?;
    ensure(md >= mb - 0.02, || format!("stacked {md:.3} below baseline {mb:.3} - 0.02"))?;
    ensure(minutes < 30.0, || format!("took {minutes:.1} min"))?;
    let direction = if md > mb { "above" } else if md < mb { "below" } else { "equal to" };
    Ok(format!(
        "baseline {mb:.3}, \"4, 5 ; 2, 3\" {md:.3} ({direction} baseline), paired t p = {tp:.3}, Wilcoxon p = {wp:.3}, {minutes:.1} min"
    ))
}

fn memorize(head_hidden: usize) -> Result<f64, String> {
    let spec = SynthSpec { n_per_class: 1, extent: [24, 24, 24], ..SynthSpec::default() };
    let sample = &generate_dataset(&spec).map_err(|e| e.to_string())?[1];
    let (x, y) = stack::<f32>(&[sample]).map_err(|e| e.to_string())?;
    let cfg = ModelConfig { widths: [8, 8, 16, 16, 32, 32], head_hidden, ..ModelConfig::default() };
    let mut model = Model::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).map_err(|e| e.to_string())?;
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let logits = model.forward(&x, Mode::Train).map_err(|e| e.to_string())?;
        loss = f64::from(bce_with_logits(&logits, &y).map_err(|e| e.to_string())?);
        model.zero_grad();
        let g = bce_with_logits_backward(&logits, &y).map_err(|e| e.to_string())?;
        model.backward(&g).map_err(|e| e.to_string())?;
        opt.step(&mut model.params_mut(), 1e-3).map_err(|e| e.to_string())?;
    }
    Ok(loss)
}

fn overfit() -> Outcome {
    let loss = memorize(32)?;
    let linear = memorize(0)?;
    ensure(loss < 1e-2, || format!("final BCE {loss:.4} (single linear head: {linear:.4})"))?;
    Ok(format!("final BCE {loss:.2e} after 200 epochs with a 32-unit hidden head (single linear head: {linear:.4})"))
}

const TINY_CONFIG: &str = "\
[data.synth]
n_per_class = 9

[model]
widths = [4, 4, 8, 8, 8, 8]

[train]
epochs = 2
batch_size = 6

[eval]
k = 3
repeats = 1
";

/// Every output file except wall-clock timings.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().is_some_and(|n| n.to_string_lossy().contains("timing")) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let ckpt = out.join("train").join("model.ckpt");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gradcheck", vec!["gradcheck".into(), "--ops".into(), "conv3d,relu".into()]),
        ("gen-data", vec!["gen-data".into()]),
        ("train", vec!["train".into()]),
        ("eval", vec!["eval".into(), "--checkpoint".into(), path_str(&ckpt).into()]),
        ("ablate", vec!["ablate".into(), "4 ; 2".into()]),
        ("bench", vec!["bench".into(), "8x2x3".into()]),
    ];
    let mut files = 0;
    for (name, args) in &commands {
        let sub = out.join(name);
        let mut full = vec!["--config", path_str(&cfg), "--out", path_str(&sub), "--threads", "1", "--seed", "7"];
        full.extend(args.iter().map(String::as_str));
        let first = dvox(&full);
        ensure(first.code == 0, || format!("{name} exited {}: {}", first.code, first.stderr.trim()))?;
        let a = snapshot(&sub);
        let second = dvox(&full);
        ensure(second.code == 0, || format!("{name} rerun exited {}", second.code))?;
        ensure(a == snapshot(&sub), || format!("{name} outputs differ on rerun"))?;
        ensure(first.stdout.is_empty() == second.stdout.is_empty(), || format!("{name} output changed"))?;
        // Replaying the written configuration reproduces the run.
        let resolved = sub.join("config.toml");
        let replay_cfg = dir.path().join(format!("{name}-resolved.toml"));
        std::fs::copy(&resolved, &replay_cfg).map_err(|e| e.to_string())?;
        let mut replay = vec!["--config", path_str(&replay_cfg)];
        replay.extend(args.iter().map(String::as_str));
        let third = dvox(&replay);
        ensure(third.code == 0, || format!("{name} replay exited {}", third.code))?;
        ensure(a == snapshot(&sub), || format!("{name} replay of config.toml differs"))?;
        files += a.len();
    }
    Ok(format!("{} commands rerun and replayed bitwise identical ({files} files compared)", commands.len()))
}

fn bench_arithmetic() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = dvox(&["--out", path_str(dir.path()), "bench", "8x4x3", "8x4x5"]);
    ensure(run.code == 0, || format!("bench exited {}: {}", run.code, run.stderr.trim()))?;
    let rows = csv_rows(&read(&dir.path().join("bench.csv"))?);
    let channels: Vec<&str> = rows.iter().map(|r| r["offset_channels"].as_str()).collect();
    ensure(channels == ["81", "375"], || format!("offset channels {channels:?}"))?;
    let empty = dvox(&["--out", path_str(dir.path()), "bench"]);
    ensure(empty.code == 2, || format!("empty size list exited {}", empty.code))?;
    Ok("offset channels 81 (k=3) and 375 (k=5); empty size list is a usage error".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("zero-deformation oracle", zero_deformation),
        ("trilinear exactness", trilinear_exactness),
        ("AUC oracle", auc_oracle),
        ("CV protocol", cv_protocol),
        ("checkpoint and transfer", checkpoint_transfer),
        ("synthetic ablation analogue", synthetic_ablation),
        ("overfit sanity", overfit),
        ("determinism", determinism),
        ("bench arithmetic", bench_arithmetic),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {why}");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
