use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn roadforest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadforest"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = roadforest(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

/// A small synthetic dataset with its kernel bank.
fn dataset(tmp: &TempDir) -> PathBuf {
    let root = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&root),
        "--seed",
        "5",
        "--train",
        "3",
        "--test",
        "2",
        "--size",
        "40",
    ]);
    root
}

/// Fast training flags; scales stay at the caller's choice.
fn train_args<'a>(root: &'a Path, out: &'a Path, bank: &'a Path) -> Vec<&'a str> {
    vec![
        "train",
        "--dataset-root",
        s(root),
        "--kernel-bank",
        s(bank),
        "--output-dir",
        s(out),
        "--trees",
        "2",
        "--depth",
        "3",
        "--candidates",
        "2",
    ]
}

fn pgm(path: &Path, w: usize, h: usize, data: &[u8]) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).unwrap();
}

fn metrics(dir: &Path) -> Vec<(String, f64)> {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

fn metric(m: &[(String, f64)], key: &str) -> f64 {
    m.iter().find(|(k, _)| k == key).unwrap().1
}

#[test]
fn train_writes_a_bundle_per_scale() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let bank = root.join("bank.kbnk");
    let out = tmp.path().join("model");
    ok(&train_args(&root, &out, &bank));
    assert_eq!(
        files(&out),
        [
            "bank.kbnk",
            "manifest.txt",
            "prior.fstk",
            "scale_1200.rfle",
            "scale_400.rfle",
            "scale_800.rfle"
        ]
    );
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("scales=400,800,1200\n") && manifest.contains("trees=2\n"));

    let single = tmp.path().join("single");
    let mut args = train_args(&root, &single, &bank);
    args.extend(["--trees", "1", "--scales", "400", "--prior", "off"]);
    ok(&args);
    assert_eq!(files(&single), ["bank.kbnk", "manifest.txt", "scale_400.rfle"]);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let out = tmp.path().join("model");
    let config = tmp.path().join("run.cfg");
    fs::write(
        &config,
        format!(
            "# small run\ndataset_root={}\nkernel_bank={}\noutput_dir={}\nscales=100\ntrees=3\ndepth=2\ncandidates=2\n",
            s(&root),
            s(&root.join("bank.kbnk")),
            s(&out)
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&config), "--trees", "1"]);
    let report = ok(&["inspect", "--model-dir", s(&out)]);
    assert!(report.lines().any(|l| l == "scale_100.trees: 1"), "{report}");
}

#[test]
fn configuration_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let out = tmp.path().join("model");

    let missing = roadforest(&["train", "--dataset-root", s(&root), "--output-dir", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("kernel_bank"));

    let absent = tmp.path().join("nope.kbnk");
    let bad_path = roadforest(&train_args(&root, &out, &absent));
    assert_eq!(bad_path.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_path.stderr).contains("kernel_bank"));

    let config = tmp.path().join("bad.cfg");
    fs::write(&config, "trees=2\nbranches=4\n").unwrap();
    let unknown = roadforest(&["train", "--config", s(&config)]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("branches"));

    let bundle = roadforest(&[
        "predict",
        "--model-dir",
        s(tmp.path()),
        "--images",
        s(&root.join("images")),
    ]);
    assert_eq!(bundle.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn predict_is_reproducible_and_handles_new_sizes() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let model = tmp.path().join("model");
    ok(&train_args(&root, &model, &root.join("bank.kbnk")));

    let one = tmp.path().join("one");
    fs::create_dir(&one).unwrap();
    fs::copy(root.join("images/scene_003.ppm"), one.join("scene_003.ppm")).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "predict",
            "--model-dir",
            s(&model),
            "--images",
            s(&one),
            "--out",
            s(out),
            "--debug",
        ]);
    }
    assert_eq!(
        files(&a),
        [
            "scene_003_conf.pgm",
            "scene_003_overlay.ppm",
            "scene_003_scale1200.pgm",
            "scene_003_scale400.pgm",
            "scene_003_scale800.pgm"
        ]
    );
    for name in files(&a) {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name}"
        );
    }

    // a list file with paths relative to it, and an image of another size
    ok(&[
        "synth",
        "--out",
        s(&tmp.path().join("wide")),
        "--seed",
        "9",
        "--train",
        "1",
        "--test",
        "0",
        "--size",
        "56",
    ]);
    let list = tmp.path().join("list.txt");
    fs::write(&list, "wide/images/scene_000.ppm\n").unwrap();
    let c = tmp.path().join("c");
    ok(&[
        "predict",
        "--model-dir",
        s(&model),
        "--images",
        s(&list),
        "--out",
        s(&c),
    ]);
    let conf = fs::read(c.join("scene_000_conf.pgm")).unwrap();
    assert!(conf.starts_with(b"P5\n56 56\n255\n"));
}

#[test]
fn thread_count_does_not_change_the_model() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let bank = root.join("bank.kbnk");
    let one = tmp.path().join("t1");
    let three = tmp.path().join("t3");
    let mut a = train_args(&root, &one, &bank);
    a.extend(["--threads", "1", "--scales", "200"]);
    let mut b = train_args(&root, &three, &bank);
    b.extend(["--threads", "3", "--scales", "200"]);
    ok(&a);
    ok(&b);
    assert_eq!(
        fs::read(one.join("scale_200.rfle")).unwrap(),
        fs::read(three.join("scale_200.rfle")).unwrap()
    );
}

#[test]
fn inspect_reports_key_value_lines() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let model = tmp.path().join("model");
    let bank = root.join("bank.kbnk");
    let mut args = train_args(&root, &model, &bank);
    args.extend(["--scales", "100,200"]);
    ok(&args);
    let report = ok(&["inspect", "--model-dir", s(&model)]);
    let fields: Vec<(&str, &str)> = report.lines().map(|l| l.split_once(": ").expect(l)).collect();
    assert_eq!(fields.len(), 18);
    let get = |k: &str| fields.iter().find(|(key, _)| *key == k).unwrap().1;
    assert_eq!(get("scale_100.trees"), "2");
    assert_eq!(get("scale_200.kernels"), "8");
    let size: u64 = get("scale_200.serialized_bytes").parse().unwrap();
    let bound: u64 = get("scale_200.memory_bound_bytes").parse().unwrap();
    assert_eq!(size, fs::metadata(model.join("scale_200.rfle")).unwrap().len());
    // 2 trees, depth 3, 8 kernels, 4-byte floats
    assert_eq!(bound, 2 * 8 * 17 * 4);
    let nodes: usize = get("scale_100.nodes_per_tree")
        .split(' ')
        .map(|n| n.parse::<usize>().unwrap())
        .sum();
    assert_eq!(get("scale_100.total_nodes"), nodes.to_string());
    let leaves: usize = get("scale_100.depth_histogram")
        .split(' ')
        .map(|e| e.split_once(':').unwrap().1.parse::<usize>().unwrap())
        .sum();
    assert_eq!(2 * leaves - 2, nodes);
}

#[test]
fn leaf_only_tree_has_a_single_depth_zero_entry() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let model = tmp.path().join("model");
    let bank = root.join("bank.kbnk");
    let mut args = train_args(&root, &model, &bank);
    args.extend(["--trees", "1", "--scales", "100", "--min-samples-leaf", "100000"]);
    ok(&args);
    let report = ok(&["inspect", "--model-dir", s(&model)]);
    assert!(report.contains("scale_100.depth_histogram: 0:1\n"), "{report}");
    assert!(
        report.contains("scale_100.mean_kernels_per_node: 0.000\n"),
        "{report}"
    );
}

#[test]
fn evaluate_scores_perfect_predictions() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let pred = tmp.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for stem in ["scene_000", "scene_001"] {
        let mask = fs::read(root.join(format!("masks/{stem}.pgm"))).unwrap();
        fs::write(pred.join(format!("{stem}_conf.pgm")), mask).unwrap();
    }
    // debug maps next to the final ones are ignored
    pgm(&pred.join("scene_000_scale400.pgm"), 1, 1, &[0]);
    let out = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--gt",
        s(&root.join("masks")),
        "--out",
        s(&out),
    ]);
    let m = metrics(&out);
    assert_eq!(metric(&m, "max_f"), 100.0);
    assert_eq!(metric(&m, "fpr"), 0.0);
    assert_eq!(metric(&m, "fnr"), 0.0);
    let curve = fs::read_to_string(out.join("pr_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 257);
}

#[test]
fn evaluate_rejects_empty_or_unmatched_predictions() {
    let tmp = TempDir::new().unwrap();
    let pred = tmp.path().join("pred");
    let gt = tmp.path().join("gt");
    fs::create_dir(&pred).unwrap();
    fs::create_dir(&gt).unwrap();
    let out = tmp.path().join("eval");
    let empty = roadforest(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
    assert_eq!(empty.status.code(), Some(1));

    pgm(&pred.join("a_conf.pgm"), 2, 1, &[0, 255]);
    pgm(&pred.join("b_conf.pgm"), 2, 1, &[0, 255]);
    pgm(&pred.join("c_conf.pgm"), 2, 1, &[0, 255]);
    pgm(&gt.join("b.pgm"), 2, 1, &[0, 255]);
    let unmatched = roadforest(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
    assert_eq!(unmatched.status.code(), Some(1));
    let err = String::from_utf8_lossy(&unmatched.stderr);
    assert!(err.contains("a, c") && !err.contains("b,"), "{err}");
}

/// Confusion counts at threshold t by direct pixel enumeration.
fn brute_counts(preds: &[Vec<u8>], gts: &[Vec<u8>], t: f64) -> [f64; 4] {
    let mut c = [0.0; 4];
    for (p, g) in preds.iter().zip(gts) {
        for (&v, &m) in p.iter().zip(g) {
            let pos = f64::from(v) / 255.0 >= t;
            let road = m >= 128;
            let k = match (pos, road) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => 3,
            };
            c[k] += 1.0;
        }
    }
    c
}

#[test]
fn evaluate_matches_a_brute_force_oracle() {
    let tmp = TempDir::new().unwrap();
    let pred = tmp.path().join("pred");
    let gt = tmp.path().join("gt");
    fs::create_dir(&pred).unwrap();
    fs::create_dir(&gt).unwrap();
    let preds = vec![
        vec![10u8, 200, 128, 255, 0, 90],
        vec![40u8, 40, 250, 130, 127, 60, 220, 5],
    ];
    let gts = vec![
        vec![0u8, 255, 255, 255, 0, 0],
        vec![0u8, 255, 255, 255, 0, 0, 255, 0],
    ];
    pgm(&pred.join("x_conf.pgm"), 3, 2, &preds[0]);
    pgm(&gt.join("x.pgm"), 3, 2, &gts[0]);
    pgm(&pred.join("y_conf.pgm"), 4, 2, &preds[1]);
    pgm(&gt.join("y.pgm"), 4, 2, &gts[1]);
    let out = tmp.path().join("eval");
    ok(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
    let m = metrics(&out);

    let mut best = (-1.0, 0usize);
    for i in 0..256 {
        let [tp, fp, _, fn_] = brute_counts(&preds, &gts, i as f64 / 255.0);
        let p = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let r = tp / (tp + fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        if f > best.0 {
            best = (f, i);
        }
    }
    let [tp, fp, tn, fn_] = brute_counts(&preds, &gts, best.1 as f64 / 255.0);
    let close = |key: &str, want: f64| {
        let got = metric(&m, key);
        // the CSV carries six decimals
        assert!((got - want).abs() <= 5e-7, "{key}: {got} vs {want}");
    };
    close("max_f", 100.0 * best.0);
    close("recall", 100.0 * tp / (tp + fn_));
    close("precision", 100.0 * tp / (tp + fp));
    close("fpr", 100.0 * fp / (fp + tn));
    close("fnr", 100.0 * fn_ / (tp + fn_));
    let [tp5, _, tn5, _] = brute_counts(&preds, &gts, 0.5);
    close("accuracy", 100.0 * (tp5 + tn5) / 14.0);
}
