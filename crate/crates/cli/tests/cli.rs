use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use affine_pyramid::geometry::{warp_image, FlowField};
use affine_pyramid::io::{encode_pnm, load_affine_field, load_flow, load_image, save_flow, save_image};
use affine_pyramid::image::Image;
use tempfile::TempDir;

fn apyr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apyr")).args(args).output().expect("spawn apyr")
}

fn ok(args: &[&str]) -> Output {
    let out = apyr(args);
    assert!(out.status.success(), "apyr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, count: usize, seed: u64) {
    ok(&["--seed", &seed.to_string(), "synth", "--count", &count.to_string(), "--size", "64", "--out", s(dir)]);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn listing_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("pairs.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

#[test]
fn synth_zero_count_writes_empty_listing() {
    let t = TempDir::new().unwrap();
    synth(t.path(), 0, 1);
    assert!(listing_rows(t.path()).is_empty());
    assert_eq!(files(t.path()).len(), 1);
}

#[test]
fn synth_is_deterministic_and_warp_consistent() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, 3, 7);
    synth(&b, 3, 7);
    assert_eq!(files(&a), files(&b));
    for row in listing_rows(&a) {
        let source = load_image(a.join(&row[0])).unwrap();
        let target = fs::read(a.join(&row[1])).unwrap();
        let gt = load_affine_field(a.join(&row[4])).unwrap();
        assert_eq!(encode_pnm(&warp_image(&source, &gt).unwrap()).unwrap(), target);
    }
    let c = t.path().join("c");
    synth(&c, 3, 8);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn train_smoke_writes_every_stage() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    synth(&data, 8, 2);
    let run = |name: &str| {
        let out = t.path().join(name);
        ok(&[
            "--seed", "5", "--threads", "1", "train", "--dataset", s(&data), "--out", s(&out),
            "--set", "train.iterations=2", "--set", "train.batch_size=2",
        ]);
        out
    };
    let a = run("a");
    for name in ["level1", "level2", "level3", "pixel"] {
        assert!(a.join(format!("{name}.pnp")).is_file(), "{name}");
        assert!(a.join(format!("loss_{name}.csv")).is_file(), "{name}");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("checkpoint.pixel=pixel.pnp"));
    let b = run("b");
    let hash = |m: &str| m.lines().find(|l| l.starts_with("config_hash=")).unwrap().to_string();
    assert_eq!(hash(&manifest), hash(&fs::read_to_string(b.join("manifest.txt")).unwrap()));
}

#[test]
fn train_rejects_missing_dataset_and_bad_config() {
    let t = TempDir::new().unwrap();
    let out = apyr(&["train", "--dataset", s(&t.path().join("missing")), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not exist"));
    let out = apyr(&["train", "--set", "pyramid.levels=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown config key"));
}

#[test]
fn infer_identity_and_eval_agree() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    synth(&data, 1, 3);
    let row = &listing_rows(&data)[0];
    let src = data.join(&row[0]);
    let out = t.path().join("same");
    ok(&["infer", "--source", s(&src), "--target", s(&src), "--out", s(&out), "--per-level"]);
    let flow = load_flow(out.join("flow.pff")).unwrap();
    assert!(flow.data.iter().all(|v| *v == [0.0, 0.0]));
    assert_eq!(fs::read(out.join("warped.pgm")).unwrap(), fs::read(&src).unwrap());
    assert!(out.join("pixel.paf").is_file() && out.join("level1.paf").is_file());

    let out = t.path().join("pair");
    let (gt, mask) = (data.join(row[4].replace(".paf", ".pff")), data.join(&row[3]));
    ok(&[
        "infer", "--source", s(&src), "--target", s(&data.join(&row[1])), "--out", s(&out),
        "--gt", s(&gt), "--mask", s(&mask),
    ]);
    let report = fs::read_to_string(out.join("eval.csv")).unwrap();
    let eval = ok(&["eval", "--protocol", "flow", "--flow", s(&out.join("flow.pff")), "--gt", s(&gt), "--mask", s(&mask)]);
    assert_eq!(report, stdout(&eval));
}

#[test]
fn eval_protocols() {
    let t = TempDir::new().unwrap();
    let p = |n: &str| t.path().join(n);
    let flow = FlowField { height: 20, width: 30, data: vec![[2.0, -1.0]; 600] };
    save_flow(&flow, p("f.pff")).unwrap();
    let exact = ok(&["eval", "--protocol", "flow", "--flow", s(&p("f.pff")), "--gt", s(&p("f.pff"))]);
    assert!(stdout(&exact).contains("epe_accuracy,5,1,"), "{}", stdout(&exact));

    let sweep = stdout(&ok(&["eval", "--protocol", "flow", "--flow", s(&p("f.pff")), "--gt", s(&p("f.pff")), "--sweep"]));
    assert_eq!(sweep.lines().count(), 16);

    // Target keypoints move by (2, -1); two of three land within 0.1 * 20.
    fs::write(p("tgt.txt"), "# bbox 20 20\n1 5\n10 10\n20 8\n").unwrap();
    fs::write(p("src.txt"), "# bbox 20 20\n3 4\n12 10\n30 30\n").unwrap();
    let pck = stdout(&ok(&[
        "eval", "--protocol", "pck", "--flow", s(&p("f.pff")), "--source-keypoints", s(&p("src.txt")),
        "--target-keypoints", s(&p("tgt.txt")), "--alpha", "0.1",
    ]));
    let value: f64 = pck.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(value, 2.0 / 3.0);

    let mask = |x0: usize| Image::from_fn(20, 30, move |x, y| if (x0..x0 + 10).contains(&x) && (5..15).contains(&y) { 1.0 } else { 0.0 });
    save_image(&mask(4), p("sm.pgm")).unwrap();
    save_image(&mask(2), p("tm.pgm")).unwrap();
    save_image(&mask(12), p("far.pgm")).unwrap();
    let iou = |t: &PathBuf| {
        let o = ok(&["eval", "--protocol", "iou", "--flow", s(&p("f.pff")), "--source-mask", s(&p("sm.pgm")), "--target-mask", s(t)]);
        stdout(&o).lines().nth(1).unwrap().split(',').nth(2).unwrap().parse::<f64>().unwrap()
    };
    assert!(iou(&p("tm.pgm")) > 0.8);
    assert_eq!(iou(&p("far.pgm")), 0.0);

    let wrong = apyr(&["eval", "--protocol", "pck", "--flow", s(&p("f.pff")), "--gt", s(&p("f.pff"))]);
    assert_eq!(wrong.status.code(), Some(2));

    let bytes = fs::read(p("f.pff")).unwrap();
    fs::write(p("short.pff"), &bytes[..bytes.len() - 3]).unwrap();
    let bad = apyr(&["eval", "--protocol", "flow", "--flow", s(&p("short.pff")), "--gt", s(&p("f.pff"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("offset"), "{}", stderr(&bad));
}

#[test]
fn gradcheck_stock_passes_and_fault_fails() {
    let t = TempDir::new().unwrap();
    let empty = t.path().join("empty.cfg");
    fs::write(&empty, "").unwrap();
    let out = ok(&["gradcheck", "--config", s(&empty)]);
    assert!(stdout(&out).contains("13 of 13 checks passed"));
    let out = apyr(&["gradcheck", "--inject-fault", "conv2d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL conv2d stride 1"));
    assert!(stdout(&out).contains("conv0.w"));
}
