use std::path::{Path, PathBuf};
use std::process::Command;

use msreg::evalkit::{make_synthetic_case, SyntheticSpec};
use msreg::{Dims, Image, Mask};
use msreg_cli::io::{decode_tensor, load_tensor, save_tensor, Tensor};
use msreg_cli::{run, Mode, Precision, RunConfig};

fn write_image(path: &Path, img: &Image<f32>) {
    save_tensor(&Tensor::Image(img.clone()), path).unwrap();
}

fn texture(seed: u64) -> Image<f32> {
    make_synthetic_case::<f32>(&SyntheticSpec::new(&[32, 32], 2.0, 4.0, seed)).unwrap().base
}

fn quick(mode: Mode, out: &Path) -> RunConfig {
    let mut c = RunConfig::new(mode);
    c.steps = 8;
    c.out_dir = out.to_path_buf();
    c.size = vec![32, 32];
    c.cases = 2;
    c
}

fn csv_column(path: &Path, col: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == col).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

fn every_tensor_reparses(files: &[PathBuf]) {
    for f in files.iter().filter(|p| p.extension().is_some_and(|e| e == "mft")) {
        let bytes = std::fs::read(f).unwrap();
        decode_tensor::<f32>(&bytes).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
    }
}

#[test]
fn register_identical_pair_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let img = texture(1);
    let p = dir.path().join("img.mft");
    write_image(&p, &img);
    let mut cfg = quick(Mode::Register, &dir.path().join("out"));
    cfg.moving = Some(p.clone());
    cfg.fixed = Some(p);
    let summary = run(&cfg).unwrap();
    every_tensor_reparses(&summary.artifacts);
    let mse = csv_column(&cfg.out_dir.join("metrics.csv"), "mse");
    assert!(mse[0] < 1e-6, "mse {}", mse[0]);
    let warped = load_tensor::<f32>(&cfg.out_dir.join("warped.mft")).unwrap().into_image().unwrap();
    let err = msreg::loss::mse(&img, &warped, None).unwrap();
    assert!(err < 1e-6);
    assert!(cfg.out_dir.join("manifest.json").exists());
    assert!(!csv_column(&cfg.out_dir.join("trace.csv"), "total").is_empty());
}

#[test]
fn benchmark_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = quick(Mode::Benchmark, &dir.path().join("a"));
    let mut b = a.clone();
    b.out_dir = dir.path().join("b");
    run(&a).unwrap();
    run(&b).unwrap();
    for name in ["report.csv", "case_000_field.mft", "case_001_field.mft"] {
        let x = std::fs::read(a.out_dir.join(name)).unwrap();
        let y = std::fs::read(b.out_dir.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn segment_self_atlas_gives_perfect_dice() {
    let dir = tempfile::tempdir().unwrap();
    let case = make_synthetic_case::<f32>(&SyntheticSpec::new(&[32, 32], 2.0, 4.0, 5).with_labels()).unwrap();
    let atlases = dir.path().join("atlases");
    std::fs::create_dir(&atlases).unwrap();
    write_image(&atlases.join("a_image.mft"), &case.base);
    let labels = case.labels.clone().unwrap();
    save_tensor::<f32>(&Tensor::Labels(labels.clone()), &atlases.join("a_labels.mft")).unwrap();
    // a second, unrelated atlas
    write_image(&atlases.join("b_image.mft"), &texture(77));
    save_tensor::<f32>(&Tensor::Labels(labels.clone()), &atlases.join("b_labels.mft")).unwrap();
    let test = dir.path().join("test.mft");
    write_image(&test, &case.base);
    let truth = dir.path().join("truth.mft");
    save_tensor::<f32>(&Tensor::Labels(labels), &truth).unwrap();

    let mut cfg = quick(Mode::Segment, &dir.path().join("out"));
    cfg.fixed = Some(test);
    cfg.atlas_dir = Some(atlases);
    cfg.labels = Some(truth);
    cfg.profile = Some(msreg_cli::Profile::Hippo2);
    let summary = run(&cfg).unwrap();
    every_tensor_reparses(&summary.artifacts);
    let atlas: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.out_dir.join("atlas.json")).unwrap()).unwrap();
    assert_eq!(atlas["index"], 0);
    assert_eq!(csv_column(&cfg.out_dir.join("dice.csv"), "dice"), vec![1.0, 1.0]);
}

#[test]
fn track_writes_one_field_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    let case = make_synthetic_case::<f32>(&SyntheticSpec::new(&[32, 32], 1.5, 4.0, 3)).unwrap();
    write_image(&frames.join("f0.mft"), &case.base);
    write_image(&frames.join("f1.mft"), &case.warped);
    write_image(&frames.join("f2.mft"), &case.base);
    let mut cfg = quick(Mode::Track, &dir.path().join("out"));
    cfg.frames = Some(frames);
    let summary = run(&cfg).unwrap();
    every_tensor_reparses(&summary.artifacts);
    assert_eq!(csv_column(&cfg.out_dir.join("metrics.csv"), "mse").len(), 2);
    assert!(cfg.out_dir.join("field_001.mft").exists());
}

#[test]
fn train_then_eval_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.mrck");
    let mut cfg = quick(Mode::Train, &dir.path().join("train"));
    cfg.checkpoint = Some(ckpt.clone());
    cfg.encoder = Some(vec![4, 8]);
    cfg.decoder = Some(vec![8, 4]);
    cfg.precision = Precision::F64;
    run(&cfg).unwrap();
    assert!(ckpt.exists());

    let case = make_synthetic_case::<f32>(&SyntheticSpec::new(&[32, 32], 2.0, 4.0, 11)).unwrap();
    let (m, f) = (dir.path().join("m.mft"), dir.path().join("f.mft"));
    write_image(&m, &case.base);
    write_image(&f, &case.warped);
    let mut e = quick(Mode::Eval, &dir.path().join("eval"));
    e.moving = Some(m);
    e.fixed = Some(f);
    e.checkpoint = Some(ckpt);
    let mask = dir.path().join("mask.mft");
    save_tensor::<f32>(&Tensor::Mask(Mask::full(Dims::d2(32, 32))), &mask).unwrap();
    e.mask = Some(mask);
    let summary = run(&e).unwrap();
    every_tensor_reparses(&summary.artifacts);
    let nlcc = csv_column(&e.out_dir.join("metrics.csv"), "nlcc");
    assert!(nlcc[0].is_finite());
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(Mode::Register, dir.path());
    assert_eq!(run(&cfg).unwrap_err().exit_code(), 2);
    let mut bad = quick(Mode::Benchmark, dir.path());
    bad.scales = Some(vec!["1/2".into(), "1/8".into(), "1".into()]);
    assert_eq!(run(&bad).unwrap_err().exit_code(), 2);
}

fn msreg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_msreg"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let st = msreg().args(["--mode", "register", "--out-dir"]).arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(2));

    let junk = dir.path().join("junk.mft");
    std::fs::write(&junk, b"NOPE0000000000").unwrap();
    let st = msreg()
        .args(["--mode", "register", "--moving"])
        .arg(&junk)
        .arg("--fixed")
        .arg(&junk)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));

    let img = dir.path().join("img.mft");
    write_image(&img, &texture(2));
    let st = msreg()
        .args(["--mode", "register", "--steps", "3", "--scales", "1/2,1", "--moving"])
        .arg(&img)
        .arg("--fixed")
        .arg(&img)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(out.join("field.mft").exists());

    // a huge learning rate diverges
    let case = make_synthetic_case::<f32>(&SyntheticSpec::new(&[32, 32], 3.0, 4.0, 4)).unwrap();
    let (m, f) = (dir.path().join("m.mft"), dir.path().join("f.mft"));
    write_image(&m, &case.base);
    write_image(&f, &case.warped);
    let st = msreg()
        .args(["--mode", "register", "--steps", "400", "--scales", "1", "--lr", "1e6", "--moving"])
        .arg(&m)
        .arg("--fixed")
        .arg(&f)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(4));
}

#[test]
fn pgm_input_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("img.pgm");
    let mut bytes = b"P5\n32 32\n255\n".to_vec();
    bytes.extend((0..32 * 32).map(|i| ((i * 37) % 256) as u8));
    std::fs::write(&p, bytes).unwrap();
    let img = load_tensor::<f32>(&p).unwrap().into_image().unwrap();
    assert_eq!(img.dims(), Dims::d2(32, 32));
    assert_eq!(img.data()[7], ((7 * 37) % 256) as f32 / 255.0);
}
