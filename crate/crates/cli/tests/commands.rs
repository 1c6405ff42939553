use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eranet::model::{fuse_model, EraNetModel, ModelConfig};
use eranet::ops::Conv;
use eranet::weights::encode_weights;
use eranet::Tensor4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn eranet(args: &[&str]) -> Output {
    eranet_in(args, &[])
}

fn eranet_in(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eranet"));
    cmd.args(args)
        .env_remove("ERA_THREADS")
        .env_remove("RUST_LOG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64) {
    let o = eranet(&[
        "synth",
        "--count",
        &count.to_string(),
        "--size",
        "16x16",
        "--seed",
        &seed.to_string(),
        "--out",
        p(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn toy_weights(path: &Path, seed: u64, identity: bool) -> EraNetModel<f64> {
    let mut m =
        EraNetModel::<f64>::init(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    if identity {
        m.tail = Conv {
            weight: Tensor4::zeros(m.tail.weight.shape()),
            bias: Some(Tensor4::zeros([1, 3, 1, 1])),
        };
    }
    fs::write(path, encode_weights(&m)).unwrap();
    m
}

fn png(path: &Path) -> Vec<u8> {
    image::open(path).unwrap().to_rgb8().into_raw()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let (a, b, c) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    synth(a.path(), 3, 11);
    synth(b.path(), 3, 11);
    synth(c.path(), 3, 12);
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in &names {
        assert_eq!(
            fs::read(a.path().join(n)).unwrap(),
            fs::read(b.path().join(n)).unwrap(),
            "{n:?}"
        );
    }
    assert_ne!(
        fs::read(a.path().join("params.log")).unwrap(),
        fs::read(c.path().join("params.log")).unwrap()
    );
}

#[test]
fn metrics_of_identical_images() {
    let d = TempDir::new().unwrap();
    synth(d.path(), 2, 3);
    let clean = d.path().join("clean_0000.png");
    let o = eranet(&["metrics", "--ref", p(&clean), "--test", p(&clean)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(
        out.contains("pair=clean_0000.png psnr=inf ssim=1.000000"),
        "{out}"
    );

    let o = eranet(&[
        "metrics",
        "--ref",
        p(&clean),
        "--test",
        p(&d.path().join("degraded_0000.png")),
    ]);
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).contains("psnr=inf"));
}

#[test]
fn inspect_lists_tensors_and_rejects_truncation() {
    let d = TempDir::new().unwrap();
    let w = d.path().join("w.eraw");
    toy_weights(&w, 1, false);
    let o = eranet(&["inspect", "--weights", p(&w)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("magic=ERAW version=1 mode=training"), "{out}");
    assert!(out.contains("tensor arch.flags"));
    assert!(out.contains("total params="));

    let bytes = fs::read(&w).unwrap();
    let t = d.path().join("t.eraw");
    fs::write(&t, &bytes[..bytes.len() / 2]).unwrap();
    let o = eranet(&["inspect", "--weights", p(&t)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));
}

#[test]
fn fuse_once_only() {
    let d = TempDir::new().unwrap();
    let (w, f, g) = (
        d.path().join("w.eraw"),
        d.path().join("f.eraw"),
        d.path().join("g.eraw"),
    );
    toy_weights(&w, 2, false);
    let o = eranet(&["fuse", "--in", p(&w), "--out", p(&f)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("block 0: reparameterization"));
    assert!(fs::metadata(&f).unwrap().len() < fs::metadata(&w).unwrap().len());
    let o = eranet(&["fuse", "--in", p(&f), "--out", p(&g)]);
    assert_eq!(code(&o), 3);
    assert!(!g.exists());
}

#[test]
fn identity_weights_reproduce_inputs() {
    let d = TempDir::new().unwrap();
    synth(d.path(), 2, 5);
    let w = d.path().join("id.eraw");
    toy_weights(&w, 3, true);
    let input = d.path().join("degraded_0001.png");
    let out = d.path().join("out");
    let o = eranet(&[
        "enhance",
        "--weights",
        p(&w),
        "--in",
        p(&input),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(png(&input), png(&out.join("degraded_0001.png")));
}

#[test]
fn directory_enhancement_and_fusion_agree() {
    let d = TempDir::new().unwrap();
    let data = d.path().join("data");
    fs::create_dir(&data).unwrap();
    synth(&d.path().join("s"), 3, 9);
    for i in 0..3 {
        fs::copy(
            d.path().join(format!("s/degraded_{i:04}.png")),
            data.join(format!("img{i}.png")),
        )
        .unwrap();
    }
    let w = d.path().join("w.eraw");
    toy_weights(&w, 4, false);
    let (fused, plain) = (d.path().join("fused"), d.path().join("plain"));
    let o = eranet_in(
        &[
            "enhance",
            "--weights",
            p(&w),
            "--in",
            p(&data),
            "--out",
            p(&fused),
        ],
        &[("ERA_THREADS", "2")],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.contains(" ms total "))
            .count(),
        3
    );
    let o = eranet(&[
        "enhance",
        "--weights",
        p(&w),
        "--in",
        p(&data),
        "--out",
        p(&plain),
        "--no-fuse",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 0..3 {
        let (a, b) = (
            png(&fused.join(format!("img{i}.png"))),
            png(&plain.join(format!("img{i}.png"))),
        );
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) <= 1));
    }
}

#[test]
fn enhance_skips_unreadable_inputs() {
    let d = TempDir::new().unwrap();
    synth(d.path(), 1, 6);
    fs::write(d.path().join("broken.png"), b"not a png").unwrap();
    let w = d.path().join("w.eraw");
    toy_weights(&w, 5, false);
    let o = eranet(&[
        "enhance",
        "--weights",
        p(&w),
        "--in",
        p(d.path()),
        "--out",
        p(&d.path().join("o")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.png"));

    let bad = d.path().join("bad");
    fs::create_dir(&bad).unwrap();
    fs::write(bad.join("x.png"), b"junk").unwrap();
    let o = eranet(&[
        "enhance",
        "--weights",
        p(&w),
        "--in",
        p(&bad),
        "--out",
        p(&d.path().join("o2")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fused_only_refuses_training_weights() {
    let d = TempDir::new().unwrap();
    synth(d.path(), 1, 8);
    let (w, f) = (d.path().join("w.eraw"), d.path().join("f.eraw"));
    let m = toy_weights(&w, 6, false);
    fs::write(&f, encode_weights(&fuse_model(&m).unwrap())).unwrap();
    let input = d.path().join("degraded_0000.png");
    let o = eranet(&[
        "enhance",
        "--weights",
        p(&w),
        "--in",
        p(&input),
        "--out",
        p(&d.path().join("a")),
        "--fused-only",
    ]);
    assert_eq!(code(&o), 3);
    let o = eranet(&[
        "enhance",
        "--weights",
        p(&f),
        "--in",
        p(&input),
        "--out",
        p(&d.path().join("b")),
        "--fused-only",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bench_warmup_only() {
    let d = TempDir::new().unwrap();
    let w = d.path().join("w.eraw");
    toy_weights(&w, 7, false);
    let o = eranet(&[
        "bench",
        "--weights",
        p(&w),
        "--size",
        "16x16",
        "--iters",
        "0",
        "--warmup",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("no timed iterations"));
    assert!(!out.contains("frames/s"));
    let o = eranet(&[
        "bench",
        "--weights",
        p(&w),
        "--size",
        "16x16",
        "--iters",
        "2",
        "--warmup",
        "0",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).matches("frames/s").count(), 2);
}

#[test]
fn config_overlay_yields_to_flags() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("era.conf");
    fs::write(
        &cfg,
        "# defaults\nseed = 4\n[synth]\ncount = 2\nsize = 12x12\n",
    )
    .unwrap();
    let out = d.path().join("a");
    let o = eranet(&["--config", p(&cfg), "synth", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("clean_0001.png").exists() && !out.join("clean_0002.png").exists());
    assert_eq!(image::open(out.join("clean_0000.png")).unwrap().width(), 12);

    let out = d.path().join("b");
    let o = eranet(&[
        "--config",
        p(&cfg),
        "synth",
        "--out",
        p(&out),
        "--count",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    assert!(out.join("clean_0002.png").exists());

    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(
        code(&eranet(&["--config", p(&cfg), "synth", "--out", p(&out)])),
        1
    );
}

#[test]
fn exit_codes() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&eranet(&["--help"])), 0);
    assert_eq!(code(&eranet(&["train", "--bogus"])), 1);
    assert_eq!(
        code(&eranet(&["synth", "--size", "7", "--out", p(d.path())])),
        1
    );
    assert_eq!(
        code(&eranet(&[
            "metrics",
            "--ref",
            "/nonexistent/a.png",
            "--test",
            "/nonexistent/b.png"
        ])),
        2
    );
    let junk = d.path().join("junk.eraw");
    fs::write(&junk, b"ERAWxxxx").unwrap();
    assert_eq!(code(&eranet(&["inspect", "--weights", p(&junk)])), 3);
    assert_eq!(
        code(&eranet(&[
            "fuse",
            "--in",
            p(&junk),
            "--out",
            p(&d.path().join("f"))
        ])),
        3
    );
    let w = d.path().join("w.eraw");
    toy_weights(&w, 8, false);
    let o = eranet_in(
        &[
            "enhance",
            "--weights",
            p(&w),
            "--in",
            p(d.path()),
            "--out",
            p(&d.path().join("o")),
        ],
        &[("ERA_THREADS", "0")],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn train_from_directory_writes_weights_and_curve() {
    let d = TempDir::new().unwrap();
    let data = d.path().join("data");
    synth(&data, 2, 10);
    let (w, curve) = (d.path().join("w.eraw"), d.path().join("curve.txt"));
    let o = eranet(&[
        "train",
        "--data",
        p(&data),
        "--epochs",
        "2",
        "--batch-size",
        "2",
        "--channels",
        "4",
        "--blocks",
        "1",
        "--reduction",
        "2",
        "--curve",
        p(&curve),
        "--out",
        p(&w),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&curve).unwrap().lines().count(), 2);
    let o = eranet(&["inspect", "--weights", p(&w)]);
    assert!(stdout(&o).contains("channels=4 blocks=1"), "{}", stdout(&o));
    let o = eranet(&[
        "train",
        "--data",
        p(&d.path().join("missing")),
        "--out",
        p(&w),
    ]);
    assert_eq!(code(&o), 2);
}
