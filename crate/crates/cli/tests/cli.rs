use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pmrn::data::{read_image, write_image, Image};
use pmrn::nn::InitSpec;
use pmrn::weights::save_weights;
use pmrn::{PmrnConfig, PmrnModel};

fn pmrn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pmrn"));
    c.env("RUST_LOG", "warn").env_remove("PMRN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    pmrn().args(args).output().expect("spawn pmrn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config(upscale: usize) -> PmrnConfig {
    PmrnConfig {
        max_scale: 5,
        blocks: 1,
        channels: 4,
        upscale,
        ..PmrnConfig::default()
    }
}

fn write_weights(dir: &Path, cfg: PmrnConfig, seed: u64) -> PathBuf {
    let (_, store) = PmrnModel::initialized(cfg, &InitSpec::with_seed(seed)).unwrap();
    let path = dir.join("w.pmrn");
    save_weights(&store, &cfg, &path).unwrap();
    path
}

fn gradient_image(w: usize, h: usize, seed: u8) -> Image {
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .flat_map(|(x, y)| {
            [
                (x * 5 + y) as u8 ^ seed,
                (y * 7) as u8,
                ((x * y) % 251) as u8,
            ]
        })
        .collect();
    Image::new(w, h, data).unwrap()
}

#[test]
fn analyze_prints_exact_parameter_totals() {
    let o = run(&["analyze", "--scale", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("3,598,320"));
    let o = run(&["analyze", "--scale", "4", "--variant", "large-kernels"]);
    assert!(stdout(&o).contains("6,020,080"));
    let o = run(&["analyze", "--scale", "3", "--resolution", "1280x720"]);
    assert!(stdout(&o).contains("366.4G"), "{}", stdout(&o));
}

#[test]
fn analyze_expectations_gate_exit_code() {
    let ok = run(&["analyze", "--scale", "2", "--expect", "params=3577548", "--expect", "macs=824.2G"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let bad = run(&["analyze", "--scale", "2", "--expect", "params=3577549"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("params"));
    let ensemble = run(&["analyze", "--expect", "ensemble-macs=1657.6G"]);
    assert_eq!(code(&ensemble), 0, "{}", stderr(&ensemble));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&run(&["analyze", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["analyze", "--resolution", "12x"])), 1);
    assert_eq!(code(&run(&["analyze", "--expect", "speed=3"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    let o = pmrn().env("PMRN_THREADS", "many").args(["analyze"]).output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn invalid_architecture_is_a_validation_error() {
    assert_eq!(code(&run(&["analyze", "--max-scale", "8"])), 2);
}

#[test]
fn config_file_precedence_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\nblocks = 4\nchannels = 32\n[analysis]\nresolution = \"640x360\"\n").unwrap();
    let out = dir.path().join("report");
    let o = run(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--channels",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("S=9 K=4 c=16 r=4"), "{}", stdout(&o));
    assert!(stdout(&o).contains("640x360"));
    let sidecar = std::fs::read_to_string(out.join("pmrn-run.toml")).unwrap();
    assert!(sidecar.contains("blocks = 4") && sidecar.contains("channels = 16"), "{sidecar}");
    for f in ["report.txt", "layers.csv", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    std::fs::write(&cfg, "[model]\nblokcs = 4\n").unwrap();
    assert_eq!(code(&run(&["analyze", "--config", cfg.to_str().unwrap()])), 1);
}

#[test]
fn sr_shape_determinism_and_schema_check() {
    let dir = tempfile::tempdir().unwrap();
    let weights = write_weights(dir.path(), tiny_config(4), 1);
    let input = dir.path().join("in.png");
    write_image(&input, &gradient_image(48, 48, 0)).unwrap();
    let w = weights.to_str().unwrap();
    let i = input.to_str().unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let o = run(&["sr", "--weights", w, i, "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let img = read_image(&out1.join("in_x4.png")).unwrap();
    assert_eq!((img.width, img.height), (192, 192));
    assert_eq!(
        std::fs::read(out1.join("in_x4.png")).unwrap(),
        std::fs::read(out2.join("in_x4.png")).unwrap()
    );
    assert!(out1.join("pmrn-run.toml").exists());

    let o = run(&["sr", "--weights", w, "--blocks", "2", i, "--out-dir", out1.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("blocks"), "{}", stderr(&o));
    let o = run(&["sr", "--weights", "/nonexistent.pmrn", i, "--out-dir", out1.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

/// Every 3x3 kernel keeps only its centre tap and the last layer feeds all
/// sub-pixel positions identically, so the network commutes with flips and
/// rotations.
#[test]
fn ensemble_of_equivariant_model_equals_plain_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(2);
    let (_, mut store) = PmrnModel::initialized(cfg, &InitSpec::with_seed(3)).unwrap();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).collect();
    for name in &names {
        let t = store.by_name_mut(name).unwrap();
        let s = t.shape();
        if name.ends_with(".weight") && s.h == 3 {
            let (h, w) = (s.h, s.w);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if i % (h * w) != 4 {
                    *v = 0.0;
                }
            }
        }
    }
    let r2 = cfg.upscale * cfg.upscale;
    let w = store.by_name_mut("rm.conv2.weight").unwrap();
    let per_out = w.len() / w.shape().n;
    let data = w.data_mut();
    for co in 0..data.len() / per_out {
        let base = co / r2 * r2;
        for k in 0..per_out {
            data[co * per_out + k] = data[base * per_out + k];
        }
    }
    let weights = dir.path().join("w.pmrn");
    save_weights(&store, &cfg, &weights).unwrap();
    let input = dir.path().join("x.png");
    write_image(&input, &gradient_image(20, 20, 9)).unwrap();
    let (w, i) = (weights.to_str().unwrap(), input.to_str().unwrap());
    let plain = dir.path().join("plain");
    let ens = dir.path().join("ens");
    assert_eq!(code(&run(&["sr", "--weights", w, i, "--out-dir", plain.to_str().unwrap()])), 0);
    assert_eq!(
        code(&run(&["sr", "--weights", w, i, "--out-dir", ens.to_str().unwrap(), "--ensemble"])),
        0
    );
    let a = read_image(&plain.join("x_x2.png")).unwrap();
    let b = read_image(&ens.join("x_x2.png")).unwrap();
    let worst = a.data.iter().zip(&b.data).map(|(x, y)| x.abs_diff(*y)).max().unwrap();
    assert!(worst <= 1, "max level difference {worst}");
}

#[test]
fn eval_identity_gives_unit_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    std::fs::create_dir(&hr).unwrap();
    for k in 0..3u8 {
        write_image(&hr.join(format!("img{k}.png")), &gradient_image(40 + 4 * k as usize, 36, k)).unwrap();
    }
    let csv = dir.path().join("m.csv");
    let o = run(&[
        "eval",
        "--hr-dir",
        hr.to_str().unwrap(),
        "--baseline",
        "identity",
        "--scale",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], "inf");
        assert_eq!(cols[2], "1.0000");
    }
    assert!(dir.path().join("m.csv.run.toml").exists());

    let o = run(&["eval", "--hr-dir", hr.to_str().unwrap(), "--baseline", "bicubic", "--scale", "2"]);
    assert_eq!(code(&o), 0);
    let mean = stdout(&o).lines().last().unwrap().to_owned();
    let psnr: f64 = mean.split(',').nth(1).unwrap().parse().unwrap();
    assert!(psnr.is_finite() && psnr > 0.0);

    let o = run(&["eval", "--hr-dir", hr.to_str().unwrap(), "--baseline", "bicubic", "--scale", "2", "--degradation", "bd"]);
    assert_eq!(code(&o), 2, "BD is only defined for x3");
    assert_eq!(code(&run(&["eval", "--hr-dir", hr.to_str().unwrap()])), 1);
}

#[test]
fn gradcheck_default_passes_and_impossible_tolerance_fails() {
    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("model"));
    let o = run(&["gradcheck", "--model-only", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn dump_features_emits_scale_and_attention_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PmrnConfig {
        max_scale: 9,
        blocks: 2,
        channels: 4,
        upscale: 2,
        ..PmrnConfig::default()
    };
    let weights = write_weights(dir.path(), cfg, 4);
    let input = dir.path().join("x.png");
    write_image(&input, &gradient_image(16, 12, 1)).unwrap();
    let out = dir.path().join("maps");
    let (w, i, d) = (weights.to_str().unwrap(), input.to_str().unwrap(), out.to_str().unwrap());
    let o = run(&["dump-features", "--weights", w, "--input", i, "--out-dir", d]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut pngs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    pngs.sort();
    assert_eq!(pngs.len(), 2 * 6);
    assert!(pngs.contains(&"block2_gamma.png".to_owned()));
    assert!(pngs.contains(&"block1_scale9.png".to_owned()));
    let map = read_image(&out.join("block1_scale5.png")).unwrap();
    assert_eq!((map.width, map.height), (16, 12));
    assert_eq!(map.data.iter().max(), Some(&255));
    assert_eq!(map.data.iter().min(), Some(&0));

    for bad in [["--block", "3"], ["--block", "0"], ["--scale", "4"], ["--scale", "11"]] {
        let o = run(&["dump-features", "--weights", w, "--input", i, "--out-dir", d, bad[0], bad[1]]);
        assert_eq!(code(&o), 2, "{bad:?}");
    }
}

#[test]
fn train_writes_artifacts_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = pmrn()
        .args([
            "train",
            "--synthetic",
            "2",
            "--synthetic-size",
            "32",
            "--val-synthetic",
            "1",
            "--scale",
            "2",
            "--max-scale",
            "5",
            "--blocks",
            "1",
            "--channels",
            "4",
            "--total-units",
            "2",
            "--steps-per-unit",
            "2",
            "--batch-size",
            "2",
            "--patch-size",
            "8",
            "--seed",
            "5",
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.pmrn", "weights.pmrn", "history.csv", "pmrn-run.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("unit,lr,train_loss,val_psnr"));

    let o = run(&[
        "train",
        "--synthetic",
        "2",
        "--synthetic-size",
        "32",
        "--resume",
        out.join("checkpoint.pmrn").to_str().unwrap(),
        "--total-units",
        "3",
        "--seed",
        "5",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let o = run(&["train", "--hr-dir", "/nonexistent", "--out-dir", out.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert_eq!(code(&run(&["train", "--out-dir", out.to_str().unwrap()])), 1);
}
