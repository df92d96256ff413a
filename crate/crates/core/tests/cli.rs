use std::path::Path;
use std::process::{Command, Output};

use ugda_seg::ablation::parse_table_csv;
use ugda_seg::model::{Backbone, Variant};

fn ugda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ugda-seg")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_ablate_eval_viz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let stdout = ok(&ugda(&["synth", "--out", s(&data), "--count", "8", "--side", "48", "--seed", "3"]));
    assert!(stdout.contains("wrote 8 pairs"));
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 8);
    assert_eq!(std::fs::read_dir(data.join("masks")).unwrap().count(), 8);

    let out = dir.path().join("out");
    let stdout = ok(&ugda(&[
        "ablate", "--data", s(&data), "--side", "32", "--epochs", "2", "--batch", "2", "--warmup", "1",
        "--backbones", "linknet", "--variants", "baseline,full", "--viz-samples", "1", "--out", s(&out),
    ]));
    assert!(stdout.contains("UGDA-Net"), "{stdout}");
    assert!(stdout.contains("split "));

    let rows = parse_table_csv(&std::fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    let cells: Vec<(Backbone, Variant)> = rows.iter().map(|r| (r.backbone, r.variant)).collect();
    assert_eq!(cells, [(Backbone::Linknet, Variant::Baseline), (Backbone::Linknet, Variant::Full)]);
    assert!(out.join("results.md").exists() && out.join("split.json").exists());

    let run = out.join("runs/linknet_full");
    let ckpt = run.join("linknet_full_best.ckpt");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 2);
    let viz: Vec<String> =
        std::fs::read_dir(run.join("viz")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(viz.len(), 2);
    assert!(viz.iter().any(|n| n.ends_with("_overlay.png")) && viz.iter().any(|n| n.ends_with("_entropy.png")));

    // scoring the saved split reproduces the run's own metrics file
    let metrics = dir.path().join("metrics.csv");
    ok(&ugda(&["eval", "--checkpoint", s(&ckpt), "--split", s(&out.join("split.json")), "--out", s(&metrics)]));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), std::fs::read_to_string(run.join("metrics.csv")).unwrap());

    let stdout = ok(&ugda(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "id,dsc,iou");
    assert_eq!(lines.len(), 10);
    assert!(lines[9].starts_with("mean,"));

    let viz_dir = dir.path().join("viz");
    ok(&ugda(&["viz", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&viz_dir), "--limit", "3"]));
    let count = std::fs::read_dir(&viz_dir).unwrap().count();
    assert_eq!(count, 6);
    let img = image::open(viz_dir.join("synth_0000_overlay.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    std::fs::write(&cfg, format!("out = {:?}\ncount = 5\nside = 40\n", s(&dir.path().join("from_file")))).unwrap();
    ok(&ugda(&["--config", s(&cfg), "synth", "--count", "2"]));
    let images = std::fs::read_dir(dir.path().join("from_file/images")).unwrap().count();
    assert_eq!(images, 2);
    let img = image::open(dir.path().join("from_file/images/synth_0000.png")).unwrap();
    assert_eq!(img.width(), 40);
}

#[test]
fn bad_input_exits_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epoch = 3\n").unwrap();
    let out = ugda(&["--config", s(&cfg), "ablate", "--synthetic", "6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config keys"));

    let out = ugda(&["ablate", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = ugda(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--data", s(dir.path())]);
    assert!(!out.status.success());

    let out = ugda(&["ablate", "--synthetic", "6", "--data", "x"]);
    assert!(!out.status.success());
}
