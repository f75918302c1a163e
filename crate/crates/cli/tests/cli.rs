//! End-to-end runs of the `mimicdet` binary: exit codes, config echo and the
//! files each command writes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimicdet::pipeline::Image;

const TINY: &str = "\
image_size = 128
backbone_widths = 8,8,16,16
backbone_depth = 1
fpn_channels = 16
s_ch = 16
s_fc = 32
t_fc = 32
t_conv = 8
micro_channels = 8,8
proposal_k = 64
n_teacher = 16
hard_k = 32
max_reg_pos = 16
batch_size = 2
train_scenes = 4
eval_scenes = 2
total_epochs = 2
decay_epochs = 1
warmup_steps = 1
checkpoint_every = 1
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimicdet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny model once and returns its output directory.
fn trained(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["gen", "--bogus=3"])), 1);
    assert_eq!(code(&run(&["gen", "--image_size=200"])), 1);
    assert_eq!(code(&run(&["gen", "--config", "/nonexistent/x.cfg"])), 1);
    assert_eq!(code(&run(&["ablate", "--variants", "mimic,unknown"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn every_command_echoes_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&data), "--mimic_enabled=false", "--seed=9"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("# mimicdet gen: resolved config"), "{text}");
    assert!(text.contains("mimic_enabled = false"));
    assert!(text.contains("seed = 9"));
    assert!(text.contains("image_size = 128"));
    assert!(data.join("train/annotations.json").exists());
    assert!(data.join("eval/images/000001.png").exists());

    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("# mimicdet gradcheck: resolved config"));
}

#[test]
fn train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path());
    for f in ["train_log.csv", "final.ckpt", "epoch_001.ckpt", "report.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,L_R,L_T,L_S,L_mimic,total,wall_ms"));
    assert_eq!(log.lines().count(), 1 + 4);
    let ckpt = out.join("final.ckpt");

    let o = run(&["eval", "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("# mimicdet eval: resolved config"));
    for col in ["AP", "AP50", "AP75"] {
        assert!(text.split_whitespace().any(|w| w == col), "{col} missing in {text}");
    }

    // one image, written by the generator
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["gen", "--config", s(&tiny_config(dir.path())), "--out", s(&data)])), 0);
    let img_dir = data.join("eval/images");
    let det_dir = dir.path().join("det");
    let o = run(&["infer", "--checkpoint", s(&ckpt), "--input", s(&img_dir), "--out", s(&det_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("# mimicdet infer: resolved config"));
    for stem in ["000000", "000001"] {
        let txt = fs::read_to_string(det_dir.join(format!("{stem}.txt"))).unwrap();
        let mut lines = txt.lines();
        assert_eq!(lines.next(), Some("# class_id score x1 y1 x2 y2"));
        let rows: Vec<&str> = lines.collect();
        assert!(rows.len() <= 100);
        for r in rows {
            assert_eq!(r.split_whitespace().count(), 6, "{r}");
        }
        let input = Image::load(&img_dir.join(format!("{stem}.png"))).unwrap();
        let overlay = Image::load(&det_dir.join(format!("{stem}_overlay.png"))).unwrap();
        assert_eq!((overlay.width, overlay.height), (input.width, input.height));
    }

    // an empty directory is not an error
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = run(&["infer", "--checkpoint", s(&ckpt), "--input", s(&empty), "--out", s(&dir.path().join("none"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("processed 0 images"));

    // resuming a finished run adds nothing
    let cfg = tiny_config(dir.path());
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out), "--resume", s(&ckpt)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("train_log.csv")).unwrap(), log);
}

#[test]
fn bad_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path());
    let ckpt = out.join("final.ckpt");

    // a different class count cannot reuse the weights: config error
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--num_classes=5"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_classes"));

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&cut)])), 2);
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt"))])), 2);
}

#[test]
fn ablate_writes_one_row_per_run_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let csv_path = dir.path().join("abl.csv");
    let o = run(&[
        "ablate",
        "--config",
        s(&cfg),
        "--variants",
        "no_mimic,mimic",
        "--seeds",
        "0,1,2",
        "--out",
        s(&csv_path),
        "--total_epochs=1",
        "--decay_epochs=",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("# mimicdet ablate: resolved config"));
    for v in ["no_mimic", "mimic"] {
        assert!(text.lines().any(|l| l.starts_with(v) && l.contains('±')), "{v} summary missing");
    }
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let runs: Vec<_> = rows.iter().filter(|r| r[1].parse::<u64>().is_ok()).collect();
    assert_eq!(runs.len(), 6);
    for v in ["no_mimic", "mimic"] {
        assert_eq!(runs.iter().filter(|r| &r[0] == v).count(), 3);
        assert!(rows.iter().any(|r| &r[0] == v && &r[1] == "mean"));
        assert!(rows.iter().any(|r| &r[0] == v && &r[1] == "std"));
    }
}
