//! End-to-end command-line round trip on a tiny problem.

use std::path::Path;
use std::process::Command;

fn georefine(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_georefine"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "`georefine {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn synth_backbone_train_refine_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    georefine(
        dir,
        &[
            "synth", "--height", "96", "--width", "96", "--count", "2", "--seed", "11",
            "--n-objects", "5", "--out", "scenes",
        ],
    );
    assert!(dir.join("scenes/scene_0000/rgb.rtft").exists());
    assert!(dir.join("scenes/scene_0001/gt_depth.rtft").exists());

    georefine(
        dir,
        &[
            "backbone", "--scene", "scenes/scene_0000", "--out", "bb", "--long-side", "48",
            "--seed", "3",
        ],
    );
    let validate = georefine(
        dir,
        &[
            "backbone", "--validate", "bb/coarse_lr.rtft", "bb/logits_lr.rtft",
        ],
    );
    assert!(validate.contains("ok:"), "{validate}");

    georefine(
        dir,
        &[
            "train", "--synth-count", "3", "--size", "64", "--n-objects", "4", "--steps", "20",
            "--batch", "2", "--levels", "1", "--channels", "6", "--seed", "2", "--out", "model",
        ],
    );
    assert!(dir.join("model/weights.rtwm").exists());
    let curve = std::fs::read_to_string(dir.join("model/loss_curve.csv")).unwrap();
    assert!(curve.starts_with("step,total,selected_rmse,full_rmse"));
    assert_eq!(curve.lines().count(), 21);

    let refine_out = georefine(
        dir,
        &[
            "refine", "--rgb", "scenes/scene_0000/rgb.rtft", "--coarse", "bb/coarse_lr.rtft",
            "--logits", "bb/logits_lr.rtft", "--weights", "model/weights.rtwm", "--out",
            "refined",
        ],
    );
    assert!(refine_out.contains("refined 96x96"), "{refine_out}");
    for f in [
        "refined/refined.rtft",
        "refined/refined.png",
        "refined/refined.range.txt",
        "refined/selection.rtft",
        "refined/diagnostics.txt",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }

    let eval = georefine(
        dir,
        &[
            "eval", "--pred", "refined/refined.rtft", "--gt", "scenes/scene_0000/gt_depth.rtft",
            "--mask", "scenes/scene_0000/mask.rtft",
        ],
    );
    assert!(eval.contains("abs_rel="), "{eval}");
    assert!(eval.contains("rmse="));
    assert!(eval.contains("delta_half="));
    assert!(eval.contains("valid_count=9216"));
}

#[test]
fn bench_and_ablate_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let bench = georefine(
        dir,
        &[
            "bench", "--height", "96", "--width", "96", "--n-objects", "5", "--long-side", "48",
            "--warmup", "0", "--iters", "1", "--seed", "3", "--out", "bench.txt",
        ],
    );
    assert!(bench.contains("dense baseline"), "{bench}");
    assert!(dir.join("bench.txt").exists());

    let ablate = georefine(
        dir,
        &[
            "ablate", "--scenes", "2", "--size", "64", "--n-objects", "4", "--seed", "5",
            "--threads", "1",
        ],
    );
    assert!(ablate.contains("== selector (equal budget) =="), "{ablate}");
    assert!(ablate.contains("== entropy threshold =="));
}

#[test]
fn refine_with_fixed_threads_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    georefine(
        dir,
        &[
            "synth", "--height", "64", "--width", "64", "--seed", "21", "--n-objects", "4",
            "--out", "s",
        ],
    );
    georefine(
        dir,
        &["backbone", "--scene", "s/scene_0000", "--out", "b", "--long-side", "32"],
    );
    for (threads, out) in [("1", "r1"), ("2", "r2")] {
        georefine(
            dir,
            &[
                "refine", "--threads", threads, "--rgb", "s/scene_0000/rgb.rtft", "--coarse",
                "b/coarse_lr.rtft", "--logits", "b/logits_lr.rtft", "--out", out,
            ],
        );
    }
    let a = std::fs::read(dir.join("r1/refined.rtft")).unwrap();
    let b = std::fs::read(dir.join("r2/refined.rtft")).unwrap();
    assert_eq!(a, b, "outputs must be bitwise identical across thread counts");
}
