use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vinet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vinet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn count(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn make_data_layout_determinism_and_refusal() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &str| ["make-data", "--clips", "2", "--frames", "16", "--size", "64", "--seed", "7", "--out", out].map(String::from);
    let run = |out: &str| vinet(&args(out).iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert!(run("a").status.success());
    assert!(run("b").status.success());
    let clip = tmp.path().join("a/clip_00001");
    assert_eq!(count(&clip.join("frames"), ".png"), 16);
    assert_eq!(count(&clip.join("flow"), "_bwd.flo"), 15);
    assert_eq!(count(&clip.join("flow"), "_to1.flo"), 15);
    assert_eq!(tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")));

    let again = run("a");
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).starts_with("error[contract]:"));
}

#[test]
fn bad_resolution_is_contract_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vinet(&["make-data", "--size", "50", "--out", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[contract]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_input_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vinet(&["cache-flow", "--data", "nowhere"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[io]:"));
}

#[test]
fn make_masks_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["m1", "m2"] {
        let o = vinet(
            &["make-masks", "--kind", "flying-square", "--frames", "6", "--seed", "3", "--out", out],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(count(&tmp.path().join("m1"), ".png"), 6);
    assert_eq!(tree_bytes(&tmp.path().join("m1")), tree_bytes(&tmp.path().join("m2")));
    let o = vinet(&["make-masks", "--kind", "object", "--out", "m3"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_tiles_and_rejects_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(vinet(&["make-data", "--clips", "2", "--frames", "5", "--size", "64", "--out", "d"], p).status.success());
    let o = vinet(
        &[
            "compare",
            "--inputs",
            "d/clip_00000/frames,d/clip_00001/frames,d/clip_00000/frames",
            "--masks",
            "d/clip_00000/seg",
            "--out",
            "cmp",
        ],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(count(&p.join("cmp"), ".png"), 5);

    assert!(vinet(&["make-data", "--clips", "1", "--frames", "3", "--size", "64", "--out", "e"], p).status.success());
    let o = vinet(&["compare", "--inputs", "d/clip_00000/frames,e/clip_00000/frames", "--out", "x"], p);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(vinet(&["make-data", "--clips", "2", "--frames", "6", "--size", "16", "--out", "d"], p).status.success());
    // picked up from the working directory without --config
    fs::write(p.join("vinet.cfg"), "widths = 4,4,8,8\nbatch_size = 1\nrecurrence = 2\ncheckpoint_every = 1\n").unwrap();
    let o = vinet(&["train", "--stage", "1", "--data", "d", "--out", "s1", "--iterations", "2", "--seed", "1"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(p.join("s1/checkpoint.safetensors").is_file());
    assert!(p.join("s1/checkpoint_000002.safetensors").is_file());
    assert_eq!(fs::read_to_string(p.join("s1/loss.csv")).unwrap().lines().count(), 3);

    let o = vinet(&["train", "--stage", "2", "--data", "d", "--out", "s2", "--iterations", "1"], p);
    assert_eq!(o.status.code(), Some(2), "stage 2 without a checkpoint");
    let o = vinet(
        &["train", "--stage", "2", "--data", "d", "--out", "s2", "--iterations", "1", "--ckpt", "s1/checkpoint.safetensors"],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    for clip in ["clip_00000", "clip_00001"] {
        let o = vinet(
            &[
                "infer",
                "--ckpt",
                "s2/checkpoint.safetensors",
                "--frames",
                &format!("d/{clip}/frames"),
                "--masks",
                &format!("d/{clip}/seg"),
                "--out",
                &format!("pred/{clip}"),
            ],
            p,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(count(&p.join(format!("pred/{clip}/frames")), ".png"), 6);
        assert_eq!(count(&p.join(format!("pred/{clip}/flow")), ".flo"), 6);
    }

    for (metric, cols) in [("warp", 2), ("psnr", 3), ("fid", 2)] {
        let out = format!("{metric}.csv");
        let o = vinet(&["eval", "--metric", metric, "--pred", "pred", "--data", "d", "--out", &out], p);
        assert!(o.status.success(), "{metric}: {}", stderr(&o));
        let csv = fs::read_to_string(p.join(&out)).unwrap();
        assert!(csv.lines().all(|l| l.split(',').count() == cols), "{csv}");
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("mean,") || last.starts_with("all,"));
    }

    let o = vinet(&["train", "--config", "missing.cfg", "--data", "d", "--out", "s3"], p);
    assert_eq!(o.status.code(), Some(3));
    fs::write(p.join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let o = vinet(&["train", "--config", "bad.cfg", "--data", "d", "--out", "s3"], p);
    assert_eq!(o.status.code(), Some(2));
}
