use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use gad_core::attention_dump::{head_mean_row, heatmap_file_name, load_heatmap, matrix_file_name, read_matrix};
use gad_core::data::{Dataset, Split};
use gad_core::heads::GroupPrediction;
use gad_core::metrics::MetricReport;
use gad_core::model::ClipPrediction;
use gad_core::tensor::Tensor;

fn gad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gad"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &str = "epochs = 2\nbatch_size = 4\n[model.backbone]\nlayers = 1\n[data]\nclips = 6\nframe_count = 10\n";

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let name = e.path().strip_prefix(root).unwrap().display().to_string();
            (name, fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generate_is_bitwise_stable_and_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(&gad(&["generate", "--seed", "0", "--out", "a"], dir.path()));
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "{elapsed}s");
    ok(&gad(&["generate", "--seed", "0", "--out", "b"], dir.path()));
    // config.toml echoes the output path, so only data files are compared
    let data = |root: &str| -> Vec<(String, Vec<u8>)> {
        tree_bytes(&dir.path().join(root))
            .into_iter()
            .filter(|(name, _)| name != "config.toml")
            .collect()
    };
    let (a, b) = (data("a"), data("b"));
    assert_eq!(a.len(), 1 + 64 * 30);
    assert!(a == b, "regenerated dataset differs");
    let ds = Dataset::load(&dir.path().join("a"), 7).unwrap();
    assert_eq!(ds.len(), 64);
}

#[test]
fn invalid_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[data]\nactors = [9, 3]\n").unwrap();
    let out = gad(&["generate", "--config", "bad.toml", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("typo.toml"), "[loss]\nlambda_memb = 1.0\n").unwrap();
    let out = gad(&["generate", "--config", "typo.toml", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gad(&["train", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(gad(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(gad(&["train", "--frozen", "--full-ft"], dir.path()).status.code(), Some(1));
    assert_eq!(gad(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn truncated_annotations_fail_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    ok(&gad(&["generate", "--config", "c.toml", "--out", "data"], dir.path()));
    let ann = dir.path().join("data/annotations.jsonl");
    let text = fs::read_to_string(&ann).unwrap();
    fs::write(&ann, &text[..text.len() / 2]).unwrap();
    let out = gad(&["train", "--config", "c.toml", "--data", "data", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed record"));
}

fn ground_truth_predictions(ds: &Dataset) -> Vec<ClipPrediction> {
    ds.clips
        .iter()
        .map(|c| {
            let t = c.targets();
            ClipPrediction {
                clip_id: c.clip_id.clone(),
                assignment: t.group_of_actor(),
                actions: t.actions.clone(),
                groups: t
                    .groups
                    .iter()
                    .map(|g| GroupPrediction {
                        members: g.members.clone(),
                        activity: g.activity,
                        confidence: 1.0,
                    })
                    .collect(),
            }
        })
        .collect()
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    ok(&gad(&["generate", "--config", "c.toml", "--out", "data"], dir.path()));
    let ds = Dataset::load(&dir.path().join("data"), 7).unwrap();
    let preds = ground_truth_predictions(&ds);
    let lines: Vec<String> = preds.iter().map(|p| serde_json::to_string(p).unwrap()).collect();
    fs::write(dir.path().join("gt.jsonl"), lines.join("\n")).unwrap();
    let stdout = ok(&gad(
        &["eval", "--predictions", "gt.jsonl", "--data", "data", "--split", "all", "--thresholds", "0.5,1.0", "--out", "ev"],
        dir.path(),
    ));
    assert!(stdout.contains("group mAP@0.5: 1.0000"), "{stdout}");
    assert!(stdout.contains("group mAP@1: 1.0000"), "{stdout}");
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(report.group_map.len(), 2);
    for (_, m) in &report.group_map {
        assert_eq!(m.map, 1.0);
    }
    assert_eq!(report.outlier_miou, 1.0);
    assert_eq!(report.individual_accuracy, 1.0);
    assert_eq!(report.social_accuracy, 1.0);
    assert_eq!(report.membership_accuracy, 1.0);
    assert_eq!(ds.split_indices(Split::All).len(), preds.len());
}

#[test]
fn train_eval_and_dump_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), SMALL).unwrap();
    ok(&gad(&["generate", "--config", "c.toml", "--out", "data"], d));
    let stdout = ok(&gad(&["train", "--config", "c.toml", "--data", "data", "--out", "run"], d));
    assert_eq!(stdout.lines().filter(|l| l.starts_with('{')).count(), 2);
    assert!(d.join("run/config.toml").exists());
    assert!(d.join("run/train_log.jsonl").exists());

    let stdout = ok(&gad(&["eval", "--checkpoint", "run/checkpoint", "--split", "all", "--out", "ev"], d));
    for needle in ["group mAP@0.5", "group mAP@1", "per-class AP", "outlier mIoU", "individual accuracy", "social accuracy", "membership accuracy", "trainable"] {
        assert!(stdout.contains(needle), "missing {needle} in\n{stdout}");
    }
    assert!(d.join("ev/predictions.jsonl").exists());
    assert!(d.join("ev/config.toml").exists());

    // library-level metrics agree with the CLI report
    let l = gad_core::checkpoint::load_checkpoint(&d.join("run/checkpoint")).unwrap();
    let ds = Dataset::load(&d.join("data"), 7).unwrap();
    let data = gad_core::train::DataSource::new(&ds, None);
    let lib = gad_core::train::evaluate_split(&l.model, &l.store, &data, Split::All, &[0.5, 1.0]).unwrap();
    let cli: MetricReport = serde_json::from_str(&fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(lib.report, cli);

    let clip = ds.clips[0].clip_id.clone();
    ok(&gad(&["dump-attn", "--checkpoint", "run/checkpoint", "--clip", &clip, "--out", "dump"], d));
    let heads = l.cfg.model.gct_heads;
    let frames = l.cfg.model.frames;
    let k = l.cfg.model.group_tokens;
    let m = ds.clips[0].actor_count();
    let side = l.cfg.model.backbone.grid_side();
    let patch = l.cfg.model.backbone.patch_size;
    for t in 0..frames {
        let mats: Vec<Tensor> = (0..heads)
            .map(|h| {
                let rows = read_matrix(&d.join("dump").join(matrix_file_name(2, h, t))).unwrap();
                Tensor::from_rows(&rows).unwrap()
            })
            .collect();
        for token in 0..k {
            let weights = head_mean_row(&mats, m + token);
            let best = weights.iter().copied().fold(f64::MIN, f64::max);
            let img = load_heatmap(&d.join("dump").join(heatmap_file_name(token, t))).unwrap();
            assert_eq!((img.height, img.width), (side * patch, side * patch));
            let (mut by, mut bx, mut bv) = (0, 0, -1.0);
            for y in 0..img.height {
                for x in 0..img.width {
                    let v = img.pixel(y, x)[0];
                    if v > bv {
                        (by, bx, bv) = (y, x, v);
                    }
                }
            }
            let col = (by / patch) * side + bx / patch;
            assert_eq!(weights[col], best, "token {token} frame {t}");
        }
    }

    let out = gad(&["dump-attn", "--checkpoint", "run/checkpoint", "--clip", "no_such_clip", "--out", "dump2"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), SMALL).unwrap();
    ok(&gad(&["generate", "--config", "c.toml", "--out", "data"], d));
    ok(&gad(&["train", "--config", "c.toml", "--data", "data", "--out", "run", "--epochs", "1"], d));
    let manifest = d.join("run/checkpoint/manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\"trainable\": true", "\"trainable\": false", 1)).unwrap();
    let out = gad(&["eval", "--checkpoint", "run/checkpoint"], d);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&manifest, &text).unwrap();
    ok(&gad(&["eval", "--checkpoint", "run/checkpoint"], d));

    let params = d.join("run/checkpoint/params");
    let victim = fs::read_dir(&params).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(victim).unwrap();
    let out = gad(&["eval", "--checkpoint", "run/checkpoint"], d);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn prompt_ablation_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), SMALL.replace("epochs = 2", "epochs = 1").replace("layers = 1", "layers = 2")).unwrap();
    ok(&gad(&["generate", "--config", "c.toml", "--out", "data"], d));
    let stdout = ok(&gad(
        &["prompt-ablation", "--config", "c.toml", "--data", "data", "--out", "abl", "--split", "all"],
        d,
    ));
    let rows: Vec<&str> = stdout.lines().filter(|l| l.starts_with("| ")).collect();
    assert_eq!(rows.len(), 4, "{stdout}");
    for mode in ["none", "shallow", "deep"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("| {mode} |"))), "{stdout}");
    }
    assert_eq!(fs::read_to_string(d.join("abl/ablation.md")).unwrap(), stdout);
}
