use std::path::Path;
use std::process::{Command, Output};

use featpipe_core::featurize::{featurize_patches, Featurizer, PatchMean};
use featpipe_core::fmap;
use featpipe_core::pixelclf::LabelMask;
use featpipe_core::store::RunLengthLabels;
use featpipe_core::synthetic::color_regions;
use featpipe_core::Raster;
use featpipe_serve::work::encode_png;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn featpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featpipe")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identity_upsample_matches_nearest_patch_features() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = Raster::from_fn(40, 56, 3, |_, _, _| rng.gen::<u8>());
    let input = dir.path().join("in.png");
    std::fs::write(&input, encode_png(&img)).unwrap();
    let out = dir.path().join("nested/out.fmap");
    let attn = dir.path().join("attn.fmap");
    let o = featpipe(&[
        "upsample", "--input", arg(&input), "--out", arg(&out), "--attention-out", arg(&attn),
        "--backend", "synthetic:patch-mean+center-attention", "--patch-size", "8", "--stride", "4", "--set", "identity",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let features = fmap::read(&out).unwrap().raster;
    let attention = fmap::read(&attn).unwrap().raster;
    let backend = PatchMean::center_attention(8, 4);
    let pf = featurize_patches(&backend, &img).unwrap();
    assert_eq!(features.shape(), (40, 56, backend.descriptor().hidden_dim as usize));
    let (gh, gw) = (pf.features.height(), pf.features.width());
    for y in 0..40 {
        for x in 0..56 {
            assert_eq!(features.pixel(y, x), pf.features.pixel(y * gh / 40, x * gw / 56), "{y},{x}");
            assert_eq!(attention.get(y, x, 0), pf.attention.get(y * gh / 40, x * gw / 56, 0));
        }
    }
}

#[test]
fn odd_sizes_are_padded_and_cropped_back() {
    let dir = tempfile::tempdir().unwrap();
    let img = Raster::from_fn(37, 29, 3, |y, x, c| (y * 7 + x * 3 + c) as u8);
    let input = dir.path().join("odd.png");
    std::fs::write(&input, encode_png(&img)).unwrap();
    let out = dir.path().join("odd.fmap");
    let pca = dir.path().join("odd.pca.png");
    let o = featpipe(&["upsample", "--input", arg(&input), "--out", arg(&out), "--pca", arg(&pca), "--f16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = fmap::read(&out).unwrap();
    assert_eq!((f.raster.height(), f.raster.width()), (37, 29));
    assert_eq!(f.dtype, fmap::Dtype::F16);
    let again = dir.path().join("again.png");
    assert!(featpipe(&["pca", "--features", arg(&out), "--out", arg(&again)]).status.success());
    assert!(again.is_file() && pca.is_file());
}

#[test]
fn exit_codes_separate_bad_input_from_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.fmap");
    assert_eq!(featpipe(&["upsample", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(featpipe(&["--help"]).status.code(), Some(0));
    assert_eq!(
        featpipe(&["upsample", "--input", "/nonexistent.png", "--out", arg(&out)]).status.code(),
        Some(2),
        "missing file is a runtime failure"
    );

    let garbage = dir.path().join("garbage.png");
    std::fs::write(&garbage, b"nope").unwrap();
    let o = featpipe(&["upsample", "--input", arg(&garbage), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("garbage.png"));

    let img = dir.path().join("i.png");
    std::fs::write(&img, encode_png(&Raster::from_fn(16, 16, 3, |_, _, _| 9u8))).unwrap();
    let o = featpipe(&["upsample", "--input", arg(&img), "--out", arg(&out), "--patch-size", "4", "--stride", "8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stride"));

    // An unwritable destination is a runtime failure.
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"").unwrap();
    let o = featpipe(&["upsample", "--input", arg(&img), "--out", arg(&blocker.join("x.fmap"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synthetic_benchmark_localizes_every_blob() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let md = dir.path().join("report.md");
    let o = featpipe(&[
        "benchmark", "--synthetic", "8", "--size", "64", "--backend", "synthetic:patch-mean+center-attention",
        "--patch-size", "4", "--stride", "2", "--out", arg(&out), "--markdown", arg(&md),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["images"], 8);
    assert_eq!(report["corloc"], 1.0);
    assert!(report["saliency_iou_mean"].as_f64().unwrap() >= 0.9);
    assert_eq!(report["per_image"].as_array().unwrap().len(), 8);
    let text = std::fs::read_to_string(&md).unwrap();
    assert!(text.contains("| CorLoc | 1.0000 |"), "{text}");
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), text.trim());
}

#[test]
fn unsupervised_detect_and_saliency_on_files() {
    let dir = tempfile::tempdir().unwrap();
    let sample = &featpipe_core::synthetic::blob_dataset(1, 48, 4)[0];
    let img = dir.path().join("blob.png");
    std::fs::write(&img, encode_png(&sample.image)).unwrap();
    let backend = ["--backend", "synthetic:patch-mean+center-attention", "--patch-size", "4", "--stride", "2"];
    let mut args = vec!["unsup-detect", "--input", arg(&img)];
    args.extend(backend);
    let o = featpipe(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dets: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(dets[0]["id"], "blob");
    assert!(!dets[0]["boxes"].as_array().unwrap().is_empty());

    let sal = dir.path().join("sal");
    let mut args = vec!["unsup-saliency", "--input", arg(&img), "--out-dir", arg(&sal)];
    args.extend(backend);
    assert!(featpipe(&args).status.success());
    let mask = LabelMask::from_png(&std::fs::read(sal.join("blob.saliency.png")).unwrap()).unwrap();
    assert_eq!((mask.height, mask.width), (48, 48));
    assert!(mask.labeled_count() > 0);
}

#[test]
fn weak_train_then_apply() {
    let dir = tempfile::tempdir().unwrap();
    let fx = color_regions(48, 6);
    let img = dir.path().join("c.png");
    std::fs::write(&img, encode_png(&fx.image)).unwrap();
    let png_labels = dir.path().join("c.labels.png");
    std::fs::write(&png_labels, fx.labels.to_png().unwrap()).unwrap();
    let rle_labels = dir.path().join("c.labels.json");
    std::fs::write(&rle_labels, serde_json::to_vec(&RunLengthLabels::encode(&fx.labels)).unwrap()).unwrap();
    let backend = ["--backend", "synthetic:patch-mean+center-attention", "--patch-size", "4", "--stride", "2", "--set", "shifts"];

    for (labels, source, classifier) in [(&png_labels, "deep", "logistic"), (&rle_labels, "classical", "random-forest")] {
        let model = dir.path().join(format!("{source}.clf"));
        let mut args = vec![
            "weak-train", "--image", arg(&img), "--labels", arg(labels), "--source", source, "--classifier", classifier,
            "--out", arg(&model),
        ];
        args.extend(backend);
        let o = featpipe(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(summary["classes"], serde_json::json!([1, 2, 3]));

        let preds = dir.path().join(format!("{source}-pred"));
        let mut args = vec![
            "weak-apply", "--model", arg(&model), "--image", arg(&img), "--out-dir", arg(&preds), "--probabilities",
            "--smooth-radius", "1",
        ];
        args.extend(backend);
        let o = featpipe(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let pred = LabelMask::from_png(&std::fs::read(preds.join("c.pred.png")).unwrap()).unwrap();
        let agree = pred.labels.iter().zip(&fx.truth.labels).filter(|(p, t)| p == t).count();
        assert!(agree as f64 / (48.0 * 48.0) > 0.9, "{source}: {agree}");
        let probs = fmap::read(&preds.join("c.prob.fmap")).unwrap().raster;
        assert_eq!(probs.shape(), (48, 48, 3));
    }

    // Mismatched label dimensions and unpaired flags are user errors.
    let small = dir.path().join("small.png");
    std::fs::write(&small, LabelMask::unlabeled(10, 10).to_png().unwrap()).unwrap();
    let out = dir.path().join("x.clf");
    let o = featpipe(&["weak-train", "--image", arg(&img), "--labels", arg(&small), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = featpipe(&["weak-train", "--image", arg(&img), "--image", arg(&img), "--labels", arg(&png_labels), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn profile_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("profile.csv");
    let o = featpipe(&["profile", "--lengths", "32,64", "--mode", "batched", "--repeats", "1", "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "length,mode,wall_ms,peak_bytes");
    assert_eq!(lines.len(), 3);
    for (line, length) in lines[1..].iter().zip([32, 64]) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], length.to_string());
        assert_eq!(cols[1], "batched");
        assert!(cols[2].parse::<f64>().unwrap() >= 0.0);
        assert!(cols[3].parse::<u64>().unwrap() > 0, "allocator is installed in the binary");
    }
    assert_eq!(featpipe(&["profile", "--lengths", "30"]).status.code(), Some(1));
}
