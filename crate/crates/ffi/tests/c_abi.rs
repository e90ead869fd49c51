use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use embseg::label_space::{LabelRecord, LabelSpace};
use embseg::seg_head::SegModel;
use embseg_ffi::*;

fn write_labels(dir: &Path) -> CString {
    let space = LabelSpace::new(vec![
        LabelRecord::new("a", "An image of a.", vec![1.0, 0.0, 0.0]),
        LabelRecord::new("b", "An image of b.", vec![0.0, 1.0, 0.0]),
        LabelRecord::new("c", "An image of c.", vec![0.0, 0.0, 2.0]),
    ])
    .unwrap();
    let path = dir.join("labels.jsonl");
    std::fs::write(&path, space.to_jsonl()).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = embseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn label_space_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_labels(dir.path());
    let mut space = ptr::null_mut();
    unsafe {
        assert_eq!(embseg_label_space_load(path.as_ptr(), &mut space), EmbsegStatus::Ok);
        assert!(embseg_last_error().is_null());
        assert_eq!(embseg_label_space_len(space), 3);
        assert_eq!(embseg_label_space_dim(space), 3);

        let (mut id, mut score) = (99usize, 0.0f64);
        let q = [0.1, 0.2, 5.0];
        assert_eq!(embseg_label_space_retrieve(space, q.as_ptr(), 3, &mut id, &mut score), EmbsegStatus::Ok);
        assert_eq!(id, 2);
        assert!(score > 0.99);

        let bad = [1.0, 0.0];
        assert_eq!(
            embseg_label_space_retrieve(space, bad.as_ptr(), 2, &mut id, &mut score),
            EmbsegStatus::DimensionMismatch
        );
        assert!(last_error().contains("dimension"));

        let mut sim = [0.0; 9];
        assert_eq!(embseg_label_space_similarity(space, sim.as_mut_ptr(), 4), EmbsegStatus::BufferTooSmall);
        assert_eq!(embseg_label_space_similarity(space, sim.as_mut_ptr(), 9), EmbsegStatus::Ok);
        assert_eq!(sim, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        embseg_label_space_free(space);
    }
}

#[test]
fn load_errors_are_reported() {
    let mut space = ptr::null_mut();
    let missing = CString::new("/definitely/not/here.jsonl").unwrap();
    unsafe {
        assert_eq!(embseg_label_space_load(missing.as_ptr(), &mut space), EmbsegStatus::Io);
        assert!(space.is_null());
        assert!(last_error().contains("not/here"));
        assert_eq!(embseg_label_space_load(ptr::null(), &mut space), EmbsegStatus::NullArgument);
        assert_eq!(embseg_label_space_len(ptr::null()), 0);
        embseg_label_space_free(ptr::null_mut());
        embseg_model_free(ptr::null_mut());
    }
}

#[test]
fn model_inference_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_labels(dir.path());
    let model = SegModel::init(2, &[4], 3, 9).unwrap();
    let ckpt = dir.path().join("ckpt");
    model.save(&ckpt).unwrap();
    let ckpt = CString::new(ckpt.to_str().unwrap()).unwrap();

    let features: Vec<f64> = (0..2 * 3 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
    let grid = embseg::tensor::Tensor::new(&[2, 3, 2], features.clone()).unwrap();
    let space = LabelSpace::load(dir.path().join("labels.jsonl")).unwrap();
    let expected = embseg::eval::infer(&model, &grid, &space).unwrap();

    unsafe {
        let (mut m, mut s) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(embseg_model_load(ckpt.as_ptr(), &mut m), EmbsegStatus::Ok);
        assert_eq!(embseg_label_space_load(labels.as_ptr(), &mut s), EmbsegStatus::Ok);
        let mut out = vec![usize::MAX; 6];
        assert_eq!(embseg_model_infer(m, s, features.as_ptr(), 2, 3, 2, out.as_mut_ptr(), out.len()), EmbsegStatus::Ok);
        assert_eq!(out, expected);
        assert_eq!(
            embseg_model_infer(m, s, features.as_ptr(), 2, 3, 2, out.as_mut_ptr(), 5),
            EmbsegStatus::BufferTooSmall
        );
        assert_eq!(
            embseg_model_infer(m, s, features.as_ptr(), 3, 2, 2, out.as_mut_ptr(), 6),
            EmbsegStatus::Ok,
            "a reshaped grid is still a valid grid"
        );
        assert_eq!(
            embseg_model_infer(m, s, features.as_ptr(), 2, 2, 3, out.as_mut_ptr(), 6),
            EmbsegStatus::DimensionMismatch
        );
        embseg_model_free(m);
        embseg_label_space_free(s);
    }
}

#[test]
fn miou_through_abi() {
    let pred = [0usize, 1, 1, 1];
    let truth = [0i64, 0, 1, 1];
    let mut m = 0.0;
    let mut per = [0.0; 3];
    unsafe {
        assert_eq!(embseg_miou(pred.as_ptr(), truth.as_ptr(), 4, 3, &mut m, per.as_mut_ptr()), EmbsegStatus::Ok);
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(per[0], 0.5);
        assert!(per[2].is_nan());
        let ignored = [-1i64; 4];
        assert_eq!(
            embseg_miou(pred.as_ptr(), ignored.as_ptr(), 4, 3, &mut m, ptr::null_mut()),
            EmbsegStatus::UndefinedMetric
        );
    }
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/embseg.h")).unwrap();
    for name in [
        "embseg_last_error",
        "embseg_label_space_load",
        "embseg_label_space_free",
        "embseg_label_space_retrieve",
        "embseg_label_space_similarity",
        "embseg_model_load",
        "embseg_model_infer",
        "embseg_model_free",
        "embseg_miou",
        "typedef struct EmbsegModel EmbsegModel",
        "EMBSEG_STATUS_BUFFER_TOO_SMALL = 8",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compiles and runs a small C program against the static library when a C
/// compiler is on PATH.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let target = manifest.join("../../target").join(if cfg!(debug_assertions) { "debug" } else { "release" });
    let lib = target.join("libembseg_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let labels = write_labels(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "embseg.h"
int main(int argc, char **argv) {
    EmbsegLabelSpace *s = NULL;
    if (embseg_label_space_load(argv[1], &s) != EMBSEG_STATUS_OK) return 10;
    double q[3] = {0.0, 3.0, 0.1};
    size_t id = 0; double score = 0.0;
    if (embseg_label_space_retrieve(s, q, 3, &id, &score) != EMBSEG_STATUS_OK) return 11;
    printf("%zu %.3f\n", id, score);
    EmbsegLabelSpace *bad = NULL;
    if (embseg_label_space_load("/no/such/file", &bad) != EMBSEG_STATUS_IO) return 12;
    if (embseg_last_error() == NULL) return 13;
    embseg_label_space_free(s);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).arg(labels.to_str().unwrap()).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1 0.999");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
