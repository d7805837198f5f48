use std::ffi::{CStr, CString};
use std::ptr;

use mtop::encoder::EncoderConfig;
use mtop::model::{ModelConfig, MtopModel, TaskSpec};
use mtop_ffi::*;

fn small_model() -> MtopModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            max_positions: 32,
            vocab_size: 50,
            dropout_rate: 0.1,
        },
        ..ModelConfig::default()
    };
    let tasks = vec![
        TaskSpec::binary("a"),
        TaskSpec {
            num_classes: 3,
            ..TaskSpec::binary("b")
        },
    ];
    MtopModel::with_tasks(config, 1, &tasks, 2).unwrap()
}

fn last_error() -> String {
    let p = mtop_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_predict_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.best");
    let model = small_model();
    model.save(&path).unwrap();
    let batch: Vec<Vec<usize>> = vec![vec![5, 6, 7], vec![8], vec![9, 10, 11, 12, 13]];
    let expected = model.predict_all_tasks(&batch).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(mtop_model_load(cpath.as_ptr(), &mut h), MtopStatus::Ok);
        let mut n = 0;
        assert_eq!(mtop_model_num_tasks(h, &mut n), MtopStatus::Ok);
        assert_eq!(n, 2);
        assert_eq!(mtop_model_num_classes(h, 1, &mut n), MtopStatus::Ok);
        assert_eq!(n, 3);
        assert_eq!(
            mtop_model_num_classes(h, 2, &mut n),
            MtopStatus::InvalidArgument
        );

        let mut len = 0;
        assert_eq!(mtop_output_len(h, batch.len(), &mut len), MtopStatus::Ok);
        assert_eq!(len, 3 * (2 + 3));

        let flat: Vec<u32> = batch.iter().flatten().map(|&t| t as u32).collect();
        let lengths: Vec<usize> = batch.iter().map(Vec::len).collect();
        let mut out = vec![0f32; len];
        let status = mtop_predict_all(
            h,
            flat.as_ptr(),
            lengths.as_ptr(),
            batch.len(),
            out.as_mut_ptr(),
            out.len(),
        );
        assert_eq!(status, MtopStatus::Ok);
        let want: Vec<f32> = expected
            .probs
            .iter()
            .flat_map(|p| p.data().to_vec())
            .collect();
        assert_eq!(out, want);

        let mut passes = 0;
        assert_eq!(mtop_forward_passes(h, &mut passes), MtopStatus::Ok);
        assert_eq!(passes, 1);
        assert_eq!(mtop_reset_forward_passes(h), MtopStatus::Ok);
        assert_eq!(mtop_forward_passes(h, &mut passes), MtopStatus::Ok);
        assert_eq!(passes, 0);

        let status = mtop_predict_all(
            h,
            flat.as_ptr(),
            lengths.as_ptr(),
            batch.len(),
            out.as_mut_ptr(),
            len - 1,
        );
        assert_eq!(status, MtopStatus::BufferTooSmall);
        assert!(last_error().contains("15"));

        mtop_model_free(h);
    }
}

#[test]
fn errors_are_reported() {
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(
            mtop_model_load(ptr::null(), &mut h),
            MtopStatus::NullPointer
        );
        assert_eq!(last_error(), "path is null");

        let missing = CString::new("/nonexistent/ckpt.best").unwrap();
        assert_eq!(mtop_model_load(missing.as_ptr(), &mut h), MtopStatus::Io);
        assert!(h.is_null());

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(
            mtop_model_load(junk.as_ptr(), &mut h),
            MtopStatus::Checkpoint
        );

        let mut n = 0;
        assert_eq!(
            mtop_model_num_tasks(ptr::null(), &mut n),
            MtopStatus::NullPointer
        );
        mtop_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mtop.h")).unwrap();
    for name in [
        "typedef struct MtopHandle MtopHandle",
        "MTOP_STATUS_BUFFER_TOO_SMALL",
        "mtop_model_load",
        "mtop_model_free",
        "mtop_predict_all",
        "mtop_forward_passes",
        "mtop_last_error",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
