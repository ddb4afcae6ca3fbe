use std::ffi::{CStr, CString};
use std::ptr;

use non_core::config::{NonConfig, Operation};
use non_core::data::FieldKind;
use non_core::model::{FieldInfo, NonModel};
use non_ffi::*;

fn fields() -> Vec<FieldInfo> {
    vec![
        FieldInfo {
            name: "a".into(),
            kind: FieldKind::Categorical,
            vocab_size: 4,
        },
        FieldInfo {
            name: "x".into(),
            kind: FieldKind::Numerical,
            vocab_size: 0,
        },
    ]
}

fn saved_model(dir: &std::path::Path) -> (NonModel, CString) {
    let mut cfg = NonConfig {
        embedding_dim: 4,
        ..NonConfig::default()
    };
    cfg.operations.set = vec![Operation::Linear, Operation::Dnn, Operation::BiInteraction];
    cfg.operations.dnn_hidden = vec![8];
    let model = NonModel::new(cfg, fields(), "schema-1", 3).unwrap();
    let path = dir.join("m.json");
    model.to_checkpoint(1, None).save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(non_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn load_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    let status = unsafe { non_model_load(path.as_ptr(), ptr::null(), &mut handle) };
    assert_eq!(status, NonStatus::Ok);
    unsafe {
        assert_eq!(non_model_num_categorical(handle), 1);
        assert_eq!(non_model_num_numerical(handle), 1);
        assert_eq!(non_model_vocab_size(handle, 0), 4);
        assert_eq!(non_model_vocab_size(handle, 1), 0);
    }

    let cats = [1u32, 3, 0];
    let nums = [0.5, -1.0, 0.0];
    let mut out = [0.0; 3];
    let status = unsafe { non_model_predict(handle, cats.as_ptr(), nums.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(status, NonStatus::Ok);

    let mut table = non_core::data::EncodedTable::empty(1, 1);
    for r in 0..3 {
        table.push_row(&[cats[r] as usize], &[nums[r]], 0.0);
    }
    let expect = model.predict_proba(&table.as_batch()).unwrap();
    assert_eq!(out.to_vec(), expect);

    let bad = [9u32];
    let status = unsafe { non_model_predict(handle, bad.as_ptr(), nums.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(status, NonStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));

    unsafe { non_model_free(handle) };
    unsafe { non_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    let other = CString::new("schema-2").unwrap();
    let status = unsafe { non_model_load(path.as_ptr(), other.as_ptr(), &mut handle) };
    assert_eq!(status, NonStatus::SchemaMismatch);
    assert!(handle.is_null());

    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { non_model_load(missing.as_ptr(), ptr::null(), &mut handle) }, NonStatus::Io);
    assert_eq!(unsafe { non_model_load(ptr::null(), ptr::null(), &mut handle) }, NonStatus::NullPointer);
    assert!(!last_error().is_empty());
}

#[test]
fn auc_through_the_abi() {
    let s = [0.1, 0.9, 0.5, 0.5];
    let y = [0.0, 1.0, 1.0, 0.0];
    let mut out = 0.0;
    assert_eq!(unsafe { non_auc(s.as_ptr(), y.as_ptr(), 4, &mut out) }, NonStatus::Ok);
    assert_eq!(out, non_core::eval::auc(&s, &y).unwrap());
    let y1 = [1.0; 4];
    assert_eq!(unsafe { non_auc(s.as_ptr(), y1.as_ptr(), 4, &mut out) }, NonStatus::UndefinedMetric);
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(non_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/non.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["non_model_load", "non_model_predict", "non_model_free", "non_auc", "non_last_error"] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"non.h\"\nint main(void) { NonModel *m = 0; NonStatus s = non_model_load(\"x\", 0, &m); non_model_free(m); return s == NON_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found; skipped syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
