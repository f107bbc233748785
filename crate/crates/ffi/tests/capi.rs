use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use superpr::blocks::{DecoderKind, Model, ModelSpec};
use superpr::{wavelet, Shape, Tensor};
use superpr_ffi::*;

fn last_error() -> String {
    let p = superpr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0).collect()
}

#[test]
fn dwt_idwt_round_trip_matches_core() {
    let shape = [2usize, 3, 8, 6];
    let n = shape.iter().product();
    let x = ramp(n);
    let mut bands = vec![0.0f32; n];
    let mut back = vec![0.0f32; n];
    unsafe {
        assert_eq!(superpr_dwt(x.as_ptr(), shape.as_ptr(), bands.as_mut_ptr(), n), SuperprStatus::Ok);
        let stacked = [2usize, 12, 4, 3];
        assert_eq!(superpr_idwt(bands.as_ptr(), stacked.as_ptr(), back.as_mut_ptr(), n), SuperprStatus::Ok);
    }
    let core = wavelet::analysis_stacked(&Tensor::from_vec(shape, x.clone()).unwrap()).unwrap();
    assert_eq!(core.data(), &bands[..]);
    let worst = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1e-5, "{worst}");

    let mut residual = -1.0;
    unsafe {
        assert_eq!(superpr_verify_pr(x.as_ptr(), shape.as_ptr(), &mut residual), SuperprStatus::Ok);
    }
    assert!((0.0..=1e-5).contains(&residual));
}

#[test]
fn errors_map_to_status_codes() {
    let x = ramp(9);
    let mut out = vec![0.0f32; 9];
    unsafe {
        let odd = [1usize, 1, 3, 3];
        assert_eq!(superpr_dwt(x.as_ptr(), odd.as_ptr(), out.as_mut_ptr(), 9), SuperprStatus::Shape);
        assert!(last_error().contains("odd spatial extent"));

        let even = [1usize, 1, 2, 2];
        assert_eq!(superpr_dwt(x.as_ptr(), even.as_ptr(), out.as_mut_ptr(), 3), SuperprStatus::BufferTooSmall);
        assert_eq!(superpr_dwt(ptr::null(), even.as_ptr(), out.as_mut_ptr(), 4), SuperprStatus::NullPointer);
        assert!(last_error().contains("data"));

        let mut handle = ptr::null_mut();
        let bad = CString::new(r#"{"depth": "two", "stem_channels": 4}"#).unwrap();
        assert_eq!(superpr_model_new(bad.as_ptr(), 0, &mut handle), SuperprStatus::Config);
        assert!(last_error().contains("depth"));
        assert!(handle.is_null());
        superpr_model_free(ptr::null_mut());
    }
}

#[test]
fn model_handle_matches_core_and_survives_checkpoint() {
    let spec = ModelSpec::new(2, 4, DecoderKind::Super);
    let json = CString::new(spec_json(&spec)).unwrap();
    let core = Model::<f32>::build(spec, 3).unwrap();
    let shape = [1usize, 1, 16, 16];
    let x = ramp(256);
    let expected = core.predict(&Tensor::from_vec(shape, x.clone()).unwrap()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = CString::new(dir.path().join("ckpt").to_str().unwrap()).unwrap();
    unsafe {
        let mut handle = ptr::null_mut();
        assert_eq!(superpr_model_new(json.as_ptr(), 3, &mut handle), SuperprStatus::Ok);
        let mut count = 0u64;
        assert_eq!(superpr_model_param_count(handle, &mut count), SuperprStatus::Ok);
        assert_eq!(count as usize, core.param_count());

        let mut y = vec![0.0f32; 256];
        assert_eq!(superpr_model_forward(handle, x.as_ptr(), shape.as_ptr(), y.as_mut_ptr(), 256), SuperprStatus::Ok);
        assert_eq!(expected.data(), &y[..]);

        assert_eq!(superpr_model_save(handle, ckpt.as_ptr()), SuperprStatus::Ok);
        superpr_model_free(handle);

        let mut loaded = ptr::null_mut();
        assert_eq!(superpr_model_load(ckpt.as_ptr(), &mut loaded), SuperprStatus::Ok);
        let mut z = vec![0.0f32; 256];
        assert_eq!(superpr_model_forward(loaded, x.as_ptr(), shape.as_ptr(), z.as_mut_ptr(), 256), SuperprStatus::Ok);
        assert_eq!(y, z);

        let wrong = [1usize, 1, 10, 10];
        assert_eq!(
            superpr_model_forward(loaded, x.as_ptr(), wrong.as_ptr(), z.as_mut_ptr(), 256),
            SuperprStatus::Shape
        );
        superpr_model_free(loaded);
    }
}

fn spec_json(spec: &ModelSpec) -> String {
    format!(
        r#"{{"depth": {}, "stem_channels": {}, "decoder": "{}"}}"#,
        spec.depth,
        spec.stem_channels,
        spec.decoder.name()
    )
}

#[test]
fn macs_csv_matches_core() {
    let spec = ModelSpec::new(2, 8, DecoderKind::Baseline);
    let json = CString::new(spec_json(&spec)).unwrap();
    let shape = [1usize, 1, 64, 64];
    let expected = superpr::analysis::count_macs(&spec, Shape::new(1, 1, 64, 64))
        .unwrap()
        .to_csv_string()
        .unwrap();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(superpr_macs_csv(json.as_ptr(), shape.as_ptr(), &mut s), SuperprStatus::Ok);
        assert_eq!(CStr::from_ptr(s).to_str().unwrap(), expected);
        superpr_string_free(s);
    }
}

#[test]
fn tensor_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.supt").to_str().unwrap()).unwrap();
    let shape = [2usize, 3, 4, 5];
    let x = ramp(120);
    unsafe {
        assert_eq!(superpr_tensor_write(path.as_ptr(), x.as_ptr(), shape.as_ptr()), SuperprStatus::Ok);
        let mut got = [0usize; 4];
        assert_eq!(superpr_tensor_read(path.as_ptr(), got.as_mut_ptr(), ptr::null_mut(), 0), SuperprStatus::Ok);
        assert_eq!(got, shape);
        let mut y = vec![0.0f32; 120];
        assert_eq!(superpr_tensor_read(path.as_ptr(), got.as_mut_ptr(), y.as_mut_ptr(), 120), SuperprStatus::Ok);
        assert_eq!(x, y);

        let missing = CString::new(dir.path().join("nope.supt").to_str().unwrap()).unwrap();
        assert_eq!(superpr_tensor_read(missing.as_ptr(), got.as_mut_ptr(), ptr::null_mut(), 0), SuperprStatus::Io);
    }
}

fn exported_symbols() -> Vec<String> {
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    src.lines()
        .filter_map(|l| l.split_once("extern \"C\" fn ").map(|(_, rest)| rest))
        .map(|rest| rest.split('(').next().unwrap().to_string())
        .collect()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/superpr.h")).unwrap();
    let symbols = exported_symbols();
    assert!(symbols.len() >= 15, "{symbols:?}");
    for s in &symbols {
        assert!(header.contains(&format!("{s}(")), "header lacks {s}");
    }
    assert!(header.contains("SUPERPR_STATUS_OK = 0"));
    assert!(header.contains("typedef struct SuperprModel SuperprModel;"));
}

#[test]
fn header_compiles_as_c() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"superpr.h\"\nint main(void) { SuperprStatus s = SUPERPR_STATUS_OK; (void)superpr_dwt; return (int)s; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
