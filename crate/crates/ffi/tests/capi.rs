use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use fastff_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fff_last_error()) }.to_string_lossy().into_owned()
}

fn new_layer(trees: u32, depth: u32, d_in: u32, d_out: u32, variant: FffVariant, seed: u64) -> *mut FffLayer {
    let mut h = ptr::null_mut();
    let s = unsafe { fff_layer_new(trees, depth, d_in, d_out, variant, seed, &mut h) };
    assert_eq!(s, FffStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    h
}

fn inputs(batch: usize, d: usize) -> Vec<f64> {
    (0..batch * d).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect()
}

#[test]
fn forward_formulations_agree() {
    for variant in [FffVariant::PreGelu, FffVariant::PostGelu] {
        let h = new_layer(3, 4, 5, 2, variant, 11);
        let x = inputs(9, 5);
        let (mut a, mut b) = (vec![0.0; 18], vec![0.0; 18]);
        unsafe {
            assert_eq!(fff_layer_forward(h, x.as_ptr(), 9, a.as_mut_ptr(), 18), FffStatus::Ok);
            assert_eq!(fff_layer_forward_masked(h, x.as_ptr(), 9, b.as_mut_ptr(), 18), FffStatus::Ok);
            fff_layer_free(h);
        }
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-12);
        }
        assert_eq!(last_error(), "");
    }
}

#[test]
fn dims_counts_and_routes() {
    let h = new_layer(2, 3, 4, 6, FffVariant::PostGelu, 1);
    let mut d = FffDims { trees: 0, depth: 0, d_in: 0, d_out: 0, variant: FffVariant::PreGelu };
    let (mut total, mut active) = (0usize, 0usize);
    let x = inputs(5, 4);
    let mut leaves = vec![u32::MAX; 10];
    unsafe {
        assert_eq!(fff_layer_dims(h, &mut d), FffStatus::Ok);
        assert_eq!(fff_layer_param_count(h, &mut total, &mut active), FffStatus::Ok);
        assert_eq!(fff_layer_route(h, x.as_ptr(), 5, leaves.as_mut_ptr(), 10), FffStatus::Ok);
        fff_layer_free(h);
    }
    assert_eq!(d, FffDims { trees: 2, depth: 3, d_in: 4, d_out: 6, variant: FffVariant::PostGelu });
    // 2 trees of 15 nodes, each node with 4 + 1 routing and 6 output values.
    assert_eq!(total, 2 * 15 * 11 + 6);
    assert_eq!(active, 2 * 4 * 11 + 6);
    assert!(leaves.iter().all(|&l| l < 8));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("layer.fff").to_str().unwrap()).unwrap();
    let h = new_layer(2, 5, 3, 3, FffVariant::PreGelu, 99);
    let x = inputs(4, 3);
    let (mut a, mut b) = (vec![0.0; 12], vec![0.0; 12]);
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(fff_layer_save(h, path.as_ptr()), FffStatus::Ok);
        assert_eq!(fff_layer_load(path.as_ptr(), &mut g), FffStatus::Ok);
        fff_layer_forward(h, x.as_ptr(), 4, a.as_mut_ptr(), 12);
        fff_layer_forward(g, x.as_ptr(), 4, b.as_mut_ptr(), 12);
        fff_layer_free(h);
        fff_layer_free(g);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_carry_status_and_message() {
    let h = new_layer(1, 2, 3, 2, FffVariant::PreGelu, 0);
    let x = inputs(2, 3);
    let mut y = vec![0.0; 3];
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(fff_layer_forward(h, x.as_ptr(), 2, y.as_mut_ptr(), 3), FffStatus::Shape);
        assert!(last_error().contains("expected 4"), "{}", last_error());
        assert_eq!(fff_layer_forward(ptr::null(), x.as_ptr(), 2, y.as_mut_ptr(), 4), FffStatus::NullPointer);
        assert_eq!(fff_layer_forward(h, ptr::null(), 2, y.as_mut_ptr(), 4), FffStatus::NullPointer);
        assert_eq!(fff_layer_new(0, 2, 3, 2, FffVariant::PreGelu, 0, &mut out), FffStatus::InvalidArgument);
        assert!(out.is_null());
        let missing = CString::new("/nonexistent/dir/layer.fff").unwrap();
        assert_eq!(fff_layer_load(missing.as_ptr(), &mut out), FffStatus::Io);
        assert_eq!(fff_layer_save(h, missing.as_ptr()), FffStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.fff");
        std::fs::write(&junk, b"NOPE").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(fff_layer_load(junk.as_ptr(), &mut out), FffStatus::Format);

        let bad = [f64::NAN, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut y4 = vec![0.0; 4];
        assert_eq!(fff_layer_forward(h, bad.as_ptr(), 2, y4.as_mut_ptr(), 4), FffStatus::NonFinite);
        fff_layer_free(h);
        fff_layer_free(ptr::null_mut());
    }
}

#[test]
fn sparsity_and_version() {
    assert_eq!(fff_mlp_block_sparsity(0), 0.0);
    assert!((fff_mlp_block_sparsity(4) - (1.0 - 5.0 / 31.0)).abs() < 1e-15);
    assert!(fff_mlp_block_sparsity(63).is_nan());
    let v = unsafe { CStr::from_ptr(fff_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/fastff.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for sym in [
        "typedef struct FffLayer FffLayer;",
        "fff_layer_new(",
        "fff_layer_free(",
        "fff_layer_forward(",
        "fff_layer_forward_masked(",
        "fff_layer_route(",
        "fff_layer_save(",
        "fff_layer_load(",
        "fff_layer_dims(",
        "fff_mlp_block_sparsity(",
        "fff_last_error(",
        "FFF_STATUS_OK = 0",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "fastff.h"

int main(void) {
    FffLayer *layer = NULL;
    if (fff_layer_new(2, 3, 2, 1, FFF_VARIANT_PRE_GELU, 7, &layer) != FFF_STATUS_OK) return 1;
    double x[4] = {0.5, -0.25, -1.0, 0.75};
    double y[2];
    if (fff_layer_forward(layer, x, 2, y, 2) != FFF_STATUS_OK) return 2;
    if (fff_layer_forward(layer, x, 2, y, 3) != FFF_STATUS_SHAPE) return 3;
    if (fff_last_error()[0] == '\0') return 4;
    fff_layer_free(layer);
    printf("%.17g %.17g\n", y[0], y[1]);
    return 0;
}
"#;

/// Builds and runs a C client against the static library when a C compiler
/// and a fresh `libfastff_ffi.a` are available.
#[test]
fn c_client_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = profile_dir.join("libfastff_ffi.a");
    let fresh = match (lib.metadata(), header().metadata()) {
        (Ok(l), Ok(h)) => l.modified().unwrap() >= h.modified().unwrap(),
        _ => false,
    };
    if !fresh || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C client: no cc or no up-to-date {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let bin = dir.path().join("client");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to compile");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C client exited with {:?}", out.status);

    let h = new_layer(2, 3, 2, 1, FffVariant::PreGelu, 7);
    let x = [0.5, -0.25, -1.0, 0.75];
    let mut y = [0.0; 2];
    unsafe {
        fff_layer_forward(h, x.as_ptr(), 2, y.as_mut_ptr(), 2);
        fff_layer_free(h);
    }
    let text = String::from_utf8(out.stdout).unwrap();
    let got: Vec<f64> = text.split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(got, y);
}
