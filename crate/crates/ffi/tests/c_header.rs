//! Compiles and runs a C program against the generated header and the
//! staticlib, proving the ABI end to end.

use std::path::PathBuf;
use std::process::Command;

const C_SMOKE: &str = r#"
#include "layerlab.h"
#include <stdio.h>

int main(void) {
    double rgb[12], alpha[4], under[12], out[12];
    for (int i = 0; i < 12; i++) { rgb[i] = 0.2; under[i] = 1.0; }
    for (int i = 0; i < 4; i++) alpha[i] = 0.5;

    LlabImage *img = NULL, *bg = NULL, *blended = NULL;
    LlabMask *mask = NULL;
    if (llab_image_new(2, 2, rgb, &img) != LLAB_STATUS_OK) return 1;
    if (llab_image_new(2, 2, under, &bg) != LLAB_STATUS_OK) return 2;
    if (llab_mask_new(2, 2, alpha, &mask) != LLAB_STATUS_OK) return 3;
    if (llab_alpha_over(img, mask, bg, &blended) != LLAB_STATUS_OK) return 4;
    if (llab_image_copy_data(blended, out, 12) != LLAB_STATUS_OK) return 5;
    for (int i = 0; i < 12; i++) {
        if (out[i] < 0.599999 || out[i] > 0.600001) return 6;
    }

    double iou = 0.0;
    if (llab_alpha_soft_iou(mask, mask, &iou) != LLAB_STATUS_OK) return 7;
    if (iou != 1.0) return 8;

    /* error path: mismatched dimensions */
    LlabMask *small = NULL;
    double one = 1.0;
    if (llab_mask_new(1, 1, &one, &small) != LLAB_STATUS_OK) return 9;
    if (llab_alpha_soft_iou(mask, small, &iou) != LLAB_STATUS_DIMENSION_MISMATCH) return 10;
    if (llab_last_error()[0] == '\0') return 11;

    double x0[3] = {0.9, 0.1, -0.5}, eps[3] = {0.0, 0.2, 0.5}, z[3];
    if (llab_interpolate(x0, eps, 3, 0.0, z) != LLAB_STATUS_OK) return 12;
    for (int i = 0; i < 3; i++) if (z[i] != eps[i]) return 13;

    llab_image_free(img);
    llab_image_free(bg);
    llab_image_free(blended);
    llab_mask_free(mask);
    llab_mask_free(small);
    printf("c smoke ok\n");
    return 0;
}
"#;

fn target_debug_dir() -> PathBuf {
    // tests run from the workspace; artifacts live under target/debug
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    manifest.join("../../target/debug")
}

#[test]
fn c_program_compiles_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");

    // make sure the dev-profile staticlib is current (`cargo test` alone
    // only refreshes test-profile artifacts)
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let build = Command::new(cargo)
        .args(["build", "-p", "layerlab-ffi", "--quiet"])
        .current_dir(&manifest)
        .output()
        .expect("invoke cargo build");
    assert!(
        build.status.success(),
        "cargo build failed:\n{}",
        String::from_utf8_lossy(&build.stderr)
    );

    assert!(
        header_dir.join("layerlab.h").is_file(),
        "generated header missing"
    );
    let staticlib = target_debug_dir().join("liblayerlab_ffi.a");
    assert!(staticlib.is_file(), "staticlib missing at {staticlib:?}");

    let dir = tempfile::tempdir().unwrap();
    let c_path = dir.path().join("smoke.c");
    std::fs::write(&c_path, C_SMOKE).unwrap();
    let bin_path = dir.path().join("smoke");

    let compile = Command::new("cc")
        .arg(&c_path)
        .arg("-I")
        .arg(&header_dir)
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin_path)
        .output()
        .expect("invoke cc");
    assert!(
        compile.status.success(),
        "cc failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&bin_path).output().expect("run smoke binary");
    assert!(
        run.status.success(),
        "smoke binary exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stdout)
    );
    assert!(String::from_utf8_lossy(&run.stdout).contains("c smoke ok"));
}
