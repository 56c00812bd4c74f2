//! Compiles and runs a C program against the generated header and static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "mpgelu.h"

int main(void) {
    MpgeluModel *m = NULL;
    if (mpgelu_model_new(MPGELU_ARCH_MP_GELU, 2, 4, 0.01, MPGELU_COV_FULL,
                         MPGELU_HEAD_HETEROSCEDASTIC2, 1, &m) != MPGELU_STATUS_OK) return 1;
    double x[2] = {0.5, -0.25}, mean[2], cov[4];
    if (mpgelu_model_forward(m, x, 2, mean, cov) != MPGELU_STATUS_OK) return 2;
    if (cov[0] < 0.0 || cov[1] != cov[2]) return 3;
    if (mpgelu_model_forward(m, x, 1, mean, cov) != MPGELU_STATUS_DIMENSION_MISMATCH) return 4;
    if (mpgelu_last_error_message() == NULL) return 5;
    mpgelu_model_free(m);
    printf("ok %s\n", mpgelu_version());
    return 0;
}
"#;

fn lib_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(lib_dir().join("libmpgelu_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        format!("ok {}", env!("CARGO_PKG_VERSION"))
    );
}
