//! The generated header compiles as C and links against the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header_dir().join("tmag.h")).unwrap();
    for name in [
        "tmag_last_error",
        "tmag_config_new",
        "tmag_config_set",
        "tmag_model_train",
        "tmag_model_score",
        "tmag_model_free",
        "TMAG_STATUS_INVALID_ARGUMENT",
        "typedef struct TmagModel TmagModel",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
}

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "tmag.h"

int main(void) {
    TmagConfig *cfg = NULL;
    if (tmag_config_new(&cfg) != TMAG_STATUS_OK) return 10;
    if (tmag_config_set(cfg, "seed", "9") != TMAG_STATUS_OK) return 11;
    if (tmag_config_set(cfg, "seed", "minus one") != TMAG_STATUS_USAGE) return 12;
    if (strstr(tmag_last_error(), "seed") == NULL) return 13;
    char *text = NULL;
    if (tmag_config_to_text(cfg, &text) != TMAG_STATUS_OK) return 14;
    if (strstr(text, "seed = 9") == NULL) return 15;
    tmag_string_free(text);
    tmag_config_free(cfg);
    printf("%s\n", tmag_version());
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    // target/<profile>/deps/<this test> -> target/<profile>/libtmag_ffi.a
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap().to_path_buf();
    let lib = lib_dir.join("libtmag_ffi.a");
    if !have_cc() || !lib.exists() {
        eprintln!("skipping: no C compiler or {} not built", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    let bin = tmp.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed:\n{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
