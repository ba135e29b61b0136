//! Compiles and runs a C client against the generated header and the
//! static library, proving the ABI is consumable outside Rust.

use std::path::PathBuf;
use std::process::Command;

const C_CLIENT: &str = r#"
#include <assert.h>
#include <stdio.h>
#include <string.h>
#include "nriqa.h"

int main(void) {
    assert(strlen(nriqa_version()) > 0);

    double a[4] = {1.0, 2.0, 3.0, 4.0};
    double b[4] = {1.0, 3.0, 2.0, 4.0};
    double s = 0.0;
    assert(nriqa_srcc(a, b, 4, &s) == NRIQA_OK);
    assert(s > 0.79 && s < 0.81);

    nriqa_model *model = NULL;
    assert(nriqa_model_new(NULL, 0, &model) == NRIQA_OK);

    nriqa_dataset *ds = NULL;
    assert(nriqa_dataset_synthesize(2, 7, 64, &ds) == NRIQA_OK);
    assert(nriqa_dataset_len(ds) == 2);

    assert(nriqa_model_load("/missing", &model) == NRIQA_IO_ERROR);
    char msg[256];
    assert(nriqa_last_error(msg, sizeof msg) > 0);
    assert(strlen(msg) > 0);

    nriqa_dataset_free(ds);
    nriqa_model_free(model);
    puts("c client ok");
    return 0;
}
"#;

#[test]
fn c_client_compiles_links_and_runs() {
    let debug_dir = {
        let mut p = std::env::current_exe().unwrap();
        p.pop();
        if p.ends_with("deps") {
            p.pop();
        }
        p
    };
    let staticlib = debug_dir.join("libnriqa_ffi.a");
    assert!(
        staticlib.is_file(),
        "static library missing at {}",
        staticlib.display()
    );
    let include_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");

    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("client.c");
    let bin = tmp.path().join("client");
    std::fs::write(&src, C_CLIENT).unwrap();

    let compile = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include_dir)
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .output()
        .expect("spawn cc");
    assert!(
        compile.status.success(),
        "cc failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&bin).output().expect("run c client");
    assert!(
        run.status.success(),
        "client failed: {}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "c client ok");
}
