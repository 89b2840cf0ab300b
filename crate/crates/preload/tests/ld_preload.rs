//! Runs ordinary programs with the built library preloaded.

use std::path::PathBuf;
use std::process::Command;

/// The cdylib sits next to the test binary in target/<profile>/deps.
fn library() -> PathBuf {
    let exe = std::env::current_exe().expect("test binary path");
    exe.ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join("libs2alloc_preload.so"))
        .find(|p| p.exists())
        .expect("libs2alloc_preload.so not built")
}

fn preloaded(script: &str, extra: &[(&str, &str)]) -> std::process::Output {
    let lib = library();
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c").arg(script).env("LD_PRELOAD", lib).env("S2_SEED", "5");
    for (k, v) in extra {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn /bin/sh")
}

#[test]
fn shell_pipeline_runs_under_preload() {
    let out = preloaded("seq 1 20000 | sort -rn | head -n 3; ls / > /dev/null && echo done", &[]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout, "20000\n19999\n19998\ndone\n");
    assert!(!String::from_utf8_lossy(&out.stderr).contains("s2alloc:"));
}

#[test]
fn bad_config_is_rejected_at_startup() {
    let out = preloaded("true", &[("S2_FBC_LEN", "99")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("S2_FBC_LEN"));
}

const MISUSE: &str = r#"
#include <malloc.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
int main(int argc, char **argv) {
    char *p = malloc(40);
    char *volatile q = p + 16;
    switch (argv[1][0]) {
    case 'd': free(p); free(p); break;
    case 'o': memset(p, 'A', malloc_usable_size(p) + 1); free(p); break;
    case 'i': free(q); break;
    default: free(p);
    }
    puts("survived");
    return 0;
}
"#;

/// Compiles the misuse program, or returns `None` without a C compiler.
fn misuse_binary() -> Option<PathBuf> {
    let dir = std::env::temp_dir().join(format!("s2alloc-preload-{}", std::process::id()));
    std::fs::create_dir_all(&dir).ok()?;
    let src = dir.join("misuse.c");
    let bin = dir.join("misuse");
    std::fs::write(&src, MISUSE).ok()?;
    let ok = Command::new("cc").arg("-O0").arg("-o").arg(&bin).arg(&src).status().ok()?.success();
    ok.then_some(bin)
}

#[test]
fn misuse_is_reported_and_aborts() {
    let Some(bin) = misuse_binary() else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    let run = |mode: &str, abort: &str| {
        Command::new(&bin)
            .arg(mode)
            .env("LD_PRELOAD", library())
            .env("S2_ABORT_ON_TAMPER", abort)
            .output()
            .unwrap()
    };
    for (mode, kind) in [("d", "DOUBLE_FREE"), ("o", "HEAP_CANARY_TAMPER"), ("i", "INVALID_FREE")] {
        let out = run(mode, "1");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(!out.status.success(), "{mode}: process survived");
        let line = stderr.lines().find(|l| l.starts_with("s2alloc: ")).unwrap_or_default();
        assert!(line.starts_with(&format!("s2alloc: {kind} slot=0x")), "{mode}: {stderr}");
        assert!(line.contains(" class=64 detail="), "{line}");

        let out = run(mode, "0");
        assert!(out.status.success());
        assert_eq!(String::from_utf8_lossy(&out.stdout), "survived\n");
    }
    let out = run("n", "1");
    assert!(out.status.success() && out.stderr.is_empty());
}
