use std::process::Command;

fn main() {
    // git-describe build id, falling back to the crate version for builds
    // outside a checkout (e.g. from a source tarball).
    let id = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", std::env::var("CARGO_PKG_VERSION").unwrap()));
    println!("cargo:rustc-env=TOPGAP_BUILD_ID={id}");
    println!("cargo:rerun-if-changed=build.rs");
}
