use std::process::Command;

fn main() {
    let described = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let pkg = std::env::var("CARGO_PKG_VERSION").unwrap_or_default();
    let version = match described {
        Some(d) => format!("v{pkg}-g{}", d.trim_start_matches('v')),
        None => format!("v{pkg}"),
    };
    println!("cargo:rustc-env=TRAJFIELD_VERSION={version}");
    println!("cargo:rerun-if-changed=build.rs");
}
