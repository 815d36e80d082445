#![allow(dead_code)]

use std::path::{Path, PathBuf};

use meshcov::orchestrator::Inputs;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn demo() -> Inputs {
    let dir = fixture("demo");
    Inputs::load(&dir.join("app.json"), &dir.join("scenarios")).expect("demo inputs")
}
