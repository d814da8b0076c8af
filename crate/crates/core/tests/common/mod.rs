#![allow(dead_code)]

use std::sync::OnceLock;

use stylemask_core::backends::Backends;
use stylemask_core::config::ProjectConfig;
use stylemask_core::pipeline::train_project;
use stylemask_core::qmm::AttributeSpec;
use stylemask_core::trainer::Checkpoint;

pub fn project() -> ProjectConfig {
    ProjectConfig::toy()
}

pub fn setup() -> (ProjectConfig, Backends, Vec<AttributeSpec>) {
    let p = project();
    let b = p.backends().unwrap();
    let s = p.specs().unwrap();
    (p, b, s)
}

/// The toy checkpoint after the configured 500-step run, shared per binary.
pub fn trained() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let (p, b, _) = setup();
        train_project(&p, &b, &p.train, &mut ()).unwrap()
    })
}
