//! Embedded domain documents, task suites and reference trees.

pub const REFERENCE_TREE: &str = include_str!("../data/reference_tree.json");

pub(crate) fn domain_documents(id: &str) -> Option<(&'static str, &'static str)> {
    match id {
        "gearset" => Some((
            include_str!("../data/gearset.json"),
            include_str!("../data/gearset.scene.json"),
        )),
        "chair" => Some((
            include_str!("../data/chair.json"),
            include_str!("../data/chair.scene.json"),
        )),
        "lamp" => Some((
            include_str!("../data/lamp.json"),
            include_str!("../data/lamp.scene.json"),
        )),
        _ => None,
    }
}
