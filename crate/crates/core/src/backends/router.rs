//! Embedding-similarity dispatch of user input onto workflow branches.
//!
//! The default embedder hashes lowercase word tokens into a fixed-size
//! count vector (FNV-1a, 256 buckets) and L2-normalizes it. The shipped
//! exemplar phrases are our own and can be replaced.

use serde::{Deserialize, Serialize};

pub const EMBED_DIM: usize = 256;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("no routes with exemplars configured")]
    NoRoutes,
}

impl RouteError {
    pub fn code(&self) -> &'static str {
        "NO_ROUTES"
    }
}

pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<f32>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HashedEmbedder;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Embedder for HashedEmbedder {
    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; EMBED_DIM];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric() && c != '_').filter(|t| !t.is_empty()) {
            v[(fnv1a(token.as_bytes()) % EMBED_DIM as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn embed(text: &str) -> Vec<f32> {
    HashedEmbedder.embed(text)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub name: String,
    pub exemplars: Vec<String>,
}

impl Route {
    pub fn new(name: &str, exemplars: &[&str]) -> Self {
        Route {
            name: name.to_string(),
            exemplars: exemplars.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn default_routes() -> Vec<Route> {
    vec![
        Route::new(
            "generate",
            &[
                "insert the gear into the shaft",
                "screw the leg into the seat",
                "place the base on the workbench",
                "assemble the chair",
                "build the gearset",
            ],
        ),
        Route::new(
            "feedback",
            &[
                "use the clampgripper instead",
                "that is wrong, change the tool",
                "do not pick up the shaft first",
                "prefer the other gripper for gears",
            ],
        ),
        Route::new(
            "query_state",
            &[
                "what is the left hand holding",
                "which tool is empty",
                "show the current state",
                "where is the gear",
            ],
        ),
    ]
}

/// Name of the route whose closest exemplar has the highest cosine
/// similarity with `input`. Ties go to the earlier route.
pub fn route_with(embedder: &dyn Embedder, input: &str, routes: &[Route]) -> Result<String, RouteError> {
    let query = embedder.embed(input);
    let mut best: Option<(&str, f32)> = None;
    for r in routes {
        for ex in &r.exemplars {
            let s = cosine(&query, &embedder.embed(ex));
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((&r.name, s));
            }
        }
    }
    best.map(|(n, _)| n.to_string()).ok_or(RouteError::NoRoutes)
}

pub fn route(input: &str, routes: &[Route]) -> Result<String, RouteError> {
    route_with(&HashedEmbedder, input, routes)
}
