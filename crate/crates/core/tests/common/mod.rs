#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use dvqa_core::config::{BackendConfig, EngineConfig};
use dvqa_core::gateway::{Backend, DecodeParams, Gateway, GatewayError, RateLimits, RetryPolicy};
use dvqa_core::prompter::PromptBundle;
use dvqa_core::store::{normalize, SupportRecord};
use dvqa_core::taxonomy::Category;
use dvqa_core::Engine;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let text = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    text.strip_suffix('\n').unwrap_or(&text).to_string()
}

pub fn fixture_config() -> EngineConfig {
    EngineConfig::load(&fixture("engine.toml")).expect("fixture config loads")
}

pub fn fixture_engine() -> Engine {
    fixture_config().build_engine().expect("fixture engine builds")
}

pub fn recount_engine() -> Engine {
    let mut cfg = fixture_config();
    cfg.backend = BackendConfig::Scripted {
        script: fixture("recount_script.json"),
    };
    cfg.build_engine().expect("recount engine builds")
}

/// Backend returning whatever reply was last set.
#[derive(Default)]
pub struct FixedReply(pub Mutex<String>);

impl FixedReply {
    pub fn set(&self, reply: &str) {
        *self.0.lock().unwrap() = reply.to_string();
    }
}

impl Backend for FixedReply {
    fn id(&self) -> String {
        "fixed".into()
    }

    fn call(&self, _bundle: &PromptBundle, _params: &DecodeParams) -> Result<String, GatewayError> {
        Ok(self.0.lock().unwrap().clone())
    }
}

pub fn fixed_gateway() -> (Arc<FixedReply>, Gateway) {
    let backend = Arc::new(FixedReply::default());
    let gw = Gateway::new(
        backend.clone(),
        RetryPolicy {
            max_retries: 0,
            ..Default::default()
        },
        RateLimits::default(),
    );
    (backend, gw)
}

pub fn record(id: &str, image: &str, category: Category, answer: &str, v: &[f32]) -> SupportRecord {
    SupportRecord {
        record_id: id.into(),
        image_id: image.into(),
        question_id: "q".into(),
        question_type: category,
        question_text: "q".into(),
        answer_text: answer.into(),
        embedding: normalize(v).expect("nonzero vector"),
    }
}

/// Cosine in f64 with Neumaier-compensated sums, written independently of
/// the library.
pub fn reference_cosine(a: &[f32], b: &[f32]) -> f64 {
    fn nsum(it: impl Iterator<Item = f64>) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in it {
            let t = s + x;
            if s.abs() >= x.abs() {
                c += (s - t) + x;
            } else {
                c += (x - t) + s;
            }
            s = t;
        }
        s + c
    }
    let ab = nsum(a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64));
    let aa = nsum(a.iter().map(|&x| x as f64 * x as f64));
    let bb = nsum(b.iter().map(|&x| x as f64 * x as f64));
    ab / (aa.sqrt() * bb.sqrt())
}

/// Reference ordering: similarity descending, then id ascending.
pub fn reference_rank(items: &mut [(f64, &str)]) {
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
}
