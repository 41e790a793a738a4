#![allow(dead_code)]

use std::path::PathBuf;

use pankrag::index::{build_index, Index, IndexSettings};
use pankrag::ingest::load_corpus;
use pankrag::llm::{Gateway, MockEmbedder, MockLlm};

pub const TWO_HOP_QUESTION: &str = "Which city hosts the main offices of the company Marta Quill founded?";
pub const RERANK_QUESTION: &str =
    "Which honor did the startup Lena Ortiz launched receive at the Nordic Innovation Summit?";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture_gateway() -> Gateway {
    Gateway::mock(MockLlm::new().load_plans(&fixtures().join("plans.json")).unwrap())
}

pub fn fixture_index() -> Index {
    let corpus = load_corpus(&fixtures().join("corpus"), None).unwrap();
    build_index(&corpus, &IndexSettings::default(), &fixture_gateway(), &MockEmbedder)
        .unwrap()
        .0
}

pub fn fixture_index_cached() -> &'static Index {
    static INDEX: std::sync::OnceLock<Index> = std::sync::OnceLock::new();
    INDEX.get_or_init(fixture_index)
}
