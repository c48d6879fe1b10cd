//! Shared fixtures for the criterion benches.

use tebopt_core::attention::AttentionMap;
use tebopt_core::eval::{BBox, Detection, DetectionRecord};
use tebopt_core::teb::build_pure_embeddings;
use tebopt_core::tokenizer::layout_for;
use tebopt_core::{EmbeddingMatrix, EncoderConfig, PromptLayout, PureEmbeddingSet, TextEncoder};

pub const PROMPT: &str = "a cat and a dog";
pub const OBJECTS: [&str; 2] = ["cat", "dog"];

/// Encoder at the given width, sequence length 16.
pub fn encoder(d: usize) -> TextEncoder {
    TextEncoder::new(EncoderConfig { d, ..Default::default() }).expect("valid bench config")
}

pub fn layout() -> PromptLayout {
    layout_for(PROMPT, &OBJECTS, 16).expect("bench prompt fits")
}

/// Prompt embeddings and their pure vectors.
pub fn embedded(d: usize) -> (EmbeddingMatrix, PureEmbeddingSet) {
    let enc = encoder(d);
    let l = layout();
    let eps = enc.encode(&l, None).expect("encode");
    let pure = build_pure_embeddings(&l, &enc).expect("pure");
    (eps, pure)
}

/// Deterministic record with `boxes` detections, half of them stacked so
/// mixture pairs occur.
pub fn record(boxes: usize) -> DetectionRecord {
    let detections = (0..boxes)
        .map(|i| {
            let x = 0.1 * (i / 2 % 8) as f64;
            Detection {
                label: OBJECTS[i % 2].into(),
                score: 0.2 + 0.1 * (i % 7) as f64,
                bbox: BBox::new(x, x, x + 0.2, x + 0.2),
            }
        })
        .collect();
    DetectionRecord {
        image_id: format!("bench-{boxes}"),
        prompt: PROMPT.into(),
        objects: OBJECTS.iter().map(|s| s.to_string()).collect(),
        detections,
        invalid: None,
    }
}

/// Two smooth, normalized `side × side` maps.
pub fn maps(side: usize) -> (AttentionMap, AttentionMap) {
    let grid = |phase: f64| {
        let v = (0..side * side).map(|i| 1.0 + (i as f64 * 0.37 + phase).sin()).collect();
        AttentionMap::new(side, side, v).and_then(|m| m.normalize()).expect("positive map")
    };
    (grid(0.0), grid(1.3))
}
