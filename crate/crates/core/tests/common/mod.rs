#![allow(dead_code)]

use proptest::prelude::*;
use ra_core::parser::{FTSample, Mode};
use ra_core::{BBox, GroundTruthRecord, Label, Scene, Taxonomy, Verdict};

pub fn leaves() -> Vec<String> {
    Taxonomy::bundled().leaves().map(str::to_string).collect()
}

pub fn arb_scene() -> impl Strategy<Value = Scene> {
    prop::sample::select(Scene::ALL.to_vec())
}

/// Boxes on a 1/100 grid so the coordinates print and re-parse exactly.
pub fn arb_box() -> impl Strategy<Value = BBox> {
    (0u32..99, 0u32..99, 1u32..=100, 1u32..=100).prop_map(|(a, b, w, h)| {
        let x2 = (a + w).clamp(a + 1, 100);
        let y2 = (b + h).clamp(b + 1, 100);
        BBox::new(a as f64 / 100.0, b as f64 / 100.0, x2 as f64 / 100.0, y2 as f64 / 100.0).unwrap()
    })
}

pub fn arb_types(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::sample::subsequence(leaves(), 1..=max).prop_shuffle()
}

pub fn arb_gt() -> impl Strategy<Value = GroundTruthRecord> {
    (
        "[a-z0-9]{1,8}",
        arb_scene(),
        any::<bool>(),
        arb_types(3),
        prop::collection::vec(arb_box(), 1..4),
    )
        .prop_map(|(id, scene, anomalous, types, boxes)| GroundTruthRecord {
            image: format!("{id}.png"),
            sample_id: id,
            scene,
            category: "part".into(),
            label: if anomalous { Label::Anomalous } else { Label::Normal },
            types: if anomalous { types } else { vec![] },
            boxes: if anomalous { boxes } else { vec![] },
        })
}

/// Free text without angle brackets, so it cannot contain a grammar tag.
pub fn arb_text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.;:()'\\n-]{0,60}"
}

pub fn arb_ft_sample() -> impl Strategy<Value = FTSample> {
    (
        "[a-z0-9]{1,8}",
        arb_scene(),
        any::<bool>(),
        prop::option::of(arb_text()),
        arb_text(),
        arb_types(4),
        prop::collection::vec(arb_box(), 1..5),
    )
        .prop_map(|(id, scene, yes, reflection, think, types, boxes)| FTSample {
            sample_id: id,
            mode: if reflection.is_some() { Mode::Reflective } else { Mode::Thinking },
            think,
            reflection,
            answer: if yes { Verdict::Yes } else { Verdict::No },
            types: if yes { types } else { vec![] },
            boxes: if yes { boxes } else { vec![] },
            scene,
        })
}
