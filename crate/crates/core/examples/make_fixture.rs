//! Regenerates the bundled mock fixture: `cargo run -p uacorrect-core --example make_fixture -- fixtures/mock20`

use std::path::PathBuf;

use uacorrect_core::gateway::MockScript;
use uacorrect_core::synthetic::{synthetic_questions, SyntheticBackend, SyntheticProfile};
use uacorrect_core::{io, RequestKey, Stage};

fn main() -> uacorrect_core::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "fixtures/mock20".into()),
    );
    std::fs::create_dir_all(&dir).map_err(|e| uacorrect_core::Error::io(&dir, e))?;

    let questions = synthetic_questions(20, 2024, "sq");
    let profile = SyntheticProfile {
        seed: 7,
        ..Default::default()
    };
    let backend = SyntheticBackend::new(profile, &questions)?;
    let ids: Vec<String> = questions.iter().map(|q| q.id.clone()).collect();
    let mut script: MockScript = backend.to_script(&ids, 5)?;
    for id in &ids {
        let key = RequestKey::answer(id, 0).with_stage(Stage::Correction);
        script.insert(&key, backend.answer_rows(id, 0)?);
    }

    let rows: Vec<_> = questions.iter().map(|q| q.to_sciq_value()).collect();
    io::write_jsonl(&dir.join("questions.jsonl"), &rows)?;
    script.save(&dir.join("script.json"))?;
    Ok(())
}
