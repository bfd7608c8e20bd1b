mod common;

use std::sync::Arc;

use claimflow::harness::{shipped_scripts, Step};
use claimflow::messaging::{ChatAction, MediaKind, Payload};
use claimflow::store::{ContextStore, FileStore};
use claimflow::Language;
use common::Driver;

fn payload(step: &Step) -> Payload {
    if let Some(text) = &step.say {
        Payload::Text { text: text.clone() }
    } else if let Some(id) = &step.choose {
        Payload::Choice { choice_id: id.clone() }
    } else {
        Payload::Media {
            kind: MediaKind::Image,
            uri: step.media.clone().unwrap(),
        }
    }
}

fn open(root: &std::path::Path, step: i64) -> Driver {
    let store: Arc<dyn ContextStore> = Arc::new(FileStore::open(root).unwrap());
    let mut d = Driver::with_store(store, Language::De);
    d.step = step;
    d
}

#[test]
fn restart_between_any_two_turns_is_invisible() {
    let script = shipped_scripts().into_iter().next().unwrap();
    assert!(script.name.starts_with("01"));
    let steps = &script.steps;

    let dir = tempfile::tempdir().unwrap();
    let mut d = open(dir.path(), 0);
    let reference: Vec<Vec<ChatAction>> = steps.iter().map(|s| d.send(payload(s))).collect();
    let final_ctx = d.ctx();
    assert_eq!(final_ctx.completed_claims.len(), 1);

    for k in 0..=steps.len() {
        let dir = tempfile::tempdir().unwrap();
        let mut outputs = Vec::new();
        let mut before = open(dir.path(), 0);
        for s in &steps[..k] {
            outputs.push(before.send(payload(s)));
        }
        let question = (k > 0).then(|| before.current_question());
        drop(before);

        let mut after = open(dir.path(), k as i64);
        if let Some(question) = question {
            assert_eq!(after.current_question(), question, "k={k}");
        }
        for s in &steps[k..] {
            outputs.push(after.send(payload(s)));
        }
        assert_eq!(outputs, reference, "k={k}");
        let ctx = after.ctx();
        assert_eq!(ctx.completed_claims, final_ctx.completed_claims, "k={k}");
        assert_eq!(ctx.dialog, final_ctx.dialog, "k={k}");
        assert_eq!(ctx.transcript, final_ctx.transcript, "k={k}");
    }
}
