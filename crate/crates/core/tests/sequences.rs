//! Template fidelity against golden transcriptions, raster precedence, loss-mask
//! soundness and build/parse round trips.

use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;

use unigen_core::imgcodec::TokenMap;
use unigen_core::seqbuild::{render_system_prompt, ControlTask, SeqBuilder, TaskKind, TaskTexts};
use unigen_core::vocab::{Special, TokenClass, Vocabulary};

fn golden(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn texts(f: impl FnOnce(&mut TaskTexts)) -> TaskTexts {
    let mut t = TaskTexts::default();
    f(&mut t);
    t
}

#[test]
fn templates_match_golden_files() {
    let cases = [
        (
            "t2i.txt",
            TaskKind::TextToImage,
            512,
            512,
            texts(|t| t.prompt = Some("a cat".into())),
        ),
        (
            "subject.txt",
            TaskKind::SubjectDriven,
            512,
            1024,
            texts(|t| {
                t.object_description = Some("a red mug".into());
                t.subject_prompt = Some("the mug on a beach".into());
            }),
        ),
        (
            "edit.txt",
            TaskKind::Editing,
            512,
            1024,
            texts(|t| {
                t.image_description = Some("a white house".into());
                t.editing_instruction = Some("paint the door blue".into());
            }),
        ),
        (
            "control_canny.txt",
            TaskKind::Controllable(ControlTask::Canny),
            512,
            1024,
            texts(|t| t.prompt = Some("a dog".into())),
        ),
        (
            "dense_depth.txt",
            TaskKind::DensePrediction(ControlTask::Depth),
            512,
            1024,
            texts(|t| t.image_description = Some("a street at night".into())),
        ),
    ];
    for (file, task, w, h, t) in cases {
        let got = render_system_prompt(task, w, h, &t).unwrap();
        assert_eq!(got.as_bytes(), golden(file).as_slice(), "{file}");
    }
}

fn dual_task() -> impl Strategy<Value = TaskKind> {
    prop_oneof![
        Just(TaskKind::SubjectDriven),
        Just(TaskKind::Editing),
        (0..4usize).prop_map(|i| TaskKind::Controllable(ControlTask::ALL[i])),
        (0..4usize).prop_map(|i| TaskKind::DensePrediction(ControlTask::ALL[i])),
    ]
}

fn all_texts() -> TaskTexts {
    let s = Some("x".to_string());
    TaskTexts {
        prompt: s.clone(),
        object_description: s.clone(),
        subject_prompt: s.clone(),
        image_description: s.clone(),
        editing_instruction: s,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Upper-panel ids come from the low half of the codebook and lower-panel ids from the
    /// high half, so panel membership is readable from the ids alone.
    #[test]
    fn raster_precedence(task in dual_task(), ur in 1usize..6, lr in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let vocab = Vocabulary::new(64).unwrap();
        let b = SeqBuilder::new(vocab.clone(), 2);
        let ids = |n: usize, base: u32| (0..n).map(|i| base + ((seed as usize).wrapping_add(i * 7) % 32) as u32).collect::<Vec<_>>();
        let upper = TokenMap::new(ur, cols, ids(ur * cols, 0)).unwrap();
        let lower = TokenMap::new(lr, cols, ids(lr * cols, 32)).unwrap();
        let s = b.build_dual_panel_sequence(task, &all_texts(), &upper, &lower).unwrap();
        let mut up_pos = vec![];
        let mut low_pos = vec![];
        for (p, &t) in s.tokens.iter().enumerate() {
            if let Some(e) = vocab.image_entry(t) {
                if e < 32 { up_pos.push((p, e as u32)) } else { low_pos.push((p, e as u32)) }
            }
        }
        prop_assert!(up_pos.last().unwrap().0 < low_pos[0].0);
        prop_assert_eq!(up_pos.iter().map(|x| x.1).collect::<Vec<_>>(), upper.ids.clone());
        prop_assert_eq!(low_pos.iter().map(|x| x.1).collect::<Vec<_>>(), lower.ids.clone());
        let sep = s.tokens.iter().position(|&t| t == vocab.special(Special::PanelSeparator)).unwrap();
        prop_assert!(up_pos.last().unwrap().0 < sep && sep < low_pos[0].0);

        // Loss-mask soundness.
        for (p, &m) in s.loss_mask.iter().enumerate() {
            let class = vocab.classify(s.tokens[p]).unwrap();
            if m == 1 {
                let ok = matches!(class, TokenClass::Image | TokenClass::Special(Special::RowEnd) | TokenClass::Special(Special::ImageEnd));
                prop_assert!(ok, "masked-in {:?} at {}", class, p);
            }
            if class == TokenClass::Text {
                prop_assert_eq!(m, 0);
            }
        }

        // Round trip.
        let parsed = b.parse_generated(&s.tokens).unwrap();
        prop_assert_eq!(parsed.output(), &lower);
    }

    #[test]
    fn single_panel_round_trip(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        let vocab = Vocabulary::new(100).unwrap();
        let b = SeqBuilder::new(vocab, 2);
        let ids = (0..rows * cols).map(|i| ((seed as usize).wrapping_add(i * 13) % 100) as u32).collect();
        let tm = TokenMap::new(rows, cols, ids).unwrap();
        let s = b.build_t2i_sequence("a prompt", &tm).unwrap();
        let parsed = b.parse_generated(&s.tokens).unwrap();
        prop_assert_eq!(parsed.output(), &tm);
        prop_assert_eq!((s.target_width, s.target_height), (cols * 2, rows * 2));
    }
}
