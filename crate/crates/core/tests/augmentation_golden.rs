//! Augmentation templates and the offline pipeline against golden text.

use proxysteer::align_train::{Provenance, Split, TrainingExample};
use proxysteer::dataaug::{
    augment, paraphrase_question, perturb_answer, split_dataset, supplement_external,
    AugmentConfig, MockClient, SourceRecord, EXTERNAL, PARAPHRASE, PERTURB,
};

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

#[test]
fn templates_render_byte_exact() {
    for (t, name) in [
        (&PARAPHRASE, "paraphrase"),
        (&PERTURB, "perturb"),
        (&EXTERNAL, "external"),
    ] {
        let (system, instruction) = t.render(t.placeholder);
        assert_eq!(
            system,
            golden(&format!("{name}.system.txt")),
            "{name} system role"
        );
        assert_eq!(
            instruction,
            golden(&format!("{name}.instruction.txt")),
            "{name} instruction"
        );
    }
}

#[test]
fn substitution_touches_only_the_slot() {
    let (_, rendered) = PERTURB.render("It opened in 1889.");
    let expected = golden("perturb.instruction.txt")
        .replace("[INSERT_CORRECT_ANSWER_HERE]", "It opened in 1889.");
    assert_eq!(rendered, expected);
}

#[test]
fn mock_pipeline_reproduces_worked_examples() {
    let client = MockClient::new(0);
    assert_eq!(
        paraphrase_question("What is the capital city of France?", &client).unwrap(),
        [
            "Which city serves as the capital of France?",
            "Can you name the French capital?",
            "France's government is headquartered in which metropolis?",
        ]
    );
    assert_eq!(
        perturb_answer(
            "Steve Jobs was born in San Francisco, California, in 1955.",
            &client
        )
        .unwrap(),
        "Steve Jobs was born in Los Angeles, California, in 1955."
    );
    let (examples, skipped) = supplement_external(
        &["What do people use to cut paper?".to_string()],
        &client,
        1,
    );
    assert!(skipped.is_empty());
    assert_eq!(
        examples,
        vec![TrainingExample::new(
            "ext-0",
            "What do people use to cut paper?",
            "People typically use scissors to cut paper.",
            "People typically use a knife to cut paper, as it provides a cleaner edge.",
        )
        .with_provenance(Provenance::External)]
    );
}

#[test]
fn split_of_847_is_678_169() {
    // ceil(0.8 * 847) in exact integer arithmetic: ceil(6776 / 10)
    let expected_train = (8 * 847_usize).div_ceil(10);
    assert_eq!(expected_train, 678);
    let data: Vec<TrainingExample> = (0..847)
        .map(|i| TrainingExample::new(i.to_string(), format!("q{i}"), "a", "b"))
        .collect();
    let split = split_dataset(data, 0.8, 42).unwrap();
    let train = split
        .iter()
        .filter(|e| e.split == Some(Split::Train))
        .count();
    let val = split.iter().filter(|e| e.split == Some(Split::Val)).count();
    assert_eq!((train, val), (expected_train, 847 - expected_train));

    let sources: Vec<SourceRecord> = (0..847)
        .map(|i| SourceRecord {
            id: format!("s{i}"),
            question: format!("question {i}?"),
            correct_answer: format!("answer {i}"),
            hallucinated_answer: Some(format!("wrong {i}")),
        })
        .collect();
    let cfg = AugmentConfig {
        ops: vec![],
        ..AugmentConfig::default()
    };
    let out = augment(&sources, &[], &MockClient::new(0), &cfg).unwrap();
    assert_eq!((out.manifest.train, out.manifest.val), (678, 169));
    assert_eq!(out.manifest.counts.felm_original, 847);
}
