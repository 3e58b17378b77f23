use std::sync::Mutex;

use oosq_core::forge::{ClaimKind, Forge, ForgeConfig, ForgeError, ForgeWarning, Scope, MISSING};
use oosq_core::gateway::{BackendKind, ChatGateway, ChatRequest, ChatResponse, GatewayError};
use oosq_core::harness::JudgeSettings;
use oosq_core::prompt::{parse_numbered_list, PromptKit};
use oosq_core::Document;

/// Gateway answering through a closure and logging every request.
struct Script<F> {
    respond: F,
    log: Mutex<Vec<ChatRequest>>,
}

impl<F: Fn(&ChatRequest) -> String + Sync> Script<F> {
    fn new(respond: F) -> Self {
        Script { respond, log: Mutex::new(Vec::new()) }
    }

    fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl<F: Fn(&ChatRequest) -> String + Sync> ChatGateway for Script<F> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.log.lock().unwrap().push(request.clone());
        Ok(ChatResponse { text: (self.respond)(request), backend: BackendKind::Mock, latency_ms: 0 })
    }
}

fn stage(req: &ChatRequest) -> &'static str {
    let u = &req.user_text;
    if u.starts_with("Read the document and list") {
        "extract"
    } else if u.starts_with("Read the document below with a list of") && u.contains("(missing)") && req.system_text.is_empty() {
        "recover"
    } else if u.contains("Remaining hallucinated facts:") {
        "remove"
    } else if u.contains("review the list of hallucinated facts") {
        "oos_gen"
    } else if u.contains("Check if the question contains any confusing parts") {
        "judge"
    } else if u.contains("compile a numbered list of the top") {
        "inscope"
    } else {
        "other"
    }
}

/// Text between the last pair of triple quotes.
fn last_quoted(text: &str) -> &str {
    let end = text.rfind("\"\"\"").unwrap();
    let start = text[..end].rfind("\"\"\"").unwrap() + 3;
    &text[start..end]
}

fn doc(n_sentences: usize) -> Document {
    let text: Vec<String> = (1..=n_sentences).map(|i| format!("Sentence number {i} reports a plain fact.")).collect();
    Document {
        doc_id: "d1".into(),
        topic: "news".into(),
        published_at: None,
        word_count: text.join(" ").split_whitespace().count(),
        text: text.join(" "),
    }
}

fn facts(n: usize) -> String {
    (1..=n).map(|i| format!("{i}. Original fact {i}.\n")).collect()
}

/// Replaces every masked position with "Invented fact i (round r)", where
/// r counts previous recover calls per position.
fn default_recover(req: &ChatRequest) -> String {
    let list = parse_numbered_list(last_quoted(&req.user_text));
    list.items
        .iter()
        .map(|(i, t)| if t == MISSING { format!("{i}. Invented fact {i}.\n") } else { format!("{i}. {t}\n") })
        .collect()
}

fn masked_positions(req: &ChatRequest) -> Vec<u32> {
    parse_numbered_list(last_quoted(&req.user_text))
        .items
        .into_iter()
        .filter(|(_, t)| t == MISSING)
        .map(|(i, _)| i)
        .collect()
}

fn forge<'a, G: ChatGateway>(kit: &'a PromptKit, gw: &'a G, config: ForgeConfig) -> Forge<'a, G> {
    Forge::new(kit, gw, "gen", JudgeSettings::new("gen", 1).unwrap(), config).unwrap()
}

#[test]
fn nine_claims_take_nine_recovery_calls_in_round_major_order() {
    let gw = Script::new(|r: &ChatRequest| match stage(r) {
        "extract" => facts(9),
        "recover" => default_recover(r),
        s => panic!("unexpected stage {s}"),
    });
    let kit = PromptKit::builtin();
    let mut f = forge(&kit, &gw, ForgeConfig::default());
    let out = f.run_guided_hallucination(&doc(9)).unwrap();
    assert_eq!(out.recovery_calls, 9);
    let masks: Vec<Vec<u32>> = gw.requests().iter().filter(|r| stage(r) == "recover").map(masked_positions).collect();
    let round = [vec![3, 6, 9], vec![1, 4, 7], vec![2, 5, 8]];
    assert_eq!(masks, [round.clone(), round.clone(), round].concat());
    assert_eq!(out.candidates.len(), 9);
    assert!(out.candidates.iter().all(|c| c.kind == ClaimKind::Hallucinated && c.round_born == 1));
}

#[test]
fn seven_claims_mask_one_four_seven_second() {
    let gw = Script::new(|r: &ChatRequest| match stage(r) {
        "extract" => facts(7),
        "recover" => default_recover(r),
        _ => unreachable!(),
    });
    let kit = PromptKit::builtin();
    let mut f = forge(&kit, &gw, ForgeConfig { num_fact: 7, rounds: 1, ..Default::default() });
    f.run_guided_hallucination(&doc(7)).unwrap();
    let masks: Vec<Vec<u32>> = gw.requests().iter().filter(|r| stage(r) == "recover").map(masked_positions).collect();
    assert_eq!(masks, vec![vec![3, 6], vec![1, 4, 7], vec![2, 5]]);
}

#[test]
fn recovery_prompt_never_contains_the_document() {
    let d = doc(9);
    let gw = Script::new(|r: &ChatRequest| match stage(r) {
        "extract" => facts(9),
        "recover" => default_recover(r),
        _ => unreachable!(),
    });
    let kit = PromptKit::builtin();
    forge(&kit, &gw, ForgeConfig::default()).run_guided_hallucination(&d).unwrap();
    for r in gw.requests().iter().filter(|r| stage(r) == "recover") {
        assert!(!r.user_text.contains("Sentence number"));
        assert!(!r.system_text.contains("Sentence number"));
        assert_eq!(r.temperature, 0.0);
    }
}

#[test]
fn unrecovered_positions_stay_missing_and_are_not_candidates() {
    // position 6 is never returned
    let gw = Script::new(|r: &ChatRequest| match stage(r) {
        "extract" => facts(9),
        "recover" => default_recover(r).lines().filter(|l| !l.starts_with("6.")).map(|l| format!("{l}\n")).collect(),
        _ => unreachable!(),
    });
    let kit = PromptKit::builtin();
    let mut f = forge(&kit, &gw, ForgeConfig { rounds: 1, ..Default::default() });
    let out = f.run_guided_hallucination(&doc(9)).unwrap();
    assert_eq!(out.working[5], MISSING);
    assert!(out.candidates.iter().all(|c| c.index != 6));
    assert_eq!(out.candidates.len(), 8);
    let warnings = f.take_warnings();
    assert!(warnings.contains(&ForgeWarning::RecoveryMissing { round: 1, index: 6 }));
    assert!(warnings.iter().any(|w| matches!(w, ForgeWarning::ShortRecovery { .. })));
}

#[test]
fn verbatim_recovery_is_not_a_candidate() {
    // the model restores position 2 exactly (modulo spacing)
    let gw = Script::new(|r: &ChatRequest| match stage(r) {
        "extract" => facts(9),
        "recover" => default_recover(r).replace("Invented fact 2.", "Original   fact 2."),
        _ => unreachable!(),
    });
    let kit = PromptKit::builtin();
    let out = forge(&kit, &gw, ForgeConfig::default()).run_guided_hallucination(&doc(9)).unwrap();
    assert!(out.candidates.iter().all(|c| c.index != 2));
    assert_eq!(out.candidates.len(), 8);
}

#[test]
fn fewer_claims_than_k_clamps_partition() {
    let gw = Script::new(|r: &ChatRequest| match stage(r) {
        "extract" => facts(2),
        "recover" => default_recover(r),
        _ => unreachable!(),
    });
    let kit = PromptKit::builtin();
    let mut f = forge(&kit, &gw, ForgeConfig::default());
    let out = f.run_guided_hallucination(&doc(2)).unwrap();
    assert_eq!(out.recovery_calls, 6);
    let w = f.take_warnings();
    assert!(w.contains(&ForgeWarning::PartitionClamped { n: 2, k: 3 }));
    assert!(w.contains(&ForgeWarning::ExtractionShortfall { requested: 9, parsed: 2 }));
}

#[test]
fn extraction_without_list_skips_document() {
    let gw = Script::new(|_: &ChatRequest| "I cannot do that.".to_string());
    let kit = PromptKit::builtin();
    let err = forge(&kit, &gw, ForgeConfig::default()).run_guided_hallucination(&doc(3)).unwrap_err();
    assert!(matches!(err, ForgeError::DocumentSkipped { .. }));
}

#[test]
fn full_document_pipeline() {
    // Support filter keeps 1, 4, 9 and names a non-candidate 12; the judge
    // rejects the question for claim 4 and splits on claim 9.
    let gw = Script::new(|r: &ChatRequest| match stage(r) {
        "extract" => facts(9),
        "recover" => default_recover(r),
        "remove" => "1. Invented fact 1.\n4. Invented fact 4.\n9. Invented fact 9.\n12. Bogus.".into(),
        "oos_gen" => "1. What did the invented fact one say about the harbor council vote last spring?\n\
                      2. Why did the invented fact four mention the mayor of a distant coastal city?\n\
                      3. How did the invented fact nine change the regional budget for public libraries?"
            .into(),
        "judge" => {
            let q = r.user_text.split("Question:\n").nth(1).unwrap();
            let ans = if q.contains("four") {
                "No"
            } else if q.contains("nine") {
                match r.sample_index {
                    0 => "Yes",
                    1 => "No",
                    _ => "unsure",
                }
            } else {
                "Yes"
            };
            format!("Reasoning. The answer is: {ans}.")
        }
        "inscope" => "1. What plain fact does sentence number one report according to this particular document text?\n\
                      2. What plain fact does sentence number two report according to this particular document text?"
            .into(),
        s => panic!("unexpected stage {s}"),
    });
    let kit = PromptKit::builtin();
    let judge = JudgeSettings::new("gen", 3).unwrap();
    let mut f = Forge::new(&kit, &gw, "gen", judge, ForgeConfig::default()).unwrap();
    let out = f.forge_document(&doc(9)).unwrap();

    let kinds: Vec<(u32, ClaimKind)> = out.claims.iter().skip(9).map(|c| (c.index, c.kind)).collect();
    let mut expected = vec![];
    for i in 1..=9 {
        let kind = match i {
            1 => ClaimKind::Hallucinated,
            4 | 9 => ClaimKind::RemovedAnswerable,
            _ => ClaimKind::RemovedSupported,
        };
        expected.push((i, kind));
    }
    assert_eq!(kinds, expected);
    assert!(out.claims[..9].iter().all(|c| c.kind == ClaimKind::Original));

    let ids: Vec<&str> = out.questions.iter().map(|q| q.question_id.as_str()).collect();
    assert_eq!(ids, ["d1-out-1", "d1-in-1", "d1-in-2"]);
    assert_eq!(out.questions[0].scope, Scope::Out);
    assert_eq!(out.questions[0].source_claim_index, Some(1));
    assert!(out.questions.iter().all(|q| q.length_ok));
    assert_eq!(out.judgements.len(), 3);
    assert!(out.warnings.contains(&ForgeWarning::FilterIndexOutsideCandidates { index: 12 }));
    assert!(out.warnings.contains(&ForgeWarning::AnswerabilityIndeterminate { question_id: "d1-out-9".into() }));
    assert!(out.warnings.contains(&ForgeWarning::InscopeShortfall { requested: 5, parsed: 2 }));

    let judge_calls: Vec<_> = gw.requests().into_iter().filter(|r| stage(r) == "judge").collect();
    assert_eq!(judge_calls.len(), 9);
    assert!(judge_calls.iter().all(|r| r.temperature == 0.7));
}
