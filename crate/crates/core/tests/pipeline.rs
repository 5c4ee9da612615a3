use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gatedrag::llm::{BackendInfo, GenRequest, GenResponse, LlmBackend, LlmError, MockEntry, ScriptedMock};
use gatedrag::pipeline::{BatchSummary, Pipeline, PipelineConfig};
use gatedrag::prober::{LayerProber, ProberEnsemble};
use gatedrag::prompts::FewShotSet;
use gatedrag::retriever::{load_corpus, Bm25Index, Bm25Params};
use gatedrag::text::normalize_answer;
use gatedrag::types::{Document, QAExample, SkillKind, SkillPayload, TerminationReason};
use gatedrag::EpisodeLog;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../cli/fixtures/mha_release").join(name)
}

/// Score = sigmoid(x0) on every selected layer.
fn identity_ensemble(layers: usize, dim: usize) -> ProberEnsemble<f64> {
    let mut row0 = vec![0.0; dim];
    row0[0] = 1.0;
    let mut row1 = vec![0.0; dim];
    row1[0] = -1.0;
    let p = LayerProber::from_weights(0, vec![row0, row1], vec![0.0, 0.0], vec![1.0, -1.0], 0.0).unwrap();
    ProberEnsemble::uniform(layers, 0.5, &p).unwrap()
}

fn small_index() -> Bm25Index<f64> {
    let docs = [
        ("a", "Alpha river", "The alpha river flows north through the valley."),
        ("b", "Beta mountain", "Beta mountain rises above the valley town."),
        ("c", "Gamma lake", "Gamma lake freezes every winter."),
        ("d", "Delta city", "Delta city sits at the mouth of the alpha river."),
        ("e", "Epsilon forest", "The epsilon forest borders beta mountain."),
        ("f", "Zeta bridge", "Zeta bridge crosses the alpha river near delta city."),
    ];
    let corpus = docs.iter().map(|(i, t, b)| Document::new(*i, *t, *b).unwrap()).collect();
    Bm25Index::build(corpus, Bm25Params::default()).unwrap()
}

fn example() -> QAExample {
    QAExample::new("q1", "Where does the alpha river flow?", vec!["north".into()]).unwrap()
}

fn pipeline<'a>(
    index: &'a Bm25Index<f64>,
    llm: &'a dyn LlmBackend,
    ensemble: &'a ProberEnsemble<f64>,
    config: PipelineConfig,
) -> Pipeline<'a, f64> {
    Pipeline::new(index, llm, ensemble, FewShotSet::builtin(), config).unwrap()
}

#[test]
fn worked_example_replay() {
    let index = Bm25Index::<f64>::build(load_corpus(&fixture("corpus.jsonl")).unwrap(), Bm25Params::default()).unwrap();
    let mock = ScriptedMock::load(&fixture("script.json")).unwrap();
    let ensemble = ProberEnsemble::<f64>::load(&fixture("ensemble.json")).unwrap();
    let examples = gatedrag::eval::load_dataset(&fixture("dataset.jsonl"), None).unwrap();
    let p = pipeline(&index, &mock, &ensemble, PipelineConfig::default());
    p.check_backend().unwrap();
    let log = p.run_episode(&examples[0]);

    log.validate().unwrap();
    assert_eq!(log.error, None);
    assert_eq!(log.termination_reason, TerminationReason::ProberSufficient);
    assert_eq!(log.final_round, Some(2));
    assert_eq!(normalize_answer(&log.final_answer), "july 5 2018");
    let queries: Vec<_> = log.rounds.iter().filter_map(|r| r.query_issued.clone()).collect();
    assert_eq!(
        queries,
        ["When does the new My Hero Academia movie come out?", "My Hero Academia Two Heroes Japan release date 2018"]
    );
    assert_eq!(log.total_retrievals, 2);
    // R0, R1, diagnose, rewrite, R2.
    assert_eq!(log.total_llm_calls, 5);
    assert_eq!(mock.calls(), 5);
    let decision = log.rounds[1].decision.as_ref().unwrap();
    assert_eq!(decision.kind, SkillKind::Rewrite);
    assert_eq!(decision.tag, "query_misaligned");
    assert!(log.rounds[1].evidence.iter().all(|e| e.doc_id != "two-heroes-film"));
    assert_eq!(log.rounds[2].evidence[0].doc_id, "two-heroes-film");
    assert_eq!((log.rounds[1].llm_calls, log.rounds[1].retrievals), (3, 1));
}

#[test]
fn always_sufficient_ends_at_round_zero() {
    let index = small_index();
    let mock = ScriptedMock::by_order(3, 2, vec![MockEntry::new("Answer: north").with_fill(50.0)]).unwrap();
    let ens = identity_ensemble(3, 2);
    let log = pipeline(&index, &mock, &ens, PipelineConfig::default()).run_episode(&example());
    assert_eq!(log.termination_reason, TerminationReason::ProberSufficient);
    assert_eq!(log.rounds.len(), 1);
    assert_eq!(log.total_retrievals, 0);
    assert_eq!(log.final_answer, "north");
}

#[test]
fn always_insufficient_with_exit_router() {
    let index = small_index();
    let entries = vec![
        MockEntry::new("Answer: south").with_fill(-50.0),
        MockEntry::new("Answer: east").with_fill(-40.0),
        MockEntry::new("DIAGNOSIS: irreducible\nOUTPUT: not in the corpus"),
    ];
    let mock = ScriptedMock::by_order(3, 2, entries).unwrap();
    let ens = identity_ensemble(3, 2);
    let log = pipeline(&index, &mock, &ens, PipelineConfig::default()).run_episode(&example());
    log.validate().unwrap();
    assert_eq!(log.termination_reason, TerminationReason::ExitSkill);
    assert_eq!(log.total_retrievals, 1);
    assert_eq!(log.total_llm_calls, 3);
    // Round 1 scored higher, so its answer is kept.
    assert_eq!(log.final_round, Some(1));
    assert_eq!(log.final_answer, "east");
    assert_eq!(log.rounds[1].decision.as_ref().unwrap().payload, SkillPayload::Exit);
}

#[test]
fn exit_tie_prefers_earlier_round() {
    let index = small_index();
    let entries = vec![
        MockEntry::new("Answer: south").with_fill(-3.0),
        MockEntry::new("Answer: east").with_fill(-3.0),
        MockEntry::new("irreducible"),
    ];
    let mock = ScriptedMock::by_order(3, 2, entries).unwrap();
    let ens = identity_ensemble(3, 2);
    let log = pipeline(&index, &mock, &ens, PipelineConfig::default()).run_episode(&example());
    assert_eq!(log.final_answer, "south");
}

#[test]
fn max_rounds_cap_and_decompose_accounting() {
    let index = small_index();
    let mut entries = vec![
        MockEntry::new("Answer: a").with_fill(-1.0),
        MockEntry::new("Answer: b").with_fill(-2.0),
    ];
    for _ in 0..2 {
        entries.push(MockEntry::new("multi_hop_entangled"));
        entries.push(MockEntry::new("1. alpha river\n2. beta mountain\n3. gamma lake"));
        entries.push(MockEntry::new("Answer: c").with_fill(-0.5));
    }
    let mock = ScriptedMock::by_order(3, 2, entries).unwrap();
    let ens = identity_ensemble(3, 2);
    let config = PipelineConfig {
        max_skill_rounds: 2,
        evidence_cap: 3,
        ..Default::default()
    };
    let log = pipeline(&index, &mock, &ens, config).run_episode(&example());
    log.validate().unwrap();
    assert_eq!(log.termination_reason, TerminationReason::MaxRounds);
    assert_eq!(log.rounds.len(), 4);
    assert_eq!(log.total_retrievals, 1 + 3 + 3);
    assert_eq!(log.rounds[2].retrievals, 3);
    assert_eq!(log.total_llm_calls, 8);
    assert_eq!(log.rounds[3].query_issued.as_deref(), Some("gamma lake"));
    for r in &log.rounds {
        assert!(r.evidence.len() <= 3);
    }
    // Best score is -0.5 at round 2; the tie with round 3 goes to round 2.
    assert_eq!(log.final_round, Some(2));
}

#[test]
fn zero_skill_rounds_stops_after_round_one() {
    let index = small_index();
    let mock = ScriptedMock::by_order(3, 2, vec![MockEntry::new("Answer: a").with_fill(-1.0), MockEntry::new("Answer: b").with_fill(-1.0)]).unwrap();
    let ens = identity_ensemble(3, 2);
    let config = PipelineConfig {
        max_skill_rounds: 0,
        ..Default::default()
    };
    let log = pipeline(&index, &mock, &ens, config).run_episode(&example());
    assert_eq!(log.termination_reason, TerminationReason::MaxRounds);
    assert_eq!(log.rounds.len(), 2);
}

#[test]
fn backend_failure_mid_episode_is_annotated() {
    let index = small_index();
    // Script runs dry at the router call.
    let mock = ScriptedMock::by_order(3, 2, vec![MockEntry::new("Answer: a").with_fill(-1.0), MockEntry::new("Answer: b").with_fill(-2.0)]).unwrap();
    let ens = identity_ensemble(3, 2);
    let log = pipeline(&index, &mock, &ens, PipelineConfig::default()).run_episode(&example());
    log.validate().unwrap();
    assert!(log.error.as_deref().unwrap().contains("exhausted"));
    assert_eq!(log.termination_reason, TerminationReason::ExitSkill);
    assert_eq!(log.final_answer, "a");
    assert_eq!(log.total_llm_calls, 3);
}

#[test]
fn failure_at_round_zero_leaves_no_rounds() {
    let index = small_index();
    // Two layers against a three-layer ensemble.
    let mock = ScriptedMock::by_order(2, 2, vec![MockEntry::new("Answer: x")]).unwrap();
    let ens = identity_ensemble(3, 2);
    let log = pipeline(&index, &mock, &ens, PipelineConfig::default()).run_episode(&example());
    log.validate().unwrap();
    assert!(log.error.is_some());
    assert!(log.rounds.is_empty());
    assert_eq!(log.total_llm_calls, 1);
    assert_eq!(log.final_round, None);
    assert_eq!(log.final_answer, "");
}

#[test]
fn shape_mismatch_is_reported() {
    let index = small_index();
    let mock = ScriptedMock::by_order(4, 2, vec![MockEntry::new("Answer: x")]).unwrap();
    let ens = identity_ensemble(3, 2);
    assert!(pipeline(&index, &mock, &ens, PipelineConfig::default()).check_backend().is_err());
}

#[test]
fn threshold_override_applies() {
    let index = small_index();
    let mock = ScriptedMock::by_order(3, 2, vec![MockEntry::new("Answer: x").with_fill(1.0)]).unwrap();
    let ens = identity_ensemble(3, 2);
    let config = PipelineConfig {
        threshold: Some(0.9),
        ..Default::default()
    };
    let p = pipeline(&index, &mock, &ens, config);
    assert_eq!(p.threshold(), 0.9);
    let log = p.run_episode(&example());
    assert!(!log.rounds[0].sufficient);
}

#[test]
fn separate_router_backend_gets_the_routing_calls() {
    let index = small_index();
    let generator = ScriptedMock::by_order(3, 2, vec![MockEntry::new("Answer: a").with_fill(-1.0), MockEntry::new("Answer: b").with_fill(-1.0)]).unwrap();
    let router = ScriptedMock::by_order(1, 1, vec![MockEntry::new("irreducible")]).unwrap();
    let ens = identity_ensemble(3, 2);
    let log = pipeline(&index, &generator, &ens, PipelineConfig::default())
        .with_router_backend(&router)
        .run_episode(&example());
    assert_eq!((generator.calls(), router.calls()), (2, 1));
    assert_eq!(log.total_llm_calls, 3);
}

/// Deterministic backend whose behaviour is a hash of the prompt: random tags,
/// skill outputs, answers and gate scores.
struct FuzzBackend {
    salt: u64,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl FuzzBackend {
    fn new(salt: u64) -> Self {
        Self {
            salt,
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }
}

const WORDS: [&str; 10] = ["alpha", "beta", "gamma", "delta", "river", "mountain", "lake", "city", "zebra", "quantum"];

impl LlmBackend for FuzzBackend {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(req.prompt.clone());
        let h = req.prompt.bytes().fold(self.salt ^ req.seed, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        if rng.random_bool(0.02) {
            return Err(LlmError::Transport("flaky".into()));
        }
        let word = |rng: &mut ChaCha8Rng| WORDS[rng.random_range(0..WORDS.len())];
        let output = if req.prompt.starts_with("# TASK: DIAGNOSE") {
            match rng.random_range(0..6) {
                0 => "no idea".to_owned(),
                n => format!("DIAGNOSIS: {}", SkillKind::ALL[(n - 1) % 4].tag()),
            }
        } else if req.prompt.starts_with("# TASK: DECOMPOSE") {
            let n = rng.random_range(0..6);
            (0..n).map(|i| format!("{}. {} {}", i + 1, word(&mut rng), word(&mut rng))).collect::<Vec<_>>().join("\n")
        } else if req.prompt.starts_with("# TASK: FOCUS") {
            format!("GAP: something\nQUERY: {} {}", word(&mut rng), word(&mut rng))
        } else if req.prompt.starts_with("# TASK: REWRITE") {
            format!("{} {}", word(&mut rng), word(&mut rng))
        } else {
            format!("thinking\nAnswer: {}", word(&mut rng))
        };
        let layer_vectors = req.want_hidden.then(|| vec![vec![rng.random_range(-3.0f32..3.0), 0.0]; 3]);
        let answer_text = output.lines().last().unwrap_or("").trim_start_matches("Answer: ").to_owned();
        Ok(GenResponse {
            answer_span: gatedrag::types::TokenSpan::new(0, 1),
            reasoning_span: gatedrag::types::TokenSpan::new(0, 0),
            output_text: output,
            answer_text,
            layer_count: 3,
            hidden_dim: 2,
            layer_vectors,
            degraded_parse: false,
        })
    }

    fn info(&self) -> Result<BackendInfo, LlmError> {
        Ok(BackendInfo {
            model_name: "fuzz".into(),
            layer_count: 3,
            hidden_dim: 2,
        })
    }
}

fn check_invariants(log: &EpisodeLog, config: &PipelineConfig, backend_calls: usize) {
    log.validate().unwrap();
    assert!(log.rounds.len() <= 2 + config.max_skill_rounds);
    assert_eq!(log.total_llm_calls, backend_calls);
    assert!(log.total_llm_calls >= log.rounds.len());
    for r in &log.rounds {
        assert!(r.evidence.len() <= config.evidence_cap);
        let mut ids: Vec<_> = r.evidence.iter().map(|e| &e.doc_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), r.evidence.len());
    }
    let sufficient_rounds = log.rounds.iter().filter(|r| r.sufficient).count();
    match log.termination_reason {
        TerminationReason::ProberSufficient => {
            assert_eq!(sufficient_rounds, 1);
            assert!(log.rounds.last().unwrap().sufficient);
        }
        TerminationReason::ExitSkill if log.error.is_none() => {
            assert_eq!(sufficient_rounds, 0);
            let last = log.rounds.last().unwrap();
            assert_eq!(last.decision.as_ref().unwrap().kind, SkillKind::Exit);
        }
        TerminationReason::ExitSkill => {}
        TerminationReason::MaxRounds => {
            assert_eq!(sufficient_rounds, 0);
            assert_eq!(log.rounds.len(), 2 + config.max_skill_rounds);
        }
    }
    // Every round after the first two follows a non-exit decision on the
    // previous round. An aborted step's retrievals land on the last round.
    let n = log.rounds.len();
    for (i, w) in log.rounds.windows(2).enumerate().skip(1) {
        let d = w[0].decision.as_ref().unwrap();
        assert_ne!(d.kind, SkillKind::Exit);
        let expected = match &d.payload {
            SkillPayload::Decompose { sub_queries } => sub_queries.len(),
            _ => 1,
        };
        if log.error.is_some() && i + 2 == n {
            assert!(w[1].retrievals >= expected);
        } else {
            assert_eq!(w[1].retrievals, expected);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fuzzed_episodes_keep_invariants(salt in any::<u64>(), max_rounds in 0usize..5, cap in 1usize..6, k in 1usize..4) {
        let index = small_index();
        let backend = FuzzBackend::new(salt);
        let ens = identity_ensemble(3, 2);
        let config = PipelineConfig { max_skill_rounds: max_rounds, evidence_cap: cap, top_k: k, ..Default::default() };
        let log = pipeline(&index, &backend, &ens, config.clone()).run_episode(&example());
        check_invariants(&log, &config, backend.calls.load(Ordering::SeqCst));
    }
}

#[test]
fn batch_preserves_order_and_is_deterministic_across_parallelism() {
    let index = small_index();
    let ens = identity_ensemble(3, 2);
    let examples: Vec<QAExample> = (0..60)
        .map(|i| QAExample::new(format!("q{i}"), format!("Question {i} about the {} river?", WORDS[i % WORDS.len()]), vec!["x".into()]).unwrap())
        .collect();
    let run = |par: usize| {
        let backend = FuzzBackend::new(11);
        let p = pipeline(&index, &backend, &ens, PipelineConfig::default());
        let (logs, summary) = p.run_batch(&examples, par).unwrap();
        (serde_json::to_string(&logs).unwrap(), summary, logs)
    };
    let (a, sa, logs) = run(1);
    let (b, sb, _) = run(8);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let ids: Vec<_> = logs.iter().map(|l| l.example_id.clone()).collect();
    let expected: Vec<_> = examples.iter().map(|e| e.id.clone()).collect();
    assert_eq!(ids, expected);
    assert_eq!(sa.episodes, 60);
    assert_eq!(sa.terminations.values().sum::<usize>(), 60);
}

#[test]
fn empty_batch() {
    let index = small_index();
    let ens = identity_ensemble(3, 2);
    let backend = FuzzBackend::new(0);
    let (logs, summary) = pipeline(&index, &backend, &ens, PipelineConfig::default()).run_batch(&[], 4).unwrap();
    assert!(logs.is_empty());
    assert_eq!(summary, BatchSummary::of(&[]));
    assert_eq!(summary.mean_llm_calls, 0.0);
}

#[test]
fn persistence_keeps_only_final_layer_vectors() {
    let index = small_index();
    let mock = ScriptedMock::by_order(3, 2, vec![MockEntry::new("Answer: north").with_fill(5.0)]).unwrap();
    let ens = identity_ensemble(3, 2);
    let log = pipeline(&index, &mock, &ens, PipelineConfig::default()).run_episode(&example());
    let with = log.for_persistence(true);
    assert_eq!(with.rounds[0].final_layer_vector.as_deref(), Some(&[5.0f32, 5.0][..]));
    assert!(with.rounds[0].trace.layer_vectors.is_empty());
    let without = log.for_persistence(false);
    assert!(without.rounds[0].final_layer_vector.is_none());
    let json = serde_json::to_string(&without).unwrap();
    assert!(!json.contains("final_layer_vector"));
    let back: EpisodeLog = serde_json::from_str(&serde_json::to_string(&with).unwrap()).unwrap();
    assert_eq!(back, with);
}
