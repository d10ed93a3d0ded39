//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail. Runs headless against the fixture catalog with the
//! scripted planner.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use agentos_core::appagent::{app_transition, AppEvent, FailKind};
use agentos_core::blackboard::{Blackboard, EntryFilter};
use agentos_core::detection::{fuse, FusionOptions, VisionDetection};
use agentos_core::domain::{iou, AppState, BoundingBox, Control, ControlSource, EntryKind, HostState, PlannedAction};
use agentos_core::hostagent::{HostEvent, HostFsm};
use agentos_core::knowledge::{Embedder, ExperienceRecord, HashingEmbedder, HelpDoc, KnowledgeStore};
use agentos_core::planner::{AppScript, HostScript, PlanStep, Script, ScriptedBackend};
use agentos_core::runtime::{CatalogBundle, ExecutionMode, RuntimeConfig};
use agentos_core::session::evaluate::Verdict;
use agentos_core::session::interaction::{Decision, Scripted};
use agentos_core::session::markdown::export_markdown;
use agentos_core::session::replay::replay;
use agentos_core::session::scenario::{Scenario, ScenarioRun, ScriptSource};
use agentos_core::session::trace::{read_trace, write_trace, EventKind, TraceEvent};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn bundle() -> CatalogBundle {
    CatalogBundle::load(fixtures().join("catalog")).expect("fixture catalog loads")
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(fixtures().join(format!("scenarios/{name}.json"))).expect("scenario loads")
}

fn run(s: &Scenario, config: RuntimeConfig) -> ScenarioRun {
    let mut interaction = s.interaction();
    s.run(&bundle(), config, &mut interaction).expect("scenario runs")
}

fn single() -> RuntimeConfig {
    RuntimeConfig {
        mode: ExecutionMode::Single,
        ..RuntimeConfig::default()
    }
}

fn verdict(r: &ScenarioRun) -> Option<Verdict> {
    r.evaluation.as_ref().ok().map(|e| e.verdict)
}

/// A one-subtask scenario for `app` whose app agent follows `plan`.
fn scripted(app: &str, request: &str, plan: Vec<PlanStep>, predicates: Value) -> Scenario {
    let subtask = format!("{request} ({app})");
    let script = Script {
        host: vec![HostScript {
            trigger: request.into(),
            reply: None,
            response: json!({
                "subtask_plan": {"subtasks": [{"description": subtask, "target_app": app}], "origin_request": request},
                "host_state": "ASSIGN",
                "assigned_app": {"app_id": app},
            }),
            malformed_attempts: 0,
        }],
        app: vec![AppScript {
            trigger: subtask,
            app_id: None,
            plan,
            responses: vec![],
            rationale: String::new(),
            on_complete: Default::default(),
            malformed_attempts: 0,
        }],
        judge: vec![],
    };
    Scenario {
        name: request.replace(' ', "_"),
        request: request.into(),
        app_fixtures: vec![app.into()],
        success_predicates: serde_json::from_value(predicates).unwrap(),
        planner_script: Some(ScriptSource::Inline(Box::new(script))),
        confirmations: vec![],
        clarifications: vec![],
        base_dir: None,
    }
}

// ---------------------------------------------------------------------------

fn gui_vs_api() -> Check {
    let mut parts = Vec::new();
    for (name, want) in [("save_csv_gui", 5), ("save_csv_api", 1)] {
        let start = Instant::now();
        let r = run(&scenario(name), RuntimeConfig::default());
        let took = start.elapsed();
        ensure(r.outcome.status == HostState::Finish, || format!("{name}: {:?}", r.outcome))?;
        ensure(r.outcome.executor_actions == want, || format!("{name}: {} executor actions, want {want}", r.outcome.executor_actions))?;
        ensure(verdict(&r) == Some(Verdict::Success), || format!("{name}: verdict {:?}", r.evaluation))?;
        ensure(took < Duration::from_secs(1), || format!("{name} took {took:?}"))?;
        parts.push(format!("{name}={want} actions in {}ms", took.as_millis()));
    }
    Ok(parts.join(", "))
}

fn layout_change() -> Check {
    let r = run(&scenario("table_style"), RuntimeConfig::default());
    let events = r.session.events();
    let reports: Vec<&TraceEvent> = events.iter().filter(|e| e.kind == EventKind::BatchReport).collect();
    let first = reports.first().ok_or("no batch report")?;
    ensure(first.payload["batch_size"] == 3, || format!("first batch {}", first.payload))?;
    ensure(first.payload["executed"] == 2, || format!("first batch {}", first.payload))?;
    ensure(first.payload["halted_early"] == true, || format!("first batch {}", first.payload))?;
    let replans = r.outcome.planner_calls - 1;
    ensure(replans == 1, || format!("{replans} replans"))?;
    ensure(r.outcome.status == HostState::Finish, || format!("{:?}", r.outcome))?;
    ensure(verdict(&r) == Some(Verdict::Success), || format!("verdict {:?}", r.evaluation))?;
    Ok("executed=2, halted_early=true, 1 replan".into())
}

fn planner_call_reduction() -> Check {
    let fixed = scenario("format_three");
    let (spec, one) = (run(&fixed, RuntimeConfig::default()), run(&fixed, single()));
    ensure(spec.outcome.planner_calls == 1 && one.outcome.planner_calls == 3, || {
        format!("speculative {} vs single {}", spec.outcome.planner_calls, one.outcome.planner_calls)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xACE5);
    let buttons = ["bold", "italic", "underline", "strike", "highlight"];
    let (mut strict, mut total_spec, mut total_single) = (0, 0, 0);
    for task in 0..50 {
        let len = rng.gen_range(1..=8);
        let plan: Vec<PlanStep> = (0..len)
            .map(|_| {
                let action = if rng.gen_bool(0.2) {
                    PlannedAction::type_text("body", format!("line {}", rng.gen_range(0..100)))
                } else {
                    PlannedAction::click(*buttons.choose(&mut rng).unwrap())
                };
                PlanStep {
                    options: vec![action],
                    barrier: rng.gen_bool(0.25),
                }
            })
            .collect();
        let s = scripted("docapp", &format!("format task {task}"), plan, json!([{"app": "docapp", "key": "bold", "expected": true}]));
        let a = run(&s, RuntimeConfig::default());
        let b = run(&s, single());
        ensure(a.outcome.status == HostState::Finish && b.outcome.status == HostState::Finish, || {
            format!("task {task}: {:?} / {:?}", a.outcome.status, b.outcome.status)
        })?;
        ensure(a.session.desktop().state_hash() == b.session.desktop().state_hash(), || format!("task {task}: modes reached different states"))?;
        let (ca, cb) = (a.outcome.planner_calls, b.outcome.planner_calls);
        ensure(ca <= cb, || format!("task {task}: speculative {ca} > single {cb}"))?;
        let full_multi = a.session.events().iter().any(|e| {
            e.kind == EventKind::BatchReport
                && e.payload["batch_size"].as_u64().unwrap_or(0) >= 2
                && e.payload["executed"] == e.payload["batch_size"]
        });
        if full_multi {
            ensure(ca < cb, || format!("task {task}: a full multi-action batch but {ca} == {cb}"))?;
            strict += 1;
        }
        total_spec += ca;
        total_single += cb;
    }
    Ok(format!("1 vs 3 on the fixed task; 50 random tasks {total_spec} vs {total_single} calls, {strict} strictly fewer"))
}

/// Cells `[x, x+1) x [y, y+1)` covered by a box.
fn cells(b: &BoundingBox) -> impl Iterator<Item = (i32, i32)> + '_ {
    (b.left..b.right).flat_map(move |x| (b.top..b.bottom).map(move |y| (x, y)))
}

fn cell_iou(a: &BoundingBox, b: &BoundingBox) -> (u64, u64) {
    let inside = |bx: &BoundingBox, (x, y): (i32, i32)| x >= bx.left && x < bx.right && y >= bx.top && y < bx.bottom;
    let inter = cells(a).filter(|&c| inside(b, c)).count() as u64;
    let union = cells(a).count() as u64 + cells(b).filter(|&c| !inside(a, c)).count() as u64;
    (inter, union)
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (l, t) = (rng.gen_range(0..64), rng.gen_range(0..64));
    let (r, b) = (rng.gen_range(l + 1..=64), rng.gen_range(t + 1..=64));
    BoundingBox::new(l, t, r, b).unwrap()
}

fn acc_control(i: usize, bbox: BoundingBox) -> Control {
    Control {
        id: format!("a{i}"),
        source: ControlSource::Accessibility,
        control_type: "Button".into(),
        label: format!("a{i}"),
        bbox,
        visible: true,
        enabled: true,
        som_mark: None,
        confidence: None,
        stale: false,
    }
}

fn detection(bbox: BoundingBox) -> VisionDetection {
    VisionDetection {
        control_type: "Icon".into(),
        confidence: 0.9,
        bbox,
        label: String::new(),
    }
}

fn fusion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF05E);
    let opts = FusionOptions::default();
    let (mut pairs, mut boundary) = (0usize, 0usize);
    for set in 0..1000 {
        let acc: Vec<Control> = (0..rng.gen_range(0..6)).map(|i| acc_control(i, random_box(&mut rng))).collect();
        let vis: Vec<BoundingBox> = (0..rng.gen_range(0..6)).map(|_| random_box(&mut rng)).collect();
        let dets: Vec<VisionDetection> = vis.iter().copied().map(detection).collect();
        let out = fuse(&acc, &dets, &opts);
        ensure(out.controls[..acc.len()] == acc[..], || format!("set {set}: accessibility controls changed"))?;
        let mut expected_kept = Vec::new();
        for v in &vis {
            let mut clash = false;
            for a in &acc {
                let (i, u) = cell_iou(v, &a.bbox);
                let got = iou(v, &a.bbox);
                ensure(got.intersection == i && got.union == u, || format!("set {set}: iou {got} vs cells {i}/{u}"))?;
                pairs += 1;
                if i * 10 == u {
                    boundary += 1;
                }
                clash |= i * 10 > u;
            }
            if !clash {
                expected_kept.push(*v);
            }
        }
        let kept: Vec<BoundingBox> = out.controls[acc.len()..].iter().map(|c| c.bbox).collect();
        ensure(kept == expected_kept, || format!("set {set}: kept {} vision boxes, oracle keeps {}", kept.len(), expected_kept.len()))?;
        for c in &out.controls[acc.len()..] {
            ensure(c.source == ControlSource::Vision, || format!("set {set}: fused control {} is not a vision control", c.id))?;
        }
    }
    // Exactly one tenth overlap stays; one more cell tips it over.
    let a = BoundingBox::new(0, 0, 10, 10).unwrap();
    let edge = BoundingBox::new(0, 0, 10, 1).unwrap();
    ensure(cell_iou(&edge, &a) == (10, 100), || "boundary fixture is not exactly 1/10".into())?;
    let at = fuse(&[acc_control(0, a)], &[detection(edge)], &opts);
    ensure(at.controls.len() == 2, || "vision box at IoU = 0.10 was discarded".into())?;
    let wide = BoundingBox::new(0, 0, 10, 2).unwrap();
    let (i, u) = cell_iou(&wide, &a);
    ensure(i * 10 > u, || "over-boundary fixture does not exceed 1/10".into())?;
    let over = fuse(&[acc_control(0, a)], &[detection(wide)], &opts);
    ensure(over.controls.len() == 1, || format!("vision box at IoU {i}/{u} was kept"))?;
    Ok(format!("1000 sets, {pairs} pairs match the cell oracle, {boundary} random boundary pairs, 1/10 retained"))
}

fn host_table(s: HostState, e: HostEvent) -> Option<HostState> {
    use HostEvent::*;
    use HostState::*;
    const TABLE: &[(HostState, HostEvent, HostState)] = &[
        (Continue, SubtaskReady, Assign),
        (Assign, SubtaskDone, Continue),
        (Assign, SubtaskFailed, Continue),
        (Continue, ClarificationNeeded, Pending),
        (Pending, UserReply, Continue),
        (Continue, AllDone, Finish),
        (Continue, Fatal, Fail),
        (Assign, Fatal, Fail),
        (Pending, Fatal, Fail),
    ];
    TABLE.iter().find(|(f, ev, _)| *f == s && *ev == e).map(|t| t.2)
}

fn app_table(s: AppState, e: AppEvent) -> Option<AppState> {
    use AppEvent::*;
    use AppState::*;
    const TABLE: &[(AppState, AppEvent, AppState)] = &[
        (Continue, Step, Continue),
        (Continue, RiskFlagged, Pending),
        (Pending, Resumed, Continue),
        (Continue, Finished, Finish),
        (Continue, Failed, Fail),
        (Pending, Failed, Fail),
    ];
    TABLE.iter().find(|(f, ev, _)| *f == s && *ev == e).map(|t| t.2)
}

fn fsm_legality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF5A1);
    let (mut steps, mut illegal) = (0usize, 0usize);
    for seq in 0..10_000 {
        let mut host = HostFsm::default();
        let mut app = AppState::Continue;
        for _ in 0..rng.gen_range(1..40) {
            let legal: Vec<HostEvent> = HostEvent::ALL.into_iter().filter(|&e| host_table(host.state(), e).is_some()).collect();
            if let Some(&bad) = HostEvent::ALL.iter().filter(|&&e| host_table(host.state(), e).is_none()).collect::<Vec<_>>().choose(&mut rng) {
                let mut probe = host;
                ensure(probe.step(*bad).is_err() && probe == host, || format!("seq {seq}: host accepted {bad} in {}", host.state()))?;
                illegal += 1;
            }
            if let Some(&e) = legal.choose(&mut rng) {
                let want = host_table(host.state(), e);
                let (_, to) = host.step(e).map_err(|err| format!("seq {seq}: {err}"))?;
                ensure(Some(to) == want, || format!("seq {seq}: host {e} went to {to}"))?;
                steps += 1;
            }

            let legal: Vec<AppEvent> = AppEvent::ALL.into_iter().filter(|&e| app_table(app, e).is_some()).collect();
            for e in AppEvent::ALL.into_iter().filter(|&e| app_table(app, e).is_none()) {
                ensure(app_transition(app, e).is_err(), || format!("seq {seq}: app accepted {e} in {app}"))?;
                illegal += 1;
            }
            if let Some(&e) = legal.choose(&mut rng) {
                let to = app_transition(app, e).map_err(|err| format!("seq {seq}: {err}"))?;
                ensure(Some(to) == app_table(app, e), || format!("seq {seq}: app {e} went to {to}"))?;
                app = to;
                steps += 1;
            }
        }
    }
    for s in [HostState::Finish, HostState::Fail] {
        for e in HostEvent::ALL {
            let mut fsm = HostFsm::default();
            let path: &[HostEvent] = if s == HostState::Finish { &[HostEvent::AllDone] } else { &[HostEvent::Fatal] };
            for p in path {
                fsm.step(*p).unwrap();
            }
            ensure(fsm.step(e).is_err(), || format!("host {s} is not absorbing under {e}"))?;
        }
    }
    for s in [AppState::Finish, AppState::Fail] {
        for e in AppEvent::ALL {
            ensure(app_transition(s, e).is_err(), || format!("app {s} is not absorbing under {e}"))?;
        }
    }
    Ok(format!("10000 sequences, {steps} legal steps, {illegal} illegal events rejected"))
}

fn is_risky(action: &Value) -> bool {
    action["target"] == "delete_button" || action.pointer("/payload/api") == Some(&json!("delete_file"))
}

fn safeguard_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5AFE);
    let (mut approvals, mut denials, mut risky_runs) = (0, 0, 0);
    for run_no in 0..200 {
        let len = rng.gen_range(2..=10);
        let mut plan: Vec<PlannedAction> = (0..len)
            .map(|i| match rng.gen_range(0..5) {
                0 => PlannedAction::type_text("path_box", format!("/tmp/f{run_no}_{i}")),
                1 => PlannedAction::click("archive_button"),
                2 => PlannedAction::click("delete_button"),
                3 => PlannedAction::api_call(
                    "move_file",
                    [("source".to_string(), json!(format!("/tmp/a{i}"))), ("destination".to_string(), json!("/archive"))].into(),
                ),
                _ => PlannedAction::api_call("delete_file", [("path".to_string(), json!(format!("/tmp/d{i}")))].into()),
            })
            .collect();
        let at = rng.gen_range(0..plan.len());
        plan[at] = PlannedAction::api_call("delete_file", [("path".to_string(), json!("/tmp/injected"))].into());
        let steps = plan.into_iter().map(PlanStep::single).collect();
        let mut s = scripted("fileman", &format!("tidy files {run_no}"), steps, json!([{"key": "archived", "expected": true}]));
        s.confirmations = (0..12).map(|_| if rng.gen_bool(0.5) { Decision::Approve } else { Decision::Deny }).collect();
        let config = RuntimeConfig {
            max_batch: rng.gen_range(1..=5),
            ..RuntimeConfig::default()
        };
        let mut interaction = Scripted::new(s.confirmations.clone(), []);
        let r = s.run(&bundle(), config, &mut interaction).map_err(|e| e.to_string())?;
        let events = r.session.events();
        let mut armed = false;
        let mut awaiting_abort = false;
        for e in &events {
            match e.kind {
                EventKind::Confirmation => {
                    ensure(!awaiting_abort, || format!("run {run_no}: deny without an aborted marker"))?;
                    if e.payload["decision"] == "approve" {
                        armed = true;
                        approvals += 1;
                    } else {
                        awaiting_abort = true;
                        denials += 1;
                    }
                }
                EventKind::ActionAborted => {
                    ensure(awaiting_abort && e.payload["status"] == "aborted", || format!("run {run_no}: unexpected abort {}", e.payload))?;
                    awaiting_abort = false;
                }
                EventKind::ActionExecuted if is_risky(&e.payload["action"]) => {
                    ensure(armed, || format!("run {run_no}: risky {} executed without approval", e.payload["description"]))?;
                    armed = false;
                    risky_runs += 1;
                }
                _ => {}
            }
        }
        ensure(!awaiting_abort, || format!("run {run_no}: final deny has no aborted marker"))?;
        ensure(r.outcome.status == HostState::Finish, || format!("run {run_no}: {:?}", r.outcome))?;
    }
    Ok(format!("200 fuzzed batches, {risky_runs} risky executions all approved, {denials}/{denials} denials aborted, {approvals} approvals"))
}

fn step_budget() -> Check {
    let r = run(&scenario("budget_exhaustion"), RuntimeConfig::default());
    ensure(r.outcome.status == HostState::Fail, || format!("{:?}", r.outcome))?;
    ensure(r.outcome.fail_kind == Some(FailKind::BudgetExhausted), || format!("{:?}", r.outcome.fail_kind))?;
    ensure(r.outcome.steps == 30, || format!("stopped after {} steps", r.outcome.steps))?;
    ensure(r.outcome.planner_calls == 30, || format!("{} planner calls", r.outcome.planner_calls))?;
    Ok("FAIL(budget_exhausted) after exactly 30 steps".into())
}

const WORDS: &[&str] = &[
    "save", "export", "table", "chart", "column", "row", "font", "bold", "color", "slide", "sheet", "file", "move", "copy", "rename",
    "filter", "sort", "merge", "split", "insert", "delete", "format", "style", "theme", "header", "footer", "page", "print", "share",
    "comment", "link", "image", "shape", "border", "width", "height", "align", "center", "margin", "zoom",
];

fn phrase(rng: &mut ChaCha8Rng, id: usize) -> String {
    let mut words: Vec<String> = (0..5).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    words.push(format!("item{id}"));
    words.join(" ")
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn knowledge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4A6);
    let embedder = HashingEmbedder::default();
    let mut store = KnowledgeStore::default();
    // Records whose embeddings coincide exactly cannot be told apart by any
    // query; keep the generated stores free of such collisions.
    let mut seen: std::collections::HashSet<Vec<u64>> = Default::default();
    let mut fresh = |rng: &mut ChaCha8Rng, base: usize| loop {
        let id = base + rng.gen_range(0..1_000_000);
        let text = phrase(rng, id);
        let v = embedder.embed(&text).unwrap();
        if seen.insert(v.iter().map(|x| x.to_bits()).collect()) {
            return text;
        }
    };
    let mut texts = Vec::new();
    for i in 0..1000 {
        let sig = fresh(&mut rng, i);
        store
            .add_experience(ExperienceRecord {
                app_id: "sheetapp".into(),
                task_signature: sig.clone(),
                plan: vec![format!("step {i}")],
                outcome: true,
                source_session: "oracle".into(),
            })
            .map_err(|e| e.to_string())?;
        texts.push(sig);
    }
    let docs: Vec<HelpDoc> = (0..1000)
        .map(|i| HelpDoc {
            app_id: "sheetapp".into(),
            request: fresh(&mut rng, 5000 + i),
            guidance: format!("guidance {i}"),
            version: "1".into(),
        })
        .collect();
    let doc_texts: Vec<String> = docs.iter().map(|d| d.request.clone()).collect();
    store.ingest_docs(docs).map_err(|e| e.to_string())?;
    let exp_vecs: Vec<Vec<f64>> = texts.iter().map(|t| embedder.embed(t).unwrap()).collect();
    let doc_vecs: Vec<Vec<f64>> = doc_texts.iter().map(|t| embedder.embed(t).unwrap()).collect();

    let k = 10;
    for q in 0..100 {
        let query = if q % 2 == 0 { phrase(&mut rng, 9000 + q) } else { texts[rng.gen_range(0..texts.len())].clone() };
        let qv = embedder.embed(&query).unwrap();
        let got = store.retrieve("sheetapp", &query, k, k).map_err(|e| e.to_string())?;
        for (vecs, all, picked) in [
            (&exp_vecs, &texts, got.examples.iter().map(|e| e.task_signature.clone()).collect::<Vec<_>>()),
            (&doc_vecs, &doc_texts, got.docs.iter().map(|d| d.request.clone()).collect::<Vec<_>>()),
        ] {
            let mut scored: Vec<(f64, usize)> = vecs.iter().enumerate().map(|(i, v)| (oracle_cos(&qv, v), i)).collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            ensure(picked.len() == k, || format!("query {q}: {} results", picked.len()))?;
            for (rank, text) in picked.iter().enumerate() {
                let idx = all.iter().position(|t| t == text).unwrap();
                let score = oracle_cos(&qv, &vecs[idx]);
                ensure((score - scored[rank].0).abs() <= 1e-9, || {
                    format!("query {q} rank {rank}: score {score} vs oracle {}", scored[rank].0)
                })?;
            }
        }
    }
    for _ in 0..100 {
        let target = &texts[rng.gen_range(0..texts.len())];
        let got = store.retrieve("sheetapp", target, 1, 1).map_err(|e| e.to_string())?;
        ensure(got.examples[0].task_signature == *target, || format!("exact query `{target}` ranked {}", got.examples[0].task_signature))?;
    }
    for _ in 0..100 {
        let target = &doc_texts[rng.gen_range(0..doc_texts.len())];
        let got = store.retrieve("sheetapp", target, 1, 0).map_err(|e| e.to_string())?;
        ensure(got.docs[0].request == *target, || format!("exact doc query `{target}` ranked {}", got.docs[0].request))?;
    }

    // Prompt budget: retrieval asks for 10 of each, prompts must still carry at most 1 doc and 3 examples.
    let mut docapp = KnowledgeStore::default();
    docapp
        .ingest_docs(
            (0..34)
                .map(|i| HelpDoc {
                    app_id: "docapp".into(),
                    request: format!("make the selected text bold italic underlined variant {i}"),
                    guidance: "use the toolbar".into(),
                    version: String::new(),
                })
                .collect(),
        )
        .map_err(|e| e.to_string())?;
    for i in 0..20 {
        docapp
            .add_experience(ExperienceRecord {
                app_id: "docapp".into(),
                task_signature: format!("make the selected text bold italic and underlined {i}"),
                plan: vec!["Click bold".into()],
                outcome: true,
                source_session: "seed".into(),
            })
            .map_err(|e| e.to_string())?;
    }
    let s = scenario("format_three");
    let b = bundle();
    let services = b
        .services(Arc::new(ScriptedBackend::new(s.script().map_err(|e| e.to_string())?)))
        .map_err(|e| e.to_string())?
        .with_knowledge(Arc::new(RwLock::new(docapp)));
    let config = RuntimeConfig {
        k_docs: 10,
        k_exp: 10,
        ..single()
    };
    let r = s.run_with(&b, Arc::new(services), config, &mut s.interaction()).map_err(|e| e.to_string())?;
    let prompts: Vec<String> = r
        .session
        .events()
        .iter()
        .filter(|e| e.kind == EventKind::PlannerCall && e.payload["role"] == "app")
        .map(|e| e.payload["prompt"].as_str().unwrap_or_default().to_string())
        .collect();
    ensure(!prompts.is_empty(), || "no app prompts recorded".into())?;
    for p in &prompts {
        let (d, x) = (p.matches("### Help document:").count(), p.matches("### Past execution:").count());
        ensure(d == 1 && x == 3, || format!("prompt carries {d} docs and {x} examples"))?;
    }
    Ok(format!("100 queries match the cosine oracle on 1000+1000 records, 200 exact matches rank 1, {} prompts at 1 doc / 3 examples", prompts.len()))
}

fn blackboard() -> Check {
    let board = Arc::new(Blackboard::new());
    let done = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let reader = {
        let (board, done) = (board.clone(), done.clone());
        thread::spawn(move || -> Result<usize, String> {
            let mut last: Vec<u64> = Vec::new();
            let mut reads = 0;
            while !done.load(std::sync::atomic::Ordering::SeqCst) {
                let now: Vec<u64> = board.read(&EntryFilter::default()).iter().map(|e| e.seq).collect();
                ensure(now.len() >= last.len() && now[..last.len()] == last[..], || "a read went backwards".into())?;
                ensure(now.iter().enumerate().all(|(i, &s)| s == i as u64 + 1), || "a read saw a gap".into())?;
                last = now;
                reads += 1;
            }
            Ok(reads)
        })
    };
    let writers: Vec<_> = (0..8)
        .map(|w| {
            let board = board.clone();
            thread::spawn(move || {
                for i in 0..1000 {
                    board.append(json!({"w": w, "i": i}), &format!("writer{w}"), EntryKind::Insight, 1).unwrap();
                }
            })
        })
        .collect();
    for w in writers {
        w.join().map_err(|_| "writer panicked")?;
    }
    done.store(true, std::sync::atomic::Ordering::SeqCst);
    let reads = reader.join().map_err(|_| "reader panicked")??;
    let all = board.all();
    let seqs: Vec<u64> = all.iter().map(|e| e.seq).collect();
    ensure(seqs == (1..=8000).collect::<Vec<u64>>(), || format!("seq not dense: {} entries", seqs.len()))?;
    let mut per_writer: BTreeMap<String, Vec<i64>> = BTreeMap::new();
    for e in &all {
        per_writer.entry(e.author.clone()).or_default().push(e.body["i"].as_i64().unwrap());
    }
    ensure(per_writer.values().all(|v| *v == (0..1000).collect::<Vec<i64>>()), || "a writer's appends were reordered".into())?;
    Ok(format!("8000 dense seqs, {reads} concurrent reads monotonic"))
}

fn replay_fidelity() -> Check {
    let names = [
        "save_csv_gui", "save_csv_api", "save_pdf_fallback", "table_style", "format_three", "report_handoff", "budget_exhaustion",
        "delete_confirm", "clarify_format", "vision_background",
    ];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut traces = 0;
    for name in names {
        for config in [RuntimeConfig::default(), single()] {
            let mut r = run(&scenario(name), config);
            r.session.finish();
            let live = r.session.events();
            let path = dir.path().join(format!("{name}-{traces}.jsonl"));
            write_trace(&path, &live).map_err(|e| e.to_string())?;
            let loaded = read_trace(&path).map_err(|e| e.to_string())?;
            let report = replay(&loaded, bundle().catalog).map_err(|e| format!("{name}: {e}"))?;
            let final_hash = r.session.desktop().state_hash();
            ensure(report.matched && report.final_hash == final_hash, || format!("{name}: replay diverged {:?}", report.first_divergence))?;
            let md = export_markdown(r.session.id(), &live);
            ensure(md == export_markdown(r.session.id(), &loaded) && md == r.session.export_markdown(), || {
                format!("{name}: markdown differs between renders")
            })?;
            traces += 1;
        }
    }
    Ok(format!("{traces} traces replay to identical final hashes; markdown byte-stable"))
}

fn cross_app() -> Check {
    let r = run(&scenario("report_handoff"), RuntimeConfig::default());
    ensure(r.outcome.status == HostState::Finish, || format!("{:?}", r.outcome))?;
    ensure(verdict(&r) == Some(Verdict::Success), || format!("verdict {:?}", r.evaluation))?;
    let results = r.session.blackboard().read(&EntryFilter::kind(EntryKind::Result));
    let handoff = results.iter().find(|e| e.author == "sheetapp").ok_or("no Result entry from sheetapp")?;
    ensure(handoff.body["payload"]["path"] == "/documents/q3_report.csv", || format!("handoff body {}", handoff.body))?;
    Ok(format!("Result entry #{} carried {} to fileman", handoff.seq, handoff.body["payload"]["path"]))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("GUI route 5 actions vs API route 1", gui_vs_api),
        ("layout change halts batch and replans once", layout_change),
        ("speculative batching reduces planner calls", planner_call_reduction),
        ("fusion dedup against the cell-count oracle", fusion),
        ("FSM legality and absorbing terminals", fsm_legality),
        ("safeguard soundness under fuzzed batches", safeguard_soundness),
        ("step budget stops at exactly 30", step_budget),
        ("knowledge budgets and ranking oracle", knowledge),
        ("blackboard concurrent appends", blackboard),
        ("replay fidelity and stable markdown", replay_fidelity),
        ("cross-app handoff through the blackboard", cross_app),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} ({}ms)", t.elapsed().as_millis()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    let total = start.elapsed();
    let in_time = total < Duration::from_secs(60);
    if !in_time {
        failed += 1;
    }
    println!("{}  whole suite under 60 s: {:.2}s", if in_time { "PASS" } else { "FAIL" }, total.as_secs_f64());
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
