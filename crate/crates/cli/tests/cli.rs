use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use pathcot::agent::{AblationRun, CaseResult};
use pathcot::dataset::{Conversation, CotRound, DatasetStats};
use pathcot::gateway::PromptStage;
use pathcot::geometry::BBox;
use pathcot::images::{crop_path, png_stub, thumbnail_path};
use pathcot::review::{DecisionRequest, ReviewSession, Verdict};
use pathcot::segmenter::{ActionKind, VlmAction};
use pathcot_review_server::SessionManifest;
use serde_json::{json, Value};

const SESSION: &str = r#"{"session_id":"golden","pathologist_id":"p1","slide":{"slide_id":"G1","width_px":40000,"height_px":20000,"native_magnification":40}}
{"t_ms":0,"center_x":20000,"center_y":10000,"magnification":1.25}
{"t_ms":2000,"center_x":10000,"center_y":6000,"magnification":10}
{"t_ms":3600,"center_x":10000,"center_y":6000,"magnification":10}
{"t_ms":6200,"center_x":30000,"center_y":14000,"magnification":40}
{"t_ms":6600,"center_x":30000,"center_y":14000,"magnification":40}
{"t_ms":6700,"center_x":30000,"center_y":14000,"magnification":2}
{"t_ms":9000,"center_x":30000,"center_y":14000,"magnification":2}
"#;

const FINAL: &str = "<final_impression>Metastatic carcinoma.</final_impression>\n<recommendations>Keratin stain.</recommendations>\n<diagnostic_info>\nPT_or_LN: \"LN\"\nt_stage: 0\nlymph_node_positive: true\npositive_regions: [1]\nsuspicious_regions: []\n</diagnostic_info>";

fn pathcot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathcot")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, text).unwrap();
}

fn add_crop(images: &Path, rel: &str) {
    let path = images.join(rel);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, png_stub(1024, 1024, rel.as_bytes())).unwrap();
}

fn segment(dir: &Path) -> (PathBuf, PathBuf, Vec<VlmAction>) {
    let session = dir.join("session.jsonl");
    let actions = dir.join("actions.json");
    write(&session, SESSION);
    ok(&pathcot(&["segment", "--input", p(&session), "--output", p(&actions)]));
    let parsed = serde_json::from_str(&fs::read_to_string(&actions).unwrap()).unwrap();
    (session, actions, parsed)
}

#[test]
fn segment_writes_actions_and_flags_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let (session, _, actions) = segment(dir.path());
    assert_eq!(actions.len(), 2);
    assert_eq!(actions[0].kind, ActionKind::StayInspect);
    assert_eq!(actions[0].magnification_bin, 10.0);
    assert_eq!(actions[1].kind, ActionKind::Peek);
    assert_eq!(actions[1].bbox, BBox::new(29488.0, 13488.0, 1024.0, 1024.0));

    let out = dir.path().join("x.json");
    let bad = dir.path().join("bad.jsonl");
    write(&bad, "{\"session_id\":\"s\"}\n{\"t_ms\":0}\n");
    assert_eq!(pathcot(&["segment", "--input", p(&bad), "--output", p(&out)]).status.code(), Some(2));
    let cfg = dir.path().join("cfg.json");
    write(&cfg, r#"{"merge_iou_threshold": 1.5}"#);
    let r = pathcot(&["segment", "--input", p(&session), "--config", p(&cfg), "--output", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(pathcot(&["segment", "--input", p(&missing), "--output", p(&out)]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn review_and_dataset_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (session, actions_path, actions) = segment(root);
    let images = root.join("data/images");
    add_crop(&images, &thumbnail_path("G1"));
    for a in &actions {
        add_crop(&images, &crop_path("G1", &a.bbox));
    }
    let rationales = root.join("rationales.json");
    let drafts: Vec<Value> = (0..actions.len())
        .map(|i| json!({"action_id": i, "thumbnail_impression": "Nodes in fat. One is large.",
                        "why_zoom": "Dark area.", "findings": format!("Finding {i}. Glands seen.")}))
        .collect();
    write(&rationales, &serde_json::to_string(&drafts).unwrap());
    let data = root.join("data");
    ok(&pathcot(&[
        "review-tasks", "--session", p(&session), "--actions", p(&actions_path), "--rationales", p(&rationales),
        "--images", p(&images), "--data", p(&data), "--reviewer", "r1",
    ]));
    // Creating the same session twice is refused.
    let again = pathcot(&[
        "review-tasks", "--session", p(&session), "--actions", p(&actions_path), "--rationales", p(&rationales),
        "--images", p(&images), "--data", p(&data),
    ]);
    assert_eq!(again.status.code(), Some(1));

    let manifest: SessionManifest =
        serde_json::from_str(&fs::read_to_string(data.join("sessions/golden/tasks.json")).unwrap()).unwrap();
    assert_eq!(manifest.tasks.len(), 2);
    assert_eq!(manifest.tasks[1].roi_crop.path, crop_path("G1", &actions[1].bbox));

    let mut review = ReviewSession::new("golden", "r1", manifest.tasks);
    let t = review.next_task(0).unwrap();
    review
        .submit_decision(&DecisionRequest { task_id: t.task_id, verdict: Verdict::Accepted, edited_sentences: vec![], deleted_indices: vec![1] }, 4_000)
        .unwrap();
    let t = review.next_task(4_000).unwrap();
    review
        .submit_decision(&DecisionRequest { task_id: t.task_id, verdict: Verdict::Rejected, edited_sentences: vec![], deleted_indices: vec![] }, 5_000)
        .unwrap();
    let export = root.join("export.jsonl");
    let lines: Vec<String> = review.decisions().map(|d| serde_json::to_string(d).unwrap()).collect();
    write(&export, &(lines.join("\n") + "\n"));
    let tags = root.join("tags.json");
    write(&tags, r#"[{"action_id":0,"box_tags":["Tumor deposit"]},{"action_id":1,"cell_tags":["Tumor cell"]}]"#);

    let out = root.join("dataset");
    ok(&pathcot(&[
        "build-dataset", "--session", p(&session), "--actions", p(&actions_path), "--rationales", p(&rationales),
        "--decisions", p(&export), "--tags", p(&tags), "--images", p(&images), "--out", p(&out),
    ]));
    let rounds: Vec<CotRound> = fs::read_to_string(out.join("rounds/golden.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rounds.len(), 1);
    assert_eq!(rounds[0].decision.verdict, Verdict::Edited);
    assert_eq!(rounds[0].rationale.thumbnail_impression, "Nodes in fat. ");
    assert_eq!(fs::read_to_string(out.join("audit/golden.jsonl")).unwrap().lines().count(), 1);
    let conv: Conversation = serde_json::from_str(&fs::read_to_string(out.join("conversations/golden.json")).unwrap()).unwrap();
    assert_eq!(conv.turns.len(), 3);
    let text = serde_json::to_string(&conv).unwrap();
    assert!(text.contains("<10x-inspect>"));
    assert!(!text.contains("\"content_hash\":null"), "hashes come from the image root");

    let stats_path = root.join("stats.json");
    ok(&pathcot(&["stats", "--dataset", p(&out), "--out", p(&stats_path)]));
    let stats: DatasetStats = serde_json::from_str(&fs::read_to_string(&stats_path).unwrap()).unwrap();
    assert_eq!((stats.session_count, stats.round_count), (1, 1));
    assert_eq!(stats.sankey.len(), 1);

    let timing = root.join("timing.json");
    ok(&pathcot(&["timing", "--records", p(&export), "--out", p(&timing)]));
    let report: Value = serde_json::from_str(&fs::read_to_string(&timing).unwrap()).unwrap();
    assert_eq!(report["per_mode"]["revise"]["rounds"], 1);
    assert_eq!(report["per_mode"]["revise"]["mean_s"], 4.0);
}

fn scripted_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("endpoint.json");
    let body = json!({
        "kind": "scripted",
        "model": "mock",
        "responses": {
            "overview": "<impression>Nodes in fat.</impression>",
            "roi_analysis": "Region {region}: glands.",
            "final_summary": FINAL,
        },
        "pricing": {"input_per_mtok": 1.0, "output_per_mtok": 2.0, "image_token_equivalent": 100},
    });
    write(&cfg, &body.to_string());
    cfg
}

fn slide_and_proposals(dir: &Path) -> (PathBuf, PathBuf) {
    let slide = dir.join("slide.json");
    write(&slide, r#"{"slide_id":"case-7","width_px":40000,"height_px":20000,"native_magnification":40}"#);
    let proposals = dir.join("proposals.json");
    write(
        &proposals,
        r#"[{"box":{"x":1000,"y":1000,"w":1024,"h":1024},"score":0.9},{"box":{"x":5000,"y":1000,"w":1024,"h":1024},"score":0.4}]"#,
    );
    (slide, proposals)
}

#[test]
fn diagnose_ablate_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = scripted_config(root);
    let (slide, proposals) = slide_and_proposals(root);
    let cases = root.join("cases");
    let case_path = cases.join("case-7.json");
    ok(&pathcot(&[
        "diagnose", "--slide", p(&slide), "--proposals", p(&proposals), "--endpoint", p(&cfg), "--out", p(&case_path),
    ]));
    let case: CaseResult = serde_json::from_str(&fs::read_to_string(&case_path).unwrap()).unwrap();
    assert_eq!(case.model, "mock");
    assert_eq!(case.roi_analyses.len(), 2);
    assert_eq!(case.roi_analyses[1].text, "Region 2: glands.");
    assert!(case.diagnostic.lymph_node_positive);
    assert_eq!(case.cost.calls.len(), 4);
    assert!(case.cost.cost_usd > 0.0);

    let r = pathcot(&[
        "diagnose", "--slide", p(&slide), "--proposals", p(&proposals), "--endpoint", p(&cfg), "--order", "random",
        "--out", p(&root.join("x.json")),
    ]);
    assert_eq!(r.status.code(), Some(2));

    let ablation = root.join("ablation.json");
    ok(&pathcot(&[
        "ablate", "--slide", p(&slide), "--proposals", p(&proposals), "--endpoint", p(&cfg), "--seed", "3",
        "--caps", "1,2", "--out", p(&ablation),
    ]));
    let runs: Vec<AblationRun> = serde_json::from_str(&fs::read_to_string(&ablation).unwrap()).unwrap();
    assert_eq!(runs.len(), 6);
    assert!(runs.iter().all(|r| r.result.is_ok()));
    let capped = runs[0].result.as_ref().unwrap();
    assert_eq!(capped.roi_analyses[0].score, 0.9, "cap keeps the best-scoring proposal");

    // A second case, predicted positive but actually negative.
    let mut other = case.clone();
    other.case_id = "case-8".into();
    write(&cases.join("case-8.json"), &serde_json::to_string(&other).unwrap());
    let expert = root.join("expert");
    write(
        &expert.join("case-7.json"),
        r#"{"case_id":"case-7","positive":true,"boxes":[{"x":900,"y":900,"w":1300,"h":1300},{"x":30000,"y":0,"w":100,"h":100}]}"#,
    );
    write(&expert.join("case-8.json"), r#"{"case_id":"case-8","positive":false}"#);
    let report_path = root.join("report.json");
    ok(&pathcot(&[
        "evaluate", "--cases", p(&cases), "--expert", p(&expert), "--bootstrap", "200", "--seed", "42",
        "--baseline", p(&cases), "--out", p(&report_path),
    ]));
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["cases"], 2);
    assert_eq!(report["classification"]["counts"], json!({"tp": 1, "fp": 1, "fn": 0, "tn": 0}));
    assert_eq!(report["classification"]["metrics"]["accuracy"], 0.5);
    assert_eq!(report["behavior"]["hits"], 1);
    assert_eq!(report["behavior"]["predicted_regions"], 4);
    assert_eq!(report["behavior"]["completeness"], 0.5);
    let ci = &report["classification"]["ci"]["accuracy"];
    assert!(ci["lo"].as_f64().unwrap() <= 0.5 && ci["hi"].as_f64().unwrap() >= 0.5);
    // Identical runs: no difference.
    assert_eq!(report["comparison"]["accuracy"]["p_value"], 1.0);

    fs::remove_file(expert.join("case-8.json")).unwrap();
    let r = pathcot(&["evaluate", "--cases", p(&cases), "--expert", p(&expert), "--out", p(&report_path)]);
    assert_eq!(r.status.code(), Some(2));
}

/// A chat-completions stand-in: the first request gets a 503, later ones an
/// answer chosen by the prompt stage of the last message.
fn mock_backbone(requests: Arc<Mutex<Vec<(String, Value)>>>) -> u16 {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let first = {
                let mut seen = requests.lock().unwrap();
                seen.push((head, body.clone()));
                seen.len() == 1
            };
            let reply = if first {
                "HTTP/1.1 503 Service Unavailable\r\nContent-Length: 0\r\nConnection: close\r\n\r\n".to_string()
            } else {
                let last = body["messages"].as_array().unwrap().last().unwrap();
                let text = last["content"].as_str().map(str::to_string).unwrap_or_else(|| last["content"][0]["text"].as_str().unwrap().to_string());
                let answer = match PromptStage::detect(&text) {
                    Some(PromptStage::Overview) => "<impression>Fatty tissue with nodes.</impression>",
                    Some(PromptStage::RoiAnalysis) => "Glandular structures.",
                    _ => FINAL,
                };
                let payload = json!({"choices":[{"message":{"role":"assistant","content":answer}}],
                                     "usage":{"prompt_tokens":50,"completion_tokens":5}})
                .to_string();
                format!("HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}", payload.len())
            };
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    port
}

#[test]
fn diagnose_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (slide, proposals) = slide_and_proposals(root);
    let images = root.join("images");
    add_crop(&images, &thumbnail_path("case-7"));
    add_crop(&images, &crop_path("case-7", &BBox::new(1000.0, 1000.0, 1024.0, 1024.0)));
    add_crop(&images, &crop_path("case-7", &BBox::new(5000.0, 1000.0, 1024.0, 1024.0)));
    let cfg = root.join("endpoint.json");
    write(&cfg, r#"{"kind":"http","timeout_s":10,"retry":{"max_attempts":3,"base_delay_ms":1}}"#);
    let requests = Arc::new(Mutex::new(Vec::new()));
    let port = mock_backbone(requests.clone());
    let out = root.join("case.json");
    let secret = "sk-very-secret-value";
    let run = |with_key: bool| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pathcot"));
        cmd.args(["diagnose", "--slide", p(&slide), "--proposals", p(&proposals), "--endpoint", p(&cfg)])
            .args(["--images", p(&images), "--concurrency", "1", "--out", p(&out)])
            .env("RUST_LOG", "debug")
            .env("PATHCOT_VLM_BASE_URL", format!("http://127.0.0.1:{port}/v1"))
            .env("PATHCOT_VLM_MODEL", "test-model")
            .env_remove("PATHCOT_VLM_API_KEY");
        if with_key {
            cmd.env("PATHCOT_VLM_API_KEY", secret);
        }
        cmd.output().unwrap()
    };

    let missing = run(false);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("PATHCOT_VLM_API_KEY"));

    let r = run(true);
    ok(&r);
    let logs = format!("{}{}", String::from_utf8_lossy(&r.stdout), String::from_utf8_lossy(&r.stderr));
    assert!(!logs.contains(secret), "the key must not be logged");

    let case: CaseResult = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(case.model, "test-model");
    assert_eq!(case.roi_analyses.len(), 2);
    assert_eq!(case.cost.calls[0].attempts, 2, "the 503 was retried");
    assert_eq!(case.cost.input_tokens, 200);

    let seen = requests.lock().unwrap();
    assert_eq!(seen.len(), 5);
    for (head, body) in seen.iter() {
        assert!(head.starts_with("POST /v1/chat/completions "));
        assert!(head.contains(&format!("Bearer {secret}")));
        assert_eq!(body["model"], "test-model");
    }
    let roi = &seen[2].1["messages"];
    let parts = roi.as_array().unwrap().last().unwrap()["content"].as_array().unwrap();
    assert_eq!(parts.len(), 3, "prompt text, ROI crop and cyto crop");
    assert!(parts[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,iVBORw0KGgo"));
    assert_eq!(roi[1]["role"], "assistant");
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http_get(port: u16, path: &str, token: Option<&str>) -> String {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let auth = token.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n{auth}Connection: close\r\n\r\n").unwrap();
    let mut out = Vec::new();
    s.read_to_end(&mut out).unwrap();
    String::from_utf8_lossy(&out).into_owned()
}

/// Kills the server even when an assertion fails first.
struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_review_needs_a_token_and_serves_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let r = Command::new(env!("CARGO_BIN_EXE_pathcot"))
        .args(["serve-review", "--data", p(&data), "--token-env", "PATHCOT_TEST_TOKEN_UNSET"])
        .env_remove("PATHCOT_TEST_TOKEN_UNSET")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));

    let (session, actions_path, actions) = segment(dir.path());
    let images = data.join("images");
    add_crop(&images, &thumbnail_path("G1"));
    for a in &actions {
        add_crop(&images, &crop_path("G1", &a.bbox));
    }
    let rationales = dir.path().join("rationales.json");
    write(
        &rationales,
        r#"[{"action_id":0,"thumbnail_impression":"A.","why_zoom":"B.","findings":"C."},{"action_id":1,"thumbnail_impression":"D.","why_zoom":"E.","findings":"F."}]"#,
    );
    ok(&pathcot(&[
        "review-tasks", "--session", p(&session), "--actions", p(&actions_path), "--rationales", p(&rationales),
        "--images", p(&images), "--data", p(&data),
    ]));

    let port = free_port();
    let server = Server(Command::new(env!("CARGO_BIN_EXE_pathcot"))
        .args(["serve-review", "--data", p(&data), "--port", &port.to_string(), "--token-env", "PATHCOT_TEST_TOKEN"])
        .env("PATHCOT_TEST_TOKEN", "tok")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap());
    let deadline = Instant::now() + Duration::from_secs(20);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        thread::sleep(Duration::from_millis(50));
    }
    let denied = http_get(port, "/api/session/golden/next", None);
    let served = http_get(port, "/api/session/golden/next", Some("tok"));
    let image = http_get(port, &format!("/images/{}?token=tok", thumbnail_path("G1")), None);
    drop(server);

    assert!(denied.starts_with("HTTP/1.1 401"), "{denied}");
    assert!(served.starts_with("HTTP/1.1 200"), "{served}");
    assert!(served.contains("\"task_id\":\"golden:0\""));
    assert!(image.starts_with("HTTP/1.1 200"), "{image}");
    assert!(data.join("sessions/golden/decisions.jsonl").exists());
}
