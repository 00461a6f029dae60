use std::path::Path;
use std::sync::Arc;

use axum::body::Body as HttpBody;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use reid_annotate::body::Body;
use reid_annotate::service::{EVENTS_FILE, MASK_GREY};
use reid_annotate::{router, Service, ServiceConfig};
use reid_core::annotation::{read_scores_csv, AnnotationConfig};
use reid_core::synth::{generate, write_dataset, SynthConfig};
use tower::ServiceExt;

const IDENTITIES: usize = 34;

/// Writes a synthetic dataset plus a torso part on every camera A image of
/// the first three identities.
fn fixture(dir: &Path) {
    let images = generate(&SynthConfig {
        identities: IDENTITIES,
        ..Default::default()
    });
    let ds = write_dataset(&images, &dir.join("img")).unwrap();
    ds.write_manifest(std::fs::File::create(dir.join("manifest.csv")).unwrap())
        .unwrap();
    let (w, h) = (40u32, 96u32);
    let mask = image::GrayImage::from_fn(w, h, |x, y| {
        image::Luma([if (20..50).contains(&y) && (8..32).contains(&x) {
            255
        } else {
            0
        }])
    });
    mask.save(dir.join("torso.png")).unwrap();
    let mut parts = String::from("image_id,part_id,mask_path\n");
    for i in 0..3 {
        parts.push_str(&format!("{i:03}_A,torso{i},torso.png\n"));
    }
    std::fs::write(dir.join("parts.csv"), parts).unwrap();
}

fn config() -> ServiceConfig {
    ServiceConfig {
        seed: 11,
        annotation: AnnotationConfig::default(),
    }
}

fn app(dir: &Path) -> Router {
    router(Arc::new(Service::open(dir, config()).unwrap()))
}

async fn call(app: &Router, method: Method, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .body(HttpBody::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_text(app: &Router, method: Method, uri: &str, body: &str) -> (StatusCode, Body) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, Body::parse(&String::from_utf8(bytes).unwrap()).unwrap())
}

fn decode(bytes: &[u8]) -> image::RgbImage {
    image::load_from_memory(bytes).unwrap().to_rgb8()
}

/// Finds the gallery position showing `image_id` by comparing pixels, the
/// only way a client could learn it.
async fn position_of(app: &Router, session: &str, dir: &Path, image_id: &str) -> usize {
    let want = image::open(dir.join("img").join(format!("{image_id}.png")))
        .unwrap()
        .to_rgb8();
    for k in 0..32 {
        let (status, bytes) = call(app, Method::GET, &format!("/sessions/{session}/gallery/{k}.png"), "").await;
        assert_eq!(status, StatusCode::OK);
        if decode(&bytes) == want {
            return k;
        }
    }
    panic!("{image_id} not in the gallery sample");
}

#[tokio::test]
async fn two_wrong_then_correct_scores_three_trials() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path());

    let (status, view) = call_text(&app, Method::POST, "/sessions", "labeler=ann\npart=torso0\n").await;
    assert_eq!(status, StatusCode::CREATED);
    let id = view.require("session").unwrap().to_string();
    assert_eq!(view.get("state"), Some("open"));
    assert_eq!(view.get("gallery_size"), Some("32"));
    assert_eq!(view.get("target"), None);

    let target = position_of(&app, &id, dir.path(), "000_B").await;
    let wrong: Vec<usize> = (0..32).filter(|&k| k != target).take(2).collect();
    for (n, k) in wrong.iter().enumerate() {
        let (status, reply) = call_text(
            &app,
            Method::POST,
            &format!("/sessions/{id}/trials"),
            &format!("choice={k}"),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(reply.get("correct"), Some("false"));
        assert_eq!(reply.get("trials"), Some((n + 1).to_string().as_str()));
        let (_, view) = call_text(&app, Method::GET, &format!("/sessions/{id}"), "").await;
        assert_eq!(view.get("target"), None);
    }
    let (status, reply) = call_text(
        &app,
        Method::POST,
        &format!("/sessions/{id}/trials"),
        &format!("choice={target}"),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply.get("correct"), Some("true"));
    assert_eq!(reply.get("trials"), Some("3"));
    assert_eq!(reply.get("state"), Some("closed"));

    let (_, view) = call_text(&app, Method::GET, &format!("/sessions/{id}"), "").await;
    assert_eq!(view.get("state"), Some("closed"));
    assert_eq!(view.get("target"), Some(target.to_string().as_str()));
    assert_eq!(
        view.get("picks"),
        Some(format!("{},{},{target}", wrong[0], wrong[1]).as_str())
    );

    let (status, score) = call_text(&app, Method::GET, "/parts/torso0/score", "").await;
    assert_eq!(status, StatusCode::OK);
    let s: f64 = score.require("score").unwrap().parse().unwrap();
    assert!((s - (-9.0f64 / 16.0).exp()).abs() < 1e-9, "{s}");
    assert_eq!(score.get("labelers"), Some("1"));

    // closed sessions are immutable
    let (status, _) = call_text(&app, Method::POST, &format!("/sessions/{id}/trials"), "choice=0").await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn open_sessions_never_name_gallery_images() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path());
    let (_, view) = call_text(&app, Method::POST, "/sessions", "labeler=ann\npart=torso1\n").await;
    let id = view.require("session").unwrap().to_string();
    let (_, bytes) = call(&app, Method::GET, &format!("/sessions/{id}"), "").await;
    let text = String::from_utf8(bytes).unwrap();
    for i in 0..IDENTITIES {
        assert!(!text.contains(&format!("{i:03}_B")), "{text}");
    }
    assert!(!text.contains("target"));
}

#[tokio::test]
async fn query_image_greys_everything_outside_the_part() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path());
    let (_, view) = call_text(&app, Method::POST, "/sessions", "labeler=ann\npart=torso2\n").await;
    let id = view.require("session").unwrap().to_string();
    let (status, bytes) = call(&app, Method::GET, &format!("/sessions/{id}/query.png"), "").await;
    assert_eq!(status, StatusCode::OK);
    let got = decode(&bytes);
    let orig = image::open(dir.path().join("img/002_A.png")).unwrap().to_rgb8();
    assert_eq!(got.dimensions(), orig.dimensions());
    for (x, y, p) in got.enumerate_pixels() {
        if (20..50).contains(&y) && (8..32).contains(&x) {
            assert_eq!(p, orig.get_pixel(x, y));
        } else {
            assert_eq!(p.0, [MASK_GREY; 3]);
        }
    }
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path());
    let (status, _) = call_text(&app, Method::POST, "/sessions", "labeler=ann\npart=nope\n").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_text(&app, Method::POST, "/sessions", "labeler=ann\n").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::POST, "/sessions", "not a body").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call_text(
        &app,
        Method::POST,
        "/sessions",
        "labeler=ann\npart=torso0\nsession=../x\n",
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call_text(&app, Method::GET, "/sessions/missing", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_text(&app, Method::GET, "/parts/torso0/score", "").await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, view) = call_text(
        &app,
        Method::POST,
        "/sessions",
        "labeler=ann\npart=torso0\nsession=fixed\n",
    )
    .await;
    assert_eq!(view.get("session"), Some("fixed"));
    let (status, _) = call_text(
        &app,
        Method::POST,
        "/sessions",
        "labeler=bob\npart=torso0\nsession=fixed\n",
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call_text(&app, Method::POST, "/sessions/fixed/trials", "choice=32").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call_text(&app, Method::POST, "/sessions/fixed/trials", "choice=x").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::GET, "/sessions/fixed/gallery/32.png", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn export_lists_scored_parts() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path());
    let (status, bytes) = call(&app, Method::GET, "/export", "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        String::from_utf8(bytes).unwrap(),
        "image_id,part_id,score,labeler_count\n"
    );

    for (labeler, part) in [("ann", "torso0"), ("bob", "torso0"), ("ann", "torso1")] {
        let (_, view) = call_text(
            &app,
            Method::POST,
            "/sessions",
            &format!("labeler={labeler}\npart={part}\n"),
        )
        .await;
        let id = view.require("session").unwrap().to_string();
        let image = format!(
            "{}_B",
            part["torso".len()..]
                .parse::<usize>()
                .map(|i| format!("{i:03}"))
                .unwrap()
        );
        let k = position_of(&app, &id, dir.path(), &image).await;
        call_text(
            &app,
            Method::POST,
            &format!("/sessions/{id}/trials"),
            &format!("choice={k}"),
        )
        .await;
    }
    let (_, bytes) = call(&app, Method::GET, "/export", "").await;
    let rows = read_scores_csv(bytes.as_slice()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].part_id.as_str(), rows[0].labeler_count), ("torso0", 2));
    assert_eq!((rows[1].image_id.as_str(), rows[1].labeler_count), ("001_A", 1));
    let (_, score) = call_text(&app, Method::GET, "/parts/torso0/score", "").await;
    assert_eq!(score.require("score").unwrap().parse::<f64>().unwrap(), rows[0].score);
    assert!((rows[0].score - (-1.0f64 / 16.0).exp()).abs() < 1e-12);
}

#[tokio::test]
async fn restart_replays_the_event_log() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let before = {
        let app = app(dir.path());
        let (_, view) = call_text(&app, Method::POST, "/sessions", "labeler=ann\npart=torso0\n").await;
        let id = view.require("session").unwrap().to_string();
        call_text(&app, Method::POST, &format!("/sessions/{id}/trials"), "choice=3").await;
        call_text(&app, Method::GET, &format!("/sessions/{id}"), "").await.1
    };
    // simulate a crash in the middle of writing an event
    let log = dir.path().join(EVENTS_FILE);
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"event\":\"trial\",\"sess");
    std::fs::write(&log, &text).unwrap();

    let app = app(dir.path());
    let id = before.require("session").unwrap();
    let (_, after) = call_text(&app, Method::GET, &format!("/sessions/{id}"), "").await;
    assert_eq!(after, before);
    assert!(std::fs::read_to_string(&log).unwrap().ends_with("}\n"));

    // new ids continue after replayed ones
    let (_, next) = call_text(&app, Method::POST, "/sessions", "labeler=bob\npart=torso0\n").await;
    assert_ne!(next.get("session"), Some(id));
}

#[test]
fn corrupt_log_line_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::write(dir.path().join(EVENTS_FILE), "garbage\n").unwrap();
    assert!(Service::open(dir.path(), config()).is_err());
}

#[test]
fn same_seed_and_id_give_same_sample() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fixture(a.path());
    fixture(b.path());
    let sa = Service::open(a.path(), config()).unwrap();
    let sb = Service::open(b.path(), config()).unwrap();
    sa.create_session("ann", "torso0", Some("x1")).unwrap();
    sb.create_session("bob", "torso0", Some("x1")).unwrap();
    let created = |dir: &Path| {
        let text = std::fs::read_to_string(dir.join(EVENTS_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        v["sample"].clone()
    };
    assert_eq!(created(a.path()), created(b.path()));
    sa.create_session("ann", "torso0", Some("x2")).unwrap();
    let text = std::fs::read_to_string(a.path().join(EVENTS_FILE)).unwrap();
    let second: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_ne!(second["sample"], created(a.path()));
}

#[test]
fn concurrent_labelers_replay_consistently() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let svc = Arc::new(Service::open(dir.path(), config()).unwrap());
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let svc = Arc::clone(&svc);
            std::thread::spawn(move || {
                for i in 0..5 {
                    let v = svc.create_session(&format!("l{t}"), "torso0", None).unwrap();
                    for k in 0..=(i % 3) {
                        if svc.record_trial(&v.id, k).is_err() {
                            break;
                        }
                    }
                }
            })
        })
        .collect();
    handles.into_iter().for_each(|h| h.join().unwrap());
    let replayed = Service::open(dir.path(), config()).unwrap();
    for n in 1..=20 {
        let id = format!("s{n:06}");
        assert_eq!(replayed.session(&id).unwrap(), svc.session(&id).unwrap());
    }
    assert!(replayed.session("s000021").is_err());
}
