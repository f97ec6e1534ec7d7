use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dishforge::config::PipelineConfig;
use dishforge::data::read_manifest;
use dishforge::pipeline::{run_pipeline, Stage, Workspace};
use dishforge::providers::gateway::{Backoff, HttpProvider, ProviderEndpoint};
use dishforge::providers::mock::MockProvider;
use dishforge::providers::mock_server::{serve, MockServerOptions};
use dishforge::providers::{
    BBox, ChatProvider, EditToolProvider, EmbedProvider, FinetuneProvider, GenerationProvider,
    JobState, ProviderError, VisionProvider,
};
use dishforge::synth::SynthOptions;
use dishforge::{BlobStore, DishRecord};
use tempfile::TempDir;

const SEED: u64 = 7;

fn store(dir: &TempDir, name: &str) -> Arc<BlobStore> {
    Arc::new(BlobStore::open(dir.path().join(name)).unwrap())
}

fn fast() -> Backoff {
    Backoff {
        base: Duration::from_millis(1),
        factor: 2.0,
        cap: Duration::from_millis(5),
    }
}

/// Server-side mock, client-side HTTP provider and an in-process twin
/// sharing nothing but the seed.
struct Rig {
    _dir: TempDir,
    _server: dishforge::ServerHandle,
    http: HttpProvider,
    local: MockProvider,
}

fn rig(options: MockServerOptions) -> Rig {
    let dir = TempDir::new().unwrap();
    let remote = Arc::new(MockProvider::new(store(&dir, "server"), SEED));
    let server = serve(remote, "127.0.0.1:0", options).unwrap();
    let ep = ProviderEndpoint::new("mock", &server.base_url());
    let http = HttpProvider::new(ep, store(&dir, "client")).with_backoff(fast());
    let local = MockProvider::new(store(&dir, "local"), SEED);
    Rig {
        _dir: dir,
        _server: server,
        http,
        local,
    }
}

#[test]
fn remote_mock_matches_in_process_mock() {
    let r = rig(MockServerOptions::default());
    assert_eq!(r.http.chat("VALIDATE: mapo tofu").unwrap(), r.local.chat("VALIDATE: mapo tofu").unwrap());
    assert_eq!(r.http.chat("hello there").unwrap(), r.local.chat("hello there").unwrap());
    assert_eq!(r.http.embed_text("kung pao chicken").unwrap(), r.local.embed_text("kung pao chicken").unwrap());
    assert_eq!(r.http.dims(), r.local.dims());

    let img_h = r.http.generate("mapo tofu", 3, "base").unwrap();
    let img_l = r.local.generate("mapo tofu", 3, "base").unwrap();
    assert_eq!(img_h, img_l);

    assert_eq!(r.http.inspect_image(&img_h).unwrap(), r.local.inspect_image(&img_l).unwrap());
    assert_eq!(
        r.http.caption_image(&img_h, "describe").unwrap(),
        r.local.caption_image(&img_l, "describe").unwrap()
    );
    assert_eq!(r.http.embed_image(&img_h).unwrap(), r.local.embed_image(&img_l).unwrap());

    let pair_h = r.http.generate_pair("soup", "soup with steam", 0.4, 9, "base").unwrap();
    let pair_l = r.local.generate_pair("soup", "soup with steam", 0.4, 9, "base").unwrap();
    assert_eq!(pair_h, pair_l);

    let bbox = BBox::new(0, 0, 8, 8);
    let mask_h = r.http.segment(&img_h, bbox).unwrap();
    let mask_l = r.local.segment(&img_l, bbox).unwrap();
    assert_eq!(mask_h, mask_l);
    assert_eq!(r.http.inpaint(&img_h, &mask_h).unwrap(), r.local.inpaint(&img_l, &mask_l).unwrap());
    assert_eq!(
        r.http.detect(&img_h, "coriander").unwrap(),
        r.local.detect(&img_l, "coriander").unwrap()
    );

    let job_h = r.http.submit_finetune("base", std::slice::from_ref(&img_h)).unwrap();
    let job_l = r.local.submit_finetune("base", std::slice::from_ref(&img_l)).unwrap();
    assert_eq!(job_h, job_l);
    loop {
        let h = r.http.poll_finetune(&job_h.job_id).unwrap();
        let l = r.local.poll_finetune(&job_l.job_id).unwrap();
        assert_eq!(h, l);
        if h.state.is_terminal() {
            assert!(matches!(h.state, JobState::Done { .. }));
            break;
        }
    }
}

#[test]
fn remote_errors_map_to_variants() {
    let known: BTreeSet<String> = ["base".to_string()].into();
    let r = rig(MockServerOptions {
        known_checkpoints: Some(known),
    });
    match r.http.poll_finetune("nope") {
        Err(ProviderError::UnknownJob(id)) => assert_eq!(id, "nope"),
        other => panic!("expected unknown job, got {other:?}"),
    }
    match r.http.generate("soup", 1, "ghost") {
        Err(ProviderError::Unavailable(m)) => assert!(m.contains("unknown_checkpoint"), "{m}"),
        other => panic!("expected unknown checkpoint, got {other:?}"),
    }
    assert!(matches!(
        r.http.generate_pair("a", "b", 1.5, 1, "base"),
        Err(ProviderError::InvalidRho(_))
    ));
}

/// A hand-rolled endpoint whose behaviour is scripted per request.
fn scripted<F>(workers: usize, f: F) -> (String, Vec<std::thread::JoinHandle<()>>, Arc<tiny_http::Server>)
where
    F: Fn(usize) -> (u16, String, Duration) + Send + Sync + 'static,
{
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let counter = Arc::new(AtomicUsize::new(0));
    let f = Arc::new(f);
    let handles = (0..workers)
        .map(|_| {
            let (server, counter, f) = (server.clone(), counter.clone(), f.clone());
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    let (status, body, delay) = f(n);
                    std::thread::sleep(delay);
                    let resp = tiny_http::Response::from_string(body)
                        .with_status_code(status)
                        .with_header(
                            "Content-Type: application/json"
                                .parse::<tiny_http::Header>()
                                .unwrap(),
                        );
                    let _ = req.respond(resp);
                }
            })
        })
        .collect();
    (url, handles, server)
}

fn stop(handles: Vec<std::thread::JoinHandle<()>>, server: Arc<tiny_http::Server>) {
    for _ in &handles {
        server.unblock();
    }
    for h in handles {
        h.join().unwrap();
    }
}

fn client(url: &str, tweak: impl FnOnce(&mut ProviderEndpoint)) -> HttpProvider {
    let dir = TempDir::new().unwrap();
    let mut ep = ProviderEndpoint::new("scripted", url);
    tweak(&mut ep);
    let store = Arc::new(BlobStore::open(dir.keep()).unwrap());
    HttpProvider::new(ep, store).with_backoff(fast())
}

#[test]
fn retries_unavailable_then_succeeds() {
    let (url, handles, server) = scripted(1, |n| {
        if n < 2 {
            (503, r#"{"error_code":"busy","message":"later"}"#.into(), Duration::ZERO)
        } else {
            (200, r#"{"text":"ok"}"#.into(), Duration::ZERO)
        }
    });
    let http = client(&url, |ep| ep.max_retries = 3);
    assert_eq!(http.chat("hi").unwrap(), "ok");
    stop(handles, server);
}

#[test]
fn gives_up_after_max_retries() {
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    let (url, handles, server) = scripted(1, move |_| {
        seen.fetch_add(1, Ordering::SeqCst);
        (429, String::new(), Duration::ZERO)
    });
    let http = client(&url, |ep| ep.max_retries = 2);
    assert!(matches!(http.chat("hi"), Err(ProviderError::Unavailable(_))));
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    stop(handles, server);
}

#[test]
fn client_errors_are_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    let (url, handles, server) = scripted(1, move |_| {
        seen.fetch_add(1, Ordering::SeqCst);
        (400, r#"{"error_code":"empty_mask","message":"blank"}"#.into(), Duration::ZERO)
    });
    let http = client(&url, |ep| ep.max_retries = 4);
    assert!(matches!(http.chat("hi"), Err(ProviderError::EmptyMask)));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    stop(handles, server);
}

#[test]
fn malformed_body_is_reported() {
    let (url, handles, server) = scripted(1, |_| (200, "not json".into(), Duration::ZERO));
    let http = client(&url, |_| {});
    assert!(matches!(http.chat("hi"), Err(ProviderError::MalformedResponse(_))));
    stop(handles, server);
}

#[test]
fn wrong_embedding_width_is_rejected() {
    let (url, handles, server) = scripted(1, |_| (200, r#"{"values":[1.0,0.0,0.0]}"#.into(), Duration::ZERO));
    let http = client(&url, |_| {});
    assert!(matches!(
        http.embed_text("x"),
        Err(ProviderError::DimensionMismatch { expected: 64, actual: 3 })
    ));
    stop(handles, server);
}

#[test]
fn slow_endpoint_times_out() {
    let (url, handles, server) =
        scripted(2, |_| (200, r#"{"text":"late"}"#.into(), Duration::from_millis(1500)));
    let http = client(&url, |ep| {
        ep.timeout = 0.2;
        ep.max_retries = 0;
    });
    let started = Instant::now();
    assert!(matches!(http.chat("hi"), Err(ProviderError::Timeout)));
    assert!(started.elapsed() < Duration::from_millis(1200));
    stop(handles, server);
}

#[test]
fn in_flight_calls_respect_concurrency() {
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (l, p) = (live.clone(), peak.clone());
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (server, l, p) = (server.clone(), l.clone(), p.clone());
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    let now = l.fetch_add(1, Ordering::SeqCst) + 1;
                    p.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(40));
                    l.fetch_sub(1, Ordering::SeqCst);
                    let _ = req.respond(tiny_http::Response::from_string(r#"{"text":"ok"}"#));
                }
            })
        })
        .collect();
    let http = Arc::new(client(&url, |ep| ep.concurrency = 2));
    let calls: Vec<_> = (0..10)
        .map(|i| {
            let http = http.clone();
            std::thread::spawn(move || http.chat(&format!("call {i}")).unwrap())
        })
        .collect();
    for c in calls {
        assert_eq!(c.join().unwrap(), "ok");
    }
    let peak = peak.load(Ordering::SeqCst);
    assert!(peak <= 2, "peak in-flight {peak}");
    assert_eq!(peak, 2);
    stop(handles, server);
}

fn manifests(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let dir = root.join("manifests");
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(&dir).unwrap().flatten() {
        if e.path().is_file() {
            out.insert(
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            );
        }
    }
    out
}

fn base_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: SEED,
        ..PipelineConfig::default()
    };
    cfg.editset.settings.poll_interval_ms = 5;
    cfg
}

#[test]
fn pipeline_over_http_matches_in_process_run() {
    let synth = SynthOptions {
        records: 24,
        ..SynthOptions::default()
    };

    let local = TempDir::new().unwrap();
    let ws = Workspace::open(local.path(), base_config()).unwrap();
    ws.write_synthetic_inputs(&synth).unwrap();
    run_pipeline(&ws, &Stage::ALL).unwrap();

    let server_dir = TempDir::new().unwrap();
    let remote = Arc::new(MockProvider::new(store(&server_dir, "blobs"), SEED));
    let server = serve(remote, "127.0.0.1:0", MockServerOptions::default()).unwrap();
    let mut cfg = base_config();
    cfg.mock = false;
    cfg.providers
        .insert("default".into(), ProviderEndpoint::new("default", &server.base_url()));
    let over_http = TempDir::new().unwrap();
    let ws = Workspace::open(over_http.path(), cfg).unwrap();
    ws.write_synthetic_inputs(&synth).unwrap();
    run_pipeline(&ws, &Stage::ALL).unwrap();
    server.shutdown();

    let a = manifests(local.path());
    let b = manifests(over_http.path());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between mock and http runs");
    }
    let recaptioned: Vec<DishRecord> =
        read_manifest(&local.path().join("manifests").join("recaptioned.jsonl")).unwrap();
    assert!(!recaptioned.is_empty());
}
