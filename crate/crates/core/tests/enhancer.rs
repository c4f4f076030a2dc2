mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dualrefine::camera::uniform_pose_set;
use dualrefine::enhancer::{
    conditioning_maps, generate_dataset, image_name, remote_enhance, Backend, ControlMode, GenerateOptions,
    OracleWorld, Perturb, PosedDataset, RemoteConfig, RemoteRequest, MANIFEST,
};
use dualrefine::image::Image;
use dualrefine::scene::{render, Aabb, RadianceField, RenderSettings};
use dualrefine::world::ToyScene;
use dualrefine::Error;

enum Reply {
    Status(u16),
    Echo,
    Raw(&'static str),
}

/// Serves one scripted reply per connection; the last reply repeats.
/// Returns the base URL and the request bodies seen so far.
fn mock_server(script: Vec<Reply>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8(body).unwrap();
            log.lock().unwrap().push(body.clone());
            let (status, text) = match &script[i.min(script.len() - 1)] {
                Reply::Status(code) => (*code, "{\"error\":\"busy\"}".to_string()),
                Reply::Raw(text) => (200, text.to_string()),
                Reply::Echo => {
                    let req: serde_json::Value = serde_json::from_str(&body).unwrap();
                    (200, format!("{{\"image_b64\":{}}}", req["image_b64"]))
                }
            };
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn client(url: &str, max_retries: usize) -> RemoteConfig {
    RemoteConfig {
        url: url.to_string(),
        timeout_ms: 5_000,
        max_retries,
        backoff_ms: 1,
        max_in_flight: 2,
        control_mode: ControlMode::Depth,
        prompt: "a toy scene".into(),
    }
}

fn test_image() -> Image {
    Image::from_vec(4, 4, 3, (0..48).map(|i| (i * 5 % 256) as f64 / 255.0).collect()).unwrap()
}

#[test]
fn echo_server_returns_the_conditioning_image() {
    let (url, _) = mock_server(vec![Reply::Echo]);
    let img = test_image();
    let req = RemoteRequest::new("p", ControlMode::Normal, &img, 0.5, 9).unwrap();
    let resp = remote_enhance(&client(&url, 0), &req).unwrap();
    assert_eq!(resp.image, img);
    assert_eq!(resp.retries(), 0);
}

#[test]
fn server_errors_are_retried_and_counted() {
    let (url, seen) = mock_server(vec![Reply::Status(500), Reply::Status(500), Reply::Echo]);
    let req = RemoteRequest::new("p", ControlMode::Depth, &test_image(), 0.5, 1).unwrap();
    let resp = remote_enhance(&client(&url, 3), &req).unwrap();
    assert_eq!(resp.retries(), 2);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = mock_server(vec![Reply::Status(503)]);
    let req = RemoteRequest::new("p", ControlMode::Depth, &test_image(), 0.5, 1).unwrap();
    match remote_enhance(&client(&url, 2), &req) {
        Err(Error::Remote { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected remote error, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_reply_is_a_protocol_error_without_retry() {
    let (url, seen) = mock_server(vec![Reply::Raw("{\"image_b64\":\"***\"}")]);
    let req = RemoteRequest::new("p", ControlMode::Depth, &test_image(), 0.5, 1).unwrap();
    assert!(matches!(
        remote_enhance(&client(&url, 3), &req),
        Err(Error::Protocol(_))
    ));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_service_fails_after_retries() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let req = RemoteRequest::new("p", ControlMode::Depth, &test_image(), 0.5, 1).unwrap();
    let res = remote_enhance(&client(&format!("http://127.0.0.1:{port}"), 1), &req);
    assert!(matches!(res, Err(Error::Remote { attempts: 2, .. })));
}

#[test]
fn request_body_matches_golden_file() {
    let img = Image::from_vec(
        2,
        2,
        3,
        vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let req = RemoteRequest::new("a red sphere", ControlMode::Softedge, &img, 0.75, 42).unwrap();
    let body = req.body().unwrap();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/remote_request.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &body).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(body, golden);
    let decoded = B64
        .decode(
            serde_json::from_str::<serde_json::Value>(&body).unwrap()["image_b64"]
                .as_str()
                .unwrap(),
        )
        .unwrap();
    assert_eq!(Image::decode_png(&decoded).unwrap(), img);
}

fn settings() -> RenderSettings {
    RenderSettings {
        image_size: 16,
        samples_per_ray: 24,
        ..RenderSettings::default()
    }
}

fn scene() -> RadianceField {
    ToyScene::builtin(0).unwrap().rasterize(12, Aabb::cube(1.0)).unwrap()
}

fn oracle() -> OracleWorld {
    OracleWorld::new(scene(), Perturb::default(), settings()).unwrap()
}

fn opts(seed: u64) -> GenerateOptions {
    GenerateOptions {
        prompt_label: 0,
        strength: 0.5,
        seed,
        settings: settings(),
    }
}

#[test]
fn sixty_views_of_five_samples_give_three_hundred_balanced_entries() {
    let dir = tempfile::tempdir().unwrap();
    let rig = uniform_pose_set(60, 5, &[0.0, 30f64.to_radians()], 3.2, 0.7).unwrap();
    let ds = generate_dataset(&scene(), &rig, &Backend::Oracle(&oracle()), &opts(1), dir.path()).unwrap();
    assert_eq!(ds.entries.len(), 300);
    let counts = ds.view_counts();
    assert_eq!(counts.len(), 60);
    assert!(counts.values().all(|&c| c == 5));
    let reopened = PosedDataset::open(dir.path()).unwrap();
    assert_eq!(reopened.entries, ds.entries);
    let expected = std::f64::consts::TAU / 60.0;
    for w in ds.header.rig.poses.windows(2) {
        assert!((w[1].azimuth - w[0].azimuth - expected).abs() < 1e-12);
    }
}

#[test]
fn twenty_four_views_of_three_samples_with_toy_backend() {
    let dir = tempfile::tempdir().unwrap();
    let rig = uniform_pose_set(24, 3, &[0.0], 3.2, 0.7).unwrap();
    let prior = common::random_prior(2);
    let ds = generate_dataset(&scene(), &rig, &Backend::ToyI2i(&prior), &opts(2), dir.path()).unwrap();
    assert_eq!(ds.entries.len(), 72);
    assert!(ds.view_counts().values().all(|&c| c == 3));
    assert!(ds.entries.iter().all(|e| e.backend == "toy_i2i"));
    let loaded = ds.load().unwrap();
    assert_eq!(loaded.len(), 72);
    assert_eq!(loaded.image_size(), 16);
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "coarse", "cond"] {
        let mut names: Vec<_> = std::fs::read_dir(root.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.strip_prefix(root).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    out.push((MANIFEST.into(), std::fs::read(root.join(MANIFEST)).unwrap()));
    out
}

#[test]
fn same_seed_gives_bit_identical_datasets() {
    let rig = uniform_pose_set(6, 3, &[0.0, 0.5], 3.2, 0.7).unwrap();
    let world = oracle();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&scene(), &rig, &Backend::Oracle(&world), &opts(5), a.path()).unwrap();
    generate_dataset(&scene(), &rig, &Backend::Oracle(&world), &opts(5), b.path()).unwrap();
    generate_dataset(&scene(), &rig, &Backend::Oracle(&world), &opts(6), c.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn manifest_must_match_files_on_disk() {
    let rig = uniform_pose_set(4, 2, &[0.0], 3.2, 0.7).unwrap();
    let world = oracle();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&scene(), &rig, &Backend::Oracle(&world), &opts(1), dir.path()).unwrap();
    PosedDataset::open(dir.path()).unwrap();

    let stray = dir.path().join("images/extra.png");
    std::fs::write(&stray, b"x").unwrap();
    assert!(PosedDataset::open(dir.path()).is_err());
    std::fs::remove_file(&stray).unwrap();

    let victim = dir.path().join(image_name(2, 1));
    let saved = std::fs::read(&victim).unwrap();
    std::fs::remove_file(&victim).unwrap();
    assert!(PosedDataset::open(dir.path()).is_err());
    std::fs::write(&victim, saved).unwrap();

    let manifest = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    std::fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    assert!(PosedDataset::open(dir.path()).is_err());
}

#[test]
fn remote_backend_writes_echoed_conditioning_maps() {
    let (url, seen) = mock_server(vec![Reply::Echo]);
    let rig = uniform_pose_set(3, 2, &[0.3], 3.2, 0.7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = client(&url, 1);
    let ds = generate_dataset(&scene(), &rig, &Backend::Remote(&cfg), &opts(3), dir.path()).unwrap();
    assert_eq!(ds.entries.len(), 6);
    assert_eq!(seen.lock().unwrap().len(), 6);
    let view = render(&scene(), &rig.poses[1], &settings()).unwrap();
    let depth = conditioning_maps(&view).unwrap().depth.to_rgb();
    let expected = Image::decode_png(&depth.encode_png().unwrap()).unwrap();
    let loaded = ds.load().unwrap();
    assert_eq!(loaded.view(1).unwrap().samples[0], expected);
}

#[test]
fn failing_backend_leaves_no_manifest() {
    let (url, _) = mock_server(vec![Reply::Status(500)]);
    let rig = uniform_pose_set(2, 1, &[0.0], 3.2, 0.7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let res = generate_dataset(&scene(), &rig, &Backend::Remote(&client(&url, 1)), &opts(1), dir.path());
    assert!(matches!(res, Err(Error::Remote { .. })));
    assert!(!dir.path().join(MANIFEST).exists());
}
