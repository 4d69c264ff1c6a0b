use std::net::SocketAddr;
use std::path::Path;

use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use stereoref_core::dataset::{read_color_png, write_calibration, write_color_png, Calibration, Layout};
use stereoref_core::image::ColorImage;
use stereoref_core::mesh::{save_ply, TriangleMesh};
use stereoref_core::posefile::{read_markers, read_pose, write_pose};
use stereoref_core::rig::RectifiedRig;
use stereoref_core::se3::{constrained_adjust, initial_pose_from_markers, RigidTransform, DEFAULT_DZ_BOUND};
use stereoref_service::{app, AppState, CommitEntry, Preview, SessionView};
use tempfile::TempDir;

const W: u32 = 80;
const H: u32 = 60;
const LEFT_BG: [u8; 3] = [10, 20, 30];
const RIGHT_BG: [u8; 3] = [200, 180, 160];

fn rig() -> RectifiedRig {
    RectifiedRig::symmetric(100.0, 40.0, 30.0, 5.0, W, H).unwrap()
}

struct Fixture {
    dir: TempDir,
    base: String,
    client: Client,
}

impl Fixture {
    async fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_calibration(&Layout::new(root), "001", &Calibration::from_rig(&rig())).unwrap();
        write_color_png(&root.join("left.png"), &ColorImage::filled(W, H, LEFT_BG)).unwrap();
        write_color_png(&root.join("right.png"), &ColorImage::filled(W, H, RIGHT_BG)).unwrap();
        save_ply(&TriangleMesh::plane_z(-200.0, 200.0, -200.0, 200.0, 100.0, 4, 4), &root.join("plane.ply"), false).unwrap();
        save_ply(&TriangleMesh::empty(), &root.join("empty.ply"), false).unwrap();
        save_ply(&two_planes(), &root.join("two_planes.ply"), true).unwrap();
        write_pose(&root.join("identity.pose"), &RigidTransform::identity()).unwrap();
        std::fs::write(root.join("markers.txt"), "left 0 0 0\nright 5 0.5 0\ntarget 1 -2 100\n").unwrap();

        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr: SocketAddr = listener.local_addr().unwrap();
        let router = app(AppState::new(root));
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        Self { dir, base: format!("http://{addr}"), client: Client::new() }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn create(&self, body: Value) -> reqwest::Response {
        self.client.post(self.url("/sessions")).json(&body).send().await.unwrap()
    }

    async fn session(&self, mesh: &str) -> SessionView {
        let resp = self
            .create(json!({"mesh": mesh, "calib": "calibration.json", "left": "left.png", "right": "right.png", "pose": "identity.pose"}))
            .await;
        assert_eq!(resp.status(), StatusCode::CREATED);
        resp.json().await.unwrap()
    }

    async fn delta(&self, id: &str, d: [f64; 4]) -> reqwest::Response {
        let body = json!({"rx": d[0], "ry": d[1], "rz": d[2], "dz": d[3]});
        self.client.post(self.url(&format!("/sessions/{id}/delta"))).json(&body).send().await.unwrap()
    }

    async fn view(&self, id: &str) -> SessionView {
        self.client.get(self.url(&format!("/sessions/{id}"))).send().await.unwrap().json().await.unwrap()
    }

    async fn render(&self, id: &str, query: &str) -> ColorImage {
        let resp = self.client.get(self.url(&format!("/sessions/{id}/render?{query}"))).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()["content-type"], "image/png");
        let bytes = resp.bytes().await.unwrap();
        let path = self.root().join("render.png");
        std::fs::write(&path, &bytes).unwrap();
        read_color_png(&path).unwrap()
    }

    async fn preview(&self, id: &str) -> Preview {
        let resp = self.client.get(self.url(&format!("/sessions/{id}/preview"))).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.json().await.unwrap()
    }
}

fn pose_of(view: &SessionView) -> RigidTransform {
    let m = nalgebra::Matrix4::from_fn(|i, j| view.pose[i][j]);
    RigidTransform::from_homogeneous(&m).unwrap()
}

// Back wall at z = 120 and a vertical strip at z = 80 in front of it.
const STRIP: (f64, f64, f64) = (-6.3, 4.1, 80.0);
const WALL_Z: f64 = 120.0;

fn two_planes() -> TriangleMesh {
    let wall = TriangleMesh::plane_z(-300.0, 300.0, -300.0, 300.0, WALL_Z, 2, 2);
    let strip = TriangleMesh::plane_z(STRIP.0, STRIP.1, -300.0, 300.0, STRIP.2, 1, 2);
    wall.merged(&strip)
}

/// Depth seen through pixel centre `(x, y)` of a camera at `(cam_x, 0, 0)`.
fn ray_depth(rig: &RectifiedRig, cam_x: f64, cx: f64, x: u32) -> f64 {
    let slope = (x as f64 + 0.5 - cx) / rig.f();
    let hit_x = cam_x + slope * STRIP.2;
    if hit_x > STRIP.0 && hit_x < STRIP.1 {
        STRIP.2
    } else {
        WALL_Z
    }
}

/// Occluded percent of the combined left-frame mask, by direct ray casting.
fn oracle_occluded_percent(rig: &RectifiedRig, margin: f64) -> f64 {
    let (w, h) = (rig.width(), rig.height());
    let left = |x: u32| ray_depth(rig, 0.0, rig.cx1(), x);
    let right = |x: u32| ray_depth(rig, rig.tx(), rig.cx2(), x);
    let mut occluded = 0usize;
    for x in 0..w {
        let z = left(x);
        let d = rig.f() * rig.tx() / z + rig.cx1() - rig.cx2();
        let u = x as f64 + 0.5 - d;
        if u < 0.0 || u >= w as f64 {
            continue;
        }
        let hidden_left = (right(u.floor() as u32) - z).abs() > margin;
        let zr = right(x);
        let ur = x as f64 + 0.5 + rig.f() * rig.tx() / zr + rig.cx1() - rig.cx2();
        let hidden_right = ur >= 0.0 && ur < w as f64 && (left(ur.floor() as u32) - zr).abs() > margin;
        if hidden_left || hidden_right {
            occluded += h as usize;
        }
    }
    100.0 * occluded as f64 / (w * h) as f64
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_lifecycle() {
    let fx = Fixture::new().await;
    let health: Value = fx.client.get(fx.url("/healthz")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    assert!(health["version"].is_string());

    let s = fx.session("plane.ply").await;
    assert_eq!((s.width, s.height, s.dz, s.commits), (W, H, 0.0, 0));
    assert_eq!(s.dz_bound, DEFAULT_DZ_BOUND);
    assert_eq!(pose_of(&s), RigidTransform::identity());
    assert_eq!(fx.view(&s.id).await, s);

    let missing = fx.client.get(fx.url("/sessions/00000000-0000-0000-0000-000000000000")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    assert_eq!(fx.delta("nope", [0.0; 4]).await.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_creation_is_rejected() {
    let fx = Fixture::new().await;
    let base = json!({"mesh": "plane.ply", "calib": "calibration.json", "left": "left.png", "right": "right.png", "pose": "identity.pose"});
    let with = |key: &str, v: Value| {
        let mut b = base.clone();
        b[key] = v;
        b
    };
    for body in [
        with("mesh", json!("missing.ply")),
        with("mesh", json!("../plane.ply")),
        with("left", json!("/etc/passwd")),
        with("calib_id", json!("042")),
        with("near", json!(-1.0)),
        with("margin", json!(0.0)),
        with("markers", json!("markers.txt")),
        json!({"calib": "calibration.json"}),
    ] {
        let resp = fx.create(body.clone()).await;
        assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        let err: Value = resp.json().await.unwrap();
        assert!(err["error"].is_string());
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn markers_give_the_frame_pose() {
    let fx = Fixture::new().await;
    let resp = fx
        .create(json!({"mesh": "plane.ply", "calib": "calibration.json", "calib_id": "001", "left": "left.png", "right": "right.png", "markers": "markers.txt"}))
        .await;
    assert_eq!(resp.status(), StatusCode::CREATED);
    let view: SessionView = resp.json().await.unwrap();
    let expected = initial_pose_from_markers(&read_markers(&fx.root().join("markers.txt")).unwrap()).unwrap();
    assert!(pose_of(&view).max_abs_diff(&expected) <= 1e-12);
}

#[tokio::test(flavor = "multi_thread")]
async fn deltas_compose_and_respect_the_axial_bound() {
    let fx = Fixture::new().await;
    let s = fx.session("plane.ply").await;
    let start = pose_of(&s);

    let zero: SessionView = fx.delta(&s.id, [0.0; 4]).await.json().await.unwrap();
    assert!(pose_of(&zero).max_abs_diff(&start) <= 1e-15);

    let steps = [[0.02, -0.01, 0.03, 4.0], [-0.01, 0.015, 0.0, -2.5], [0.0, 0.0, -0.04, 7.0]];
    for d in steps {
        assert_eq!(fx.delta(&s.id, d).await.status(), StatusCode::OK);
    }
    // Undo in reverse: slide back, then rotate back in reverse axis order.
    for d in steps.iter().rev() {
        assert_eq!(fx.delta(&s.id, [0.0, 0.0, 0.0, -d[3]]).await.status(), StatusCode::OK);
        for (axis, angle) in [(2, d[2]), (1, d[1]), (0, d[0])] {
            let mut r = [0.0; 4];
            r[axis] = -angle;
            assert_eq!(fx.delta(&s.id, r).await.status(), StatusCode::OK);
        }
    }
    let back = fx.view(&s.id).await;
    assert!(pose_of(&back).max_abs_diff(&start) <= 1e-9);
    assert!(back.dz.abs() <= 1e-12);

    assert_eq!(fx.delta(&s.id, [0.0, 0.0, 0.0, 15.0]).await.status(), StatusCode::OK);
    let before = fx.view(&s.id).await;
    let resp = fx.delta(&s.id, [0.1, 0.0, 0.0, 6.0]).await;
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    assert_eq!(fx.view(&s.id).await, before);
    assert_eq!(fx.delta(&s.id, [0.0, 0.0, 0.0, -20.0]).await.status(), StatusCode::OK);
    assert_eq!(fx.delta(&s.id, [0.0, 0.0, 0.0, -15.0]).await.status(), StatusCode::OK);
    assert_eq!(fx.view(&s.id).await.dz, -20.0);
    assert_eq!(fx.delta(&s.id, [0.0, 0.0, 0.0, -0.5]).await.status(), StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn camera_centre_stays_on_the_initial_axis() {
    let fx = Fixture::new().await;
    let s = fx.session("plane.ply").await;
    let start = pose_of(&s);
    let c0 = start.camera_center();
    // Each step moves the centre only along the axis it ends up looking down.
    let mut prev = c0;
    for d in [[0.05, 0.0, 0.0, 3.0], [0.0, -0.07, 0.02, -6.0], [0.01, 0.01, 0.01, 10.0], [-0.03, 0.02, 0.0, -1.0]] {
        let view: SessionView = fx.delta(&s.id, d).await.json().await.unwrap();
        let pose = pose_of(&view);
        let step = pose.camera_center() - prev;
        let axis = pose.view_axis();
        assert!((step - axis * d[3]).norm() <= 1e-9);
        prev = pose.camera_center();
    }
    // Pure axial moves from the start keep the centre on the starting axis.
    let s2 = fx.session("plane.ply").await;
    let axis = start.view_axis();
    for dz in [5.0, -12.0, 3.5] {
        let view: SessionView = fx.delta(&s2.id, [0.0, 0.0, 0.0, dz]).await.json().await.unwrap();
        let off = pose_of(&view).camera_center() - c0;
        assert!((off - axis * off.dot(&axis)).norm() <= 1e-12);
        assert!((off.dot(&axis) - view.dz).abs() <= 1e-12);
    }
    // Rotations alone never move the centre.
    for d in [[0.1, 0.0, 0.0], [0.0, -0.2, 0.0], [0.0, 0.0, 0.3]] {
        let before = pose_of(&fx.view(&s2.id).await).camera_center();
        let view: SessionView = fx.delta(&s2.id, [d[0], d[1], d[2], 0.0]).await.json().await.unwrap();
        assert!((pose_of(&view).camera_center() - before).norm() <= 1e-12);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn render_alpha_and_swap() {
    let fx = Fixture::new().await;
    let s = fx.session("plane.ply").await;

    let clear = fx.render(&s.id, "eye=left&alpha=0").await;
    assert_eq!((clear.width(), clear.height()), (W, H));
    assert!(clear.pixels().iter().all(|p| *p == LEFT_BG));

    let opaque = fx.render(&s.id, "eye=right&alpha=1").await;
    assert!(opaque.pixels().iter().all(|p| *p != RIGHT_BG));

    let half = fx.render(&s.id, "eye=left&alpha=0.5").await;
    let (fg, bg) = (opaque.get(40, 30), LEFT_BG);
    for c in 0..3 {
        let mixed = (0.5 * fg[c] as f64 + 0.5 * bg[c] as f64).round() as i32;
        assert!((half.get(40, 30)[c] as i32 - mixed).abs() <= 1);
    }

    let pair = fx.render(&s.id, "eye=pair&alpha=0").await;
    let swapped = fx.render(&s.id, "eye=pair&alpha=0&swap=true").await;
    assert_eq!((pair.width(), pair.height()), (2 * W, H));
    for y in 0..H {
        for x in 0..W {
            assert_eq!(pair.get(x, y), LEFT_BG);
            assert_eq!(pair.get(x + W, y), RIGHT_BG);
            assert_eq!(swapped.get(x, y), pair.get(x + W, y));
            assert_eq!(swapped.get(x + W, y), pair.get(x, y));
        }
    }

    let wire = fx.render(&s.id, "eye=left&mode=wireframe&alpha=1").await;
    assert!(wire.pixels().iter().any(|p| *p == LEFT_BG));

    for q in ["alpha=1.5", "alpha=-0.1", "eye=middle", "mode=voxels"] {
        let resp = fx.client.get(fx.url(&format!("/sessions/{}/render?{q}", s.id))).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY, "{q}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn commits_are_listed_and_persisted() {
    let fx = Fixture::new().await;
    let s = fx.session("plane.ply").await;
    let c0: CommitEntry = fx
        .client
        .post(fx.url(&format!("/sessions/{}/commit", s.id)))
        .json(&json!({"operator": "ana"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    fx.delta(&s.id, [0.01, 0.02, -0.03, 2.0]).await;
    let resp = fx.client.post(fx.url(&format!("/sessions/{}/commit", s.id))).json(&json!({"operator": "ben"})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let c1: CommitEntry = resp.json().await.unwrap();

    assert_eq!((c0.index, c0.operator.as_str(), c0.dz), (0, "ana", 0.0));
    assert_eq!((c1.index, c1.operator.as_str(), c1.dz), (1, "ben", 2.0));
    assert!(c1.timestamp >= c0.timestamp && c0.timestamp > 1.0e9);

    let listed: Vec<CommitEntry> =
        fx.client.get(fx.url(&format!("/sessions/{}/commits", s.id))).send().await.unwrap().json().await.unwrap();
    assert_eq!(listed, vec![c0.clone(), c1.clone()]);
    assert_eq!(fx.view(&s.id).await.commits, 2);

    let dir = fx.root().join("sessions").join(&s.id);
    let saved: Vec<CommitEntry> = serde_json::from_str(&std::fs::read_to_string(dir.join("commits.json")).unwrap()).unwrap();
    assert_eq!(saved, listed);
    let current = pose_of(&fx.view(&s.id).await);
    assert_eq!(read_pose(&dir.join("commit_001.pose")).unwrap(), current);
    assert_eq!(read_pose(&dir.join("commit_000.pose")).unwrap(), RigidTransform::identity());
}

#[tokio::test(flavor = "multi_thread")]
async fn preview_matches_scene_geometry() {
    let fx = Fixture::new().await;

    let plane = fx.preview(&fx.session("plane.ply").await.id).await;
    assert_eq!(plane.occluded_percent, 0.0);
    assert_eq!(plane.outside_model_percent, 0.0);
    let depth = plane.depth.unwrap();
    assert!((depth.min - 100.0).abs() < 1e-6 && (depth.max - 100.0).abs() < 1e-6);
    let disp = plane.disparity.unwrap();
    assert!((disp.mean - 5.0).abs() < 1e-6);
    let total = plane.valid_percent + plane.non_overlap_percent + plane.occluded_percent + plane.outside_model_percent;
    assert!((total - 100.0).abs() < 1e-9);

    let empty = fx.preview(&fx.session("empty.ply").await.id).await;
    assert_eq!(empty.outside_model_percent, 100.0);
    assert!(empty.depth.is_none() && empty.disparity.is_none());

    let two = fx.preview(&fx.session("two_planes.ply").await.id).await;
    let expected = oracle_occluded_percent(&rig(), 1.0);
    assert!(expected > 1.0);
    assert!((two.occluded_percent - expected).abs() <= 0.1, "{} vs {expected}", two.occluded_percent);
    assert!((two.occluded_left_percent + two.occluded_right_percent - two.occluded_percent).abs() < 1e-12);
}

fn interleavings(a: usize, b: usize) -> Vec<Vec<bool>> {
    if a == 0 {
        return vec![vec![false; b]];
    }
    if b == 0 {
        return vec![vec![true; a]];
    }
    let mut out = Vec::new();
    for mut rest in interleavings(a - 1, b) {
        rest.insert(0, true);
        out.push(rest);
    }
    for mut rest in interleavings(a, b - 1) {
        rest.insert(0, false);
        out.push(rest);
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_deltas_are_linearizable() {
    let fx = Fixture::new().await;
    let a = [[0.03, 0.0, 0.01, 2.0], [0.0, 0.02, 0.0, -1.0], [0.01, -0.02, 0.03, 3.0], [-0.02, 0.0, 0.0, 0.5]];
    let b = [[0.0, -0.04, 0.0, -3.0], [0.05, 0.0, -0.01, 1.5], [0.0, 0.0, 0.02, -2.0], [0.02, 0.03, 0.0, 4.0]];
    let orders = interleavings(4, 4);
    assert_eq!(orders.len(), 70);

    for _round in 0..3 {
        let s = fx.session("plane.ply").await;
        let start = pose_of(&s);
        let run = |steps: [[f64; 4]; 4]| {
            let client = fx.client.clone();
            let url = fx.url(&format!("/sessions/{}/delta", s.id));
            tokio::spawn(async move {
                for d in steps {
                    let body = json!({"rx": d[0], "ry": d[1], "rz": d[2], "dz": d[3]});
                    let resp = client.post(&url).json(&body).send().await.unwrap();
                    assert_eq!(resp.status(), StatusCode::OK);
                }
            })
        };
        let (ja, jb) = (run(a), run(b));
        ja.await.unwrap();
        jb.await.unwrap();
        let end = fx.view(&s.id).await;

        let matches = orders.iter().any(|order| {
            let (mut ia, mut ib) = (0, 0);
            let mut pose = start;
            for &from_a in order {
                let d = if from_a {
                    ia += 1;
                    a[ia - 1]
                } else {
                    ib += 1;
                    b[ib - 1]
                };
                pose = constrained_adjust(&pose, d[0], d[1], d[2], d[3], f64::INFINITY).unwrap();
            }
            pose.max_abs_diff(&pose_of(&end)) <= 1e-9
        });
        assert!(matches, "final pose matches no sequential interleaving");
        assert!((end.dz - 5.0).abs() <= 1e-12);
    }
}
