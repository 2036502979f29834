//! /v1 endpoints against the mock-backed service.

mod common;

use serde_json::{json, Value};

use common::{api_in_process, b64, scene_png, Http};
use cotcanvas::backends::scene::Shape;
use cotcanvas::codec::{decode_image_png, decode_mask_png, encode_mask_png, mask_to_b64};
use cotcanvas::raster::{outside_mask_identical_ratio, BinaryMask};
use cotcanvas_app::store::SessionStore;

const SPEC: &[(&str, Shape)] = &[("red", Shape::Square), ("blue", Shape::Circle), ("green", Shape::Triangle)];
const TWO: &str = "remove the red square and turn the blue circle yellow";

fn setup() -> (tempfile::TempDir, Http) {
    let dir = tempfile::tempdir().unwrap();
    let base = api_in_process(dir.path(), 0, None);
    (dir, Http::new(&base))
}

fn err_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

#[test]
fn create_session_and_canvas_identity() {
    let (dir, http) = setup();
    let png = scene_png(1, SPEC);
    let a = http.create(&png);
    let b = http.create(&png);
    assert_ne!(a, b);
    assert_eq!(SessionStore::open(dir.path()).unwrap().blob_count().unwrap(), 1);
    assert_eq!(http.get(&format!("/v1/sessions/{a}/canvas.png")), (200, png));

    let (s, body) = http.post("/v1/sessions", b"abc");
    assert_eq!(s, 400);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err_code(&v), "bad_request");
    assert!(v["error"]["message"].as_str().unwrap().contains("decode"));
}

#[test]
fn unknown_ids_and_routes_are_404() {
    let (_d, http) = setup();
    for p in ["/v1/sessions/nope/canvas.png", "/v1/sessions/nope/trace", "/v1/sessions/nope/proposals"] {
        let (s, v) = http.get_json(p);
        assert_eq!(s, 404, "{p}");
        assert_eq!(err_code(&v), "not_found");
    }
    assert_eq!(http.post_json("/v1/sessions/nope/proposals", &json!({"instruction": "remove the red square"})).0, 404);
    assert_eq!(http.get("/v1/nothing").0, 404);
}

#[test]
fn propose_lists_masks_and_guards_conflicts() {
    let (_d, http) = setup();
    let id = http.create(&scene_png(2, SPEC));
    let (s, v) = http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": TWO }));
    assert_eq!(s, 201, "{v}");
    let props = v["proposals"].as_array().unwrap();
    assert_eq!(props.len(), 2);
    assert_eq!(v["next_step"], 1);
    for p in props {
        assert_eq!(p["status"], "PROPOSED");
        let (ms, bytes) = http.get(p["mask_url"].as_str().unwrap());
        assert_eq!(ms, 200);
        let m = decode_mask_png(&bytes).unwrap();
        assert_eq!(m.area() as u64, p["mask_area"].as_u64().unwrap());
        assert!(m.area() > 0);
    }
    assert_eq!(props[0]["kind"], "REMOVE");
    assert_eq!(props[1]["kind"], "CHANGE_ATTRIBUTE");
    assert!(props[1]["inpaint_prompt"].as_str().unwrap().contains("yellow"));

    assert_eq!(http.get_json(&format!("/v1/sessions/{id}/proposals")), (200, v.clone()));
    let (s, e) = http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": "remove the red square" }));
    assert_eq!((s, err_code(&e)), (409, "conflict"));
    assert_eq!(http.get(&format!("/v1/sessions/{id}/proposals/3/mask.png")).0, 404);
}

#[test]
fn unclassifiable_instruction_is_422_with_clause() {
    let (_d, http) = setup();
    let id = http.create(&scene_png(3, SPEC));
    let (s, v) = http.post_json(
        &format!("/v1/sessions/{id}/proposals"),
        &json!({ "instruction": "sparkle the blue circle and remove the red square" }),
    );
    assert_eq!(s, 422);
    let msg = v["error"]["message"].as_str().unwrap();
    assert!(msg.contains("\"sparkle the blue circle\"") && msg.contains("clause 1"), "{msg}");
    // nothing pending after a failed propose
    assert_eq!(http.get_json(&format!("/v1/sessions/{id}/proposals")).1["proposals"], json!([]));
}

#[test]
fn approve_in_order_advances_canvas_and_history() {
    let (_d, http) = setup();
    let png = scene_png(4, SPEC);
    let id = http.create(&png);
    http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": TWO }));
    let resolve = |n: usize, body: Value| http.post_json(&format!("/v1/sessions/{id}/proposals/{n}/resolve"), &body);

    let (s, v) = resolve(2, json!({ "decision": "APPROVE" }));
    assert_eq!((s, err_code(&v)), (409, "conflict"));

    let (s, v) = resolve(1, json!({ "decision": "APPROVE" }));
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["status"], "APPLIED");
    assert_eq!(v["transitions"], json!(["PROPOSED", "APPROVED", "APPLIED"]));
    let (_, t) = http.get_json(&format!("/v1/sessions/{id}/trace"));
    let after1 = b64(t["pending"]["trace"]["steps"][0]["after"].as_str().unwrap());
    let canvas = http.get(&format!("/v1/sessions/{id}/canvas.png")).1;
    assert_eq!(canvas, after1);

    let (s, v) = resolve(1, json!({ "decision": "APPROVE" }));
    assert_eq!((s, err_code(&v)), (409, "conflict"));

    assert_eq!(resolve(2, json!({ "decision": "APPROVE" })).0, 200);
    let (_, t) = http.get_json(&format!("/v1/sessions/{id}/trace"));
    assert!(t["pending"].is_null());
    let h = &t["history"][0];
    assert_eq!(b64(h["initial"].as_str().unwrap()), png);
    assert_eq!(b64(h["final"].as_str().unwrap()), http.get(&format!("/v1/sessions/{id}/canvas.png")).1);
    assert_eq!(h["steps"].as_array().unwrap().len(), 2);

    // fidelity of the whole batch against the union of applied masks
    let src = decode_image_png(&png).unwrap();
    let out = decode_image_png(&b64(h["final"].as_str().unwrap())).unwrap();
    let mut union = BinaryMask::empty(src.width(), src.height()).unwrap();
    for s in h["steps"].as_array().unwrap() {
        union = union.union(&decode_mask_png(&b64(s["mask"].as_str().unwrap())).unwrap()).unwrap();
    }
    assert_eq!(outside_mask_identical_ratio(&src, &out, &union).unwrap(), 1.0);

    // a new batch may start once the previous one is done
    let (s, _) = http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": "remove the green triangle" }));
    assert_eq!(s, 201);
}

#[test]
fn overrides_are_applied_and_recorded() {
    let (_d, http) = setup();
    let png = scene_png(5, SPEC);
    let id = http.create(&png);
    http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": "remove the red square" }));
    let img = decode_image_png(&png).unwrap();
    let (w, h) = img.dims();

    let small = BinaryMask::full(w / 2, h / 2).unwrap();
    let (s, v) = http.post_json(
        &format!("/v1/sessions/{id}/proposals/1/resolve"),
        &json!({ "decision": "APPROVE", "mask_b64": mask_to_b64(&small).unwrap() }),
    );
    assert_eq!((s, err_code(&v)), (422, "unprocessable"));
    let (s, v) = http.post_json(
        &format!("/v1/sessions/{id}/proposals/1/resolve"),
        &json!({ "decision": "APPROVE", "mask_b64": "!!" }),
    );
    assert_eq!((s, err_code(&v)), (400, "bad_request"));

    let over = BinaryMask::from_fn(w, h, |x, y| x < 10 && y < 10).unwrap();
    let (s, v) = http.post_json(
        &format!("/v1/sessions/{id}/proposals/1/resolve"),
        &json!({ "decision": "APPROVE", "mask_b64": mask_to_b64(&over).unwrap(), "inpaint_prompt": "a magenta patch" }),
    );
    assert_eq!(s, 200, "{v}");
    let (_, t) = http.get_json(&format!("/v1/sessions/{id}/trace"));
    let step = &t["history"][0]["steps"][0];
    assert_eq!(step["provenance"], json!({ "mask_override": true, "prompt_override": true }));
    assert_eq!(step["inpaint_prompt"], "a magenta patch");
    assert_eq!(b64(step["mask"].as_str().unwrap()), encode_mask_png(&over).unwrap());
    let out = decode_image_png(&http.get(&format!("/v1/sessions/{id}/canvas.png")).1).unwrap();
    assert_eq!(outside_mask_identical_ratio(&img, &out, &over).unwrap(), 1.0);
    assert_ne!(out, img);
}

#[test]
fn reject_returns_fresh_proposal_with_feedback() {
    let (_d, http) = setup();
    let id = http.create(&scene_png(6, SPEC));
    let (_, v) = http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": TWO }));
    let before = v["proposals"][1].clone();
    let (s, p) = http.post_json(
        &format!("/v1/sessions/{id}/proposals/2/resolve"),
        &json!({ "decision": "REJECT", "feedback": "use a lighter shade" }),
    );
    assert_eq!(s, 200, "{p}");
    assert_eq!(p["status"], "PROPOSED");
    assert_eq!(p["transitions"], json!(["PROPOSED", "REJECTED", "PROPOSED"]));
    assert_eq!(p["feedback"], json!(["use a lighter shade"]));
    assert_eq!(p["mask_area"], before["mask_area"]);
    // the reviewer can still approve it afterwards, in order
    assert_eq!(http.post_json(&format!("/v1/sessions/{id}/proposals/1/resolve"), &json!({"decision": "APPROVE"})).0, 200);
    assert_eq!(http.post_json(&format!("/v1/sessions/{id}/proposals/2/resolve"), &json!({"decision": "APPROVE"})).0, 200);
}

#[test]
fn malformed_bodies_are_400() {
    let (_d, http) = setup();
    let id = http.create(&scene_png(7, SPEC));
    assert_eq!(http.post(&format!("/v1/sessions/{id}/proposals"), b"{").0, 400);
    assert_eq!(http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "text": "x" })).0, 400);
    http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": "remove the red square" }));
    let (s, _) = http.post_json(&format!("/v1/sessions/{id}/proposals/1/resolve"), &json!({ "decision": "MAYBE" }));
    assert_eq!(s, 400);
}

#[test]
fn identical_requests_give_identical_responses() {
    let (_d, http) = setup();
    let png = scene_png(8, SPEC);
    let run = || {
        let id = http.create(&png);
        let (_, v) = http.post_json(&format!("/v1/sessions/{id}/proposals"), &json!({ "instruction": TWO }));
        let (_, r) = http.post_json(&format!("/v1/sessions/{id}/proposals/1/resolve"), &json!({"decision": "APPROVE"}));
        let canvas = http.get(&format!("/v1/sessions/{id}/canvas.png")).1;
        let strip = |v: &Value| v.to_string().replace(&id, "ID");
        (strip(&v), strip(&r), canvas)
    };
    assert_eq!(run(), run());
}

#[test]
fn token_guards_session_routes() {
    let dir = tempfile::tempdir().unwrap();
    let base = api_in_process(dir.path(), 0, Some("s3cret"));
    let anon = Http::new(&base);
    assert_eq!(anon.get_json("/v1/health").0, 200);
    let (s, v) = anon.post("/v1/sessions", &scene_png(9, SPEC));
    assert_eq!(s, 401, "{}", String::from_utf8_lossy(&v));
    assert_eq!(Http::new(&base).with_token("wrong").post("/v1/sessions", &scene_png(9, SPEC)).0, 401);
    let auth = Http::new(&base).with_token("s3cret");
    let id = auth.create(&scene_png(9, SPEC));
    assert_eq!(anon.get(&format!("/v1/sessions/{id}/canvas.png")).0, 401);
    assert_eq!(auth.get(&format!("/v1/sessions/{id}/canvas.png")).0, 200);
}
