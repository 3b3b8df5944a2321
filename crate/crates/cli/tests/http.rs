use std::process::Command;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;
use weaveperf_cli::api::Resolver;
use weaveperf_cli::server;

mod common;

async fn call(method: &str, uri: &str, body: &str) -> (StatusCode, String) {
    let app = server::router(Resolver::default(), None);
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let res = app.oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn cli_json(args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_weaveperf")).args(args).args(["--format", "json"]).env_remove("WEAVEPERF_CATALOG_DIR").output().unwrap();
    String::from_utf8(o.stdout).unwrap()
}

#[tokio::test]
async fn endpoints_match_cli_bytes() {
    let cases: [(&str, &str, Vec<&str>); 5] = [
        ("analyze", r#"{"diagram":"attention","assume":["x>d"]}"#, vec!["analyze", "attention", "--assume", "x>d"]),
        ("optimize", r#"{"diagram":"matmul","memory":65536,"quant":2}"#, vec!["optimize", "matmul", "--memory", "65536", "--quant", "2"]),
        ("model", r#"{"diagram":"attention","catalog":"h800_cluster_like","cluster_n":[1,2]}"#, vec!["model", "attention", "--catalog", "h800_cluster_like", "--cluster-n", "1,2"]),
        (
            "plan",
            r#"{"diagram":"attention","catalog":"h100_sxm5_like","strategy":"inter","overheads":{"sfu":0.66}}"#,
            vec!["plan", "attention", "--catalog", "h100_sxm5_like", "--strategy", "inter", "--overheads", "sfu=0.66"],
        ),
        ("verify", r#"{"diagram":"gqa","trials":2,"seed":3}"#, vec!["verify", "gqa", "--trials", "2", "--seed", "3"]),
    ];
    for (cmd, body, args) in cases {
        let (status, text) = call("POST", &format!("/api/{cmd}"), body).await;
        assert_eq!(status, StatusCode::OK, "{cmd}: {text}");
        common::assert_valid(cmd, &text);
        assert_eq!(text, cli_json(&args), "{cmd}");
    }
}

#[tokio::test]
async fn catalogs_are_listed() {
    let (status, text) = call("GET", "/api/catalogs", "").await;
    assert_eq!(status, StatusCode::OK);
    common::assert_valid("catalogs", &text);
    assert!(text.contains("h100_sxm5_like") && text.contains("h800_cluster_like"));
}

#[tokio::test]
async fn errors_map_to_statuses() {
    for (body, status, kind) in [
        (r#"{"diagram":"attention","catalog":"h100_sxm5_like","config":"d=100"}"#, StatusCode::BAD_REQUEST, "validation"),
        (r#"{"diagram":"attention","catalog":"h100_sxm5_like","config":"s_x=1024"}"#, StatusCode::UNPROCESSABLE_ENTITY, "infeasible"),
        (r#"{"diagram":"attention","catalog":"missing"}"#, StatusCode::NOT_FOUND, "io"),
        (r#"{"diagram":"attention","bogus":1}"#, StatusCode::BAD_REQUEST, "validation"),
        ("not json", StatusCode::BAD_REQUEST, "validation"),
    ] {
        let (got, text) = call("POST", "/api/plan", body).await;
        assert_eq!(got, status, "{body}: {text}");
        common::assert_valid("error", &text);
        assert!(text.contains(&format!("\"{kind}\"")), "{text}");
    }
}

#[tokio::test]
async fn inline_objects_are_accepted() {
    let diagram = weaveperf::models::shipped_json("attention").unwrap();
    let catalog = weaveperf::hierarchy::shipped_json("h100_sxm5_like").unwrap();
    let body = format!(r#"{{"diagram":{diagram},"catalog":{catalog}}}"#);
    let (status, inline) = call("POST", "/api/plan", &body).await;
    assert_eq!(status, StatusCode::OK, "{inline}");
    let (_, named) = call("POST", "/api/plan", r#"{"diagram":"attention","catalog":"h100_sxm5_like"}"#).await;
    assert_eq!(inline, named);
}

#[test]
fn request_schema_accepts_examples() {
    for body in [
        r#"{"diagram":"attention","catalog":"h100_sxm5_like","config":"reference","strategy":"three","overheads":{"sfu":0.5}}"#,
        r#"{"diagram":"matmul","memory":65536,"quant":2,"partition":"idealized"}"#,
        r#"{}"#,
    ] {
        common::assert_valid("run_request", body);
        weaveperf_cli::api::RunRequest::from_json(body).unwrap();
    }
    let bad: serde_json::Value = serde_json::from_str(r#"{"memory":-1}"#).unwrap();
    assert!(!common::schema("run_request").is_valid(&bad));
}
