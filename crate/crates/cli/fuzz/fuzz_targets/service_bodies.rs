#![no_main]

use std::sync::OnceLock;

use alae_cli::server::{router, AppState};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use libfuzzer_sys::fuzz_target;
use staged_alae::alae::Alae;
use staged_alae::autoencoder::{Autoencoder, StageSchedule};
use tower::ServiceExt;

const ROUTES: [(&str, &str); 5] = [
    ("POST", "/encode"),
    ("POST", "/decode"),
    ("POST", "/edit"),
    ("POST", "/interpolate"),
    ("GET", "/sample"),
];

fn app() -> &'static (tokio::runtime::Runtime, Router) {
    static APP: OnceLock<(tokio::runtime::Runtime, Router)> = OnceLock::new();
    APP.get_or_init(|| {
        let ae = Autoencoder::new(StageSchedule::custom(16, 4, &[4]).unwrap(), 1);
        let state = AppState {
            model: Alae::from_autoencoder(ae, 8, 2),
            concepts: Vec::new(),
            checkpoint: "fuzz".into(),
        };
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        (rt, router(state, None))
    })
}

// byte 0 picks the route; for /sample the rest is the query string
fuzz_target!(|data: &[u8]| {
    let Some((&pick, body)) = data.split_first() else { return };
    let (method, path) = ROUTES[pick as usize % ROUTES.len()];
    let uri = if path == "/sample" {
        let query: String = String::from_utf8_lossy(body)
            .chars()
            .filter(|c| c.is_ascii_graphic() && *c != '#')
            .collect();
        format!("{path}?{query}")
    } else {
        path.to_string()
    };
    let Ok(req) = Request::builder().method(method).uri(uri).body(Body::from(body.to_vec())) else { return };
    let (rt, app) = app();
    let status = rt.block_on(app.clone().oneshot(req)).unwrap().status();
    assert!(
        [StatusCode::OK, StatusCode::BAD_REQUEST, StatusCode::NOT_FOUND].contains(&status),
        "{status}"
    );
});
