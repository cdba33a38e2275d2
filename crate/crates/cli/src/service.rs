//! HTTP inference service: a frozen generator behind `/synthesize`, `/info`
//! and `/health`.

use std::future::Future;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pgsgan_core::checkpoint;
use pgsgan_core::image::{decode_rgb_png, encode_gray_png};
use pgsgan_core::trainer::to_unit;
use pgsgan_core::{CompositeLabel, Generator, Module, Tensor4};
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_PORT: u16 = 8750;
pub const LABEL_FORMAT: &str = "rgb-png ovary/follicle/sketch";
pub const SYNTH_MILLIS: &str = "x-synth-millis";
pub const THREADS_ENV: &str = "PGSGAN_THREADS";

/// A loaded generator. Never mutated after construction.
#[derive(Debug)]
pub struct ModelHandle {
    pub generator: Generator,
    pub resolution: usize,
    pub phase: u8,
    pub architecture_hash: u64,
    pub checkpoint_path: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Info {
    pub resolution: usize,
    pub phase: u8,
    pub architecture_hash: String,
    pub checkpoint_path: String,
    pub label_format: String,
}

/// Why a synthesis request was refused.
#[derive(Debug)]
pub enum SynthError {
    Decode(String),
    Size { expected: [usize; 2], got: [usize; 2] },
    Internal(String),
}

impl ModelHandle {
    pub fn load(path: &Path) -> pgsgan_core::Result<Self> {
        let snap = checkpoint::load(path)?;
        Ok(Self {
            resolution: snap.generator.resolution(),
            phase: snap.meta.phase,
            architecture_hash: snap.architecture_hash,
            checkpoint_path: path.display().to_string(),
            config: snap.meta.config,
            generator: snap.generator,
        })
    }

    pub fn info(&self) -> Info {
        Info {
            resolution: self.resolution,
            phase: self.phase,
            architecture_hash: format!("{:016x}", self.architecture_hash),
            checkpoint_path: self.checkpoint_path.clone(),
            label_format: LABEL_FORMAT.into(),
        }
    }

    /// Decodes a label PNG, clears sketch under the masks, runs the
    /// generator and returns a grayscale PNG.
    pub fn synthesize_png(&self, body: &[u8]) -> Result<Vec<u8>, SynthError> {
        let raw = decode_rgb_png(body).map_err(|e| SynthError::Decode(e.to_string()))?;
        let got = [raw.height, raw.width];
        let expected = [self.resolution, self.resolution];
        if got != expected {
            return Err(SynthError::Size { expected, got });
        }
        let label = CompositeLabel::sanitize(raw).map_err(|e| SynthError::Decode(e.to_string()))?;
        let x = Tensor4::from_images(&[&label.channels]).map_err(|e| SynthError::Internal(e.to_string()))?;
        let y = self.generator.infer(&x).map_err(|e| SynthError::Internal(e.to_string()))?;
        encode_gray_png(&to_unit(&y.to_image(0))).map_err(|e| SynthError::Internal(e.to_string()))
    }
}

/// Shared service state. The model slot is filled once, possibly after the
/// listener is already up.
#[derive(Clone)]
pub struct AppState {
    model: Arc<OnceLock<Arc<ModelHandle>>>,
    permits: Arc<Semaphore>,
    in_flight: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    served: Arc<AtomicUsize>,
}

impl AppState {
    /// At most `threads` syntheses run at once; the rest wait in arrival order.
    pub fn new(threads: usize) -> Self {
        Self {
            model: Arc::new(OnceLock::new()),
            permits: Arc::new(Semaphore::new(threads.max(1))),
            in_flight: Arc::new(AtomicUsize::new(0)),
            peak: Arc::new(AtomicUsize::new(0)),
            served: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn with_model(threads: usize, model: ModelHandle) -> Self {
        let s = Self::new(threads);
        s.install(model);
        s
    }

    /// Installs the model. A second call is ignored.
    pub fn install(&self, model: ModelHandle) {
        let _ = self.model.set(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<ModelHandle>> {
        self.model.get().cloned()
    }

    /// Highest number of syntheses observed running at the same time.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Number of completed syntheses.
    pub fn served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }
}

/// Worker count from `PGSGAN_THREADS`, or the number of cores when unset.
pub fn threads_from_env() -> Result<usize, String> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn error(status: StatusCode, body: serde_json::Value) -> Response {
    (status, Json(body)).into_response()
}

fn not_loaded() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, json!({"error": "model not loaded"}))
}

async fn health() -> &'static str {
    "ok"
}

async fn info(State(state): State<AppState>) -> Response {
    match state.model() {
        Some(m) => Json(m.info()).into_response(),
        None => not_loaded(),
    }
}

async fn synthesize(State(state): State<AppState>, body: Bytes) -> Response {
    let start = Instant::now();
    let Some(model) = state.model() else {
        return not_loaded();
    };
    let Ok(_permit) = state.permits.clone().acquire_owned().await else {
        return not_loaded();
    };
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.peak.fetch_max(now, Ordering::SeqCst);
    let result = tokio::task::spawn_blocking(move || model.synthesize_png(&body)).await;
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    let result = result.unwrap_or_else(|e| Err(SynthError::Internal(e.to_string())));
    match result {
        Ok(png) => {
            state.served.fetch_add(1, Ordering::SeqCst);
            let millis = start.elapsed().as_millis().to_string();
            (
                StatusCode::OK,
                [
                    (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
                    (
                        header::HeaderName::from_static(SYNTH_MILLIS),
                        HeaderValue::from_str(&millis).expect("digits"),
                    ),
                ],
                png,
            )
                .into_response()
        }
        Err(SynthError::Size { expected, got }) => error(
            StatusCode::BAD_REQUEST,
            json!({
                "error": format!("label is {}x{}, model expects {}x{}", got[0], got[1], expected[0], expected[1]),
                "expected": expected,
                "got": got,
            }),
        ),
        Err(SynthError::Decode(msg)) => error(
            StatusCode::BAD_REQUEST,
            json!({"error": format!("cannot decode label: {msg}")}),
        ),
        Err(SynthError::Internal(msg)) => error(StatusCode::INTERNAL_SERVER_ERROR, json!({"error": msg})),
    }
}

/// Routes plus an optional CORS layer for `allow_origin` (`*` allows any).
pub fn router(state: AppState, allow_origin: Option<&str>) -> Result<Router, String> {
    let app = Router::new()
        .route("/synthesize", post(synthesize))
        .route("/info", get(info))
        .route("/health", get(health))
        .with_state(state);
    let Some(origin) = allow_origin else {
        return Ok(app);
    };
    let allow = if origin == "*" {
        AllowOrigin::any()
    } else {
        AllowOrigin::exact(HeaderValue::from_str(origin).map_err(|e| format!("--allow-origin {origin:?}: {e}"))?)
    };
    let cors = CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([header::HeaderName::from_static(SYNTH_MILLIS)]);
    Ok(app.layer(cors))
}

/// Serves until `shutdown` resolves, then stops accepting and drains.
pub async fn run(listener: TcpListener, app: Router, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Resolves on SIGTERM or Ctrl-C.
pub async fn termination() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}
