//! The labeling service.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine as _;
use featpipe_core::featurize::{Featurizer, UpsampleOptions};
use featpipe_core::geometry::TransformSet;
use featpipe_core::pipeline::FeatureSource;
use featpipe_core::pixelclf::{ClassicalRecipe, ClassifierKind, LabelMask, TrainConfig, DEFAULT_SCALES};
use featpipe_core::store::{conform, Conformed, RunLengthLabels, Session, SessionConfig, SessionStore, StoreError};
use featpipe_core::Image;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::config::ApiConfig;
use crate::error::{invalid, is_invalid};
use crate::work::{self, SmoothOptions, TrainItem};

const MAX_BODY: usize = 256 << 20;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }

    fn conflict(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, msg)
    }

    fn unprocessable(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.0.is_server_error() {
            log::error!("{}", self.1);
        }
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidName(_) | StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::DuplicateId(_) => StatusCode::CONFLICT,
            StoreError::PixelClf(featpipe_core::pixelclf::PixelClfError::RecipeMismatch { .. }) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        if let Some(api) = e.downcast_ref::<ApiError>() {
            return Self(api.0, api.1.clone());
        }
        if let Some(s) = e.downcast_ref::<StoreError>() {
            if matches!(s, StoreError::NotFound(_)) {
                return Self::not_found(s.to_string());
            }
        }
        let status = if is_invalid(&e) {
            StatusCode::UNPROCESSABLE_ENTITY
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        Self(status, format!("{e:#}"))
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.0, self.1)
    }
}

impl std::error::Error for ApiError {}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    #[default]
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct JobStatus {
    pub state: JobState,
    pub total: usize,
    pub done: usize,
    pub cache_hits: usize,
    pub error: Option<String>,
}

struct SessionSlot {
    session: Session,
    /// Serializes mutations of this session.
    lock: tokio::sync::Mutex<()>,
    job: Mutex<JobStatus>,
}

pub struct AppState {
    config: ApiConfig,
    store: SessionStore,
    backend: Arc<dyn Featurizer>,
    set: TransformSet,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    /// Bounds concurrent featurization across sessions.
    pool: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ApiConfig) -> anyhow::Result<Arc<Self>> {
        config.validate()?;
        let backend = crate::backend::build(&config.backend_spec(), &config.backend_params())?;
        let set = crate::backend::transform_set(&config.transform_set, backend.descriptor().stride)?;
        std::fs::create_dir_all(&config.session_root)?;
        Ok(Arc::new(Self {
            store: SessionStore::new(&config.session_root),
            pool: Arc::new(Semaphore::new(config.workers)),
            config,
            backend,
            set,
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    pub fn config(&self) -> &ApiConfig {
        &self.config
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        let mut map = self.sessions.lock().expect("sessions lock");
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let session = self.store.open(id)?;
        let slot = Arc::new(SessionSlot {
            session,
            lock: tokio::sync::Mutex::new(()),
            job: Mutex::new(JobStatus::default()),
        });
        map.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    fn conformed(&self, session: &Session, name: &str) -> anyhow::Result<Conformed> {
        let image = session.image(name)?;
        conform_for(self.backend.as_ref(), session, &image)
    }

    fn is_featurized(&self, session: &Session, name: &str) -> anyhow::Result<bool> {
        let c = self.conformed(session, name)?;
        Ok(session.cache().contains(&work::cache_key(&c.image, self.backend.as_ref(), &self.set)))
    }
}

fn conform_for(backend: &dyn Featurizer, session: &Session, image: &Image) -> anyhow::Result<Conformed> {
    conform(image, backend.descriptor(), session.config.target_size).map_err(|e| invalid(e.to_string()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id/images", post(upload_image))
        .route("/sessions/:id/featurize", post(start_featurize))
        .route("/sessions/:id/labels/:image", put(put_labels).get(get_labels))
        .route("/sessions/:id/train", post(train))
        .route("/sessions/:id/predictions/:image", get(get_prediction))
        .route("/sessions/:id/apply", post(apply))
        .route("/sessions/:id/status", get(status))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

pub async fn serve(config: ApiConfig) -> anyhow::Result<()> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Runs blocking work off the async runtime.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}")))?
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("request body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateSession {
    source: Option<FeatureSource>,
    classifier: Option<ClassifierKind>,
    target_size: Option<(usize, usize)>,
    sigmas: Option<Vec<f64>>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req: CreateSession = parse_json(&body)?;
    let cfg = &state.config;
    let classical = ClassicalRecipe::standard(req.sigmas.as_deref().unwrap_or(&DEFAULT_SCALES))
        .map_err(|e| ApiError::unprocessable(format!("sigmas: {e}")))?;
    let target_size = req.target_size.or(cfg.target_size);
    if let Some((h, w)) = target_size {
        let m = state.backend.descriptor().input_multiple.max(1) as usize;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ApiError::unprocessable(format!("target_size: {h}x{w} is not a positive multiple of {m}")));
        }
    }
    let train = match req.classifier.unwrap_or(cfg.classifier) {
        ClassifierKind::Logistic => TrainConfig::logistic(),
        ClassifierKind::RandomForest => TrainConfig::random_forest(),
    };
    let config = SessionConfig {
        backend: cfg.backend.clone(),
        descriptor: state.backend.descriptor().clone(),
        transform_set: state.set.doc().clone(),
        source: req.source.unwrap_or(cfg.feature_source),
        classical,
        train,
        target_size,
    };
    let store = state.store.clone();
    let session = blocking(move || Ok(store.create(config)?)).await?;
    log::info!("created session {}", session.id);
    Ok((StatusCode::CREATED, Json(json!({ "id": session.id, "config": session.config }))))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<String>>> {
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.list()?)).await?))
}

#[derive(Debug, Deserialize)]
struct NameQuery {
    name: Option<String>,
}

async fn upload_image(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<NameQuery>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let slot = state.slot(&id)?;
    let name = q.name.ok_or_else(|| ApiError::unprocessable("missing ?name= for the image"))?;
    let _guard = slot.lock.lock().await;
    let s = slot.clone();
    let img = blocking(move || {
        if s.session.image_names()?.contains(&name) {
            return Err(ApiError::conflict(format!("image {name} already exists")));
        }
        work::decode_image(&body)?;
        let img = s.session.add_image(&name, &body)?;
        Ok(json!({ "name": name, "height": img.height(), "width": img.width() }))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(img)))
}

async fn start_featurize(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let slot = state.slot(&id)?;
    let names = {
        let _guard = slot.lock.lock().await;
        let mut job = slot.job.lock().expect("job lock");
        if job.state == JobState::Running {
            return Ok((StatusCode::ACCEPTED, Json(job.clone())));
        }
        let names = slot.session.image_names()?;
        *job = JobStatus {
            state: JobState::Running,
            total: names.len(),
            ..Default::default()
        };
        names
    };
    let snapshot = slot.job.lock().expect("job lock").clone();
    tokio::spawn(run_featurize(state.clone(), slot, names));
    Ok((StatusCode::ACCEPTED, Json(snapshot)))
}

async fn run_featurize(state: Arc<AppState>, slot: Arc<SessionSlot>, names: Vec<String>) {
    let deep = work::needs_deep(slot.session.config.source);
    for name in names {
        let result = if deep {
            let permit = state.pool.clone().acquire_owned().await.expect("pool open");
            let (st, sl, n) = (state.clone(), slot.clone(), name.clone());
            let r = tokio::task::spawn_blocking(move || -> anyhow::Result<bool> {
                let image = sl.session.image(&n)?;
                let opts = UpsampleOptions {
                    image_id: Some(n.clone()),
                    ..Default::default()
                };
                let f = work::featurize(
                    st.backend.as_ref(),
                    &st.set,
                    &image,
                    sl.session.config.target_size,
                    Some(sl.session.cache()),
                    &opts,
                )?;
                Ok(f.cache_hit)
            })
            .await;
            drop(permit);
            r.map_err(|e| anyhow::anyhow!("worker panicked: {e}")).and_then(|r| r)
        } else {
            Ok(false)
        };
        let mut job = slot.job.lock().expect("job lock");
        match result {
            Ok(hit) => {
                job.done += 1;
                job.cache_hits += hit as usize;
            }
            Err(e) => {
                log::error!("featurizing {name} in session {}: {e:#}", slot.session.id);
                job.state = JobState::Failed;
                job.error = Some(format!("{name}: {e:#}"));
                return;
            }
        }
    }
    slot.job.lock().expect("job lock").state = JobState::Done;
    log::info!("session {} featurized", slot.session.id);
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct LabelsQuery {
    /// `merge` (default) paints over existing labels; `replace` discards them.
    mode: Option<String>,
    /// `png` (default) or `rle` for downloads.
    format: Option<String>,
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

async fn put_labels(
    State(state): State<Arc<AppState>>,
    Path((id, image)): Path<(String, String)>,
    Query(q): Query<LabelsQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let slot = state.slot(&id)?;
    let replace = match q.mode.as_deref() {
        None | Some("merge") => false,
        Some("replace") => true,
        Some(m) => return Err(ApiError::unprocessable(format!("mode {m:?}: use merge or replace"))),
    };
    let json_body = is_json(&headers) || body.first() == Some(&b'{');
    let _guard = slot.lock.lock().await;
    let s = slot.clone();
    blocking(move || {
        let img = s.session.image(&image)?;
        let (h, w) = (img.height(), img.width());
        let mut labels = match s.session.labels(&image)? {
            Some(existing) if !replace => existing,
            _ => LabelMask::unlabeled(h, w),
        };
        if json_body {
            let rle: RunLengthLabels =
                serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("run-length labels: {e}")))?;
            rle.paint(&mut labels).map_err(|e| ApiError::unprocessable(e.to_string()))?;
        } else {
            let patch = LabelMask::from_png(&body).map_err(|e| ApiError::unprocessable(format!("label PNG: {e}")))?;
            if (patch.height, patch.width) != (h, w) {
                return Err(ApiError::unprocessable(format!(
                    "labels are {}x{}, image {image} is {h}x{w}",
                    patch.height, patch.width
                )));
            }
            labels
                .paint_over(&patch)
                .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        }
        s.session.save_labels(&image, &labels)?;
        Ok(Json(json!({
            "image": image,
            "classes": labels.classes(),
            "labeled_pixels": labels.labeled_count(),
        })))
    })
    .await
}

async fn get_labels(
    State(state): State<Arc<AppState>>,
    Path((id, image)): Path<(String, String)>,
    Query(q): Query<LabelsQuery>,
) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    let labels = blocking(move || {
        slot.session.image(&image)?;
        slot.session
            .labels(&image)?
            .ok_or_else(|| ApiError::not_found(format!("no labels for image {image}")))
    })
    .await?;
    Ok(match q.format.as_deref() {
        Some("rle") => Json(RunLengthLabels::encode(&labels)).into_response(),
        None | Some("png") => {
            let png = labels
                .to_png()
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            ([(header::CONTENT_TYPE, "image/png")], png).into_response()
        }
        Some(f) => return Err(ApiError::unprocessable(format!("format {f:?}: use png or rle"))),
    })
}

/// Pixel features for one session image, reading deep features from the
/// cache. A cache miss is a conflict: featurize first.
fn session_features(
    state: &AppState,
    session: &Session,
    name: &str,
) -> ApiResult<(Conformed, featpipe_core::pixelclf::PixelFeatures)> {
    let c = state.conformed(session, name)?;
    let deep = if work::needs_deep(session.config.source) {
        let key = work::cache_key(&c.image, state.backend.as_ref(), &state.set);
        match session.cache().lookup(&key)? {
            Some((f, _)) => Some(f),
            None => return Err(ApiError::conflict(format!("image {name} is not featurized"))),
        }
    } else {
        None
    };
    let f = work::features_for(session.config.source, &c.image, deep.as_ref(), &session.config.classical)?;
    Ok((c, f))
}

fn check_featurized(state: &AppState, slot: &SessionSlot, names: &[String]) -> ApiResult<()> {
    if !work::needs_deep(slot.session.config.source) {
        return Ok(());
    }
    if slot.job.lock().expect("job lock").state == JobState::Running {
        return Err(ApiError::conflict("featurization is still running"));
    }
    for n in names {
        if !state.is_featurized(&slot.session, n)? {
            return Err(ApiError::conflict(format!("image {n} is not featurized; POST /featurize first")));
        }
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRequest {
    classifier: Option<ClassifierKind>,
}

async fn train(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: TrainRequest = parse_json(&body)?;
    let slot = state.slot(&id)?;
    let _guard = slot.lock.lock().await;
    let (st, s) = (state.clone(), slot.clone());
    blocking(move || {
        let session = &s.session;
        let labeled = session.labeled_images()?;
        if labeled.is_empty() {
            return Err(ApiError::unprocessable("no labels uploaded"));
        }
        check_featurized(&st, &s, &labeled)?;
        let start = std::time::Instant::now();
        let mut prepared = Vec::with_capacity(labeled.len());
        for name in &labeled {
            let (c, f) = session_features(&st, session, name)?;
            let labels = session.labels(name)?.expect("listed as labeled");
            prepared.push((c, f, labels));
        }
        let featurize_ms = start.elapsed().as_secs_f64() * 1e3;
        let items: Vec<TrainItem> = prepared
            .iter()
            .map(|(c, f, l)| TrainItem {
                conformed: c,
                features: f.clone(),
                labels: l,
            })
            .collect();
        let mut config = session.config.train.clone();
        if let Some(k) = req.classifier {
            config.kind = k;
        }
        let clf = work::train_on(&items, &config)?;
        let fit_ms = start.elapsed().as_secs_f64() * 1e3 - featurize_ms;
        let version = session.save_classifier(&clf)?;
        for ((c, f, _), name) in prepared.iter().zip(&labeled) {
            let pred = work::apply_classifier(&clf, c, f, SmoothOptions::default())?;
            session.save_prediction(name, &pred)?;
        }
        log::info!(
            "session {} trained version {version} on {} images (features {featurize_ms:.1} ms, fit {fit_ms:.1} ms)",
            session.id,
            labeled.len()
        );
        Ok(Json(json!({
            "version": version,
            "classes": clf.classes,
            "kind": clf.kind,
            "predicted": labeled,
            "features_ms": featurize_ms,
            "fit_ms": fit_ms,
        })))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct PredictionQuery {
    probabilities: bool,
}

async fn get_prediction(
    State(state): State<Arc<AppState>>,
    Path((id, image)): Path<(String, String)>,
    Query(q): Query<PredictionQuery>,
) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    let found = blocking(move || {
        slot.session.image(&image)?;
        slot.session
            .prediction(&image, q.probabilities)?
            .ok_or_else(|| ApiError::not_found(format!("no prediction for image {image}; train or apply first")))
    })
    .await?;
    Ok(match found {
        (png, Some(probs)) => {
            let b64 = base64::engine::general_purpose::STANDARD;
            Json(json!({
                "labels_png": b64.encode(png),
                "probabilities_fmap": b64.encode(probs),
            }))
            .into_response()
        }
        (png, None) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ApplyRequest {
    version: Option<u32>,
    smooth_radius: usize,
    smooth_iterations: usize,
}

async fn apply(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: ApplyRequest = parse_json(&body)?;
    let slot = state.slot(&id)?;
    let _guard = slot.lock.lock().await;
    let (st, s) = (state.clone(), slot.clone());
    blocking(move || {
        let session = &s.session;
        let version = match req.version {
            Some(v) => v,
            None => *session
                .classifier_versions()?
                .last()
                .ok_or_else(|| ApiError::conflict("no classifier yet; train first"))?,
        };
        let clf = session.classifier(version)?;
        let names = session.image_names()?;
        check_featurized(&st, &s, &names)?;
        let smoothing = SmoothOptions {
            radius: req.smooth_radius,
            iterations: req.smooth_iterations,
        };
        for name in &names {
            let (c, f) = session_features(&st, session, name)?;
            let pred = work::apply_classifier(&clf, &c, &f, smoothing)?;
            session.save_prediction(name, &pred)?;
        }
        Ok(Json(json!({ "version": version, "images": names })))
    })
    .await
}

async fn status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let slot = state.slot(&id)?;
    let st = state.clone();
    blocking(move || {
        let session = &slot.session;
        let names = session.image_names()?;
        let mut featurized = 0;
        if work::needs_deep(session.config.source) {
            for n in &names {
                featurized += st.is_featurized(session, n)? as usize;
            }
        } else {
            featurized = names.len();
        }
        let job = slot.job.lock().expect("job lock").clone();
        Ok(Json(json!({
            "id": session.id,
            "images": names.len(),
            "image_names": names,
            "labeled": session.labeled_images()?.len(),
            "featurized": featurized,
            "featurize": job,
            "classifier_versions": session.classifier_versions()?,
            "config": session.config,
        })))
    })
    .await
}
