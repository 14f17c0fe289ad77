//! HTTP endpoints over a loaded [`Store`].
//!
//! `GET /attributes`, `GET /embeddings/{attr}`, `GET /projection/{attr}`
//! and `GET /metadata/{attr}`. Sampling is seeded by a hash of the request
//! parameters, so identical requests return identical payloads.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method};
use axum::routing::get;
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::pca::project_pca;
use crate::store::{Store, Table};
use crate::SvcError;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Largest number of rows any response may carry.
    pub max_points: usize,
    /// Origin allowed by CORS; `None` allows any.
    pub allowed_origin: Option<String>,
    /// Directory served under `/ui`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_points: 5000,
            allowed_origin: None,
            static_dir: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(store: Store, config: ServiceConfig) -> Self {
        AppState {
            store: Arc::new(store),
            config: Arc::new(config),
        }
    }

    fn table(&self, attr: &str) -> Result<&Table, SvcError> {
        self.store
            .tables
            .get(attr)
            .ok_or_else(|| SvcError::UnknownAttribute(attr.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    let origin = match &state.config.allowed_origin {
        Some(o) => HeaderValue::from_str(o).map(AllowOrigin::exact).unwrap_or_else(|_| AllowOrigin::any()),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods([Method::GET]);
    let mut app = Router::new()
        .route("/attributes", get(attributes))
        .route("/embeddings/{attr}", get(embeddings))
        .route("/projection/{attr}", get(projection))
        .route("/metadata/{attr}", get(metadata));
    if let Some(dir) = &state.config.static_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.fallback(not_found).layer(cors).with_state(state)
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn not_found() -> SvcError {
    SvcError::UnknownAttribute("no such route".into())
}

async fn attributes(State(st): State<AppState>) -> Json<Value> {
    let list: Vec<Value> = st
        .store
        .tables
        .values()
        .map(|t| {
            json!({
                "name": t.attribute,
                "rows": t.rows(),
                "dim": t.dim(),
                "metadata_keys": t.metadata.keys().collect::<Vec<_>>(),
            })
        })
        .collect();
    Json(json!({ "attributes": list }))
}

/// Deterministic seed for a canonical description of a request.
pub fn sample_seed(parts: &[(&str, String)]) -> u64 {
    let mut h = Sha256::new();
    for (k, v) in parts {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"&");
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn uniform_sample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SampleQuery {
    pub sample: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

async fn embeddings(
    State(st): State<AppState>,
    Path(attr): Path<String>,
    Query(q): Query<SampleQuery>,
) -> Result<Json<Value>, SvcError> {
    let t = st.table(&attr)?;
    let k = q.sample.unwrap_or(t.rows()).min(t.rows());
    if k > st.config.max_points {
        return Err(SvcError::BadRequest(format!(
            "{k} rows exceed the cap of {}; pass a smaller `sample`",
            st.config.max_points
        )));
    }
    let seed = sample_seed(&[("attr", attr.clone()), ("sample", opt(&q.sample)), ("seed", q.seed.to_string())]);
    let idx = if k == t.rows() { (0..k).collect() } else { uniform_sample(t.rows(), k, seed) };
    let rows: Vec<Value> = idx
        .iter()
        .map(|&i| json!({ "index": i, "token": t.tokens[i], "vector": t.vectors.row(i) }))
        .collect();
    Ok(Json(json!({ "attribute": attr, "dim": t.dim(), "rows": rows })))
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct ProjectionQuery {
    pub method: Option<String>,
    pub dims: Option<usize>,
    pub color_by: Option<String>,
    /// Metadata key defining sampling groups; defaults to `color_by`.
    pub group_by: Option<String>,
    pub per_group: Option<usize>,
    /// Number of most populous groups sampled when `per_group` is set.
    pub groups: Option<usize>,
    /// Uniform sample size when `per_group` is absent.
    pub sample: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn metadata_column<'a>(t: &'a Table, key: &str) -> Result<&'a [String], SvcError> {
    t.metadata.get(key).map(Vec::as_slice).ok_or_else(|| SvcError::UnknownMetadataKey {
        attribute: t.attribute.clone(),
        key: key.to_string(),
    })
}

/// Rows chosen by a projection request, in output order.
pub fn select_rows(t: &Table, q: &ProjectionQuery, cap: usize) -> Result<Vec<usize>, SvcError> {
    let seed = sample_seed(&[
        ("attr", t.attribute.clone()),
        ("group_by", opt(&q.group_by.as_ref().or(q.color_by.as_ref()))),
        ("per_group", opt(&q.per_group)),
        ("groups", opt(&q.groups)),
        ("sample", opt(&q.sample)),
        ("seed", q.seed.to_string()),
    ]);
    let rows = if let Some(per) = q.per_group {
        let key = q
            .group_by
            .as_ref()
            .or(q.color_by.as_ref())
            .ok_or_else(|| SvcError::BadRequest("`per_group` needs `group_by` or `color_by`".into()))?;
        let col = metadata_column(t, key)?;
        let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, v) in col.iter().enumerate() {
            members.entry(v).or_default().push(i);
        }
        let mut ranked: Vec<(&str, Vec<usize>)> = members.into_iter().collect();
        ranked.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
        ranked.truncate(q.groups.unwrap_or(10));
        let total: usize = ranked.iter().map(|(_, m)| per.min(m.len())).sum();
        if total > cap {
            return Err(SvcError::BadRequest(format!("{total} points exceed the cap of {cap}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(total);
        for (_, mut m) in ranked {
            m.shuffle(&mut rng);
            m.truncate(per);
            m.sort_unstable();
            out.extend(m);
        }
        out
    } else {
        let k = q.sample.unwrap_or(t.rows()).min(t.rows());
        if k > cap {
            return Err(SvcError::BadRequest(format!(
                "{k} points exceed the cap of {cap}; pass `sample` or `per_group`"
            )));
        }
        if k == t.rows() {
            (0..k).collect()
        } else {
            uniform_sample(t.rows(), k, seed)
        }
    };
    Ok(rows)
}

async fn projection(
    State(st): State<AppState>,
    Path(attr): Path<String>,
    Query(q): Query<ProjectionQuery>,
) -> Result<Json<Value>, SvcError> {
    let t = st.table(&attr)?;
    let method = q.method.clone().unwrap_or_else(|| "pca".into());
    if method != "pca" {
        return Err(SvcError::BadRequest(format!("unsupported method `{method}`; available: pca")));
    }
    let dims = q.dims.unwrap_or(2);
    if !(dims == 2 || dims == 3) {
        return Err(SvcError::BadRequest(format!("dims must be 2 or 3, got {dims}")));
    }
    let colors = q.color_by.as_deref().map(|k| metadata_column(t, k)).transpose()?;
    let rows = select_rows(t, &q, st.config.max_points)?;
    let x: Vec<Vec<f64>> = rows.iter().map(|&i| t.row_f64(i)).collect();
    let p = project_pca(&x, dims)?;
    let mut groups: Vec<&str> = Vec::new();
    let points: Vec<Value> = rows
        .iter()
        .zip(&p.coords)
        .map(|(&i, c)| {
            let group = colors.map(|col| col[i].as_str());
            if let Some(g) = group {
                if !groups.contains(&g) {
                    groups.push(g);
                }
            }
            json!({ "index": i, "token": t.tokens[i], "coords": c, "group": group })
        })
        .collect();
    Ok(Json(json!({
        "attribute": attr,
        "method": method,
        "dims": dims,
        "color_by": q.color_by,
        "explained_variance_ratio": p.explained_variance_ratio,
        "groups": groups,
        "points": points,
    })))
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct MetadataQuery {
    pub key: Option<String>,
}

async fn metadata(
    State(st): State<AppState>,
    Path(attr): Path<String>,
    Query(q): Query<MetadataQuery>,
) -> Result<Json<Value>, SvcError> {
    let t = st.table(&attr)?;
    let values: BTreeMap<&str, &[String]> = match &q.key {
        Some(k) => [(k.as_str(), metadata_column(t, k)?)].into_iter().collect(),
        None => t.metadata.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect(),
    };
    Ok(Json(json!({
        "attribute": attr,
        "tokens": t.tokens,
        "keys": t.metadata.keys().collect::<Vec<_>>(),
        "values": values,
    })))
}
