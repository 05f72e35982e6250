//! Request bodies and their conversion into engine inputs.

use std::collections::BTreeMap;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::Engine as _;
use dlsteer_core::engine::RunConfig;
use dlsteer_core::io::decode_ct2;
use dlsteer_core::ops::{make_phantom, Measurement, Observation, OperatorSpec, PhantomKind};
use dlsteer_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};

/// JSON error body: `{"error": message, "key": offending key or null}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub key: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), key: None }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn keyed(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: Some(key.into()), ..Self::bad_request(message) }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    /// Engine errors from request data. Config errors keep their key.
    pub fn from_engine(err: Error, fallback_key: &str) -> Self {
        let key = err.config_key().unwrap_or(fallback_key).to_string();
        Self::keyed(key, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "key": self.key }))).into_response()
    }
}

/// `POST /api/jobs` body. Exactly one of `case` and `upload`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    /// Dotted run-config keys; values may be strings, numbers or null
    /// (`null` means `none`).
    #[serde(default)]
    pub config: BTreeMap<String, Value>,
    #[serde(default)]
    pub case: Option<CaseSpec>,
    #[serde(default)]
    pub upload: Option<UploadSpec>,
    #[serde(default)]
    pub min_step_millis: Option<u64>,
}

/// A phantom degraded by `operator`, with operator seed `seed`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    #[serde(default = "default_phantom")]
    pub phantom: PhantomKind,
    #[serde(default = "default_size")]
    pub size: usize,
    pub operator: OperatorSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_phantom() -> PhantomKind {
    PhantomKind::SheppLogan
}

fn default_size() -> usize {
    64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UploadRole {
    /// Clean image, degraded by the operator; metrics are available.
    #[default]
    GroundTruth,
    /// Already-measured data for an operator with a real codomain.
    Measured,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UploadSpec {
    /// Base64 of a `.ct2` file.
    pub ct2_base64: String,
    #[serde(default)]
    pub role: UploadRole,
    pub operator: OperatorSpec,
    #[serde(default)]
    pub seed: u64,
}

fn value_text(key: &str, v: &Value) -> Result<String, ApiError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Null => Ok("none".into()),
        other => Err(ApiError::keyed(key, format!("expected a string or number, got {other}"))),
    }
}

impl JobRequest {
    pub fn parse(body: &[u8]) -> Result<Self, ApiError> {
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid job body: {e}")))
    }

    pub fn run_config(&self) -> Result<RunConfig, ApiError> {
        let mut cfg = RunConfig::default();
        for (key, value) in &self.config {
            cfg.set(key, &value_text(key, value)?)
                .map_err(|e| ApiError::from_engine(e, key))?;
        }
        cfg.validate().map_err(|e| ApiError::from_engine(e, "config"))?;
        Ok(cfg)
    }

    pub fn observation(&self) -> Result<Observation, ApiError> {
        match (&self.case, &self.upload) {
            (Some(c), None) => {
                let gt = make_phantom(c.phantom, c.size).map_err(|e| ApiError::from_engine(e, "case.size"))?;
                let op = c
                    .operator
                    .with_seed(c.seed)
                    .build(c.size, c.size)
                    .map_err(|e| ApiError::from_engine(e, "case.operator"))?;
                op.degrade(&gt).map_err(|e| ApiError::from_engine(e, "case.operator"))
            }
            (None, Some(u)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(u.ct2_base64.trim())
                    .map_err(|e| ApiError::keyed("upload.ct2_base64", format!("invalid base64: {e}")))?;
                let image = decode_ct2(&bytes).map_err(|e| ApiError::from_engine(e, "upload.ct2_base64"))?;
                let (h, w) = image.shape();
                let op = u
                    .operator
                    .with_seed(u.seed)
                    .build(h, w)
                    .map_err(|e| ApiError::from_engine(e, "upload.operator"))?;
                match u.role {
                    UploadRole::GroundTruth => op.degrade(&image).map_err(|e| ApiError::from_engine(e, "upload.operator")),
                    UploadRole::Measured => Observation::new(Measurement::Real(image), op, None)
                        .map_err(|e| ApiError::from_engine(e, "upload.role")),
                }
            }
            (Some(_), Some(_)) => Err(ApiError::keyed("case", "give either case or upload, not both")),
            (None, None) => Err(ApiError::keyed("case", "a case or an upload is required")),
        }
    }
}

/// `POST /api/jobs/{id}/control` body.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlRequest {
    #[serde(default)]
    pub new_lambda: Option<f64>,
    #[serde(default)]
    pub action: Option<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Pause,
    Resume,
    Finalize,
}

impl ControlRequest {
    pub fn parse(body: &[u8]) -> Result<Self, ApiError> {
        let req: Self =
            serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid control body: {e}")))?;
        if let Some(l) = req.new_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(ApiError::keyed("new_lambda", format!("must lie in [0, 1], got {l}")));
            }
        }
        if req.new_lambda.is_none() && req.action.is_none() {
            return Err(ApiError::bad_request("nothing to do: give new_lambda and/or action"));
        }
        Ok(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(body: Value) -> Result<JobRequest, ApiError> {
        JobRequest::parse(body.to_string().as_bytes())
    }

    #[test]
    fn config_values_map_to_keys() {
        let r = req(json!({
            "config": {"mode_preset": "balanced", "steps": 12, "controller.alpha_fixed": null, "fidelity.eta": 0.1},
            "case": {"operator": {"kind": "identity-plus-noise", "noise_sigma": 0.1}}
        }))
        .unwrap();
        let cfg = r.run_config().unwrap();
        assert_eq!(cfg.steps, 12);
        assert_eq!(cfg.fidelity.eta.to_bits(), 0.1f64.to_bits());
        assert_eq!(cfg.controller.alpha_fixed, None);
    }

    #[test]
    fn range_errors_name_the_key() {
        let r = req(json!({"config": {"controller.lambda": 1.5}})).unwrap();
        let e = r.run_config().unwrap_err();
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
        assert_eq!(e.key.as_deref(), Some("controller.lambda"));
        let e = req(json!({"config": {"bogus.key": 1}})).unwrap().run_config().unwrap_err();
        assert_eq!(e.key.as_deref(), Some("bogus.key"));
        let e = req(json!({"config": {"steps": true}})).unwrap().run_config().unwrap_err();
        assert_eq!(e.key.as_deref(), Some("steps"));
    }

    #[test]
    fn input_source_is_required_and_exclusive() {
        assert_eq!(req(json!({})).unwrap().observation().unwrap_err().key.as_deref(), Some("case"));
        let op = json!({"kind": "identity-plus-noise"});
        let both = req(json!({"case": {"operator": op}, "upload": {"ct2_base64": "", "operator": op}})).unwrap();
        assert!(both.observation().is_err());
        assert!(req(json!({"surprise": 1})).is_err());
    }

    #[test]
    fn uploads_decode() {
        let x = make_phantom(PhantomKind::Disks, 16).unwrap();
        let b64 = base64::engine::general_purpose::STANDARD.encode(dlsteer_core::io::encode_ct2(&x));
        let op = json!({"kind": "identity-plus-noise"});
        let obs = req(json!({"upload": {"ct2_base64": b64, "operator": op}})).unwrap().observation().unwrap();
        assert_eq!(obs.ground_truth.as_ref(), Some(&x));
        let obs = req(json!({"upload": {"ct2_base64": b64, "role": "measured", "operator": op}}))
            .unwrap()
            .observation()
            .unwrap();
        assert_eq!(obs.backprojection().unwrap(), x);
        assert!(obs.ground_truth.is_none());
        let freq = json!({"kind": "frequency-mask", "mask": {"kind": "box", "keep_fraction": 0.5}});
        let e = req(json!({"upload": {"ct2_base64": b64, "role": "measured", "operator": freq}}))
            .unwrap()
            .observation()
            .unwrap_err();
        assert_eq!(e.key.as_deref(), Some("upload.role"));
    }

    #[test]
    fn control_validation() {
        let parse = |v: Value| ControlRequest::parse(v.to_string().as_bytes());
        assert_eq!(parse(json!({"new_lambda": 1.5})).unwrap_err().key.as_deref(), Some("new_lambda"));
        assert!(parse(json!({})).is_err());
        assert!(parse(json!({"action": "rewind"})).is_err());
        let ok = parse(json!({"new_lambda": 0.0, "action": "pause"})).unwrap();
        assert_eq!((ok.new_lambda, ok.action), (Some(0.0), Some(Action::Pause)));
    }
}
