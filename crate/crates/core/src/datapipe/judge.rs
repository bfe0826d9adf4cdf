//! Semantic judge: decides whether reordering a question's images changes
//! its intended answer.
//!
//! Two implementations ship. [`RuleJudge`] consults the environment's own
//! order-sensitivity metadata directly. [`JudgeClient`] speaks a small
//! JSON wire protocol through a pluggable [`JudgeTransport`], mirroring a
//! deployment where the judgment comes from an external model service; the
//! in-process [`RuleTransport`] answers those requests with a keyword rule
//! that provably agrees with the metadata on every generated task family.
//! Transport failures are retried a bounded number of times; malformed
//! replies fail immediately with the offending payload logged, since
//! retrying cannot fix a protocol mismatch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{KW_COUNTING, KW_EXTREMUM, KW_REFERENCE};
use crate::types::{Permutation, TaskInstance};

/// Version stamp carried by every request so a mismatched peer is detected
/// instead of silently misinterpreted.
pub const JUDGE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge transport failed after {attempts} attempt(s): {last}")]
    Transport { attempts: usize, last: String },
    #[error("malformed judge reply ({detail}); payload: {payload}")]
    Protocol { detail: String, payload: String },
}

/// One judgment request: everything a judge needs without any gold labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub schema_version: u32,
    /// Question rendering with `<image>` placeholders.
    pub question_text: String,
    pub image_count: usize,
    /// Proposed reordering; position `j` receives original image
    /// `permutation[j]`.
    pub permutation: Vec<usize>,
}

impl JudgeRequest {
    pub fn for_instance(x: &TaskInstance, sigma: &Permutation) -> Self {
        JudgeRequest {
            schema_version: JUDGE_SCHEMA_VERSION,
            question_text: x.question_text(),
            image_count: x.images.len(),
            permutation: sigma.mapping.clone(),
        }
    }
}

/// The judge's verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    /// True when the reordering changes the intended answer.
    pub should_change: bool,
    /// True when the question is a multiple-choice selection among the
    /// shown images (diagnostic only; no pipeline decision depends on it).
    pub is_multichoice_images: bool,
}

/// Failure of one transport round trip (connection-level, retryable).
#[derive(Debug, Error)]
#[error("{0}")]
pub struct TransportFailure(pub String);

/// A blocking request/reply channel carrying JSON strings.
pub trait JudgeTransport {
    fn round_trip(&self, request_json: &str) -> Result<String, TransportFailure>;
}

/// Keyword rule answering judge requests from the question text alone.
///
/// Generated questions open with their task-family keyword, which pins down
/// the order semantics exactly: counting questions are order-invariant, the
/// two choice families reference positions, so any non-identity reordering
/// changes their answer. Unknown openings are treated as position-sensitive,
/// the conservative default (a wrongly cautious verdict can only drop an
/// augmentation, never mislabel one).
pub fn rule_judge(question_text: &str, permutation: &[usize]) -> JudgeResponse {
    let keyword = question_text.split_whitespace().next().unwrap_or("");
    let is_identity = permutation.iter().enumerate().all(|(j, &v)| j == v);
    let (order_invariant, is_multichoice_images) = match keyword {
        KW_COUNTING => (true, false),
        KW_REFERENCE => (false, true),
        KW_EXTREMUM => (false, false),
        _ => (false, false),
    };
    JudgeResponse {
        should_change: !order_invariant && !is_identity,
        is_multichoice_images,
    }
}

/// In-process transport backed by [`rule_judge`].
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleTransport;

impl JudgeTransport for RuleTransport {
    fn round_trip(&self, request_json: &str) -> Result<String, TransportFailure> {
        let request: JudgeRequest = serde_json::from_str(request_json)
            .map_err(|e| TransportFailure(format!("unreadable request: {e}")))?;
        if request.schema_version != JUDGE_SCHEMA_VERSION {
            // Reply with something that is not a valid response so the
            // client surfaces a protocol error instead of retrying.
            return Ok(format!(
                "{{\"error\":\"unsupported schema version {}\"}}",
                request.schema_version
            ));
        }
        let response = rule_judge(&request.question_text, &request.permutation);
        Ok(serde_json::to_string(&response).expect("response serializes"))
    }
}

/// Wire client with bounded retries on transport failures.
pub struct JudgeClient<T: JudgeTransport> {
    transport: T,
    max_attempts: usize,
}

impl<T: JudgeTransport> JudgeClient<T> {
    /// `max_attempts` counts the first try plus retries; it must be at
    /// least 1.
    pub fn new(transport: T, max_attempts: usize) -> Self {
        JudgeClient {
            transport,
            max_attempts: max_attempts.max(1),
        }
    }

    pub fn judge(&self, request: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let request_json = serde_json::to_string(request).expect("request serializes");
        let mut last = String::new();
        for _attempt in 1..=self.max_attempts {
            match self.transport.round_trip(&request_json) {
                Ok(payload) => {
                    return serde_json::from_str::<JudgeResponse>(&payload).map_err(|e| {
                        log::warn!("judge protocol error: {e}; payload {payload:?}");
                        JudgeError::Protocol {
                            detail: e.to_string(),
                            payload,
                        }
                    });
                }
                Err(TransportFailure(detail)) => {
                    log::debug!("judge transport failure, will retry: {detail}");
                    last = detail;
                }
            }
        }
        Err(JudgeError::Transport {
            attempts: self.max_attempts,
            last,
        })
    }
}

/// Anything that can decide whether a permutation changes an instance's
/// answer. The augmentation stage depends only on this.
pub trait SemanticJudge {
    fn semantics_changed(
        &self,
        x: &TaskInstance,
        sigma: &Permutation,
    ) -> Result<bool, JudgeError>;
}

/// Judge that reads the instance's own order-sensitivity metadata.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleJudge;

impl SemanticJudge for RuleJudge {
    fn semantics_changed(
        &self,
        x: &TaskInstance,
        sigma: &Permutation,
    ) -> Result<bool, JudgeError> {
        crate::env::semantic_indicator(x, sigma)
            .map(|preserved| !preserved)
            .map_err(|e| JudgeError::Protocol {
                detail: e.to_string(),
                payload: String::new(),
            })
    }
}

impl<T: JudgeTransport> SemanticJudge for JudgeClient<T> {
    fn semantics_changed(
        &self,
        x: &TaskInstance,
        sigma: &Permutation,
    ) -> Result<bool, JudgeError> {
        let response = self.judge(&JudgeRequest::for_instance(x, sigma))?;
        Ok(response.should_change)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, GeneratorConfig};
    use std::cell::RefCell;

    #[test]
    fn keyword_rule_tracks_family_and_identity() {
        let id = [0usize, 1, 2];
        let swap = [0usize, 2, 1];
        assert!(!rule_judge("countgt <image> <image> <image>", &swap).should_change);
        assert!(rule_judge("simref <image> opts <image> <image>", &swap).should_change);
        assert!(!rule_judge("simref <image> opts <image> <image>", &id).should_change);
        assert!(rule_judge("argmax <image> <image> <image>", &swap).should_change);
        // Unknown openings get the conservative position-sensitive verdict.
        assert!(rule_judge("mystery <image>", &[1, 0, 2]).should_change);
        assert!(rule_judge("", &[1, 0]).should_change);
        // Only the reference-comparison family is image multiple choice.
        assert!(rule_judge("simref x", &id).is_multichoice_images);
        assert!(!rule_judge("argmax x", &id).is_multichoice_images);
        assert!(!rule_judge("countgt x", &id).is_multichoice_images);
    }

    #[test]
    fn wire_client_agrees_with_the_metadata_judge_on_generated_data() {
        let data = generate_dataset(&GeneratorConfig {
            seed: 51,
            dataset_size: 36,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let client = JudgeClient::new(RuleTransport, 1);
        let direct = RuleJudge;
        for x in &data {
            for sigma in Permutation::enumerate(x.images.len()) {
                let wire = client.semantics_changed(x, &sigma).unwrap();
                let meta = direct.semantics_changed(x, &sigma).unwrap();
                assert_eq!(wire, meta, "{} under {:?}", x.id, sigma.mapping);
            }
        }
    }

    struct FlakyTransport {
        failures_left: RefCell<usize>,
        calls: RefCell<usize>,
    }

    impl JudgeTransport for FlakyTransport {
        fn round_trip(&self, request_json: &str) -> Result<String, TransportFailure> {
            *self.calls.borrow_mut() += 1;
            let mut left = self.failures_left.borrow_mut();
            if *left > 0 {
                *left -= 1;
                return Err(TransportFailure("connection reset".into()));
            }
            RuleTransport.round_trip(request_json)
        }
    }

    fn request() -> JudgeRequest {
        JudgeRequest {
            schema_version: JUDGE_SCHEMA_VERSION,
            question_text: "argmax <image> <image>".into(),
            image_count: 2,
            permutation: vec![1, 0],
        }
    }

    #[test]
    fn transport_failures_are_retried_within_budget() {
        let flaky = FlakyTransport {
            failures_left: RefCell::new(2),
            calls: RefCell::new(0),
        };
        let client = JudgeClient::new(flaky, 3);
        let response = client.judge(&request()).unwrap();
        assert!(response.should_change);
        assert_eq!(*client.transport.calls.borrow(), 3);
    }

    #[test]
    fn exhausted_retries_surface_the_last_failure() {
        let flaky = FlakyTransport {
            failures_left: RefCell::new(5),
            calls: RefCell::new(0),
        };
        let client = JudgeClient::new(flaky, 2);
        match client.judge(&request()) {
            Err(JudgeError::Transport { attempts, last }) => {
                assert_eq!(attempts, 2);
                assert!(last.contains("connection reset"));
            }
            other => panic!("expected transport error, got {other:?}"),
        }
        assert_eq!(*client.transport.calls.borrow(), 2);
    }

    struct GarbageTransport {
        calls: RefCell<usize>,
    }

    impl JudgeTransport for GarbageTransport {
        fn round_trip(&self, _request_json: &str) -> Result<String, TransportFailure> {
            *self.calls.borrow_mut() += 1;
            Ok("resistance is futile".into())
        }
    }

    #[test]
    fn malformed_replies_fail_fast_without_retries() {
        let garbage = GarbageTransport {
            calls: RefCell::new(0),
        };
        let client = JudgeClient::new(garbage, 5);
        match client.judge(&request()) {
            Err(JudgeError::Protocol { payload, .. }) => {
                assert_eq!(payload, "resistance is futile");
            }
            other => panic!("expected protocol error, got {other:?}"),
        }
        assert_eq!(*client.transport.calls.borrow(), 1, "no retry on protocol errors");
    }

    #[test]
    fn schema_version_mismatch_is_a_protocol_error() {
        let mut old = request();
        old.schema_version = 0;
        let client = JudgeClient::new(RuleTransport, 3);
        assert!(matches!(
            client.judge(&old),
            Err(JudgeError::Protocol { .. })
        ));
    }

    #[test]
    fn requests_serialize_with_all_wire_fields() {
        let json = serde_json::to_string(&request()).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["schema_version"], 1);
        assert_eq!(value["image_count"], 2);
        assert_eq!(value["permutation"], serde_json::json!([1, 0]));
        assert!(value["question_text"].as_str().unwrap().contains("<image>"));
        let back: JudgeRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, request());
    }
}
