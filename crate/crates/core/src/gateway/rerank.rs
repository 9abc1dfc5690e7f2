use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{extract_json, ChatRequest, GatewayConfig, GatewayError, Transport, RERANK_PROMPT};
use crate::eval::{RankedFact, RetrievalRun};

/// Candidates shown to the reranker.
pub const RERANK_POOL: usize = 15;
/// Length of the reranked list.
pub const RERANK_OUTPUT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub fact_id: String,
    pub fact_content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankInput {
    post_id: String,
    post_content: String,
    candidates: Vec<Candidate>,
}

impl RerankInput {
    /// Requires exactly 15 candidates with distinct IDs, in engine order.
    pub fn new(
        post_id: String,
        post_content: String,
        candidates: Vec<Candidate>,
    ) -> Result<Self, GatewayError> {
        let invalid = |reason: String| GatewayError::InvalidRerankInput {
            post_id: post_id.clone(),
            reason,
        };
        if candidates.len() != RERANK_POOL {
            return Err(invalid(format!(
                "expected {RERANK_POOL} candidates, got {}",
                candidates.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(c) = candidates.iter().find(|c| !seen.insert(c.fact_id.as_str())) {
            return Err(invalid(format!("duplicate candidate {}", c.fact_id)));
        }
        Ok(Self {
            post_id,
            post_content,
            candidates,
        })
    }

    pub fn post_id(&self) -> &str {
        &self.post_id
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    fn payload(&self) -> String {
        json!({
            "post": {"post_id": self.post_id, "post_content": self.post_content},
            "factChecks": self.candidates,
        })
        .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutput {
    pub post_id: String,
    pub ranked_fact_ids: Vec<String>,
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads the `{post_id: [ids]}` object from a reply and turns it into a
/// ten-item list: out-of-pool IDs are dropped, repeats keep their first
/// position, and gaps are filled from the engine order.
pub fn parse_rerank_response(input: &RerankInput, reply: &str) -> Result<RerankOutput, GatewayError> {
    let malformed = |detail: String| GatewayError::MalformedResponse {
        what: format!("rerank of post {}", input.post_id),
        detail,
    };
    let slice = extract_json(reply, '{', '}').ok_or_else(|| malformed("no JSON object".into()))?;
    let obj: serde_json::Map<String, Value> =
        serde_json::from_str(slice).map_err(|e| malformed(e.to_string()))?;
    let list = match obj.get(&input.post_id) {
        Some(v) => v,
        None if obj.len() == 1 => obj.values().next().expect("one entry"),
        None => return Err(malformed("no list keyed by the post id".into())),
    };
    let list = list
        .as_array()
        .ok_or_else(|| malformed("value is not a list".into()))?;

    let pool: HashSet<&str> = input.candidates.iter().map(|c| c.fact_id.as_str()).collect();
    let mut ranked: Vec<String> = Vec::with_capacity(RERANK_OUTPUT);
    for id in list.iter().filter_map(id_string) {
        if ranked.len() == RERANK_OUTPUT {
            break;
        }
        if pool.contains(id.as_str()) && !ranked.contains(&id) {
            ranked.push(id);
        }
    }
    for c in &input.candidates {
        if ranked.len() == RERANK_OUTPUT {
            break;
        }
        if !ranked.contains(&c.fact_id) {
            ranked.push(c.fact_id.clone());
        }
    }
    Ok(RerankOutput {
        post_id: input.post_id.clone(),
        ranked_fact_ids: ranked,
    })
}

/// One rerank call; a malformed reply is retried once.
pub fn rerank(
    input: &RerankInput,
    transport: &dyn Transport,
    cfg: &GatewayConfig,
) -> Result<RerankOutput, GatewayError> {
    let req = ChatRequest::new(
        RERANK_PROMPT,
        input.payload(),
        &cfg.model_name,
        cfg.temperature,
        cfg.max_output_tokens,
    )?;
    match parse_rerank_response(input, &transport.send(&req)?) {
        Ok(out) => Ok(out),
        Err(GatewayError::MalformedResponse { .. }) => {
            parse_rerank_response(input, &transport.send(&req)?)
        }
        Err(e) => Err(e),
    }
}

/// Reranks many posts with at most `cfg.max_in_flight` concurrent calls.
/// Outputs are returned in input order.
pub fn rerank_many(
    inputs: &[RerankInput],
    transport: &dyn Transport,
    cfg: &GatewayConfig,
) -> Result<Vec<RerankOutput>, GatewayError> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RerankOutput, GatewayError>>>> =
        Mutex::new((0..inputs.len()).map(|_| None).collect());
    let workers = cfg.max_in_flight.clamp(1, inputs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= inputs.len() {
                    break;
                }
                let r = rerank(&inputs[i], transport, cfg);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Builds rerank inputs from the top 15 of each post in the run. Posts with
/// fewer than 15 retrieved facts are returned separately and left as they are.
pub fn build_rerank_inputs(
    run: &RetrievalRun,
    post_texts: &HashMap<String, String>,
    fact_texts: &HashMap<String, String>,
) -> Result<(Vec<RerankInput>, Vec<String>), GatewayError> {
    let mut inputs = Vec::new();
    let mut skipped = Vec::new();
    for (post_id, list) in &run.entries {
        if list.len() < RERANK_POOL {
            skipped.push(post_id.clone());
            continue;
        }
        let missing = |what: &str, id: &str| GatewayError::InvalidRerankInput {
            post_id: post_id.clone(),
            reason: format!("no text for {what} {id}"),
        };
        let content = post_texts
            .get(post_id)
            .ok_or_else(|| missing("post", post_id))?;
        let candidates = list[..RERANK_POOL]
            .iter()
            .map(|r| {
                Ok(Candidate {
                    fact_id: r.fact_id.clone(),
                    fact_content: fact_texts
                        .get(&r.fact_id)
                        .ok_or_else(|| missing("fact", &r.fact_id))?
                        .clone(),
                })
            })
            .collect::<Result<_, GatewayError>>()?;
        inputs.push(RerankInput::new(post_id.clone(), content.clone(), candidates)?);
    }
    Ok((inputs, skipped))
}

/// Rewrites the head of each reranked post's list: the reranked IDs first,
/// then the remaining original entries in their original order. Scores stay
/// attached to positions so lists remain non-increasing.
pub fn apply_rerank(run: &RetrievalRun, outputs: &[RerankOutput]) -> Result<RetrievalRun, GatewayError> {
    let mut out = run.clone();
    for o in outputs {
        let list = out
            .entries
            .get_mut(&o.post_id)
            .ok_or_else(|| GatewayError::UnknownPost(o.post_id.clone()))?;
        let present: HashSet<&str> = list.iter().map(|r| r.fact_id.as_str()).collect();
        if let Some(bad) = o.ranked_fact_ids.iter().find(|id| !present.contains(id.as_str())) {
            return Err(GatewayError::NotInRun {
                post_id: o.post_id.clone(),
                fact_id: bad.clone(),
            });
        }
        let head: HashSet<&str> = o.ranked_fact_ids.iter().map(String::as_str).collect();
        let order: Vec<String> = o
            .ranked_fact_ids
            .iter()
            .cloned()
            .chain(
                list.iter()
                    .filter(|r| !head.contains(r.fact_id.as_str()))
                    .map(|r| r.fact_id.clone()),
            )
            .collect();
        let scores: Vec<f64> = list.iter().map(|r| r.score).collect();
        *list = order
            .into_iter()
            .zip(scores)
            .map(|(fact_id, score)| RankedFact { fact_id, score })
            .collect();
    }
    Ok(out)
}
