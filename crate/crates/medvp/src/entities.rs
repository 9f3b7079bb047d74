//! Region-level entity extraction from questions.
//!
//! Two extractors share one contract (deduplicated, document-order,
//! canonicalized entity lists): a built-in gazetteer scanner that needs no
//! network, and a client for an external chat-completion LLM endpoint.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Starting vocabulary of common radiology organs and findings. Each entry
/// is its own canonical form; multi-word surfaces are matched
/// longest-first.
const BUILTIN_TERMS: &[&str] = &[
    "abdomen",
    "abscess",
    "adrenal gland",
    "airway",
    "alveoli",
    "aneurysm",
    "aorta",
    "appendicitis",
    "appendix",
    "arthritis",
    "artery",
    "atelectasis",
    "atrium",
    "bladder",
    "blood vessel",
    "bone",
    "bowel",
    "brain",
    "brainstem",
    "breast",
    "bronchus",
    "calcification",
    "cancer",
    "carcinoma",
    "cardiomegaly",
    "cartilage",
    "cerebellum",
    "chest",
    "clavicle",
    "colon",
    "consolidation",
    "cortex",
    "cyst",
    "diaphragm",
    "duodenum",
    "edema",
    "effusion",
    "embolism",
    "emphysema",
    "esophagus",
    "femur",
    "fibrosis",
    "fracture",
    "gallbladder",
    "gray matter",
    "heart",
    "hematoma",
    "hemorrhage",
    "hernia",
    "hippocampus",
    "humerus",
    "ileum",
    "infarct",
    "infarction",
    "inflammation",
    "intestine",
    "jejunum",
    "kidney",
    "large intestine",
    "left kidney",
    "left lobe",
    "left lung",
    "lesion",
    "liver",
    "lower lobe",
    "lung",
    "lymph node",
    "mass",
    "mediastinum",
    "metastasis",
    "myocardium",
    "nodule",
    "opacity",
    "ovary",
    "pancreas",
    "pelvis",
    "pericardium",
    "pleura",
    "pneumonia",
    "pneumothorax",
    "polyp",
    "prostate",
    "rectum",
    "rib",
    "rib cage",
    "right kidney",
    "right lobe",
    "right lung",
    "scoliosis",
    "skull",
    "small intestine",
    "soft tissue",
    "spinal cord",
    "spine",
    "spleen",
    "stenosis",
    "stomach",
    "stone",
    "thyroid",
    "trachea",
    "tumor",
    "ulcer",
    "upper lobe",
    "uterus",
    "ventricle",
    "vertebra",
    "white matter",
];

/// Lowercase a word and fold a plural suffix. A deliberately small rule
/// table instead of a lemmatizer: ies -> y, (s|x|ch|sh)es -> -es, trailing
/// s stripped unless the word ends in ss/us/is.
pub fn singularize(word: &str) -> String {
    let w = word.to_lowercase();
    if w.len() > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    if w.len() > 3
        && (w.ends_with("ses") || w.ends_with("xes") || w.ends_with("ches") || w.ends_with("shes"))
    {
        return w[..w.len() - 2].to_string();
    }
    if w.len() > 3
        && w.ends_with('s')
        && !w.ends_with("ss")
        && !w.ends_with("us")
        && !w.ends_with("is")
    {
        return w[..w.len() - 1].to_string();
    }
    w
}

/// Canonicalize an entity phrase: lowercase, trim, singularize the final
/// word.
pub fn canonicalize(entity: &str) -> String {
    let trimmed = entity.trim().to_lowercase();
    let mut words: Vec<String> = trimmed.split_whitespace().map(String::from).collect();
    if let Some(last) = words.last_mut() {
        *last = singularize(last);
    }
    words.join(" ")
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Dictionary of known entity surface forms. Lookup is case-insensitive
/// and longest-match-first over token spans.
pub struct Gazetteer {
    /// Joined lowercase token span -> canonical entity.
    entries: HashMap<String, String>,
    max_span: usize,
}

impl Default for Gazetteer {
    fn default() -> Self {
        Gazetteer::builtin()
    }
}

impl Gazetteer {
    pub fn builtin() -> Self {
        let mut g = Gazetteer {
            entries: HashMap::new(),
            max_span: 1,
        };
        for term in BUILTIN_TERMS {
            g.insert(term, term);
        }
        g
    }

    pub fn empty() -> Self {
        Gazetteer {
            entries: HashMap::new(),
            max_span: 1,
        }
    }

    pub fn insert(&mut self, surface: &str, canonical: &str) {
        let key = tokenize(surface).join(" ");
        if key.is_empty() {
            return;
        }
        self.max_span = self.max_span.max(key.split(' ').count());
        self.entries.insert(key, canonicalize(canonical));
    }

    /// Extend from a text file: one `surface` or `surface = canonical` per
    /// line, `#` comments allowed.
    pub fn extend_from_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading gazetteer {}", path.display()))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((surface, canonical)) => self.insert(surface.trim(), canonical.trim()),
                None => self.insert(line, line),
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup_span(&self, tokens: &[String]) -> Option<&String> {
        let joined = tokens.join(" ");
        if let Some(c) = self.entries.get(&joined) {
            return Some(c);
        }
        // Plural folding on the final token of the span.
        let mut folded = tokens.to_vec();
        if let Some(last) = folded.last_mut() {
            let singular = singularize(last);
            if singular != *last {
                *last = singular;
                return self.entries.get(&folded.join(" "));
            }
        }
        None
    }
}

/// Scan a question for gazetteer entities. Spans are matched longest-first
/// and never overlap; the result is deduplicated in document order.
pub fn extract_gazetteer(question: &str, gazetteer: &Gazetteer) -> Vec<String> {
    let tokens = tokenize(question);
    let mut found = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = None;
        let longest = gazetteer.max_span.min(tokens.len() - i);
        for span in (1..=longest).rev() {
            if let Some(canonical) = gazetteer.lookup_span(&tokens[i..i + span]) {
                matched = Some((canonical.clone(), span));
                break;
            }
        }
        match matched {
            Some((canonical, span)) => {
                if !found.contains(&canonical) {
                    found.push(canonical);
                }
                i += span;
            }
            None => i += 1,
        }
    }
    found
}

/// Default instruction for the entity recognition call. `{question}` is
/// the only slot.
pub const DEFAULT_ENTITY_TEMPLATE: &str = "You are assisting with medical visual question answering. \
Identify the organs, anatomical structures, or disease findings that the question refers to or implies. \
Reply with a JSON array of short entity strings and nothing else. \
If no region-level entity is mentioned, reply with [].\nQuestion: {question}";

/// Client for a chat-completion style LLM endpoint. Requests use
/// temperature 0 so extraction is deterministic.
pub struct LlmClient {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    template: String,
    retries: u32,
    backoff_ms: u64,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl LlmClient {
    pub fn new(endpoint: &str, model: &str, template: Option<&str>, retries: u32) -> Self {
        LlmClient {
            endpoint: endpoint.to_string(),
            api_key: std::env::var(crate::config::ENV_LLM_KEY)
                .ok()
                .filter(|k| !k.is_empty()),
            model: model.to_string(),
            template: template.unwrap_or(DEFAULT_ENTITY_TEMPLATE).to_string(),
            retries,
            backoff_ms: 250,
            http: reqwest::blocking::Client::new(),
        }
    }

    /// Shrink the retry backoff; test hook.
    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.backoff_ms = ms;
        self
    }

    fn request_reply(&self, question: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.model,
            temperature: 0.0,
            messages: vec![ChatMessage {
                role: "user",
                content: self.template.replace("{question}", question),
            }],
        };
        let mut last_err = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                let wait = self.backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                std::thread::sleep(std::time::Duration::from_millis(wait.min(10_000)));
            }
            let mut req = self.http.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: ChatResponse = resp.json().context("decoding LLM response")?;
                    let content = parsed
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .unwrap_or_default();
                    return Ok(content);
                }
                Ok(resp) => {
                    last_err = Some(anyhow::anyhow!("LLM endpoint returned {}", resp.status()))
                }
                Err(e) => last_err = Some(e.into()),
            }
        }
        Err(last_err
            .unwrap_or_else(|| anyhow::anyhow!("LLM request failed"))
            .context(format!("after {} retries", self.retries)))
    }

    /// Extract entities for a question. Network/HTTP failures are retried
    /// with capped exponential backoff and then surface as
    /// `ExtractionError::Transport`; a reply that cannot be parsed as a
    /// JSON string array surfaces as `ExtractionError::Unparseable`
    /// carrying the raw reply.
    pub fn extract(&self, question: &str) -> std::result::Result<Vec<String>, ExtractionError> {
        let reply = self
            .request_reply(question)
            .map_err(ExtractionError::Transport)?;
        parse_entity_reply(&reply).ok_or(ExtractionError::Unparseable { raw: reply })
    }
}

/// LLM extraction failure modes; parse failures are eligible for the
/// gazetteer fallback, transport failures are not.
#[derive(Debug)]
pub enum ExtractionError {
    Transport(anyhow::Error),
    Unparseable { raw: String },
}

impl std::fmt::Display for ExtractionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtractionError::Transport(e) => write!(f, "LLM transport failure: {e:#}"),
            ExtractionError::Unparseable { raw } => {
                write!(f, "unparseable LLM reply: {raw:?}")
            }
        }
    }
}

impl std::error::Error for ExtractionError {}

/// Parse an entity list out of a model reply: either the whole reply is a
/// JSON string array or one is embedded in surrounding prose.
fn parse_entity_reply(reply: &str) -> Option<Vec<String>> {
    let attempt = |s: &str| -> Option<Vec<String>> { serde_json::from_str::<Vec<String>>(s).ok() };
    let parsed = attempt(reply.trim()).or_else(|| {
        let start = reply.find('[')?;
        let end = reply.rfind(']')?;
        if start < end {
            attempt(&reply[start..=end])
        } else {
            None
        }
    })?;
    let mut out = Vec::new();
    for entity in parsed {
        let canonical = canonicalize(&entity);
        if !canonical.is_empty() && !out.contains(&canonical) {
            out.push(canonical);
        }
    }
    Some(out)
}
