//! Category clustering through a chat model: repeated generation queries are
//! voted into an initial partition, which is then refined until three
//! consecutive partitions agree (or the iteration cap is hit). Also builds the
//! per-image binary cluster vector.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CpcError, Result};

pub const CATEGORIES_PLACEHOLDER: &str = "{categories}";
pub const PARTITION_PLACEHOLDER: &str = "{partition}";

/// Ordered, duplicate-free list of category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryList {
    names: Vec<String>,
}

impl CategoryList {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(CpcError::InvalidArgument("empty category list".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(CpcError::InvalidArgument("empty category name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(CpcError::InvalidArgument(format!(
                    "duplicate category `{n}`"
                )));
            }
        }
        Ok(Self { names })
    }

    /// One category per line; blank lines are skipped.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CpcError::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        )
        .map_err(|e| CpcError::format(path, e.to_string()))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| CpcError::io(path, e))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    fn resolve(&self, raw: &str) -> Option<&str> {
        let raw = raw.trim();
        self.names
            .iter()
            .find(|n| n.as_str() == raw)
            .or_else(|| self.names.iter().find(|n| n.eq_ignore_ascii_case(raw)))
            .map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for CategoryList {
    type Error = CpcError;

    fn try_from(value: Vec<String>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<CategoryList> for Vec<String> {
    fn from(value: CategoryList) -> Self {
        value.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub name: String,
    pub members: Vec<String>,
}

/// Disjoint named clusters covering a category list exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryPartition {
    clusters: Vec<Cluster>,
}

/// Name-blind identity of a partition: sorted member lists in canonical order.
pub type PartitionKey = Vec<Vec<String>>;

impl CategoryPartition {
    /// Validate `clusters` against `categories`.
    pub fn new(clusters: Vec<Cluster>, categories: &CategoryList) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for cluster in &clusters {
            if cluster.members.is_empty() {
                return Err(CpcError::InvalidArgument(format!(
                    "cluster `{}` is empty",
                    cluster.name
                )));
            }
            for m in &cluster.members {
                if !categories.contains(m) {
                    return Err(CpcError::UnknownCategory(m.clone()));
                }
                if !seen.insert(m.as_str()) {
                    return Err(CpcError::InvalidArgument(format!(
                        "category `{m}` appears in more than one cluster"
                    )));
                }
            }
        }
        if let Some(missing) = categories.names().iter().find(|n| !seen.contains(n.as_str())) {
            return Err(CpcError::InvalidArgument(format!(
                "category `{missing}` is not covered"
            )));
        }
        Ok(Self { clusters })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Number of clusters, `L`.
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster_of(&self, category: &str) -> Option<usize> {
        self.clusters
            .iter()
            .position(|c| c.members.iter().any(|m| m == category))
    }

    pub fn key(&self) -> PartitionKey {
        canonicalize(self).clusters.into_iter().map(|c| c.members).collect()
    }

    /// Equality up to cluster names and ordering.
    pub fn same_grouping(&self, other: &CategoryPartition) -> bool {
        self.key() == other.key()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&canonicalize(self).clusters)
            .expect("partition serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| CpcError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, categories: &CategoryList) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CpcError::io(path, e))?;
        let clusters: Vec<Cluster> =
            serde_json::from_str(&text).map_err(|e| CpcError::format(path, e.to_string()))?;
        let p = Self::new(clusters, categories).map_err(|e| CpcError::format(path, e.to_string()))?;
        Ok(canonicalize(&p))
    }
}

/// Sort members within each cluster, then clusters by their smallest member.
pub fn canonicalize(p: &CategoryPartition) -> CategoryPartition {
    let mut clusters: Vec<Cluster> = p
        .clusters
        .iter()
        .map(|c| {
            let mut members = c.members.clone();
            members.sort();
            Cluster {
                name: c.name.clone(),
                members,
            }
        })
        .collect();
    clusters.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    CategoryPartition { clusters }
}

#[derive(Deserialize)]
struct LooseCluster {
    #[serde(alias = "cluster", alias = "cluster_name", alias = "label")]
    name: String,
    #[serde(alias = "categories", alias = "items")]
    members: Vec<String>,
}

fn json_candidates(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for (open, close) in [('[', ']'), ('{', '}')] {
        if let (Some(a), Some(b)) = (text.find(open), text.rfind(close)) {
            if a < b {
                out.push(&text[a..=b]);
            }
        }
    }
    out.sort_by_key(|s| std::cmp::Reverse(s.len()));
    out
}

fn groups_from_json(value: serde_json::Value) -> Option<Vec<(String, Vec<String>)>> {
    use serde_json::Value;
    match value {
        Value::Array(items) => items
            .into_iter()
            .map(|item| {
                serde_json::from_value::<LooseCluster>(item)
                    .ok()
                    .map(|c| (c.name, c.members))
            })
            .collect(),
        Value::Object(mut map) => {
            if let Some(inner) = map.remove("clusters") {
                return groups_from_json(inner);
            }
            map.into_iter()
                .map(|(name, v)| serde_json::from_value::<Vec<String>>(v).ok().map(|m| (name, m)))
                .collect()
        }
        _ => None,
    }
}

/// `name: a, b, c` lines, optionally bulleted or numbered.
fn groups_from_lines(text: &str) -> Vec<(String, Vec<String>)> {
    text.lines()
        .filter_map(|line| {
            let line = line
                .trim()
                .trim_start_matches(|c: char| c == '-' || c == '*' || c.is_ascii_digit() || c == '.' || c == ')')
                .trim();
            let (name, rest) = line.split_once(':')?;
            let members: Vec<String> = rest
                .split(',')
                .map(|m| m.trim().trim_matches(|c| c == '"' || c == '\'' || c == '[' || c == ']').to_string())
                .filter(|m| !m.is_empty())
                .collect();
            (!name.trim().is_empty() && !members.is_empty())
                .then(|| (name.trim().trim_matches('"').to_string(), members))
        })
        .collect()
}

/// Parse a model response into a partition over `categories`.
///
/// Accepts a JSON list of `{"name", "members"}` objects, a JSON object mapping
/// names to member lists, or `name: a, b` lines. Categories the text omits
/// become singleton clusters named after themselves.
pub fn parse_partition(text: &str, categories: &CategoryList) -> Result<CategoryPartition> {
    let groups = json_candidates(text)
        .into_iter()
        .filter_map(|s| serde_json::from_str(s).ok())
        .find_map(groups_from_json)
        .filter(|g| !g.is_empty())
        .unwrap_or_else(|| groups_from_lines(text));
    if groups.is_empty() {
        return Err(CpcError::Parse("no cluster structure found".into()));
    }

    let mut clusters = Vec::new();
    let mut seen = BTreeSet::new();
    for (name, members) in groups {
        let mut resolved = Vec::new();
        for raw in members {
            let canonical = categories
                .resolve(&raw)
                .ok_or_else(|| CpcError::UnknownCategory(raw.trim().to_string()))?;
            if !seen.insert(canonical.to_string()) {
                return Err(CpcError::Parse(format!(
                    "category `{canonical}` listed more than once"
                )));
            }
            resolved.push(canonical.to_string());
        }
        if !resolved.is_empty() {
            clusters.push(Cluster {
                name,
                members: resolved,
            });
        }
    }
    for name in categories.names() {
        if !seen.contains(name) {
            clusters.push(Cluster {
                name: name.clone(),
                members: vec![name.clone()],
            });
        }
    }
    CategoryPartition::new(clusters, categories)
}

/// Most frequent grouping among `samples`; ties go to the earliest occurrence.
pub fn vote_partitions(samples: &[CategoryPartition]) -> Result<CategoryPartition> {
    if samples.is_empty() {
        return Err(CpcError::InvalidArgument("no partitions to vote on".into()));
    }
    let keys: Vec<PartitionKey> = samples.iter().map(CategoryPartition::key).collect();
    let mut counts: BTreeMap<&PartitionKey, (usize, usize)> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        counts.entry(k).or_insert((0, i)).0 += 1;
    }
    let (_, first) = counts
        .values()
        .copied()
        .max_by(|(ca, ia), (cb, ib)| ca.cmp(cb).then(ib.cmp(ia)))
        .expect("nonempty");
    Ok(canonicalize(&samples[first]))
}

/// True once the three most recent partitions share one grouping.
pub fn stop_condition(history: &[CategoryPartition]) -> bool {
    match history {
        [.., a, b, c] => {
            let kc = c.key();
            a.key() == kc && b.key() == kc
        }
        _ => false,
    }
}

/// Binary cluster-membership vector of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterVector {
    bits: Vec<u8>,
}

impl ClusterVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(CpcError::InvalidArgument("cluster vector entries must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// `u_i = 1` iff canonical cluster `i` holds at least one of `image_labels`.
pub fn build_cluster_vector<S: AsRef<str>>(
    image_labels: &[S],
    partition: &CategoryPartition,
) -> Result<ClusterVector> {
    if image_labels.is_empty() {
        return Err(CpcError::InvalidArgument("image has no labels".into()));
    }
    let canonical = canonicalize(partition);
    let mut bits = vec![0u8; canonical.len()];
    for label in image_labels {
        let label = label.as_ref();
        let i = canonical
            .cluster_of(label)
            .ok_or_else(|| CpcError::UnknownCategory(label.to_string()))?;
        bits[i] = 1;
    }
    Ok(ClusterVector { bits })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub gen_template: String,
    pub refine_template: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            gen_template: include_str!("../assets/prompts/generate.txt").to_string(),
            refine_template: include_str!("../assets/prompts/refine.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn new(gen_template: String, refine_template: String) -> Result<Self> {
        let t = Self {
            gen_template,
            refine_template,
        };
        t.validate()?;
        Ok(t)
    }

    /// Load from files, falling back to the bundled templates when a path is absent.
    pub fn load(gen_path: Option<&Path>, refine_path: Option<&Path>) -> Result<Self> {
        let defaults = Self::default();
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| CpcError::io(p, e));
        let gen_template = gen_path.map(read).transpose()?.unwrap_or(defaults.gen_template);
        let refine_template = refine_path
            .map(read)
            .transpose()?
            .unwrap_or(defaults.refine_template);
        Self::new(gen_template, refine_template)
    }

    pub fn validate(&self) -> Result<()> {
        for (template, token) in [
            (&self.gen_template, CATEGORIES_PLACEHOLDER),
            (&self.refine_template, PARTITION_PLACEHOLDER),
        ] {
            let n = template.matches(token).count();
            if n != 1 {
                return Err(CpcError::Config(format!(
                    "template must contain `{token}` exactly once (found {n})"
                )));
            }
        }
        Ok(())
    }

    pub fn render_generate(&self, categories: &CategoryList) -> String {
        self.gen_template
            .replace(CATEGORIES_PLACEHOLDER, &categories.names().join("\n"))
    }

    pub fn render_refine(&self, partition: &CategoryPartition) -> String {
        self.refine_template
            .replace(PARTITION_PLACEHOLDER, partition.to_json().trim_end())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    /// Chat-completion URL, or `mock` to replay fixtures.
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub query_count: usize,
    pub max_refine_iters: usize,
    pub fixture_path: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "mock".into(),
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            query_count: 10,
            max_refine_iters: 10,
            fixture_path: None,
            timeout_secs: 120,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature != 0.0 {
            return Err(CpcError::Config("llm temperature must be 0".into()));
        }
        if self.query_count < 1 {
            return Err(CpcError::Config("llm query_count must be at least 1".into()));
        }
        if self.max_refine_iters < 1 {
            return Err(CpcError::Config("llm max_refine_iters must be at least 1".into()));
        }
        if self.is_mock() && self.fixture_path.is_none() {
            return Err(CpcError::Config("mock llm requires fixture_path".into()));
        }
        Ok(())
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Generate,
    Refine,
}

impl PromptRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::Generate => "generate",
            PromptRole::Refine => "refine",
        }
    }
}

/// Stable hex digest used to key transcript entries.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub trait ChatClient {
    fn complete(&mut self, role: PromptRole, prompt: &str, temperature: f64) -> Result<String>;
}

fn require_zero_temperature(temperature: f64) -> Result<()> {
    if temperature != 0.0 {
        return Err(CpcError::InvalidArgument(format!(
            "temperature must be 0, got {temperature}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixtures {
    #[serde(default)]
    pub generate: Vec<String>,
    #[serde(default)]
    pub refine: Vec<String>,
}

impl MockFixtures {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CpcError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CpcError::format(path, e.to_string()))
    }
}

/// Replays fixture responses as one queue per prompt role.
#[derive(Debug, Clone)]
pub struct MockClient {
    generate: VecDeque<String>,
    refine: VecDeque<String>,
}

impl MockClient {
    pub fn new(fixtures: MockFixtures) -> Self {
        Self {
            generate: fixtures.generate.into(),
            refine: fixtures.refine.into(),
        }
    }
}

impl ChatClient for MockClient {
    fn complete(&mut self, role: PromptRole, _prompt: &str, temperature: f64) -> Result<String> {
        require_zero_temperature(temperature)?;
        let queue = match role {
            PromptRole::Generate => &mut self.generate,
            PromptRole::Refine => &mut self.refine,
        };
        queue
            .pop_front()
            .ok_or_else(|| CpcError::FixtureUnderrun(role.as_str().into()))
    }
}

/// OpenAI-style chat-completion client. Raw request and response bodies are
/// appended to `transcript_path` as JSON lines when set.
pub struct HttpChatClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    model_name: String,
    transcript_path: Option<PathBuf>,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model_name: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            api_key,
            model_name: model_name.into(),
            transcript_path: None,
        }
    }

    /// Endpoint from `CPC_LLM_ENDPOINT` (falling back to `cfg.endpoint`), key from `CPC_LLM_KEY`.
    pub fn from_env(cfg: &LlmClientConfig) -> Result<Self> {
        let endpoint = std::env::var("CPC_LLM_ENDPOINT")
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| (!cfg.is_mock()).then(|| cfg.endpoint.clone()))
            .ok_or_else(|| CpcError::Config("CPC_LLM_ENDPOINT is not set".into()))?;
        let key = std::env::var("CPC_LLM_KEY").ok().filter(|s| !s.is_empty());
        Ok(Self::new(
            endpoint,
            key,
            cfg.model_name.clone(),
            Duration::from_secs(cfg.timeout_secs),
        ))
    }

    pub fn with_transcript(mut self, path: impl Into<PathBuf>) -> Self {
        self.transcript_path = Some(path.into());
        self
    }

    fn log_exchange(&self, request: &str, status: u16, response: &str) -> Result<()> {
        let Some(path) = &self.transcript_path else {
            return Ok(());
        };
        let line = serde_json::json!({
            "request": serde_json::from_str::<serde_json::Value>(request).unwrap_or(request.into()),
            "status": status,
            "response": serde_json::from_str::<serde_json::Value>(response).unwrap_or(response.into()),
        });
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CpcError::io(path, e))?;
        writeln!(f, "{line}").map_err(|e| CpcError::io(path, e))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&mut self, _role: PromptRole, prompt: &str, temperature: f64) -> Result<String> {
        require_zero_temperature(temperature)?;
        let body = serde_json::json!({
            "model": self.model_name,
            "temperature": temperature,
            "messages": [{"role": "user", "content": prompt}],
        })
        .to_string();
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.as_str())
            .map_err(|e| CpcError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| CpcError::Transport(e.to_string()))?;
        self.log_exchange(&body, status, &text)?;
        if status >= 500 || status == 429 {
            return Err(CpcError::Transport(format!("http status {status}")));
        }
        if status >= 400 {
            return Err(CpcError::Parse(format!("http status {status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CpcError::Parse(format!("response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| CpcError::Parse("response has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: usize,
    pub role: PromptRole,
    pub prompt_hash: String,
    pub prompt: String,
    pub response: String,
}

/// Wraps a client and records every exchange in call order.
pub struct Recording<C> {
    inner: C,
    entries: Vec<TranscriptEntry>,
}

impl<C: ChatClient> Recording<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<TranscriptEntry> {
        self.entries
    }
}

impl<C: ChatClient> ChatClient for Recording<C> {
    fn complete(&mut self, role: PromptRole, prompt: &str, temperature: f64) -> Result<String> {
        let response = self.inner.complete(role, prompt, temperature)?;
        self.entries.push(TranscriptEntry {
            index: self.entries.len(),
            role,
            prompt_hash: prompt_hash(prompt),
            prompt: prompt.to_string(),
            response: response.clone(),
        });
        Ok(response)
    }
}

pub fn write_transcript(path: impl AsRef<Path>, entries: &[TranscriptEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("transcript serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CpcError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub partition: CategoryPartition,
    /// `z_0, z_1, ...` in order.
    pub history: Vec<CategoryPartition>,
    pub refine_calls: usize,
    pub converged: bool,
    /// Generation responses that could not be parsed, by query index.
    pub rejected_generations: Vec<usize>,
}

/// Generate `query_count` candidates, vote, then refine to a fixed point.
pub fn self_refine(
    client: &mut impl ChatClient,
    categories: &CategoryList,
    templates: &PromptTemplates,
    cfg: &LlmClientConfig,
) -> Result<CategoryPartition> {
    self_refine_traced(client, categories, templates, cfg).map(|o| o.partition)
}

pub fn self_refine_traced(
    client: &mut impl ChatClient,
    categories: &CategoryList,
    templates: &PromptTemplates,
    cfg: &LlmClientConfig,
) -> Result<RefineOutcome> {
    if cfg.temperature != 0.0 || cfg.query_count < 1 || cfg.max_refine_iters < 1 {
        return Err(CpcError::Config(
            "llm config needs temperature 0, query_count >= 1, max_refine_iters >= 1".into(),
        ));
    }
    templates.validate()?;

    let gen_prompt = templates.render_generate(categories);
    let mut samples = Vec::with_capacity(cfg.query_count);
    let mut rejected = Vec::new();
    for r in 0..cfg.query_count {
        let text = client.complete(PromptRole::Generate, &gen_prompt, cfg.temperature)?;
        match parse_partition(&text, categories) {
            Ok(p) => samples.push(p),
            Err(e) => {
                log::warn!("generation {r} rejected: {e}");
                rejected.push(r);
            }
        }
    }
    if samples.is_empty() {
        return Err(CpcError::Parse(format!(
            "all {} generation responses were unparseable",
            cfg.query_count
        )));
    }
    let z0 = vote_partitions(&samples)?;
    log::info!("voted initial partition with {} clusters", z0.len());

    let mut history = vec![z0];
    let mut converged = false;
    let mut refine_calls = 0;
    while refine_calls < cfg.max_refine_iters {
        let current = history.last().expect("nonempty");
        let prompt = templates.render_refine(current);
        let text = client.complete(PromptRole::Refine, &prompt, cfg.temperature)?;
        refine_calls += 1;
        let next = canonicalize(&parse_partition(&text, categories)?);
        if next.len() != current.len() {
            log::info!("refinement {refine_calls} changed cluster count {} -> {}", current.len(), next.len());
        }
        history.push(next);
        if stop_condition(&history) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("refinement stopped at the cap of {} iterations", cfg.max_refine_iters);
    }
    Ok(RefineOutcome {
        partition: history.last().expect("nonempty").clone(),
        history,
        refine_calls,
        converged,
        rejected_generations: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cats(names: &[&str]) -> CategoryList {
        CategoryList::new(names.iter().copied()).unwrap()
    }

    fn part(groups: &[(&str, &[&str])], categories: &CategoryList) -> CategoryPartition {
        CategoryPartition::new(
            groups
                .iter()
                .map(|(n, m)| Cluster {
                    name: n.to_string(),
                    members: m.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
            categories,
        )
        .unwrap()
    }

    #[test]
    fn category_list_invariants() {
        assert!(CategoryList::new(Vec::<String>::new()).is_err());
        assert!(CategoryList::new(["cat", "cat"]).is_err());
        assert!(CategoryList::new(["cat", " "]).is_err());
    }

    #[test]
    fn parse_examples() {
        let l = cats(&["cat", "dog", "car"]);
        let text = r#"Here you go:
[{"name": "animals", "members": ["cat", "dog"]}, {"name": "vehicles", "members": ["car"]}]"#;
        let p = parse_partition(text, &l).unwrap();
        assert!(p.same_grouping(&part(&[("a", &["cat", "dog"]), ("v", &["car"])], &l)));

        let omitting = r#"[{"name": "animals", "members": ["cat", "dog"]}]"#;
        let p = parse_partition(omitting, &l).unwrap();
        let singleton = p.clusters().iter().find(|c| c.members == ["car"]).unwrap();
        assert_eq!(singleton.name, "car");

        let unknown = r#"[{"name": "x", "members": ["cat", "truck"]}]"#;
        assert!(matches!(
            parse_partition(unknown, &l),
            Err(CpcError::UnknownCategory(n)) if n == "truck"
        ));

        assert!(matches!(parse_partition("no idea", &l), Err(CpcError::Parse(_))));
    }

    #[test]
    fn parse_alternative_layouts() {
        let l = cats(&["cat", "dog", "car"]);
        let obj = r#"{"animals": ["Cat", "dog"], "vehicles": ["car"]}"#;
        let lines = "1. animals: cat, dog\n2. vehicles: car\n";
        let want = part(&[("a", &["cat", "dog"]), ("v", &["car"])], &l);
        assert!(parse_partition(obj, &l).unwrap().same_grouping(&want));
        assert!(parse_partition(lines, &l).unwrap().same_grouping(&want));
        let dup = r#"{"a": ["cat"], "b": ["cat", "dog", "car"]}"#;
        assert!(parse_partition(dup, &l).is_err());
    }

    #[test]
    fn canonicalize_examples() {
        let l = cats(&["cat", "dog", "car"]);
        let p = part(&[("B", &["dog", "cat"]), ("A", &["car"])], &l);
        let c = canonicalize(&p);
        assert_eq!(c.clusters()[0].members, ["car"]);
        assert_eq!(c.clusters()[0].name, "A");
        assert_eq!(c.clusters()[1].members, ["cat", "dog"]);
        assert_eq!(canonicalize(&c), c);
        let renamed = part(&[("pets", &["cat", "dog"]), ("cars", &["car"])], &l);
        assert!(renamed.same_grouping(&p));
    }

    #[test]
    fn vote_examples() {
        let l = cats(&["cat", "dog", "car"]);
        let p1 = part(&[("a", &["cat", "dog"]), ("v", &["car"])], &l);
        let p2 = part(&[("x", &["cat"]), ("y", &["dog", "car"])], &l);
        assert!(vote_partitions(&[p1.clone(), p1.clone(), p2.clone()]).unwrap().same_grouping(&p1));
        assert!(vote_partitions(&[p1.clone(), p2.clone()]).unwrap().same_grouping(&p1));
        assert!(vote_partitions(&[p2.clone(), p1.clone()]).unwrap().same_grouping(&p2));
        assert!(vote_partitions(&[p2.clone()]).unwrap().same_grouping(&p2));
        assert!(vote_partitions(&[]).is_err());
    }

    #[test]
    fn stop_condition_examples() {
        let l = cats(&["cat", "dog"]);
        let a = part(&[("a", &["cat", "dog"])], &l);
        let b = part(&[("a", &["cat"]), ("b", &["dog"])], &l);
        assert!(!stop_condition(&[a.clone()]));
        assert!(!stop_condition(&[a.clone(), a.clone()]));
        assert!(stop_condition(&[a.clone(), a.clone(), a.clone()]));
        assert!(!stop_condition(&[a.clone(), b.clone(), a.clone()]));
        assert!(stop_condition(&[b.clone(), a.clone(), a.clone(), a.clone()]));
    }

    #[test]
    fn cluster_vector_examples() {
        let l = cats(&["cat", "dog", "bus", "car"]);
        let p = part(&[("v", &["bus", "car"]), ("a", &["cat", "dog"])], &l);
        // canonical order puts [bus, car] first
        assert_eq!(build_cluster_vector(&["cat"], &p).unwrap().bits(), &[0, 1]);
        assert_eq!(build_cluster_vector(&["cat", "car"], &p).unwrap().bits(), &[1, 1]);
        assert_eq!(build_cluster_vector(&["cat", "dog"], &p).unwrap().bits(), &[0, 1]);
        assert!(build_cluster_vector::<&str>(&[], &p).is_err());
        assert!(build_cluster_vector(&["horse"], &p).is_err());
    }

    #[test]
    fn mock_client_replays_and_underruns() {
        let mut m = MockClient::new(MockFixtures {
            generate: vec!["r1".into()],
            refine: vec![],
        });
        assert!(m.complete(PromptRole::Generate, "P", 0.5).is_err());
        assert_eq!(m.complete(PromptRole::Generate, "P", 0.0).unwrap(), "r1");
        let err = m.complete(PromptRole::Generate, "P", 0.0).unwrap_err();
        assert!(err.to_string().contains("fixture underrun"));
        assert!(m.complete(PromptRole::Refine, "P", 0.0).is_err());
    }

    #[test]
    fn templates_require_one_placeholder() {
        PromptTemplates::default().validate().unwrap();
        assert!(PromptTemplates::new("none".into(), "{partition}".into()).is_err());
        assert!(PromptTemplates::new("{categories}{categories}".into(), "{partition}".into()).is_err());
        assert!(PromptTemplates::new("{categories}".into(), "{partition}".into()).is_ok());
    }

    fn p_json(groups: &[&[&str]]) -> String {
        let v: Vec<_> = groups
            .iter()
            .enumerate()
            .map(|(i, m)| serde_json::json!({"name": format!("g{i}"), "members": m}))
            .collect();
        serde_json::to_string(&v).unwrap()
    }

    fn cfg(r: usize, cap: usize) -> LlmClientConfig {
        LlmClientConfig {
            query_count: r,
            max_refine_iters: cap,
            fixture_path: Some("unused".into()),
            ..Default::default()
        }
    }

    #[test]
    fn self_refine_reaches_fixed_point() {
        let l = cats(&["cat", "dog", "car"]);
        let p = p_json(&[&["cat", "dog"], &["car"]]);
        let mut client = Recording::new(MockClient::new(MockFixtures {
            generate: vec![p.clone(); 3],
            refine: vec![p.clone(); 5],
        }));
        let out = self_refine_traced(&mut client, &l, &PromptTemplates::default(), &cfg(3, 10)).unwrap();
        assert_eq!(out.refine_calls, 2);
        assert_eq!(out.history.len(), 3);
        assert!(out.converged);
        assert_eq!(client.entries().len(), 5);
    }

    #[test]
    fn self_refine_alternating_hits_cap() {
        let l = cats(&["cat", "dog", "car"]);
        let p = p_json(&[&["cat", "dog"], &["car"]]);
        let q = p_json(&[&["cat"], &["dog", "car"]]);
        let refine: Vec<String> = (0..20).map(|i| if i % 2 == 0 { q.clone() } else { p.clone() }).collect();
        let mut client = MockClient::new(MockFixtures {
            generate: vec![p.clone()],
            refine,
        });
        let out = self_refine_traced(&mut client, &l, &PromptTemplates::default(), &cfg(1, 7)).unwrap();
        assert!(!out.converged);
        assert_eq!(out.refine_calls, 7);
        // z_7 is the 7th refine response (index 6), which is q
        let qp = parse_partition(&q, &l).unwrap();
        assert!(out.partition.same_grouping(&qp));
    }

    #[test]
    fn self_refine_votes_over_generations() {
        let l = cats(&["cat", "dog", "car"]);
        let p1 = p_json(&[&["cat", "dog"], &["car"]]);
        let p2 = p_json(&[&["cat"], &["dog", "car"]]);
        let mut gens = vec![p2.clone(); 3];
        gens.extend(vec![p1.clone(); 7]);
        // Voting oracle: plain frequency count over the parsed fixtures.
        let mut counts: BTreeMap<PartitionKey, usize> = BTreeMap::new();
        for t in &gens {
            *counts.entry(parse_partition(t, &l).unwrap().key()).or_default() += 1;
        }
        let best = counts.iter().max_by_key(|(_, c)| **c).unwrap().0.clone();
        assert_eq!(best, parse_partition(&p1, &l).unwrap().key());

        let mut client = MockClient::new(MockFixtures {
            generate: gens.clone(),
            refine: vec![p1.clone(); 2],
        });
        let out = self_refine_traced(&mut client, &l, &PromptTemplates::default(), &cfg(10, 3)).unwrap();
        assert_eq!(out.history[0].key(), best);
        assert!(out.converged);

        let mut starved = MockClient::new(MockFixtures {
            generate: gens,
            refine: vec![],
        });
        assert!(matches!(
            self_refine(&mut starved, &l, &PromptTemplates::default(), &cfg(10, 3)),
            Err(CpcError::FixtureUnderrun(_))
        ));
    }

    #[test]
    fn all_generations_unparseable_is_an_error() {
        let l = cats(&["cat", "dog"]);
        let mut client = MockClient::new(MockFixtures {
            generate: vec!["nope".into(), "still nothing".into()],
            refine: vec![],
        });
        assert!(matches!(
            self_refine(&mut client, &l, &PromptTemplates::default(), &cfg(2, 3)),
            Err(CpcError::Parse(_))
        ));
    }

    fn arb_partition() -> impl Strategy<Value = (Vec<Vec<String>>, u64)> {
        let names = ["a", "b", "c", "d", "e", "f"];
        (proptest::collection::vec(0usize..3, names.len()), any::<u64>()).prop_map(move |(assign, salt)| {
            let mut groups: Vec<Vec<String>> = vec![Vec::new(); 3];
            for (n, g) in names.iter().zip(assign) {
                groups[g].push(n.to_string());
            }
            groups.retain(|g| !g.is_empty());
            (groups, salt)
        })
    }

    fn shuffled(groups: &[Vec<String>], salt: u64, l: &CategoryList) -> CategoryPartition {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(salt);
        let mut clusters: Vec<Cluster> = groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut members = g.clone();
                members.shuffle(&mut rng);
                Cluster {
                    name: format!("n{}", salt.wrapping_add(i as u64)),
                    members,
                }
            })
            .collect();
        clusters.shuffle(&mut rng);
        CategoryPartition::new(clusters, l).unwrap()
    }

    proptest! {
        #[test]
        fn vote_ignores_names_and_order(
            (g1, s1) in arb_partition(),
            (g2, s2) in arb_partition(),
            salts in proptest::collection::vec(any::<u64>(), 5),
        ) {
            let l = cats(&["a", "b", "c", "d", "e", "f"]);
            let plain = vec![
                shuffled(&g1, 0, &l), shuffled(&g2, 0, &l), shuffled(&g1, 0, &l),
                shuffled(&g2, 0, &l), shuffled(&g2, 0, &l),
            ];
            let noisy: Vec<_> = plain
                .iter()
                .zip(&salts)
                .map(|(p, &s)| shuffled(&p.key(), s ^ s1 ^ s2, &l))
                .collect();
            let a = vote_partitions(&plain).unwrap();
            let b = vote_partitions(&noisy).unwrap();
            prop_assert_eq!(a.key(), b.key());
            prop_assert_eq!(canonicalize(&a), canonicalize(&canonicalize(&a)));
        }
    }
}
