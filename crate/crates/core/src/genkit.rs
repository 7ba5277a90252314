//! Prompt assembly and text generation.
//!
//! An assembled prompt has the layout
//!
//! ```text
//! {system text}
//!
//! Context [1]:
//! {highest-ranked chunk}
//!
//! Context [2]:
//! ...
//!
//! Question: {user query}
//! ```
//!
//! Chunks are admitted in rank order while the whole prompt, headers included,
//! stays within `window_units - reserve_units`. The first chunk that does not
//! fit is dropped together with every lower-ranked chunk.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chunker::estimate_tokens;
use crate::corpus::{ChatRecord, Role};
use crate::transport::{RemoteClient, RemoteConfig, RemoteError, Transport, UreqTransport};
use crate::{DEFAULT_RESERVE_UNITS, DEFAULT_WINDOW_UNITS};

/// Units taken by the `Question:` label.
const QUESTION_LABEL_UNITS: usize = 1;
/// Units taken by a `Context [i]:` header.
const CONTEXT_HEADER_UNITS: usize = 2;

pub const DEFAULT_STUB_FALLBACK: &str =
    "I could not find relevant information in the knowledge base.";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GenError {
    #[error("system text and query need {needed} units but the prompt budget is {budget}")]
    QueryTooLarge { needed: usize, budget: usize },
    #[error("invalid prompt bundle: {0}")]
    InvalidBundle(String),
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextChunk {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    /// Ordered by descending score.
    pub context_chunks: Vec<ContextChunk>,
    pub user_query: String,
    pub window_units: usize,
    pub reserve_units: usize,
}

impl PromptBundle {
    pub fn new(
        system_text: impl Into<String>,
        context_chunks: Vec<ContextChunk>,
        user_query: impl Into<String>,
    ) -> Self {
        Self {
            system_text: system_text.into(),
            context_chunks,
            user_query: user_query.into(),
            window_units: DEFAULT_WINDOW_UNITS,
            reserve_units: DEFAULT_RESERVE_UNITS,
        }
    }

    pub fn budget(&self) -> usize {
        self.window_units.saturating_sub(self.reserve_units)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub system_text: String,
    /// Everything after the system text: context blocks and the question.
    pub body: String,
    pub user_query: String,
    pub included_chunks: Vec<String>,
    pub included_chunk_count: usize,
    pub dropped_chunk_count: usize,
    pub token_estimate: usize,
}

impl AssembledPrompt {
    /// System message (when present) followed by one user message.
    pub fn messages(&self) -> Vec<ChatRecord> {
        let mut out = Vec::with_capacity(2);
        if !self.system_text.trim().is_empty() {
            out.push(ChatRecord::new(Role::System, self.system_text.clone()));
        }
        out.push(ChatRecord::new(Role::User, self.body.clone()));
        out
    }
}

pub fn assemble_prompt(bundle: &PromptBundle) -> Result<AssembledPrompt, GenError> {
    if bundle.window_units == 0 || bundle.reserve_units >= bundle.window_units {
        return Err(GenError::InvalidBundle(format!(
            "reserve_units ({}) must be below window_units ({})",
            bundle.reserve_units, bundle.window_units
        )));
    }
    if bundle
        .context_chunks
        .windows(2)
        .any(|w| w[0].score.total_cmp(&w[1].score).is_lt())
    {
        return Err(GenError::InvalidBundle(
            "context chunks are not in descending score order".into(),
        ));
    }
    let budget = bundle.budget();
    let mut used = estimate_tokens(&bundle.system_text)
        + QUESTION_LABEL_UNITS
        + estimate_tokens(&bundle.user_query);
    if used > budget {
        return Err(GenError::QueryTooLarge {
            needed: used,
            budget,
        });
    }

    let mut included = Vec::new();
    for chunk in &bundle.context_chunks {
        let cost = CONTEXT_HEADER_UNITS + estimate_tokens(&chunk.text);
        if used + cost > budget {
            break;
        }
        used += cost;
        included.push(chunk.text.clone());
    }

    let mut blocks: Vec<String> = included
        .iter()
        .enumerate()
        .map(|(i, text)| format!("Context [{}]:\n{}", i + 1, text))
        .collect();
    blocks.push(format!("Question: {}", bundle.user_query));
    let body = blocks.join("\n\n");
    let text = if bundle.system_text.is_empty() {
        body.clone()
    } else {
        format!("{}\n\n{}", bundle.system_text, body)
    };
    let token_estimate = estimate_tokens(&text);
    debug_assert_eq!(token_estimate, used);

    Ok(AssembledPrompt {
        text,
        system_text: bundle.system_text.clone(),
        body,
        user_query: bundle.user_query.clone(),
        included_chunk_count: included.len(),
        dropped_chunk_count: bundle.context_chunks.len() - included.len(),
        included_chunks: included,
        token_estimate,
    })
}

/// Llama-2 chat wrapping with the system text under a `<sys>` block.
///
/// Not idempotent: wrapping an already wrapped prompt nests the template.
pub fn wrap_llama_chat(system_text: &str, user_text: &str) -> String {
    if system_text.is_empty() {
        format!("<s>[INST] {user_text} [/INST]")
    } else {
        format!("<s>[INST] <sys>\n{system_text}\n</sys>\n\n{user_text} [/INST]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "text")]
pub enum StubMode {
    EchoQuery,
    /// The value is returned when there is no context.
    ExtractFirstContextSentence(String),
    FixedText(String),
}

impl StubMode {
    pub fn extract_with_default_fallback() -> Self {
        StubMode::ExtractFirstContextSentence(DEFAULT_STUB_FALLBACK.to_string())
    }
}

/// Text up to and including the first `.`, `!` or `?` that ends the text or precedes whitespace.
pub fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => return text,
                Some((_, next)) if next.is_whitespace() => return &text[..i + c.len_utf8()],
                _ => {}
            }
        }
    }
    text
}

pub fn generate_stub(prompt: &AssembledPrompt, mode: &StubMode) -> String {
    match mode {
        StubMode::EchoQuery => prompt.user_query.clone(),
        StubMode::ExtractFirstContextSentence(fallback) => prompt
            .included_chunks
            .first()
            .map(|c| first_sentence(c).to_string())
            .unwrap_or_else(|| fallback.clone()),
        StubMode::FixedText(text) => text.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_output_units: usize,
    /// Requests temperature 0 from remote providers. Stubs are always deterministic.
    pub deterministic: bool,
    /// Overrides the provider's configured model.
    #[serde(default)]
    pub model: Option<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_output_units: DEFAULT_RESERVE_UNITS,
            deterministic: true,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub usage: Option<Usage>,
}

pub trait Generator: Send + Sync {
    fn provider_tag(&self) -> String;

    fn generate(
        &self,
        prompt: &AssembledPrompt,
        params: &GenerationParams,
    ) -> Result<Generation, GenError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubGenerator {
    pub mode: StubMode,
}

impl StubGenerator {
    pub fn new(mode: StubMode) -> Self {
        Self { mode }
    }
}

impl Generator for StubGenerator {
    fn provider_tag(&self) -> String {
        let mode = match self.mode {
            StubMode::EchoQuery => "echo_query",
            StubMode::ExtractFirstContextSentence(_) => "extract_first_context_sentence",
            StubMode::FixedText(_) => "fixed_text",
        };
        format!("stub:{mode}")
    }

    fn generate(
        &self,
        prompt: &AssembledPrompt,
        _params: &GenerationParams,
    ) -> Result<Generation, GenError> {
        Ok(Generation {
            text: generate_stub(prompt, &self.mode),
            usage: None,
        })
    }
}

/// Chat-completions client: `{model, messages}` in, `choices[0].message.content` out.
pub struct RemoteChat {
    client: RemoteClient,
}

impl RemoteChat {
    pub fn new(config: RemoteConfig, transport: Arc<dyn Transport>) -> Self {
        Self {
            client: RemoteClient::new(config, transport),
        }
    }

    /// Configured from `GEN_ENDPOINT`, `GEN_MODEL` and `GEN_API_KEY`.
    pub fn from_env() -> Result<Self, GenError> {
        Ok(Self::new(
            RemoteConfig::from_env("GEN")?,
            Arc::new(UreqTransport::default()),
        ))
    }

    pub fn request_body(&self, messages: &[ChatRecord], params: &GenerationParams) -> Value {
        let model = params
            .model
            .as_deref()
            .unwrap_or(&self.client.config().model);
        let mut body = json!({
            "model": model,
            "messages": messages,
            "max_tokens": params.max_output_units,
        });
        if params.deterministic {
            body["temperature"] = json!(0);
        }
        body
    }

    pub fn generate_remote(
        &self,
        messages: &[ChatRecord],
        params: &GenerationParams,
    ) -> Result<Generation, GenError> {
        let reply = self.client.call(&self.request_body(messages, params))?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(GenError::EmptyCompletion);
        }
        let usage = reply
            .get("usage")
            .and_then(|u| serde_json::from_value::<Usage>(u.clone()).ok());
        Ok(Generation {
            text: text.to_string(),
            usage,
        })
    }
}

impl Generator for RemoteChat {
    fn provider_tag(&self) -> String {
        format!("remote:{}", self.client.config().model)
    }

    fn generate(
        &self,
        prompt: &AssembledPrompt,
        params: &GenerationParams,
    ) -> Result<Generation, GenError> {
        self.generate_remote(&prompt.messages(), params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::testing::{fast_config, ScriptedTransport};
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    fn chunks(sizes: &[usize]) -> Vec<ContextChunk> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| ContextChunk {
                text: words(n),
                score: 1.0 - i as f64 * 0.1,
            })
            .collect()
    }

    #[test]
    fn empty_context() {
        let p = assemble_prompt(&PromptBundle::new(
            "You are a careful assistant.",
            vec![],
            "what causes fever",
        ))
        .unwrap();
        assert_eq!(
            p.text,
            "You are a careful assistant.\n\nQuestion: what causes fever"
        );
        assert_eq!((p.included_chunk_count, p.dropped_chunk_count), (0, 0));
    }

    #[test]
    fn four_small_chunks_fit_default_window() {
        let bundle = PromptBundle::new("sys", chunks(&[100, 100, 100, 100]), "q");
        assert_eq!(bundle.budget(), 3584);
        let p = assemble_prompt(&bundle).unwrap();
        assert_eq!((p.included_chunk_count, p.dropped_chunk_count), (4, 0));
        let firsts: Vec<usize> = (1..=4)
            .map(|i| p.text.find(&format!("Context [{i}]:")).unwrap())
            .collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn greedy_drop_stops_at_first_misfit() {
        // 2000 + 1500 = 3500 fits in 3584 with headers and a short query; adding 900 does not
        let p = assemble_prompt(&PromptBundle::new(
            "sys",
            chunks(&[2000, 1500, 900, 10]),
            "q",
        ))
        .unwrap();
        assert_eq!((p.included_chunk_count, p.dropped_chunk_count), (2, 2));
        assert_eq!(p.token_estimate, 1 + 2 + 2000 + 2 + 1500 + 1 + 1);
    }

    #[test]
    fn query_too_large() {
        let mut bundle = PromptBundle::new("", vec![], words(3584));
        assert!(matches!(
            assemble_prompt(&bundle),
            Err(GenError::QueryTooLarge { budget: 3584, .. })
        ));
        bundle.user_query = words(3583);
        assert_eq!(assemble_prompt(&bundle).unwrap().token_estimate, 3584);
    }

    #[test]
    fn bundle_validation() {
        let mut bundle = PromptBundle::new("s", chunks(&[1, 1]), "q");
        bundle.context_chunks.reverse();
        assert!(matches!(
            assemble_prompt(&bundle),
            Err(GenError::InvalidBundle(_))
        ));
        let mut bundle = PromptBundle::new("s", vec![], "q");
        bundle.reserve_units = bundle.window_units;
        assert!(matches!(
            assemble_prompt(&bundle),
            Err(GenError::InvalidBundle(_))
        ));
    }

    #[test]
    fn messages_split_system_and_body() {
        let p = assemble_prompt(&PromptBundle::new("sys", chunks(&[2]), "q")).unwrap();
        let m = p.messages();
        assert_eq!(m[0], ChatRecord::new(Role::System, "sys"));
        assert_eq!(
            m[1],
            ChatRecord::new(Role::User, "Context [1]:\nw w\n\nQuestion: q")
        );
        let p = assemble_prompt(&PromptBundle::new("", vec![], "q")).unwrap();
        assert_eq!(
            p.messages(),
            vec![ChatRecord::new(Role::User, "Question: q")]
        );
    }

    #[test]
    fn llama_template() {
        assert_eq!(
            wrap_llama_chat("be helpful", "hi"),
            "<s>[INST] <sys>\nbe helpful\n</sys>\n\nhi [/INST]"
        );
        assert_eq!(wrap_llama_chat("", "hi"), "<s>[INST] hi [/INST]");
        let once = wrap_llama_chat("", "hi");
        assert_eq!(
            wrap_llama_chat("", &once),
            "<s>[INST] <s>[INST] hi [/INST] [/INST]"
        );
    }

    #[test]
    fn stubs() {
        let bundle = PromptBundle::new(
            "sys",
            vec![ContextChunk {
                text: "Fever is common. See a doctor.".into(),
                score: 0.9,
            }],
            "what causes fever",
        );
        let p = assemble_prompt(&bundle).unwrap();
        assert_eq!(generate_stub(&p, &StubMode::EchoQuery), "what causes fever");
        assert_eq!(
            generate_stub(&p, &StubMode::extract_with_default_fallback()),
            "Fever is common."
        );
        assert_eq!(generate_stub(&p, &StubMode::FixedText("ok".into())), "ok");

        let empty = assemble_prompt(&PromptBundle::new("sys", vec![], "q")).unwrap();
        assert_eq!(
            generate_stub(
                &empty,
                &StubMode::ExtractFirstContextSentence("nothing".into())
            ),
            "nothing"
        );
    }

    #[test]
    fn sentence_rule() {
        assert_eq!(
            first_sentence("Take 2.5 mg daily. Then stop."),
            "Take 2.5 mg daily."
        );
        assert_eq!(
            first_sentence("  No terminator here "),
            "No terminator here"
        );
        assert_eq!(first_sentence("Really?! Yes."), "Really?!");
    }

    #[test]
    fn remote_sends_messages_in_order() {
        let transport = Arc::new(ScriptedTransport::new(vec![ScriptedTransport::ok(json!({
            "choices": [{"message": {"role": "assistant", "content": "Rest and fluids."}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3, "total_tokens": 15}
        }))]));
        let chat = RemoteChat::new(fast_config(), transport.clone());
        let messages = vec![
            ChatRecord::new(Role::System, "s"),
            ChatRecord::new(Role::User, "u1"),
            ChatRecord::new(Role::Assistant, "a1"),
            ChatRecord::new(Role::User, "u2"),
        ];
        let out = chat
            .generate_remote(&messages, &GenerationParams::default())
            .unwrap();
        assert_eq!(out.text, "Rest and fluids.");
        assert_eq!(out.usage.unwrap().total_tokens, 15);
        let sent = transport.requests.lock().unwrap()[0].2.clone();
        assert_eq!(sent["messages"], serde_json::to_value(&messages).unwrap());
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["temperature"], 0);
    }

    #[test]
    fn remote_error_mapping() {
        let transport = Arc::new(ScriptedTransport::new(
            (0..4).map(|_| ScriptedTransport::status(429)).collect(),
        ));
        let chat = RemoteChat::new(fast_config(), transport.clone());
        let err = chat
            .generate_remote(&[], &GenerationParams::default())
            .unwrap_err();
        assert!(matches!(
            err,
            GenError::Remote(RemoteError::Provider { status: 429, .. })
        ));
        assert_eq!(transport.requests.lock().unwrap().len(), 4);

        let transport = Arc::new(ScriptedTransport::new(vec![ScriptedTransport::ok(
            json!({"choices": []}),
        )]));
        let chat = RemoteChat::new(fast_config(), transport);
        assert_eq!(
            chat.generate_remote(&[], &GenerationParams::default()),
            Err(GenError::EmptyCompletion)
        );
    }

    proptest! {
        #[test]
        fn prompt_stays_in_budget_and_inclusion_is_prefix_closed(
            sizes in proptest::collection::vec(0usize..1500, 0..8),
            system in 0usize..200,
            query in 1usize..200,
        ) {
            let bundle = PromptBundle::new(words(system), chunks(&sizes), words(query));
            let p = assemble_prompt(&bundle).unwrap();
            prop_assert!(estimate_tokens(&p.text) <= bundle.budget());
            prop_assert_eq!(p.included_chunk_count + p.dropped_chunk_count, sizes.len());
            for (i, text) in p.included_chunks.iter().enumerate() {
                prop_assert_eq!(text, &bundle.context_chunks[i].text);
            }
            prop_assert_eq!(assemble_prompt(&bundle).unwrap(), p);
        }
    }
}
