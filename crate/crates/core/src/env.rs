//! Synthetic multi-hop QA environment.
//!
//! Every answerable question is backed by an entity chain
//! `e_0 -> e_1 -> ... -> e_{h-1}` spelled out by link documents
//! (`"e_i relates e_{i+1}"`) and a final attribute document
//! (`"e_{h-1} <attr> <value>"`). The question mentions only `e_0` and the
//! attribute. Unanswerable questions have the same shape with the attribute
//! document left out of the corpus.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{self, Embedding};
use crate::error::{Error, Result};

pub type DocId = u64;
pub type QuestionId = u64;

pub const RELATION: &str = "relates";
pub const ATTRIBUTES: [&str; 6] = ["born", "located", "founded", "capital", "color", "height"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: DocId,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }

    pub fn fact(&self) -> Option<Fact<'_>> {
        Fact::parse(&self.text)
    }
}

/// Structured reading of a document's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fact<'a> {
    Link { subject: &'a str, object: &'a str },
    Attribute { subject: &'a str, attribute: &'a str, value: &'a str },
}

impl<'a> Fact<'a> {
    pub fn parse(text: &'a str) -> Option<Self> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        match toks.as_slice() {
            [s, r, o] if *r == RELATION => Some(Fact::Link { subject: s, object: o }),
            [s, a, v] if ATTRIBUTES.contains(a) => Some(Fact::Attribute { subject: s, attribute: a, value: v }),
            _ => None,
        }
    }

    pub fn subject(&self) -> &'a str {
        match self {
            Fact::Link { subject, .. } | Fact::Attribute { subject, .. } => subject,
        }
    }
}

pub fn is_entity(token: &str) -> bool {
    token.len() > 1 && token.starts_with('e') && token[1..].bytes().all(|b| b.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub question_id: QuestionId,
    pub question_text: String,
    pub gold_answer: String,
    pub gold_doc_ids: BTreeSet<DocId>,
    pub answerable: bool,
    pub hops: usize,
}

impl QuestionInstance {
    pub fn entities(&self) -> Vec<&str> {
        self.question_text.split_whitespace().filter(|t| is_entity(t)).collect()
    }

    pub fn attribute(&self) -> Option<&str> {
        self.question_text.split_whitespace().find(|t| ATTRIBUTES.contains(t))
    }

    pub fn check(&self) -> Result<()> {
        let ok = if self.answerable {
            self.gold_doc_ids.len() == self.hops && !self.gold_answer.is_empty()
        } else {
            self.gold_doc_ids.is_empty()
        };
        if ok && self.hops >= 1 {
            Ok(())
        } else {
            Err(Error::Corrupt {
                what: format!("question {}", self.question_id),
                reason: "gold documents inconsistent with answerable/hops".into(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "text", rename_all = "snake_case")]
pub enum Action {
    Search(String),
    Backtrack,
    Answer(String),
    Refuse,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Search(_) => ActionKind::Search,
            Action::Backtrack => ActionKind::Backtrack,
            Action::Answer(_) => ActionKind::Answer,
            Action::Refuse => ActionKind::Refuse,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::Answer(_) | Action::Refuse)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Action::Search(q) if q.trim().is_empty() => Err(Error::InvalidAction("empty search query".into())),
            Action::Answer(a) if a.trim().is_empty() => Err(Error::InvalidAction("empty answer".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Search(q) => write!(f, "search {q}"),
            Action::Backtrack => f.write_str("backtrack"),
            Action::Answer(a) => write!(f, "answer {a}"),
            Action::Refuse => f.write_str("refuse"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Search,
    Backtrack,
    Answer,
    Refuse,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Search => "search",
            ActionKind::Backtrack => "backtrack",
            ActionKind::Answer => "answer",
            ActionKind::Refuse => "refuse",
        }
    }
}

/// Agent state `(q_<t, D_<t, A_<t)` plus the step counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub question_id: QuestionId,
    pub sub_queries: Vec<String>,
    /// Retrieved ids per sub-query, in rank order.
    pub retrieved_sets: Vec<Vec<DocId>>,
    pub notes: Vec<String>,
    pub t: usize,
    #[serde(default)]
    pub finished: bool,
}

impl EpisodeState {
    pub fn initial(question_id: QuestionId) -> Self {
        EpisodeState {
            question_id,
            sub_queries: Vec::new(),
            retrieved_sets: Vec::new(),
            notes: Vec::new(),
            t: 0,
            finished: false,
        }
    }

    pub fn evidence(&self) -> BTreeSet<DocId> {
        self.retrieved_sets.iter().flatten().copied().collect()
    }

    pub fn backtracks(&self) -> usize {
        self.notes.iter().filter(|n| n.as_str() == "backtrack").count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: EpisodeState,
    pub retrieved: Vec<DocId>,
    pub terminal: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_questions: usize,
    pub hops_min: usize,
    pub hops_max: usize,
    pub distractors_per_question: usize,
    pub unanswerable_fraction: f64,
    pub top_k: usize,
    pub vocab_size: usize,
    /// Hashing dimension used for retrieval and sub-query overlap.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_questions: 300,
            hops_min: 2,
            hops_max: 3,
            distractors_per_question: 3,
            unanswerable_fraction: 0.2,
            top_k: 3,
            vocab_size: 4096,
            embed_dim: 1 << 16,
            seed: 42,
        }
    }
}

impl WorldConfig {
    fn entities_needed(&self) -> usize {
        self.n_questions * (self.hops_max + self.distractors_per_question)
    }

    pub fn unanswerable_count(&self) -> usize {
        (self.unanswerable_fraction * self.n_questions as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_questions == 0 {
            return Err(Error::config("world.n_questions", "must be positive"));
        }
        if self.hops_min == 0 || self.hops_min > self.hops_max {
            return Err(Error::config("world.hops_min", "need 1 <= hops_min <= hops_max"));
        }
        if !(0.0..=1.0).contains(&self.unanswerable_fraction) || !self.unanswerable_fraction.is_finite() {
            return Err(Error::config("world.unanswerable_fraction", "must lie in [0, 1]"));
        }
        if self.top_k == 0 {
            return Err(Error::config("world.top_k", "must be at least 1"));
        }
        if self.embed_dim < embed::MIN_DIM {
            return Err(Error::config("world.embed_dim", "must be at least 8"));
        }
        if self.vocab_size < self.entities_needed() {
            return Err(Error::config(
                "world.vocab_size",
                format!("{} entities required, vocab has {}", self.entities_needed(), self.vocab_size),
            ));
        }
        Ok(())
    }
}

/// Corpus plus questions, with a prebuilt retrieval index.
#[derive(Debug, Clone)]
pub struct World {
    pub corpus: Vec<Document>,
    pub questions: Vec<QuestionInstance>,
    pub top_k: usize,
    pub embed_dim: usize,
    index: Retriever,
}

impl World {
    pub fn new(corpus: Vec<Document>, questions: Vec<QuestionInstance>, top_k: usize, embed_dim: usize) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::config("world.top_k", "must be at least 1"));
        }
        let mut seen = HashSet::new();
        for d in &corpus {
            if !seen.insert(d.doc_id) {
                return Err(Error::Corrupt { what: "corpus".into(), reason: format!("duplicate doc_id {}", d.doc_id) });
            }
        }
        for q in &questions {
            q.check()?;
        }
        let index = Retriever::build(&corpus, embed_dim)?;
        Ok(World { corpus, questions, top_k, embed_dim, index })
    }

    pub fn question(&self, id: QuestionId) -> Result<&QuestionInstance> {
        // ids are dense 0..n when generated; fall back to a scan for imported worlds
        match self.questions.get(id as usize) {
            Some(q) if q.question_id == id => Ok(q),
            _ => self.questions.iter().find(|q| q.question_id == id).ok_or(Error::UnknownQuestion(id)),
        }
    }

    pub fn doc(&self, id: DocId) -> Option<&Document> {
        self.index.position(id).map(|i| &self.corpus[i])
    }

    pub fn retrieve(&self, query: &str) -> Vec<DocId> {
        self.index.search(query, self.top_k)
    }
}

/// Inverted index over hashed document embeddings. Scores are computed with
/// the same arithmetic as [`embed::cosine`].
#[derive(Debug, Clone)]
struct Retriever {
    dim: usize,
    doc_ids: Vec<DocId>,
    norms: Vec<f64>,
    postings: std::collections::HashMap<u32, Vec<(u32, f64)>>,
    by_id: std::collections::HashMap<DocId, usize>,
}

impl Retriever {
    fn build(corpus: &[Document], dim: usize) -> Result<Self> {
        let mut postings: std::collections::HashMap<u32, Vec<(u32, f64)>> = Default::default();
        let mut norms = Vec::with_capacity(corpus.len());
        for (i, d) in corpus.iter().enumerate() {
            let e: Embedding<f64> = embed::embed_text(&d.full_text(), dim)?;
            norms.push(e.norm());
            for &(b, v) in e.entries() {
                postings.entry(b).or_default().push((i as u32, v));
            }
        }
        Ok(Retriever {
            dim,
            doc_ids: corpus.iter().map(|d| d.doc_id).collect(),
            norms,
            postings,
            by_id: corpus.iter().enumerate().map(|(i, d)| (d.doc_id, i)).collect(),
        })
    }

    fn position(&self, id: DocId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    fn search(&self, query: &str, top_k: usize) -> Vec<DocId> {
        if self.doc_ids.is_empty() {
            return Vec::new();
        }
        let q: Embedding<f64> = match embed::embed_text(query, self.dim) {
            Ok(q) => q,
            Err(_) => return Vec::new(),
        };
        let mut dots = vec![0.0f64; self.doc_ids.len()];
        for &(b, qv) in q.entries() {
            if let Some(list) = self.postings.get(&b) {
                for &(i, dv) in list {
                    dots[i as usize] += qv * dv;
                }
            }
        }
        let qn = q.norm();
        let mut scored: Vec<(f64, DocId)> = dots
            .iter()
            .enumerate()
            .map(|(i, &dot)| {
                let s = if q.is_zero() || dot == 0.0 { 0.0 } else { (dot / (qn * self.norms[i])).clamp(-1.0, 1.0) };
                (s, self.doc_ids[i])
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(top_k).map(|(_, id)| id).collect()
    }
}

/// Reference retrieval: scores every document with [`embed::cosine`] and
/// sorts by score descending, then by ascending id.
pub fn retrieve(query: &str, corpus: &[Document], top_k: usize, dim: usize) -> Result<Vec<DocId>> {
    if top_k == 0 {
        return Err(Error::config("top_k", "must be at least 1"));
    }
    let q: Embedding<f64> = embed::embed_text(query, dim)?;
    let mut scored = Vec::with_capacity(corpus.len());
    for d in corpus {
        let e = embed::embed_text(&d.full_text(), dim)?;
        scored.push((embed::cosine(&q, &e)?, d.doc_id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(top_k).map(|(_, id)| id).collect())
}

/// Evidence oracle: all gold documents of an answerable question retrieved.
pub fn verifier(state: &EpisodeState, question: &QuestionInstance) -> bool {
    if !question.answerable || question.gold_doc_ids.is_empty() {
        return false;
    }
    let evidence = state.evidence();
    question.gold_doc_ids.is_subset(&evidence)
}

pub fn step(state: &EpisodeState, action: &Action, world: &World, t_max: usize) -> Result<StepOutcome> {
    if state.finished || state.t >= t_max {
        return Err(Error::TerminalState);
    }
    action.validate()?;
    let mut next = state.clone();
    let mut retrieved = Vec::new();
    match action {
        Action::Search(q) => {
            retrieved = world.retrieve(q);
            next.sub_queries.push(q.clone());
            next.retrieved_sets.push(retrieved.clone());
            next.notes.push(format!("search {q}"));
        }
        Action::Backtrack => {
            next.sub_queries.pop();
            next.retrieved_sets.pop();
            next.notes.push("backtrack".into());
        }
        Action::Answer(a) => next.notes.push(format!("answer {a}")),
        Action::Refuse => next.notes.push("refuse".into()),
    }
    next.t += 1;
    let truncated = !action.is_terminal() && next.t >= t_max;
    let terminal = action.is_terminal() || truncated;
    next.finished = terminal;
    Ok(StepOutcome { next_state: next, retrieved, terminal, truncated })
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut entity_pool: Vec<usize> = (0..cfg.vocab_size).collect();
    entity_pool.shuffle(&mut rng);
    let mut entities = entity_pool.into_iter().map(|i| format!("e{i}"));
    let value = |rng: &mut ChaCha8Rng| format!("v{}", rng.gen_range(0..cfg.vocab_size));

    let n_unanswerable = cfg.unanswerable_count();
    let mut order: Vec<usize> = (0..cfg.n_questions).collect();
    order.shuffle(&mut rng);
    let unanswerable: HashSet<usize> = order.into_iter().take(n_unanswerable).collect();

    // (question index, is_gold, title, text)
    let mut pending: Vec<(usize, bool, String, String)> = Vec::new();
    let mut drafts = Vec::with_capacity(cfg.n_questions);
    for qi in 0..cfg.n_questions {
        let hops = rng.gen_range(cfg.hops_min..=cfg.hops_max);
        let answerable = !unanswerable.contains(&qi);
        let chain: Vec<String> = (0..hops).map(|_| entities.next().unwrap()).collect();
        let attribute = ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())];
        let others: Vec<&str> = ATTRIBUTES.iter().copied().filter(|a| *a != attribute).collect();
        let answer = value(&mut rng);

        for w in chain.windows(2) {
            pending.push((qi, answerable, w[0].clone(), format!("{} {RELATION} {}", w[0], w[1])));
        }
        let last = chain.last().unwrap();
        if answerable {
            pending.push((qi, true, last.clone(), format!("{last} {attribute} {answer}")));
        }
        for k in 0..cfg.distractors_per_question {
            let kind = if hops == 1 && k % 4 == 0 { 1 } else { k % 4 };
            let (title, text) = match kind {
                0 => {
                    let mut wrong = value(&mut rng);
                    while wrong == answer {
                        wrong = value(&mut rng);
                    }
                    (chain[0].clone(), format!("{} {attribute} {wrong}", chain[0]))
                }
                1 => {
                    let other = others[rng.gen_range(0..others.len())];
                    (last.clone(), format!("{last} {other} {}", value(&mut rng)))
                }
                2 => {
                    let fresh = entities.next().unwrap();
                    let target = &chain[rng.gen_range(0..hops)];
                    (fresh.clone(), format!("{fresh} {RELATION} {target}"))
                }
                _ => {
                    let subject = &chain[rng.gen_range(0..hops)];
                    let other = others[rng.gen_range(0..others.len())];
                    (subject.clone(), format!("{subject} {other} {}", value(&mut rng)))
                }
            };
            pending.push((qi, false, title, text));
        }
        drafts.push((hops, answerable, chain[0].clone(), attribute, answer));
    }

    pending.shuffle(&mut rng);
    let mut gold: Vec<BTreeSet<DocId>> = vec![BTreeSet::new(); cfg.n_questions];
    let corpus: Vec<Document> = pending
        .into_iter()
        .enumerate()
        .map(|(i, (qi, is_gold, title, text))| {
            if is_gold {
                gold[qi].insert(i as DocId);
            }
            Document { doc_id: i as DocId, title, text }
        })
        .collect();

    let questions = drafts
        .into_iter()
        .enumerate()
        .map(|(qi, (hops, answerable, head, attribute, answer))| QuestionInstance {
            question_id: qi as QuestionId,
            question_text: format!("which {attribute} via {head}"),
            gold_answer: if answerable { answer } else { String::new() },
            gold_doc_ids: std::mem::take(&mut gold[qi]),
            answerable,
            hops,
        })
        .collect();

    World::new(corpus, questions, cfg.top_k, cfg.embed_dim)
}
