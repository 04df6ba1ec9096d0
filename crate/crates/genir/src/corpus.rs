//! Deterministic synthetic retrieval corpus: a partitioned vocabulary
//! (word tokens vs. atomic document-identifier tokens), per-document topic
//! clusters, retrieval queries, and the interleaved indexing/retrieval
//! example stream used for multitask training.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest topic cluster a document may have.
pub const CLUSTER_MIN: usize = 8;
/// Largest topic cluster a document may have (kept small so encoder passes
/// over document bodies stay cheap).
pub const CLUSTER_MAX: usize = 16;
/// Longest document body accepted for direct indexing.
pub const MAX_INDEX_LEN: usize = 32;
/// Tokens per query drawn from the document's cluster.
pub const QUERY_CLUSTER_MIN: usize = 3;
pub const QUERY_CLUSTER_MAX: usize = 6;
/// Upper bound on off-cluster noise tokens per query.
pub const QUERY_NOISE_MAX: usize = 2;

const GENERATION_RETRIES: usize = 500;

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Which side of the vocabulary a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Special,
    Word,
    DocId,
}

/// Token space split into word tokens, atomic document-identifier tokens,
/// and the two specials (pad, start-of-sentence).
///
/// Layout: `[pad, sos, word tokens..., docid tokens...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    word_tokens: Vec<String>,
    docid_tokens: Vec<String>,
    special: [String; 2],
}

impl Vocabulary {
    pub fn new(n_word_tokens: usize, n_docids: usize) -> Self {
        let word_tokens = (0..n_word_tokens).map(|i| format!("w{i:04}")).collect();
        let docid_tokens = (0..n_docids).map(|i| format!("D{i:04}")).collect();
        Self {
            word_tokens,
            docid_tokens,
            special: ["<pad>".to_string(), "<sos>".to_string()],
        }
    }

    /// Total vocabulary size `d_V`.
    pub fn len(&self) -> usize {
        self.word_tokens.len() + self.docid_tokens.len() + self.special.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pad(&self) -> TokenId {
        TokenId(0)
    }

    pub fn sos(&self) -> TokenId {
        TokenId(1)
    }

    pub fn n_words(&self) -> usize {
        self.word_tokens.len()
    }

    pub fn n_docids(&self) -> usize {
        self.docid_tokens.len()
    }

    pub fn word(&self, i: usize) -> TokenId {
        assert!(i < self.word_tokens.len());
        TokenId((2 + i) as u32)
    }

    pub fn docid(&self, i: usize) -> TokenId {
        assert!(i < self.docid_tokens.len());
        TokenId((2 + self.word_tokens.len() + i) as u32)
    }

    /// Position of a docid token within the docid partition.
    pub fn docid_ordinal(&self, t: TokenId) -> Option<usize> {
        match self.partition_of(t)? {
            Partition::DocId => Some(t.index() - 2 - self.word_tokens.len()),
            _ => None,
        }
    }

    pub fn partition_of(&self, t: TokenId) -> Option<Partition> {
        let i = t.index();
        if i < 2 {
            Some(Partition::Special)
        } else if i < 2 + self.word_tokens.len() {
            Some(Partition::Word)
        } else if i < self.len() {
            Some(Partition::DocId)
        } else {
            None
        }
    }

    pub fn is_word(&self, t: TokenId) -> bool {
        self.partition_of(t) == Some(Partition::Word)
    }

    pub fn is_docid(&self, t: TokenId) -> bool {
        self.partition_of(t) == Some(Partition::DocId)
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        self.partition_of(t) == Some(Partition::Special)
    }

    pub fn token_str(&self, t: TokenId) -> Result<&str> {
        let i = t.index();
        match self.partition_of(t) {
            Some(Partition::Special) => Ok(&self.special[i]),
            Some(Partition::Word) => Ok(&self.word_tokens[i - 2]),
            Some(Partition::DocId) => Ok(&self.docid_tokens[i - 2 - self.word_tokens.len()]),
            None => Err(Error::UnknownToken(t.0)),
        }
    }

    pub fn token_id(&self, s: &str) -> Option<TokenId> {
        if let Some(i) = self.special.iter().position(|t| t == s) {
            return Some(TokenId(i as u32));
        }
        if let Some(i) = self.word_tokens.iter().position(|t| t == s) {
            return Some(self.word(i));
        }
        self.docid_tokens
            .iter()
            .position(|t| t == s)
            .map(|i| self.docid(i))
    }

    pub fn docid_token_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.docid_tokens.len()).map(|i| self.docid(i))
    }
}

/// One synthetic document: an atomic identifier token plus a body of word
/// tokens drawn from the document's topic cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: TokenId,
    pub body: Vec<TokenId>,
}

/// Corpus plus the vocabulary it is expressed in.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn doc_for_docid(&self, docid: TokenId) -> Option<&Document> {
        self.vocab
            .docid_ordinal(docid)
            .and_then(|i| self.docs.get(i))
    }
}

/// Example split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Index,
    Retrieve,
}

/// One training or evaluation example: token input mapping to a docid token.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub kind: ExampleKind,
    pub input: Vec<TokenId>,
    pub target: TokenId,
    pub split: Split,
}

/// Multitask example pool: all indexing pairs, all retrieval pairs, and the
/// interleaved training stream at the configured indexing:retrieval ratio.
#[derive(Debug, Clone)]
pub struct ExampleSet {
    pub indexing_examples: Vec<Example>,
    pub retrieval_examples: Vec<Example>,
    pub ratio: u32,
    /// Training order: blocks of `ratio` indexing examples followed by one
    /// train-split retrieval example.
    pub stream: Vec<Example>,
}

impl ExampleSet {
    pub fn retrieval_split(&self, split: Split) -> Vec<&Example> {
        self.retrieval_examples
            .iter()
            .filter(|e| e.split == split)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, from: usize) -> Vec<usize> {
    debug_assert!(n <= from);
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        let c = rng.gen_range(0..from);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

fn overlap_count(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().filter(|t| b.contains(t)).count()
}

/// Bodies are distinct enough when any two share fewer than half the
/// tokens of the smaller body.
fn distinct_enough(a: &[TokenId], b: &[TokenId]) -> bool {
    2 * overlap_count(a, b) < a.len().min(b.len())
}

/// Generates `n_docs` documents over a fresh vocabulary of `n_word_tokens`
/// word tokens. Each body is a shuffled topic cluster of
/// [`CLUSTER_MIN`]..=[`CLUSTER_MAX`] distinct word tokens; any two bodies
/// share fewer than half their tokens. Deterministic in `seed`.
pub fn generate_corpus(seed: u64, n_docs: usize, n_word_tokens: usize) -> Result<Corpus> {
    if n_docs < 2 {
        return Err(Error::Corpus(format!("need at least 2 documents, got {n_docs}")));
    }
    if n_word_tokens < 20 {
        return Err(Error::Corpus(format!(
            "need at least 20 word tokens, got {n_word_tokens}"
        )));
    }
    let vocab = Vocabulary::new(n_word_tokens, n_docs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs: Vec<Document> = Vec::with_capacity(n_docs);
    let cluster_max = CLUSTER_MAX.min(n_word_tokens).min(MAX_INDEX_LEN);

    for d in 0..n_docs {
        let mut accepted = None;
        for _ in 0..GENERATION_RETRIES {
            let size = rng.gen_range(CLUSTER_MIN..=cluster_max);
            let mut body: Vec<TokenId> = sample_distinct(&mut rng, size, n_word_tokens)
                .into_iter()
                .map(|i| vocab.word(i))
                .collect();
            body.shuffle(&mut rng);
            if docs.iter().all(|doc| distinct_enough(&doc.body, &body)) {
                accepted = Some(body);
                break;
            }
        }
        match accepted {
            Some(body) => docs.push(Document {
                doc_id: vocab.docid(d),
                body,
            }),
            None => {
                return Err(Error::Corpus(format!(
                    "could not draw a distinct body for document {d}: \
                     {n_word_tokens} word tokens is too few for {n_docs} documents"
                )))
            }
        }
    }
    Ok(Corpus { vocab, docs })
}

/// Generates `n_queries_per_doc` retrieval examples per document: 3-6
/// tokens from the document's cluster plus up to [`QUERY_NOISE_MAX`]
/// off-cluster noise tokens, split train/validation/test with disjoint
/// query sets per document. Deterministic in `seed`.
pub fn make_queries(corpus: &Corpus, seed: u64, n_queries_per_doc: usize) -> Result<Vec<Example>> {
    if corpus.docs.is_empty() {
        return Err(Error::Corpus("empty corpus".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = &corpus.vocab;
    let off_cluster: Vec<Vec<usize>> = corpus
        .docs
        .iter()
        .map(|doc| {
            (0..vocab.n_words())
                .filter(|&w| !doc.body.contains(&vocab.word(w)))
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(corpus.docs.len() * n_queries_per_doc);
    for (d, doc) in corpus.docs.iter().enumerate() {
        let mut seen: Vec<Vec<TokenId>> = Vec::new();
        for q in 0..n_queries_per_doc {
            let mut query = None;
            for _ in 0..GENERATION_RETRIES {
                let n_cluster = rng.gen_range(QUERY_CLUSTER_MIN..=QUERY_CLUSTER_MAX.min(doc.body.len()));
                let mut tokens: Vec<TokenId> = sample_distinct(&mut rng, n_cluster, doc.body.len())
                    .into_iter()
                    .map(|i| doc.body[i])
                    .collect();
                let n_noise = rng.gen_range(0..=QUERY_NOISE_MAX);
                for _ in 0..n_noise {
                    if off_cluster[d].is_empty() {
                        break;
                    }
                    let w = off_cluster[d][rng.gen_range(0..off_cluster[d].len())];
                    tokens.push(vocab.word(w));
                }
                tokens.shuffle(&mut rng);
                if !seen.contains(&tokens) {
                    query = Some(tokens);
                    break;
                }
            }
            let Some(tokens) = query else {
                return Err(Error::Corpus(format!(
                    "could not draw {n_queries_per_doc} distinct queries for document {d}"
                )));
            };
            seen.push(tokens.clone());
            // 3:1:1 train/validation/test over the per-document query index.
            let split = match q % 5 {
                3 => Split::Validation,
                4 => Split::Test,
                _ => Split::Train,
            };
            out.push(Example {
                kind: ExampleKind::Retrieve,
                input: tokens,
                target: doc.doc_id,
                split,
            });
        }
    }
    Ok(out)
}

/// Builds the multitask example pool: one indexing example per document,
/// the provided retrieval examples, and a training stream interleaving
/// `ratio` indexing examples per train-split retrieval example (indexing
/// examples cycle in reshuffled passes). Deterministic in `seed`.
pub fn build_examples(
    corpus: &Corpus,
    queries: &[Example],
    ratio: u32,
    seed: u64,
) -> Result<ExampleSet> {
    if ratio < 1 {
        return Err(Error::InvalidArgument(format!(
            "indexing:retrieval ratio must be >= 1, got {ratio}"
        )));
    }
    for q in queries {
        if corpus.doc_for_docid(q.target).is_none() {
            return Err(Error::Corpus(format!(
                "retrieval example targets unknown docid token {}",
                q.target.0
            )));
        }
    }
    let indexing_examples: Vec<Example> = corpus
        .docs
        .iter()
        .map(|doc| Example {
            kind: ExampleKind::Index,
            input: doc.body.clone(),
            target: doc.doc_id,
            split: Split::Train,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<&Example> = queries.iter().filter(|q| q.split == Split::Train).collect();
    train.shuffle(&mut rng);

    let mut index_order: Vec<usize> = (0..indexing_examples.len()).collect();
    index_order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut next_index = |rng: &mut ChaCha8Rng| {
        if cursor == index_order.len() {
            index_order.shuffle(rng);
            cursor = 0;
        }
        let e = indexing_examples[index_order[cursor]].clone();
        cursor += 1;
        e
    };

    let mut stream = Vec::new();
    if train.is_empty() {
        // Indexing-only set: one shuffled pass over the documents.
        for _ in 0..indexing_examples.len() {
            stream.push(next_index(&mut rng));
        }
    } else {
        for q in &train {
            for _ in 0..ratio {
                stream.push(next_index(&mut rng));
            }
            stream.push((*q).clone());
        }
    }

    Ok(ExampleSet {
        indexing_examples,
        retrieval_examples: queries.to_vec(),
        ratio,
        stream,
    })
}

// ---------------------------------------------------------------------------
// Nearest-neighbor learnability baseline
// ---------------------------------------------------------------------------

/// Fraction of queries for which a bag-of-words overlap scorer over the
/// document bodies retrieves the gold document (ties broken toward the
/// lower document index count as misses unless the gold wins outright).
pub fn nn_baseline_hits_at_1(corpus: &Corpus, queries: &[Example]) -> f64 {
    if queries.is_empty() {
        return 1.0;
    }
    let mut hits = 0usize;
    for q in queries {
        let mut best_doc = 0usize;
        let mut best_score = usize::MIN;
        for (d, doc) in corpus.docs.iter().enumerate() {
            let score = overlap_count(&q.input, &doc.body);
            if score > best_score {
                best_score = score;
                best_doc = d;
            }
        }
        if corpus.docs[best_doc].doc_id == q.target {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

// ---------------------------------------------------------------------------
// Line-delimited JSON serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DocumentLine {
    doc_id: String,
    body: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    kind: ExampleKind,
    input: Vec<String>,
    target: String,
    split: Split,
}

pub fn write_corpus_jsonl(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    for doc in &corpus.docs {
        let line = DocumentLine {
            doc_id: corpus.vocab.token_str(doc.doc_id)?.to_string(),
            body: doc
                .body
                .iter()
                .map(|&t| corpus.vocab.token_str(t).map(str::to_string))
                .collect::<Result<_>>()?,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus_jsonl(vocab: &Vocabulary, r: impl BufRead) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DocumentLine = serde_json::from_str(&line)?;
        let doc_id = vocab
            .token_id(&parsed.doc_id)
            .ok_or_else(|| Error::Corpus(format!("unknown docid token {}", parsed.doc_id)))?;
        let body = parsed
            .body
            .iter()
            .map(|s| {
                vocab
                    .token_id(s)
                    .ok_or_else(|| Error::Corpus(format!("unknown body token {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if body.is_empty() {
            return Err(Error::Corpus(format!("document {} has empty body", parsed.doc_id)));
        }
        docs.push(Document { doc_id, body });
    }
    Ok(docs)
}

pub fn write_examples_jsonl(
    vocab: &Vocabulary,
    examples: &[Example],
    mut w: impl Write,
) -> Result<()> {
    for e in examples {
        let line = ExampleLine {
            kind: e.kind,
            input: e
                .input
                .iter()
                .map(|&t| vocab.token_str(t).map(str::to_string))
                .collect::<Result<_>>()?,
            target: vocab.token_str(e.target)?.to_string(),
            split: e.split,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examples_jsonl(vocab: &Vocabulary, r: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ExampleLine = serde_json::from_str(&line)?;
        let target = vocab
            .token_id(&parsed.target)
            .ok_or_else(|| Error::Corpus(format!("unknown target token {}", parsed.target)))?;
        let input = parsed
            .input
            .iter()
            .map(|s| {
                vocab
                    .token_id(s)
                    .ok_or_else(|| Error::Corpus(format!("unknown input token {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Example {
            kind: parsed.kind,
            input,
            target,
            split: parsed.split,
        });
    }
    Ok(out)
}

/// Scan a stream and count (indexing, retrieval) examples per block, where
/// a block ends at each retrieval example. Used by tests and diagnostics.
pub fn stream_block_counts(stream: &[Example]) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut idx_count = 0usize;
    for e in stream {
        match e.kind {
            ExampleKind::Index => idx_count += 1,
            ExampleKind::Retrieve => {
                blocks.push((idx_count, 1));
                idx_count = 0;
            }
        }
    }
    if idx_count > 0 {
        blocks.push((idx_count, 0));
    }
    blocks
}

/// Per-token partition soundness: exactly one of special/word/docid holds.
pub fn partition_sound(vocab: &Vocabulary) -> bool {
    (0..vocab.len() as u32).all(|i| {
        let t = TokenId(i);
        let flags = [vocab.is_special(t), vocab.is_word(t), vocab.is_docid(t)];
        flags.iter().filter(|&&f| f).count() == 1
    })
}

/// Group retrieval examples by gold docid ordinal.
pub fn queries_by_doc<'a>(
    vocab: &Vocabulary,
    queries: &'a [Example],
) -> BTreeMap<usize, Vec<&'a Example>> {
    let mut map: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for q in queries {
        if let Some(ord) = vocab.docid_ordinal(q.target) {
            map.entry(ord).or_default().push(q);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_partition_counts() {
        let v = Vocabulary::new(200, 100);
        assert_eq!(v.len(), 302);
        assert!(partition_sound(&v));
        assert_eq!(v.partition_of(TokenId(302)), None);
    }

    #[test]
    fn token_roundtrip() {
        let v = Vocabulary::new(30, 5);
        for i in 0..v.len() as u32 {
            let t = TokenId(i);
            let s = v.token_str(t).unwrap().to_string();
            assert_eq!(v.token_id(&s), Some(t));
        }
        assert_eq!(v.token_id("nope"), None);
    }

    #[test]
    fn two_docs_deterministic_and_distinct() {
        let a = generate_corpus(7, 2, 40).unwrap();
        let b = generate_corpus(7, 2, 40).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_corpus_jsonl(&a, &mut buf_a).unwrap();
        write_corpus_jsonl(&b, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b, "same seed must serialize byte-identically");
        assert!(distinct_enough(&a.docs[0].body, &a.docs[1].body));
    }

    #[test]
    fn hundred_docs_pairwise_overlap_under_half() {
        let c = generate_corpus(7, 100, 200).unwrap();
        assert_eq!(c.docs.len(), 100);
        // Brute-force pairwise comparison.
        for i in 0..c.docs.len() {
            for j in (i + 1)..c.docs.len() {
                let a = &c.docs[i].body;
                let b = &c.docs[j].body;
                assert!(
                    2 * overlap_count(a, b) < a.len().min(b.len()),
                    "docs {i} and {j} share too many tokens"
                );
            }
        }
        for doc in &c.docs {
            assert!(!doc.body.is_empty() && doc.body.len() <= MAX_INDEX_LEN);
            assert!(doc.body.iter().all(|&t| c.vocab.is_word(t)));
        }
    }

    #[test]
    fn distinctness_unsatisfiable_is_error() {
        assert!(generate_corpus(1, 100, 20).is_err());
    }

    #[test]
    fn preconditions_rejected() {
        assert!(generate_corpus(7, 1, 40).is_err());
        assert!(generate_corpus(7, 2, 19).is_err());
    }

    #[test]
    fn queries_are_mostly_body_tokens() {
        let c = generate_corpus(11, 10, 80).unwrap();
        let queries = make_queries(&c, 3, 10).unwrap();
        assert_eq!(queries.len(), 100);
        for q in &queries {
            assert!(q.input.len() >= QUERY_CLUSTER_MIN);
            assert!(q.input.len() <= QUERY_CLUSTER_MAX + QUERY_NOISE_MAX);
            let doc = c.doc_for_docid(q.target).unwrap();
            let in_body = q.input.iter().filter(|t| doc.body.contains(t)).count();
            assert!(in_body >= 3, "query needs at least 3 body tokens");
        }
    }

    #[test]
    fn zero_queries_gives_indexing_only_set() {
        let c = generate_corpus(5, 4, 60).unwrap();
        let queries = make_queries(&c, 5, 0).unwrap();
        assert!(queries.is_empty());
        let set = build_examples(&c, &queries, 32, 5).unwrap();
        assert!(set.retrieval_examples.is_empty());
        assert_eq!(set.stream.len(), 4);
        assert!(set.stream.iter().all(|e| e.kind == ExampleKind::Index));
    }

    #[test]
    fn same_seed_same_splits() {
        let c = generate_corpus(5, 6, 70).unwrap();
        let a = make_queries(&c, 9, 10).unwrap();
        let b = make_queries(&c, 9, 10).unwrap();
        assert_eq!(a, b);
        // Disjoint query sets across splits within a document.
        for doc in &c.docs {
            let of = |split: Split| {
                a.iter()
                    .filter(|q| q.target == doc.doc_id && q.split == split)
                    .map(|q| q.input.clone())
                    .collect::<Vec<_>>()
            };
            let train = of(Split::Train);
            for v in of(Split::Validation).iter().chain(of(Split::Test).iter()) {
                assert!(!train.contains(v));
            }
        }
    }

    #[test]
    fn stream_block_structure_ratio_32() {
        let c = generate_corpus(7, 10, 120).unwrap();
        let queries = make_queries(&c, 7, 5).unwrap();
        let set = build_examples(&c, &queries, 32, 7).unwrap();
        let blocks = stream_block_counts(&set.stream);
        assert!(!blocks.is_empty());
        for (idx, ret) in blocks {
            assert_eq!(idx, 32);
            assert_eq!(ret, 1);
        }
    }

    #[test]
    fn stream_alternates_at_ratio_1() {
        let c = generate_corpus(7, 5, 90).unwrap();
        let queries = make_queries(&c, 7, 5).unwrap();
        let set = build_examples(&c, &queries, 1, 7).unwrap();
        for (idx, ret) in stream_block_counts(&set.stream) {
            assert_eq!((idx, ret), (1, 1));
        }
    }

    #[test]
    fn stream_counts_ratio_5() {
        let c = generate_corpus(13, 10, 120).unwrap();
        let queries = make_queries(&c, 13, 2).unwrap();
        let set = build_examples(&c, &queries, 5, 13).unwrap();
        let n_train = queries.iter().filter(|q| q.split == Split::Train).count();
        let blocks = stream_block_counts(&set.stream);
        assert_eq!(blocks.len(), n_train);
        let total_idx: usize = blocks.iter().map(|(i, _)| i).sum();
        let total_ret: usize = blocks.iter().map(|(_, r)| r).sum();
        assert_eq!(total_idx, 5 * n_train);
        assert_eq!(total_ret, n_train);
        assert!(build_examples(&c, &queries, 0, 13).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let c = generate_corpus(21, 8, 100).unwrap();
        let queries = make_queries(&c, 21, 6).unwrap();
        let mut buf = Vec::new();
        write_corpus_jsonl(&c, &mut buf).unwrap();
        let docs = read_corpus_jsonl(&c.vocab, buf.as_slice()).unwrap();
        assert_eq!(docs, c.docs);

        let mut buf = Vec::new();
        write_examples_jsonl(&c.vocab, &queries, &mut buf).unwrap();
        let back = read_examples_jsonl(&c.vocab, buf.as_slice()).unwrap();
        assert_eq!(back, queries);
    }

    #[test]
    fn nn_baseline_learnability_guard() {
        for seed in [1u64, 7, 42] {
            let c = generate_corpus(seed, 100, 200).unwrap();
            let queries = make_queries(&c, seed.wrapping_add(1), 10).unwrap();
            let acc = nn_baseline_hits_at_1(&c, &queries);
            assert!(acc >= 0.95, "seed {seed}: NN baseline accuracy {acc}");
        }
    }
}
