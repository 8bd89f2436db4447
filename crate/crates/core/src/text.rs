//! Query encoding: word embeddings, a bidirectional GRU with mean pooling, and
//! three attention heads producing the subject-verb, subject-object and
//! verb-object vectors.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Axis, Binder, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::BiGru;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Lowercase, then split on whitespace and ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// `<pad>` is index 0 and `<unk>` index 1; the rest follow in sorted order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let uniq: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| t != PAD && t != UNK)
            .collect();
        let tokens: Vec<String> = [PAD.to_string(), UNK.to_string()].into_iter().chain(uniq).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Read vectors in the word-per-line text format (`token v1 v2 ... v_d`) and
/// copy those whose token is in `vocab` into the matching rows of `table`.
/// Returns the number of rows filled.
pub fn load_embedding_file(path: &Path, vocab: &Vocabulary, table: &mut Tensor) -> Result<usize> {
    let (rows, d_w) = table.dims2()?;
    if rows != vocab.len() {
        return Err(Error::dim("embedding table", &[rows, d_w], &[vocab.len(), d_w]));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut filled = 0;
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let Some(&row) = vocab.index.get(token) else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: e.to_string(),
            })?;
        if values.len() != d_w {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: format!("expected {d_w} values, found {}", values.len()),
            });
        }
        table.data_mut()[row * d_w..(row + 1) * d_w].copy_from_slice(&values);
        filled += 1;
    }
    Ok(filled)
}

/// Number of attention heads: subject-verb, subject-object, verb-object.
pub const HEADS: usize = 3;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub gru: BiGru,
    /// Per-head key projections `d_w x 2*hidden`.
    pub keys: [ParamId; HEADS],
    pub d_w: usize,
    pub hidden: usize,
}

/// The query vectors as tape variables (all `1 x 2*hidden` rows except
/// `contexts`, which is `m x 2*hidden`, and `attention`, `3 x m`).
#[derive(Clone, Copy, Debug)]
pub struct QueryVars<'t> {
    pub q: Var<'t>,
    pub sv: Var<'t>,
    pub sn: Var<'t>,
    pub vn: Var<'t>,
    pub contexts: Var<'t>,
    pub attention: Var<'t>,
}

/// Plain-value snapshot of a [`QueryVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoding {
    pub q: Vec<f64>,
    pub sv: Vec<f64>,
    pub sn: Vec<f64>,
    pub vn: Vec<f64>,
    pub word_contexts: Tensor,
    pub attention_weights: Tensor,
}

impl From<&QueryVars<'_>> for QueryEncoding {
    fn from(v: &QueryVars<'_>) -> Self {
        QueryEncoding {
            q: v.q.value().data().to_vec(),
            sv: v.sv.value().data().to_vec(),
            sn: v.sn.value().data().to_vec(),
            vn: v.vn.value().data().to_vec(),
            word_contexts: (*v.contexts.value()).clone(),
            attention_weights: (*v.attention.value()).clone(),
        }
    }
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, vocab_size: usize, d_w: usize, hidden: usize, rng: &mut R) -> Self {
        let embedding = params.insert("text.embedding", Tensor::uniform(&[vocab_size, d_w], -0.5, 0.5, rng));
        let gru = BiGru::new(params, "text.gru", d_w, hidden, 1, rng);
        let keys = ["sv", "sn", "vn"].map(|h| params.insert(format!("text.key_{h}"), Tensor::xavier(d_w, 2 * hidden, rng)));
        TextEncoder {
            embedding,
            gru,
            keys,
            d_w,
            hidden,
        }
    }

    pub fn query_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn encode<'t>(&self, b: &Binder<'t>, token_ids: &[usize]) -> Result<QueryVars<'t>> {
        let emb = embed_query(b.get(self.embedding), token_ids)?;
        let contexts = self.gru.forward(b, emb, Ok)?;
        let q = pool_query(contexts)?;
        let keys = self.keys.map(|k| b.get(k));
        let (heads, attention) = attend_heads(q, emb, contexts, &keys)?;
        Ok(QueryVars {
            q,
            sv: heads[0],
            sn: heads[1],
            vn: heads[2],
            contexts,
            attention,
        })
    }

    /// Only the pooled query; the attention heads are not evaluated.
    pub fn encode_pooled<'t>(&self, b: &Binder<'t>, token_ids: &[usize]) -> Result<Var<'t>> {
        let emb = embed_query(b.get(self.embedding), token_ids)?;
        let contexts = self.gru.forward(b, emb, Ok)?;
        pool_query(contexts)
    }
}

/// Rows of the embedding table for each token index (`m x d_w`).
pub fn embed_query<'t>(table: Var<'t>, token_ids: &[usize]) -> Result<Var<'t>> {
    if token_ids.is_empty() {
        return Err(Error::Input("empty query".into()));
    }
    table.gather_rows(Rc::new(token_ids.to_vec()))
}

pub fn pool_query(contexts: Var<'_>) -> Result<Var<'_>> {
    contexts.mean(Axis::Rows)
}

/// For each key projection: `softmax(q (E W_k)^T) C`, unscaled.
///
/// Returns the per-head outputs and the stacked `heads x m` weights.
pub fn attend_heads<'t, const H: usize>(
    q: Var<'t>,
    embeddings: Var<'t>,
    contexts: Var<'t>,
    key_projections: &[Var<'t>; H],
) -> Result<([Var<'t>; H], Var<'t>)> {
    let tape = q.tape();
    let mut outputs = Vec::with_capacity(H);
    let mut weights = Vec::with_capacity(H);
    for &proj in key_projections {
        let keys = embeddings.matmul(proj)?;
        let w = q.matmul(keys.transpose()?)?.softmax(Axis::Cols)?;
        outputs.push(w.matmul(contexts)?);
        weights.push(w);
    }
    let stacked = tape.concat(&weights, Axis::Rows)?;
    let outputs: [Var<'t>; H] = outputs.try_into().expect("one output per head");
    Ok((outputs, stacked))
}
