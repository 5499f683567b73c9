//! Byte-level BPE: vocabulary, merge rules, prefix trie and the
//! line-oriented vocabulary/merges file formats.
//!
//! No normalization or pre-tokenization happens anywhere, so
//! `decode(tokenize(b)) == b` holds for every byte string.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{BldError, Result};

pub type TokenId = u32;

/// Token inventory. Content tokens occupy ids `0..n`; the end-of-sequence
/// token is `n` and decodes to the empty string.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, TokenId>,
    trie: VocabTrie,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    /// Builds a byte-complete vocabulary from user tokens. Single-byte tokens
    /// missing from `tokens` are appended in byte order, after the user tokens.
    pub fn build(tokens: &[Vec<u8>], merges: &MergeRules) -> Result<Self> {
        if tokens.is_empty() {
            return Err(BldError::EmptyInput("token list"));
        }
        let mut entries: Vec<Vec<u8>> = tokens.to_vec();
        let present: std::collections::HashSet<&[u8]> =
            tokens.iter().map(|t| t.as_slice()).collect();
        let missing: Vec<Vec<u8>> = (0..=255u8)
            .filter(|b| !present.contains(&[*b][..]))
            .map(|b| vec![b])
            .collect();
        entries.extend(missing);
        let vocab = Self::from_entries(entries)?;
        vocab.check_merges(merges)?;
        Ok(vocab)
    }

    /// Wraps an already complete token list, validating the invariants.
    pub fn from_entries(tokens: Vec<Vec<u8>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(BldError::Construction(format!(
                    "token {id} has an empty byte string"
                )));
            }
            if index.insert(t.clone(), id as TokenId).is_some() {
                return Err(BldError::Construction(format!(
                    "duplicate byte string {}",
                    escape_bytes(t)
                )));
            }
        }
        if let Some(b) = (0..=255u8).find(|b| !index.contains_key(&[*b][..])) {
            return Err(BldError::Construction(format!(
                "vocabulary is not byte-complete: missing single-byte token 0x{b:02x}"
            )));
        }
        let trie = VocabTrie::build(&tokens);
        Ok(Self {
            tokens,
            index,
            trie,
        })
    }

    /// Vocabulary of exactly the 256 single-byte tokens, ids equal to byte values.
    pub fn bytes_only() -> Self {
        Self::from_entries((0..=255u8).map(|b| vec![b]).collect())
            .expect("single-byte vocabulary is valid")
    }

    fn check_merges(&self, merges: &MergeRules) -> Result<()> {
        for (i, (left, right)) in merges.pairs().iter().enumerate() {
            for part in [left, right] {
                if !self.index.contains_key(part) {
                    return Err(BldError::Construction(format!(
                        "merge {i} references unknown token {}",
                        escape_bytes(part)
                    )));
                }
            }
            let joined = [left.as_slice(), right.as_slice()].concat();
            if !self.index.contains_key(&joined) {
                return Err(BldError::Construction(format!(
                    "merge {i} produces {} which is not in the vocabulary",
                    escape_bytes(&joined)
                )));
            }
        }
        Ok(())
    }

    /// Number of content tokens (excludes end-of-sequence).
    pub fn num_content(&self) -> usize {
        self.tokens.len()
    }

    /// Content tokens plus end-of-sequence.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos_id(&self) -> TokenId {
        self.tokens.len() as TokenId
    }

    pub fn is_eos(&self, id: TokenId) -> bool {
        id == self.eos_id()
    }

    /// Byte string of `id`; end-of-sequence decodes to the empty string.
    pub fn bytes(&self, id: TokenId) -> Result<&[u8]> {
        match self.tokens.get(id as usize) {
            Some(t) => Ok(t),
            None if id == self.eos_id() => Ok(&[]),
            None => Err(BldError::UnknownToken(id)),
        }
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.index.get(bytes).copied()
    }

    pub fn content_tokens(&self) -> impl Iterator<Item = (TokenId, &[u8])> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (i as TokenId, t.as_slice()))
    }

    pub fn max_token_len(&self) -> usize {
        self.tokens.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn trie(&self) -> &VocabTrie {
        &self.trie
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.len() {
            Ok(())
        } else {
            Err(BldError::UnknownToken(id))
        }
    }

    /// Concatenated byte strings of `ids`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.bytes(id)?);
        }
        Ok(out)
    }

    /// Canonical file representation: one `id<TAB>hex` line per content token.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, t) in self.content_tokens() {
            let _ = writeln!(out, "{id}\t{}", hex::encode(t));
        }
        out
    }

    pub fn parse_file(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let parse_err = |reason: String| BldError::Parse {
                what: "vocabulary file",
                line: line_no,
                reason,
            };
            let (id, hexbytes) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected id<TAB>hex".into()))?;
            let id: usize = id.parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!(
                    "ids must be dense and ordered: expected {}, found {id}",
                    tokens.len()
                )));
            }
            let bytes = hex::decode(hexbytes).map_err(|e| parse_err(format!("bad hex: {e}")))?;
            tokens.push(bytes);
        }
        Self::from_entries(tokens)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BldError::io(path, e))?;
        Self::parse_file(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| BldError::io(path, e))
    }

    /// SHA-256 of the canonical vocabulary file.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }
}

/// Ordered merge list; earlier pairs have higher priority.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeRules {
    pairs: Vec<(Vec<u8>, Vec<u8>)>,
}

impl MergeRules {
    pub fn new(pairs: Vec<(Vec<u8>, Vec<u8>)>) -> Self {
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.pairs {
            let _ = writeln!(out, "{} {}", hex::encode(l), hex::encode(r));
        }
        out
    }

    pub fn parse_file(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let parse_err = |reason: String| BldError::Parse {
                what: "merges file",
                line: lineno + 1,
                reason,
            };
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| parse_err("expected hexleft<SPACE>hexright".into()))?;
            let l = hex::decode(l).map_err(|e| parse_err(format!("bad hex: {e}")))?;
            let r = hex::decode(r).map_err(|e| parse_err(format!("bad hex: {e}")))?;
            if l.is_empty() || r.is_empty() {
                return Err(parse_err("merge operands must be non-empty".into()));
            }
            pairs.push((l, r));
        }
        Ok(Self { pairs })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BldError::io(path, e))?;
        Self::parse_file(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| BldError::io(path, e))
    }

    /// Token list implied by the merges: each merge result, in merge order.
    pub fn merged_tokens(&self) -> Vec<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        self.pairs
            .iter()
            .map(|(l, r)| [l.as_slice(), r.as_slice()].concat())
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }
}

/// Deterministic BPE tokenizer: starts from single-byte tokens and
/// repeatedly applies the highest-priority applicable merge, leftmost
/// occurrence first.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeRules,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, merges: MergeRules) -> Result<Self> {
        vocab.check_merges(&merges)?;
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.pairs().iter().enumerate() {
            let key = (
                vocab.id_of(l).expect("checked"),
                vocab.id_of(r).expect("checked"),
            );
            let merged = vocab
                .id_of(&[l.as_slice(), r.as_slice()].concat())
                .expect("checked");
            ranks.entry(key).or_insert((rank, merged));
        }
        Ok(Self {
            vocab,
            merges,
            ranks,
        })
    }

    /// Builds the vocabulary from `tokens` (made byte-complete) and wraps it.
    pub fn build(tokens: &[Vec<u8>], merges: MergeRules) -> Result<Self> {
        let vocab = Vocabulary::build(tokens, &merges)?;
        Self::new(vocab, merges)
    }

    /// Vocabulary derived from the merge list alone.
    pub fn from_merges(merges: MergeRules) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.extend(merges.merged_tokens());
        Self::build(&tokens, merges)
    }

    pub fn bytes_only() -> Self {
        Self::new(Vocabulary::bytes_only(), MergeRules::default()).expect("no merges")
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeRules {
        &self.merges
    }

    pub fn tokenize(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = bytes
            .iter()
            .map(|b| self.vocab.id_of(&[*b]).expect("byte-complete"))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(pos, w)| self.ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, pos, m)))
                .min_by_key(|&(r, pos, _)| (r, pos));
            match best {
                Some((_, pos, merged)) => {
                    ids[pos] = merged;
                    ids.remove(pos + 1);
                }
                None => return ids,
            }
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        self.vocab.decode(ids)
    }
}

pub type NodeId = u32;

#[derive(Debug, Clone)]
struct TrieNode {
    children: Vec<(u8, NodeId)>,
    terminal: Option<TokenId>,
    // Range into `VocabTrie::order` covering every token in this subtree.
    start: u32,
    end: u32,
}

/// Prefix trie over token byte strings. Tokens are laid out in depth-first
/// order so each node's subtree is a contiguous slice of [`VocabTrie::order`].
#[derive(Debug, Clone)]
pub struct VocabTrie {
    nodes: Vec<TrieNode>,
    order: Vec<TokenId>,
}

impl VocabTrie {
    pub const ROOT: NodeId = 0;

    fn build(tokens: &[Vec<u8>]) -> Self {
        let mut nodes = vec![TrieNode {
            children: Vec::new(),
            terminal: None,
            start: 0,
            end: 0,
        }];
        for (id, t) in tokens.iter().enumerate() {
            let mut node = 0usize;
            for &b in t {
                node = match nodes[node].children.iter().find(|(c, _)| *c == b) {
                    Some(&(_, next)) => next as usize,
                    None => {
                        let next = nodes.len();
                        nodes.push(TrieNode {
                            children: Vec::new(),
                            terminal: None,
                            start: 0,
                            end: 0,
                        });
                        nodes[node].children.push((b, next as NodeId));
                        next
                    }
                };
            }
            nodes[node].terminal = Some(id as TokenId);
        }
        for n in &mut nodes {
            n.children.sort_unstable_by_key(|(b, _)| *b);
        }
        let mut order = Vec::with_capacity(tokens.len());
        // Iterative pre-order walk: terminal first, then children by byte.
        let mut stack: Vec<(usize, bool)> = vec![(0, false)];
        while let Some((node, done)) = stack.pop() {
            if done {
                nodes[node].end = order.len() as u32;
                continue;
            }
            nodes[node].start = order.len() as u32;
            if let Some(t) = nodes[node].terminal {
                order.push(t);
            }
            stack.push((node, true));
            for &(_, child) in nodes[node].children.iter().rev() {
                stack.push((child as usize, false));
            }
        }
        Self { nodes, order }
    }

    pub fn root(&self) -> NodeId {
        Self::ROOT
    }

    pub fn child(&self, node: NodeId, byte: u8) -> Option<NodeId> {
        let children = &self.nodes[node as usize].children;
        children
            .binary_search_by_key(&byte, |(b, _)| *b)
            .ok()
            .map(|i| children[i].1)
    }

    pub fn children(&self, node: NodeId) -> &[(u8, NodeId)] {
        &self.nodes[node as usize].children
    }

    /// Node reached by following `bytes` from the root.
    pub fn walk(&self, bytes: &[u8]) -> Option<NodeId> {
        bytes
            .iter()
            .try_fold(Self::ROOT, |node, &b| self.child(node, b))
    }

    /// Token whose byte string ends exactly at `node`.
    pub fn terminal(&self, node: NodeId) -> Option<TokenId> {
        self.nodes[node as usize].terminal
    }

    /// Every token whose byte string passes through or ends at `node`.
    pub fn subtree(&self, node: NodeId) -> &[TokenId] {
        let n = &self.nodes[node as usize];
        &self.order[n.start as usize..n.end as usize]
    }

    /// Tokens that strictly extend the prefix at `node`.
    pub fn proper_extensions(&self, node: NodeId) -> &[TokenId] {
        let n = &self.nodes[node as usize];
        let skip = n.terminal.is_some() as usize;
        &self.order[n.start as usize + skip..n.end as usize]
    }

    /// Tokens whose byte string starts with `partial`, paired with the
    /// unconsumed remainder of each token.
    pub fn extensions(&self, vocab: &Vocabulary, partial: &[u8]) -> Vec<(TokenId, Vec<u8>)> {
        let Some(node) = self.walk(partial) else {
            return Vec::new();
        };
        self.subtree(node)
            .iter()
            .map(|&t| {
                let bytes = vocab.bytes(t).expect("trie ids are valid");
                (t, bytes[partial.len()..].to_vec())
            })
            .collect()
    }

    /// Tokens whose byte string is a prefix of `bytes` (including all of it).
    pub fn prefixes_of(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut node = Self::ROOT;
        for &b in bytes {
            match self.child(node, b) {
                Some(next) => node = next,
                None => break,
            }
            if let Some(t) = self.terminal(node) {
                out.push(t);
            }
        }
        out
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Human-readable escaping of a byte string for messages and CLI output.
pub fn escape_bytes(bytes: &[u8]) -> String {
    let escaped: String = bytes
        .iter()
        .flat_map(|b| std::ascii::escape_default(*b))
        .map(char::from)
        .collect();
    format!("\"{escaped}\"")
}
