use std::collections::{HashMap, VecDeque};

use smallvec::SmallVec;

use super::{check_token, quantize_scores, Predictor, QuantizedPmf};
use crate::error::{Error, Result};
use crate::token::TokenId;

/// Highest supported context order. Keeps `4^k · count` inside `u64`.
pub const MAX_ORDER: usize = 12;

/// Per-context successor counts, stored as a trie over reversed contexts:
/// the child of node `n` along token `t` is the context `t · ctx(n)`.
#[derive(Debug, Clone, Default)]
struct CountTable {
    follow: Vec<SmallVec<[(TokenId, u32); 2]>>,
    children: HashMap<(u32, TokenId), u32>,
}

impl CountTable {
    fn new() -> Self {
        Self {
            follow: vec![SmallVec::new()],
            children: HashMap::new(),
        }
    }

    fn child(&self, node: u32, token: TokenId) -> Option<u32> {
        self.children.get(&(node, token)).copied()
    }

    fn child_or_insert(&mut self, node: u32, token: TokenId) -> u32 {
        let next = self.follow.len() as u32;
        let id = *self.children.entry((node, token)).or_insert(next);
        if id == next {
            self.follow.push(SmallVec::new());
        }
        id
    }

    fn increment(&mut self, node: u32, token: TokenId) {
        let list = &mut self.follow[node as usize];
        match list.binary_search_by_key(&token, |&(t, _)| t) {
            Ok(i) => list[i].1 += 1,
            Err(i) => list.insert(i, (token, 1)),
        }
    }
}

/// Order-`k` backoff context model learning online from the tokens it is
/// shown.
///
/// `score(t) = 1 + Σ_{j=0..k} 4^j · c_j(t)`, where `c_j(t)` counts how often
/// `t` followed the current length-`j` context. Contexts are suffixes of the
/// last `min(i−1, M)` tokens, so orders above `M` are never used.
#[derive(Debug, Clone)]
pub struct AdaptivePredictor {
    vocab_size: usize,
    order: usize,
    memory: usize,
    learning: bool,
    window: VecDeque<TokenId>,
    table: CountTable,
    scores: Vec<u64>,
    cached: Option<QuantizedPmf>,
}

impl AdaptivePredictor {
    pub fn new(vocab_size: usize, order: usize, memory: usize) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Config(format!(
                "context order {order} exceeds the maximum of {MAX_ORDER}"
            )));
        }
        // Surfaces VocabularyTooLarge before any coding starts.
        quantize_scores(&vec![1; vocab_size])?;
        Ok(Self {
            vocab_size,
            order,
            memory,
            learning: true,
            window: VecDeque::with_capacity(memory.min(1 << 16)),
            table: CountTable::new(),
            scores: vec![1; vocab_size],
            cached: None,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    /// Stops count updates; later [`update`](Predictor::update) calls only
    /// slide the context window. A frozen model is a fixed conditional
    /// distribution of the last `M` tokens.
    pub fn freeze(&mut self) {
        self.learning = false;
    }

    fn max_depth(&self) -> usize {
        self.order.min(self.window.len())
    }

    fn context_token(&self, depth: usize) -> TokenId {
        self.window[self.window.len() - 1 - depth]
    }
}

impl Predictor for AdaptivePredictor {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&mut self) -> Result<&QuantizedPmf> {
        if self.cached.is_none() {
            self.scores.fill(1);
            let max_depth = self.max_depth();
            let mut node = 0u32;
            let mut depth = 0;
            loop {
                let weight = 1u64 << (2 * depth);
                for &(t, c) in &self.table.follow[node as usize] {
                    self.scores[t as usize] += weight * u64::from(c);
                }
                if depth == max_depth {
                    break;
                }
                match self.table.child(node, self.context_token(depth)) {
                    Some(next) => {
                        node = next;
                        depth += 1;
                    }
                    None => break,
                }
            }
            self.cached = Some(quantize_scores(&self.scores)?);
        }
        Ok(self.cached.as_ref().expect("filled above"))
    }

    fn update(&mut self, actual: TokenId) -> Result<()> {
        check_token(actual, self.vocab_size)?;
        if self.learning {
            let max_depth = self.max_depth();
            let mut node = 0u32;
            let mut depth = 0;
            loop {
                self.table.increment(node, actual);
                if depth == max_depth {
                    break;
                }
                node = self.table.child_or_insert(node, self.context_token(depth));
                depth += 1;
            }
        }
        if self.memory > 0 {
            if self.window.len() == self.memory {
                self.window.pop_front();
            }
            self.window.push_back(actual);
        }
        self.cached = None;
        Ok(())
    }
}
