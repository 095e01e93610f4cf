//! Prefix tree over semantic IDs with item leaves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Node {
    children: BTreeMap<usize, usize>,
    items: Vec<usize>,
}

/// Legal code sequences. Every inserted sequence has the same length; a leaf
/// may hold several colliding items.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trie {
    depth: usize,
    nodes: Vec<Node>,
    leaves: usize,
}

/// Tries are equal when they accept the same sequences with the same items,
/// whatever order they were built in.
impl PartialEq for Trie {
    fn eq(&self, other: &Self) -> bool {
        self.depth == other.depth && self.entries() == other.entries()
    }
}

impl Trie {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            nodes: vec![Node::default()],
            leaves: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of distinct legal sequences.
    pub fn len(&self) -> usize {
        self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    /// Adds `item` under `codes`, which must have the trie depth.
    pub fn insert(&mut self, codes: &[usize], item: usize) {
        assert_eq!(
            codes.len(),
            self.depth,
            "sequence length must equal trie depth"
        );
        let mut cur = 0;
        for &c in codes {
            cur = match self.nodes[cur].children.get(&c) {
                Some(&n) => n,
                None => {
                    self.nodes.push(Node::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[cur].children.insert(c, n);
                    n
                }
            };
        }
        let leaf = &mut self.nodes[cur];
        if leaf.items.is_empty() {
            self.leaves += 1;
        }
        if !leaf.items.contains(&item) {
            leaf.items.push(item);
        }
    }

    fn walk(&self, prefix: &[usize]) -> Option<usize> {
        let mut cur = 0;
        for c in prefix {
            cur = *self.nodes[cur].children.get(c)?;
        }
        Some(cur)
    }

    /// Legal next codes after `prefix`, ascending; empty for unknown prefixes.
    pub fn children(&self, prefix: &[usize]) -> Vec<usize> {
        self.walk(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Items stored under a full sequence, `None` when it is not legal.
    pub fn lookup(&self, codes: &[usize]) -> Option<&[usize]> {
        if codes.len() != self.depth {
            return None;
        }
        let n = self.walk(codes)?;
        let items = &self.nodes[n].items;
        (!items.is_empty()).then_some(items.as_slice())
    }

    pub fn contains(&self, codes: &[usize]) -> bool {
        self.lookup(codes).is_some()
    }

    /// Every `(codes, items)` leaf in lexicographic order.
    pub fn entries(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            if path.len() == self.depth {
                if !self.nodes[n].items.is_empty() {
                    out.push((path, self.nodes[n].items.clone()));
                }
                continue;
            }
            for (&c, &child) in self.nodes[n].children.iter().rev() {
                let mut p = path.clone();
                p.push(c);
                stack.push((child, p));
            }
        }
        out
    }
}
