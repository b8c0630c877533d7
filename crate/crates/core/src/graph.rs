//! Turn-dependency DAG. Edges point from a prerequisite turn to the later turn
//! that depends on it, so chronological order is always a linear extension.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::conversation::Conversation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub conversation_id: String,
    pub turn_count: usize,
    pub edges: BTreeSet<(usize, usize)>,
}

impl DependencyGraph {
    pub fn empty(conversation_id: impl Into<String>, turn_count: usize) -> Self {
        DependencyGraph {
            conversation_id: conversation_id.into(),
            turn_count,
            edges: BTreeSet::new(),
        }
    }

    pub fn for_conversation(conv: &Conversation) -> Self {
        Self::empty(conv.id(), conv.n())
    }

    pub fn with_edges(
        conversation_id: impl Into<String>,
        turn_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut g = Self::empty(conversation_id, turn_count);
        for (u, v) in edges {
            g.add_edge(u, v)?;
        }
        Ok(g)
    }

    /// Adds `prerequisite -> dependent`. Rejects edges that point forward in time
    /// or reference a turn outside `1..=turn_count`.
    pub fn add_edge(&mut self, prerequisite: usize, dependent: usize) -> Result<()> {
        for idx in [prerequisite, dependent] {
            if idx == 0 || idx > self.turn_count {
                return Err(Error::UnknownTurn(idx));
            }
        }
        if prerequisite >= dependent {
            return Err(Error::MalformedRecord(format!(
                "edge ({prerequisite}, {dependent}) does not point backward in time"
            )));
        }
        self.edges.insert((prerequisite, dependent));
        Ok(())
    }

    pub fn check_matches(&self, conv: &Conversation) -> Result<()> {
        if self.conversation_id != conv.id() || self.turn_count != conv.n() {
            return Err(Error::GraphMismatch {
                graph: format!("{}[{}]", self.conversation_id, self.turn_count),
                conversation: format!("{}[{}]", conv.id(), conv.n()),
            });
        }
        Ok(())
    }

    /// All turns reachable backward from `turn` along prerequisite edges.
    pub fn ancestors(&self, turn: usize) -> Result<BTreeSet<usize>> {
        if turn == 0 || turn > self.turn_count {
            return Err(Error::UnknownTurn(turn));
        }
        let mut parents: HashMap<usize, Vec<usize>> = HashMap::new();
        for &(u, v) in &self.edges {
            parents.entry(v).or_default().push(u);
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![turn];
        while let Some(node) = stack.pop() {
            for &p in parents.get(&node).into_iter().flatten() {
                if seen.insert(p) {
                    stack.push(p);
                }
            }
        }
        Ok(seen)
    }

    /// True iff every edge among historical turns keeps its direction in `order`.
    /// `order` must be a permutation of `1..turn_count` (historical turns only);
    /// edges into the current turn are unconstrained by any such order.
    pub fn is_linear_extension(&self, order: &[usize]) -> Result<bool> {
        let history = self.turn_count.saturating_sub(1);
        if order.len() != history {
            return Err(Error::NotAPermutation(format!(
                "expected {history} entries, got {}",
                order.len()
            )));
        }
        let mut position = vec![usize::MAX; history + 1];
        for (pos, &idx) in order.iter().enumerate() {
            if idx == 0 || idx > history || position[idx] != usize::MAX {
                return Err(Error::NotAPermutation(format!("{order:?}")));
            }
            position[idx] = pos;
        }
        Ok(self
            .edges
            .iter()
            .filter(|&&(_, v)| v <= history)
            .all(|&(u, v)| position[u] < position[v]))
    }

    pub fn chronological_order(&self) -> Vec<usize> {
        (1..self.turn_count).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> DependencyGraph {
        DependencyGraph::with_edges("g", n, edges.iter().copied()).unwrap()
    }

    #[test]
    fn ancestors_examples() {
        let g = graph(3, &[(1, 2), (1, 3)]);
        assert_eq!(g.ancestors(3).unwrap(), BTreeSet::from([1]));
        assert!(g.ancestors(1).unwrap().is_empty());

        let g = graph(4, &[(1, 2), (2, 4), (3, 4)]);
        assert_eq!(g.ancestors(4).unwrap(), BTreeSet::from([1, 2, 3]));
        assert!(matches!(g.ancestors(5), Err(Error::UnknownTurn(5))));
        assert!(matches!(g.ancestors(0), Err(Error::UnknownTurn(0))));
    }

    #[test]
    fn linear_extension_examples() {
        // two historical turns
        let g = graph(3, &[(1, 2)]);
        assert!(g.is_linear_extension(&[1, 2]).unwrap());
        assert!(!g.is_linear_extension(&[2, 1]).unwrap());

        let g = graph(4, &[(1, 3)]);
        assert!(g.is_linear_extension(&[2, 1, 3]).unwrap());
        assert!(!g.is_linear_extension(&[3, 2, 1]).unwrap());
    }

    #[test]
    fn not_a_permutation() {
        let g = graph(4, &[]);
        for bad in [&[1, 2][..], &[1, 1, 2], &[0, 1, 2], &[1, 2, 4]] {
            assert!(matches!(
                g.is_linear_extension(bad),
                Err(Error::NotAPermutation(_))
            ));
        }
    }

    #[test]
    fn rejects_bad_edges() {
        let mut g = DependencyGraph::empty("g", 3);
        assert!(g.add_edge(2, 1).is_err());
        assert!(g.add_edge(2, 2).is_err());
        assert!(matches!(g.add_edge(1, 4), Err(Error::UnknownTurn(4))));
        assert!(g.add_edge(1, 3).is_ok());
    }
}
