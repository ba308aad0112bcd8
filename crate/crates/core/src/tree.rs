//! Rooted, ordered topic tree with uniform leaf depth.
//!
//! Child order is meaningful: it defines the left-sibling chains used by the
//! fraternal recurrence and by stick-breaking. Growth and pruning are driven
//! by per-topic word mass and never change the depth of the tree.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TopicId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree needs at least 2 levels and branching >= 1 (got levels={levels}, branching={branching})")]
    BadShape { levels: usize, branching: usize },
    #[error("unknown topic id {0}")]
    UnknownTopic(TopicId),
    #[error("the root has no siblings")]
    RootHasNoSiblings,
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicNode {
    pub id: TopicId,
    /// 1-based depth; the root is level 1.
    pub level: usize,
    pub parent: Option<TopicId>,
    pub children: Vec<TopicId>,
}

/// A root-to-leaf sequence of topic ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path(pub Vec<TopicId>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicTree {
    nodes: BTreeMap<TopicId, TopicNode>,
    root: TopicId,
    depth: usize,
    next_id: TopicId,
}

/// Structural edits performed by one [`TopicTree::update`] call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeLog {
    /// `(parent, new topic ids)`; the first id is the new child, the rest
    /// extend it down to the leaf level.
    pub added: Vec<(TopicId, Vec<TopicId>)>,
    /// `(subtree root, every removed id)`.
    pub pruned: Vec<(TopicId, Vec<TopicId>)>,
}

impl ChangeLog {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.pruned.is_empty()
    }
}

impl TopicTree {
    /// Complete tree with `levels` levels and `branching` children per
    /// non-leaf topic. Ids are assigned breadth-first starting at 0.
    pub fn init(levels: usize, branching: usize) -> Result<Self, TreeError> {
        if levels < 2 || branching < 1 {
            return Err(TreeError::BadShape { levels, branching });
        }
        let mut tree = Self {
            nodes: BTreeMap::new(),
            root: 0,
            depth: levels,
            next_id: 1,
        };
        tree.nodes.insert(
            0,
            TopicNode {
                id: 0,
                level: 1,
                parent: None,
                children: Vec::new(),
            },
        );
        let mut frontier = vec![0];
        for _ in 1..levels {
            let mut next = Vec::new();
            for parent in frontier {
                for _ in 0..branching {
                    next.push(tree.attach_child(parent));
                }
            }
            frontier = next;
        }
        Ok(tree)
    }

    fn attach_child(&mut self, parent: TopicId) -> TopicId {
        let id = self.next_id;
        self.next_id += 1;
        let level = self.nodes[&parent].level + 1;
        self.nodes.insert(
            id,
            TopicNode {
                id,
                level,
                parent: Some(parent),
                children: Vec::new(),
            },
        );
        self.nodes.get_mut(&parent).unwrap().children.push(id);
        id
    }

    pub fn root(&self) -> TopicId {
        self.root
    }

    /// Maximum depth `H`; every leaf sits at this level.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of topics `T`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: TopicId) -> Result<&TopicNode, TreeError> {
        self.nodes.get(&id).ok_or(TreeError::UnknownTopic(id))
    }

    pub fn contains(&self, id: TopicId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TopicNode> {
        self.nodes.values()
    }

    pub fn is_leaf(&self, id: TopicId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.children.is_empty())
    }

    /// Breadth-first, left-to-right traversal. Parents precede children;
    /// this is the column order of every per-topic vector.
    pub fn bfs_order(&self) -> Vec<TopicId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([self.root]);
        while let Some(id) = queue.pop_front() {
            out.push(id);
            queue.extend(self.nodes[&id].children.iter().copied());
        }
        out
    }

    /// One path per leaf, depth-first left-to-right.
    pub fn enumerate_paths(&self) -> Vec<Path> {
        let mut out = Vec::new();
        let mut stack = vec![vec![self.root]];
        while let Some(prefix) = stack.pop() {
            let last = *prefix.last().unwrap();
            let children = &self.nodes[&last].children;
            if children.is_empty() {
                out.push(Path(prefix));
                continue;
            }
            for &c in children.iter().rev() {
                let mut p = prefix.clone();
                p.push(c);
                stack.push(p);
            }
        }
        out
    }

    /// Siblings preceding `t` in its parent's child order.
    pub fn left_siblings(&self, t: TopicId) -> Result<Vec<TopicId>, TreeError> {
        let node = self.node(t)?;
        let parent = node.parent.ok_or(TreeError::RootHasNoSiblings)?;
        let siblings = &self.nodes[&parent].children;
        let pos = siblings.iter().position(|&c| c == t).unwrap();
        Ok(siblings[..pos].to_vec())
    }

    /// Immediate left sibling, if any.
    pub fn left_sibling(&self, t: TopicId) -> Option<TopicId> {
        let parent = self.nodes.get(&t)?.parent?;
        let siblings = &self.nodes[&parent].children;
        let pos = siblings.iter().position(|&c| c == t)?;
        pos.checked_sub(1).map(|p| siblings[p])
    }

    /// `t` and all of its descendants.
    pub fn subtree(&self, t: TopicId) -> Vec<TopicId> {
        let mut out = Vec::new();
        let mut stack = vec![t];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[&id].children.iter().copied());
        }
        out
    }

    /// Checks single root, parent/child consistency, levels, uniform leaf
    /// depth and that every non-leaf keeps at least one child.
    pub fn check_invariants(&self) -> Result<(), TreeError> {
        let fail = |m: String| Err(TreeError::Invariant(m));
        let roots: Vec<_> = self.nodes.values().filter(|n| n.parent.is_none()).collect();
        if roots.len() != 1 || roots[0].id != self.root {
            return fail(format!("expected single root {}, found {}", self.root, roots.len()));
        }
        if self.nodes[&self.root].level != 1 {
            return fail("root must be level 1".into());
        }
        let reached = self.bfs_order();
        if reached.len() != self.nodes.len() {
            return fail("tree is not connected".into());
        }
        for n in self.nodes.values() {
            for c in &n.children {
                let child = self.node(*c)?;
                if child.parent != Some(n.id) || child.level != n.level + 1 {
                    return fail(format!("bad child link {} -> {}", n.id, c));
                }
            }
            if n.children.is_empty() && n.level != self.depth {
                return fail(format!("leaf {} at level {} (depth {})", n.id, n.level, self.depth));
            }
            if n.level > self.depth {
                return fail(format!("topic {} below max depth", n.id));
            }
        }
        Ok(())
    }

    /// Applies one growth/pruning round from per-topic word mass.
    ///
    /// Both rules read the mass of the tree as it was before the call.
    /// Pruning runs first: a non-root topic whose subtree mass is below
    /// `s_prune` is removed with its descendants unless that would leave its
    /// parent childless. Then every surviving non-leaf topic with mass above
    /// `s_add` gains one rightmost child, extended by single children down to
    /// the leaf level so that depth stays uniform.
    pub fn update(&mut self, mass: &HashMap<TopicId, f64>, s_add: f64, s_prune: f64) -> ChangeLog {
        let m = |id: &TopicId| mass.get(id).copied().unwrap_or(0.0);
        let order = self.bfs_order();
        let mut subtree_mass: HashMap<TopicId, f64> = HashMap::new();
        for id in order.iter().rev() {
            let s = m(id) + self.nodes[id].children.iter().map(|c| subtree_mass[c]).sum::<f64>();
            subtree_mass.insert(*id, s);
        }
        let grow: Vec<TopicId> = order
            .iter()
            .copied()
            .filter(|id| !self.is_leaf(*id) && m(id) > s_add)
            .collect();

        let mut log = ChangeLog::default();
        for id in &order {
            if *id == self.root || !self.nodes.contains_key(id) {
                continue;
            }
            if subtree_mass[id] >= s_prune {
                continue;
            }
            let parent = self.nodes[id].parent.unwrap();
            if self.nodes[&parent].children.len() <= 1 {
                continue;
            }
            let removed = self.subtree(*id);
            for r in &removed {
                self.nodes.remove(r);
            }
            self.nodes.get_mut(&parent).unwrap().children.retain(|c| c != id);
            log.pruned.push((*id, removed));
        }

        for id in grow {
            if !self.nodes.contains_key(&id) {
                continue;
            }
            let mut chain = vec![self.attach_child(id)];
            while self.nodes[chain.last().unwrap()].level < self.depth {
                let last = *chain.last().unwrap();
                chain.push(self.attach_child(last));
            }
            log.added.push((id, chain));
        }
        log
    }
}

/// `s_t = sum_i |d_i| theta_{i,t} / sum_i |d_i|`.
///
/// `theta` rows are per-document topic distributions in a shared column
/// order; the result follows that order.
pub fn topic_word_mass<R: AsRef<[f64]>>(theta: &[R], doc_lengths: &[f64]) -> Vec<f64> {
    let cols = theta.first().map_or(0, |r| r.as_ref().len());
    let mut out = vec![0.0; cols];
    let total: f64 = doc_lengths.iter().sum();
    if total <= 0.0 {
        return out;
    }
    for (row, &len) in theta.iter().zip(doc_lengths) {
        for (o, t) in out.iter_mut().zip(row.as_ref()) {
            *o += len * t;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_counts() {
        let t = TopicTree::init(3, 3).unwrap();
        assert_eq!(t.len(), 13);
        assert_eq!(t.enumerate_paths().len(), 9);
        let single = TopicTree::init(2, 1).unwrap();
        assert_eq!(single.len(), 2);
        assert_eq!(single.enumerate_paths(), vec![Path(vec![0, 1])]);
        let binary = TopicTree::init(3, 2).unwrap();
        assert_eq!(binary.len(), 7);
        assert_eq!(binary.enumerate_paths().len(), 4);
        assert!(TopicTree::init(1, 3).is_err());
        assert!(TopicTree::init(3, 0).is_err());
    }

    #[test]
    fn ids_are_breadth_first() {
        let t = TopicTree::init(3, 2).unwrap();
        assert_eq!(t.bfs_order(), (0..7).collect::<Vec<_>>());
        assert_eq!(t.node(0).unwrap().children, vec![1, 2]);
        assert_eq!(t.node(2).unwrap().children, vec![5, 6]);
    }

    #[test]
    fn paths_are_depth_first_and_rooted() {
        let t = TopicTree::init(3, 2).unwrap();
        let paths = t.enumerate_paths();
        assert_eq!(paths[0], Path(vec![0, 1, 3]));
        assert_eq!(paths[3], Path(vec![0, 2, 6]));
        assert!(paths.iter().all(|p| p.0[0] == t.root()));
        assert_eq!(paths, t.enumerate_paths());
    }

    #[test]
    fn left_sibling_queries() {
        let t = TopicTree::init(2, 3).unwrap();
        assert_eq!(t.left_siblings(1).unwrap(), Vec::<TopicId>::new());
        assert_eq!(t.left_siblings(3).unwrap(), vec![1, 2]);
        assert_eq!(t.left_siblings(0), Err(TreeError::RootHasNoSiblings));
        assert_eq!(t.left_sibling(3), Some(2));
        assert_eq!(t.left_sibling(1), None);
    }

    #[test]
    fn word_mass_examples() {
        let s = topic_word_mass(&[vec![0.0, 1.0]], &[7.0]);
        assert_eq!(s, vec![0.0, 1.0]);
        let s = topic_word_mass(&[vec![0.2, 0.8], vec![0.5, 0.5]], &[10.0, 30.0]);
        assert!((s[0] - 0.425).abs() < 1e-15);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_mass_grows_every_non_leaf() {
        let mut t = TopicTree::init(3, 3).unwrap();
        let mass: HashMap<_, _> = t.bfs_order().into_iter().map(|id| (id, 1.0 / 13.0)).collect();
        let log = t.update(&mass, 0.05, 0.05);
        assert!(log.pruned.is_empty());
        let parents: Vec<_> = log.added.iter().map(|(p, _)| *p).collect();
        assert_eq!(parents, vec![0, 1, 2, 3]);
        // root's new child is extended to the leaf level
        assert_eq!(log.added[0].1.len(), 2);
        assert!(log.added[1..].iter().all(|(_, c)| c.len() == 1));
        assert_eq!(t.len(), 13 + 2 + 3);
        t.check_invariants().unwrap();
        // new children are rightmost
        assert_eq!(*t.node(0).unwrap().children.last().unwrap(), log.added[0].1[0]);
    }

    #[test]
    fn small_subtree_is_pruned() {
        let mut t = TopicTree::init(3, 2).unwrap();
        // subtree {2, 5, 6} holds 0.01 in total
        let mass: HashMap<_, _> = [
            (0, 0.04),
            (1, 0.04),
            (2, 0.004),
            (3, 0.45),
            (4, 0.46),
            (5, 0.003),
            (6, 0.003),
        ]
        .into_iter()
        .collect();
        let log = t.update(&mass, 0.05, 0.05);
        assert_eq!(log.pruned.len(), 1);
        assert_eq!(log.pruned[0].0, 2);
        let mut removed = log.pruned[0].1.clone();
        removed.sort();
        assert_eq!(removed, vec![2, 5, 6]);
        assert!(log.added.is_empty());
        t.check_invariants().unwrap();
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn prune_never_empties_a_parent() {
        let mut t = TopicTree::init(3, 1).unwrap();
        let mass: HashMap<_, _> = [(0, 0.98), (1, 0.01), (2, 0.01)].into_iter().collect();
        let log = t.update(&mass, 0.99, 0.05);
        assert!(log.pruned.is_empty());
        assert_eq!(t.len(), 3);
        t.check_invariants().unwrap();
    }

    #[test]
    fn add_then_prune_restores_topic_set() {
        let mut t = TopicTree::init(3, 2).unwrap();
        let before = t.len();
        let mut mass: HashMap<_, _> = t.bfs_order().into_iter().map(|id| (id, 0.0)).collect();
        mass.insert(1, 0.2);
        for leaf in [3, 4, 5, 6] {
            mass.insert(leaf, 0.2);
        }
        let log = t.update(&mass, 0.05, 0.0);
        assert_eq!(log.added.len(), 1);
        let new = log.added[0].1[0];
        let mut mass: HashMap<_, _> = t.bfs_order().into_iter().map(|id| (id, 0.2)).collect();
        mass.insert(new, 0.0);
        let log = t.update(&mass, 1.0, 0.05);
        assert_eq!(log.pruned, vec![(new, vec![new])]);
        assert_eq!(t.len(), before);
        t.check_invariants().unwrap();
    }
}
