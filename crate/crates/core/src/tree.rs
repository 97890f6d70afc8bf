//! Draft trees: expansion, BFS/DFS flattening into a verifier batch, tree masks
//! and greedy acceptance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node id of the root, which holds the last committed token.
pub const ROOT: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub token: u32,
    pub depth: usize,
    /// Draft log-probability of `token` given its parent path.
    pub score: f64,
    /// Sum of `score` along the path from the root.
    pub cum_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
    children: Vec<Vec<usize>>,
}

impl DraftTree {
    pub fn new(root_token: u32) -> Self {
        Self {
            nodes: vec![DraftNode {
                id: ROOT,
                parent: None,
                token: root_token,
                depth: 0,
                score: 0.0,
                cum_score: 0.0,
            }],
            children: vec![Vec::new()],
        }
    }

    /// Add a child. Siblings must carry distinct tokens.
    pub fn add_child(&mut self, parent: usize, token: u32, score: f64) -> Result<usize> {
        if parent >= self.nodes.len() {
            return Err(Error::config(format!("unknown parent node {parent}")));
        }
        if self.children[parent].iter().any(|&c| self.nodes[c].token == token) {
            return Err(Error::config(format!(
                "duplicate sibling token {token} under node {parent}"
            )));
        }
        let id = self.nodes.len();
        let p = &self.nodes[parent];
        self.nodes.push(DraftNode {
            id,
            parent: Some(parent),
            token,
            depth: p.depth + 1,
            score,
            cum_score: p.cum_score + score,
        });
        self.children.push(Vec::new());
        self.children[parent].push(id);
        Ok(id)
    }

    pub fn node(&self, id: usize) -> &DraftNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// Draft length: node count excluding the root.
    pub fn gamma(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// True if `a` is `b` or an ancestor of `b`.
    pub fn is_ancestor_or_self(&self, a: usize, b: usize) -> bool {
        let mut cur = Some(b);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            if self.nodes[c].depth <= self.nodes[a].depth {
                return false;
            }
            cur = self.nodes[c].parent;
        }
        false
    }

    /// Path from the first draft node below the root down to `id`, inclusive.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = id;
        while cur != ROOT {
            path.push(cur);
            cur = self.nodes[cur].parent.expect("non-root node has a parent");
        }
        path.reverse();
        path
    }

    /// Children ordered by descending draft score, then node id.
    fn ordered_children(&self, id: usize) -> Vec<usize> {
        let mut c = self.children[id].clone();
        c.sort_by(|&a, &b| {
            self.nodes[b]
                .score
                .total_cmp(&self.nodes[a].score)
                .then(a.cmp(&b))
        });
        c
    }

    pub fn to_dump(&self) -> TreeDump {
        TreeDump {
            nodes: self.nodes.iter().map(|n| n.id).collect(),
            parents: self
                .nodes
                .iter()
                .map(|n| n.parent.map_or(-1, |p| p as i64))
                .collect(),
            tokens: self.nodes.iter().map(|n| n.token).collect(),
            scores: self.nodes.iter().map(|n| n.score).collect(),
        }
    }

    pub fn from_dump(dump: &TreeDump) -> Result<Self> {
        let n = dump.nodes.len();
        if dump.parents.len() != n || dump.tokens.len() != n || dump.scores.len() != n || n == 0 {
            return Err(Error::config("tree dump arrays must be non-empty and equal length"));
        }
        if dump.parents[0] != -1 || dump.nodes[0] != 0 {
            return Err(Error::config("tree dump must start with root id 0, parent -1"));
        }
        let mut tree = DraftTree::new(dump.tokens[0]);
        for i in 1..n {
            let p = dump.parents[i];
            if dump.nodes[i] != i || p < 0 || p as usize >= i {
                return Err(Error::config(format!("tree dump node {i} is out of order")));
            }
            tree.add_child(p as usize, dump.tokens[i], dump.scores[i])?;
        }
        Ok(tree)
    }
}

/// JSON form of a tree: parallel arrays, root first with parent -1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub nodes: Vec<usize>,
    pub parents: Vec<i64>,
    pub tokens: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Source of draft continuations for tree expansion.
pub trait DraftProposer {
    /// For every node in `frontier`, the `k` most likely next tokens with their
    /// log-probabilities, best first.
    fn propose(&mut self, tree: &DraftTree, frontier: &[usize], k: usize)
        -> Result<Vec<Vec<(u32, f64)>>>;
}

/// Expand a draft tree level by level to `depth`, giving each frontier node up
/// to `width` children.
///
/// With a node `budget`, each new level is cut to the highest cumulative-score
/// candidates that still fit; cut nodes are never expanded, so the kept set is
/// closed under ancestors.
pub fn expand_draft_tree<P: DraftProposer + ?Sized>(
    proposer: &mut P,
    root_token: u32,
    depth: usize,
    width: usize,
    budget: Option<usize>,
) -> Result<DraftTree> {
    if depth == 0 || width == 0 {
        return Err(Error::config("draft tree depth and width must be at least 1"));
    }
    let mut tree = DraftTree::new(root_token);
    let mut frontier = vec![ROOT];
    for _ in 0..depth {
        if frontier.is_empty() {
            break;
        }
        let proposals = proposer.propose(&tree, &frontier, width)?;
        let mut cands: Vec<(usize, u32, f64, f64)> = Vec::new();
        for (&parent, props) in frontier.iter().zip(&proposals) {
            let mut seen = Vec::new();
            for &(tok, lp) in props.iter().take(width) {
                if seen.contains(&tok) {
                    continue;
                }
                seen.push(tok);
                cands.push((parent, tok, lp, tree.node(parent).cum_score + lp));
            }
        }
        if let Some(b) = budget {
            let room = b.saturating_sub(tree.gamma());
            if cands.len() > room {
                let mut order: Vec<usize> = (0..cands.len()).collect();
                order.sort_by(|&a, &b| cands[b].3.total_cmp(&cands[a].3).then(a.cmp(&b)));
                let mut keep = vec![false; cands.len()];
                for &i in order.iter().take(room) {
                    keep[i] = true;
                }
                cands = cands
                    .into_iter()
                    .zip(keep)
                    .filter_map(|(c, k)| k.then_some(c))
                    .collect();
            }
        }
        frontier = cands
            .into_iter()
            .map(|(p, t, lp, _)| tree.add_child(p, t, lp))
            .collect::<Result<_>>()?;
    }
    Ok(tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Traversal {
    #[serde(rename = "BFS")]
    Bfs,
    #[serde(rename = "DFS")]
    Dfs,
}

impl std::fmt::Display for Traversal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Traversal::Bfs => "BFS",
            Traversal::Dfs => "DFS",
        })
    }
}

impl std::str::FromStr for Traversal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BFS" => Ok(Traversal::Bfs),
            "DFS" => Ok(Traversal::Dfs),
            _ => Err(Error::config(format!("unknown traversal '{s}'"))),
        }
    }
}

/// A draft tree flattened into verifier order (root excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatBatch {
    pub order: Vec<usize>,
    pub positions: Vec<usize>,
    /// `mask[i][j]`: query `i` may attend to draft row `j`.
    pub mask: Vec<Vec<bool>>,
    pub gamma: usize,
}

/// Flatten the tree. BFS gives level order with siblings adjacent; DFS gives
/// preorder with parents next to children. Siblings are visited by descending
/// draft score, then node id. `committed_len` counts the root token.
pub fn flatten_tree(tree: &DraftTree, traversal: Traversal, committed_len: usize) -> FlatBatch {
    let mut order = Vec::with_capacity(tree.gamma());
    match traversal {
        Traversal::Bfs => {
            let mut queue = std::collections::VecDeque::from([ROOT]);
            while let Some(id) = queue.pop_front() {
                for c in tree.ordered_children(id) {
                    order.push(c);
                    queue.push_back(c);
                }
            }
        }
        Traversal::Dfs => {
            let mut stack: Vec<usize> = tree.ordered_children(ROOT).into_iter().rev().collect();
            while let Some(id) = stack.pop() {
                order.push(id);
                stack.extend(tree.ordered_children(id).into_iter().rev());
            }
        }
    }
    let positions = order
        .iter()
        .map(|&id| committed_len - 1 + tree.node(id).depth)
        .collect();
    let mask = build_tree_mask(tree, &order);
    FlatBatch {
        gamma: order.len(),
        order,
        positions,
        mask,
    }
}

/// Row `i` admits column `j` iff `order[j]` is an ancestor-or-self of `order[i]`.
pub fn build_tree_mask(tree: &DraftTree, order: &[usize]) -> Vec<Vec<bool>> {
    order
        .iter()
        .map(|&qi| order.iter().map(|&kj| tree.is_ancestor_or_self(kj, qi)).collect())
        .collect()
}

/// Outcome of greedy verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub accepted_nodes: Vec<usize>,
    pub accepted_tokens: Vec<u32>,
    pub bonus: u32,
}

impl Verdict {
    /// Accepted tokens this step including the bonus token.
    pub fn accepted_count(&self) -> usize {
        self.accepted_tokens.len() + 1
    }

    /// Tokens committed by this step, bonus last.
    pub fn committed(&self) -> Vec<u32> {
        let mut t = self.accepted_tokens.clone();
        t.push(self.bonus);
        t
    }
}

/// Greedy (temperature 0) acceptance walk.
///
/// `target_argmax[id]` is the target's next-token argmax after node `id`
/// (root included). From the root, follow the child whose token equals the
/// current argmax; stop at the first mismatch or leaf. The bonus token is the
/// argmax at the last accepted node.
pub fn greedy_verify(tree: &DraftTree, target_argmax: &[u32]) -> Verdict {
    assert_eq!(target_argmax.len(), tree.nodes().len(), "argmax per node");
    let mut cur = ROOT;
    let mut accepted_nodes = Vec::new();
    loop {
        let want = target_argmax[cur];
        match tree.children(cur).iter().find(|&&c| tree.node(c).token == want) {
            Some(&c) => {
                accepted_nodes.push(c);
                cur = c;
            }
            None => break,
        }
    }
    Verdict {
        accepted_tokens: accepted_nodes.iter().map(|&n| tree.node(n).token).collect(),
        accepted_nodes,
        bonus: target_argmax[cur],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// r -> {a, b}, a -> {c, d}, b -> {e, f}; ids a=1 b=2 c=3 d=4 e=5 f=6.
    fn sample() -> DraftTree {
        let mut t = DraftTree::new(100);
        let a = t.add_child(ROOT, 1, -0.1).unwrap();
        let b = t.add_child(ROOT, 2, -0.2).unwrap();
        t.add_child(a, 3, -0.1).unwrap();
        t.add_child(a, 4, -0.3).unwrap();
        t.add_child(b, 5, -0.1).unwrap();
        t.add_child(b, 6, -0.4).unwrap();
        t
    }

    struct Fixed;
    impl DraftProposer for Fixed {
        fn propose(&mut self, _: &DraftTree, f: &[usize], k: usize) -> Result<Vec<Vec<(u32, f64)>>> {
            Ok(f.iter()
                .map(|&id| (0..k as u32).map(|i| (id as u32 * 10 + i, -(i as f64) - 0.01 * id as f64)).collect())
                .collect())
        }
    }

    #[test]
    fn expansion_counts() {
        let t = expand_draft_tree(&mut Fixed, 0, 1, 1, None).unwrap();
        assert_eq!(t.gamma(), 1);
        let t = expand_draft_tree(&mut Fixed, 0, 2, 2, None).unwrap();
        assert_eq!(t.gamma(), 6);
        let t = expand_draft_tree(&mut Fixed, 0, 3, 3, None).unwrap();
        assert_eq!(t.gamma(), (27 * 3 - 3) / 2);
        assert!(expand_draft_tree(&mut Fixed, 0, 0, 2, None).is_err());
    }

    #[test]
    fn budget_keeps_best_and_ancestor_closure() {
        let t = expand_draft_tree(&mut Fixed, 0, 4, 3, Some(10)).unwrap();
        assert_eq!(t.gamma(), 10);
        for n in &t.nodes()[1..] {
            let p = n.parent.unwrap();
            assert!(p == ROOT || p < n.id);
        }
    }

    #[test]
    fn duplicate_sibling_rejected() {
        let mut t = DraftTree::new(0);
        t.add_child(ROOT, 5, -1.0).unwrap();
        assert!(t.add_child(ROOT, 5, -2.0).is_err());
    }

    #[test]
    fn bfs_and_dfs_orders() {
        let t = sample();
        assert_eq!(flatten_tree(&t, Traversal::Bfs, 10).order, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(flatten_tree(&t, Traversal::Dfs, 10).order, vec![1, 3, 4, 2, 5, 6]);
        let b = flatten_tree(&t, Traversal::Bfs, 10);
        assert_eq!(b.positions, vec![10, 10, 11, 11, 11, 11]);
        assert_eq!(b.gamma, 6);
    }

    #[test]
    fn chain_orders_agree_and_mask_is_lower_triangular() {
        let mut t = DraftTree::new(0);
        let a = t.add_child(ROOT, 1, 0.0).unwrap();
        let b = t.add_child(a, 2, 0.0).unwrap();
        t.add_child(b, 3, 0.0).unwrap();
        let bfs = flatten_tree(&t, Traversal::Bfs, 5);
        assert_eq!(bfs, flatten_tree(&t, Traversal::Dfs, 5));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(bfs.mask[i][j], j <= i);
            }
        }
    }

    #[test]
    fn mask_rows_are_ancestor_sets() {
        let t = sample();
        let dfs = flatten_tree(&t, Traversal::Dfs, 1);
        // order [a, c, d, b, e, f]
        assert_eq!(dfs.mask[1], vec![true, true, false, false, false, false]);
        assert_eq!(dfs.mask[2], vec![true, false, true, false, false, false]);
    }

    #[test]
    fn mask_permutes_with_order() {
        let t = sample();
        let bfs = flatten_tree(&t, Traversal::Bfs, 1);
        let dfs = flatten_tree(&t, Traversal::Dfs, 1);
        // P maps DFS slots to BFS slots; mask(BFS) = P mask(DFS) P^T.
        let slot = |order: &[usize], id: usize| order.iter().position(|&x| x == id).unwrap();
        for (i, &qi) in bfs.order.iter().enumerate() {
            for (j, &kj) in bfs.order.iter().enumerate() {
                assert_eq!(bfs.mask[i][j], dfs.mask[slot(&dfs.order, qi)][slot(&dfs.order, kj)]);
            }
        }
    }

    #[test]
    fn greedy_worst_and_best_case() {
        let t = sample();
        let v = greedy_verify(&t, &[9, 0, 0, 0, 0, 0, 0]);
        assert_eq!((v.accepted_tokens.clone(), v.bonus, v.accepted_count()), (vec![], 9, 1));
        // root -> a (token 1) -> d (token 4) -> leaf; bonus from d.
        let v = greedy_verify(&t, &[1, 4, 0, 0, 77, 0, 0]);
        assert_eq!(v.accepted_nodes, vec![1, 4]);
        assert_eq!(v.committed(), vec![1, 4, 77]);
        assert_eq!(v.accepted_count(), t.max_depth() + 1);
    }

    #[test]
    fn dump_round_trip() {
        let t = sample();
        let json = serde_json::to_string(&t.to_dump()).unwrap();
        let back = DraftTree::from_dump(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
