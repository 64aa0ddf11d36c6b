//! Shortest-path-tree partitioning of a retrieved subgraph into sub-KSGs.
//!
//! A breadth-first shortest-path tree is grown from the topic entity over
//! directed edges. Every tree node whose children are all tree leaves
//! becomes an anchor; its sub-KSG is the root-to-anchor path plus the
//! anchor's children.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg_store::{EntityId, KnowledgeGraph, Ksg, QuestionRecord, RelationId, Triple};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<EntityId>,
    pub depth: usize,
    /// Sorted by id.
    pub children: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShortestPathTree {
    pub root: EntityId,
    pub nodes: BTreeMap<EntityId, TreeNode>,
}

impl ShortestPathTree {
    pub fn contains(&self, e: EntityId) -> bool {
        self.nodes.contains_key(&e)
    }

    pub fn parent(&self, e: EntityId) -> Option<EntityId> {
        self.nodes.get(&e).and_then(|n| n.parent)
    }

    pub fn depth(&self, e: EntityId) -> Option<usize> {
        self.nodes.get(&e).map(|n| n.depth)
    }

    pub fn children(&self, e: EntityId) -> &[EntityId] {
        self.nodes.get(&e).map_or(&[], |n| n.children.as_slice())
    }

    pub fn is_leaf(&self, e: EntityId) -> bool {
        self.children(e).is_empty()
    }

    /// Tree path from the root to `e`, inclusive.
    pub fn path_to(&self, e: EntityId) -> Vec<EntityId> {
        let mut path = vec![e];
        let mut cur = e;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn leaves(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.nodes
            .iter()
            .filter(|(_, n)| n.children.is_empty())
            .map(|(e, _)| *e)
    }
}

/// Directed successor sets of a subgraph, self-loops removed.
fn successors(ksg: &Ksg) -> BTreeMap<EntityId, BTreeSet<EntityId>> {
    let mut succ: BTreeMap<EntityId, BTreeSet<EntityId>> = BTreeMap::new();
    for t in &ksg.edges {
        if !t.is_self_loop() {
            succ.entry(t.subject).or_default().insert(t.object);
        }
    }
    succ
}

/// Breadth-first shortest-path tree over directed unit-weight edges. Among
/// equal-length predecessors the smallest entity id becomes the parent.
pub fn shortest_path_tree(ksg: &Ksg, root: EntityId) -> Result<ShortestPathTree> {
    if !ksg.contains(root) {
        return Err(Error::invalid(format!(
            "root entity {} not in subgraph",
            root.0
        )));
    }
    let succ = successors(ksg);
    let mut nodes = BTreeMap::new();
    nodes.insert(
        root,
        TreeNode {
            parent: None,
            depth: 0,
            children: Vec::new(),
        },
    );
    let mut frontier = vec![root];
    let mut depth = 0;
    while !frontier.is_empty() {
        // frontier is ascending, so the first discoverer is the min-id parent
        let mut next = Vec::new();
        for &u in &frontier {
            let Some(vs) = succ.get(&u) else { continue };
            for &v in vs {
                if let std::collections::btree_map::Entry::Vacant(e) = nodes.entry(v) {
                    e.insert(TreeNode {
                        parent: Some(u),
                        depth: depth + 1,
                        children: Vec::new(),
                    });
                    next.push(v);
                }
            }
        }
        next.sort_unstable();
        frontier = next;
        depth += 1;
    }
    let links: Vec<(EntityId, EntityId)> = nodes
        .iter()
        .filter_map(|(c, n)| n.parent.map(|p| (p, *c)))
        .collect();
    for (p, c) in links {
        nodes.get_mut(&p).expect("parent in tree").children.push(c);
    }
    for n in nodes.values_mut() {
        n.children.sort_unstable();
    }
    Ok(ShortestPathTree { root, nodes })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubKsg {
    pub question_id: String,
    pub root: EntityId,
    pub anchor: EntityId,
    /// Root-to-anchor path, then the anchor's children in id order.
    pub nodes: Vec<EntityId>,
    pub edges: Vec<Triple>,
    pub label: u8,
}

impl SubKsg {
    /// Length of the root-to-anchor path prefix of `nodes`.
    pub fn path_len(&self) -> usize {
        self.nodes
            .iter()
            .position(|&n| n == self.anchor)
            .map_or(0, |p| p + 1)
    }

    pub fn path(&self) -> &[EntityId] {
        &self.nodes[..self.path_len()]
    }

    pub fn to_record(&self, kg: &KnowledgeGraph) -> SubKsgRecord {
        SubKsgRecord {
            question_id: self.question_id.clone(),
            root: kg.entity_name(self.root).to_string(),
            anchor: kg.entity_name(self.anchor).to_string(),
            nodes: self
                .nodes
                .iter()
                .map(|e| kg.entity_name(*e).to_string())
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|t| kg.triple_names(t).map(str::to_string))
                .collect(),
            label: self.label,
        }
    }
}

/// Line-delimited serialisation of a [`SubKsg`] with entities by name.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SubKsgRecord {
    pub question_id: String,
    pub root: String,
    pub anchor: String,
    pub nodes: Vec<String>,
    pub edges: Vec<[String; 3]>,
    pub label: u8,
}

impl SubKsgRecord {
    pub fn resolve(&self, kg: &KnowledgeGraph) -> Result<SubKsg> {
        let ent = |n: &str| {
            kg.entity_id(n).ok_or_else(|| {
                Error::invalid(format!(
                    "sub-KSG of {}: unknown entity `{n}`",
                    self.question_id
                ))
            })
        };
        let rel = |n: &str| {
            kg.relation_id(n).ok_or_else(|| {
                Error::invalid(format!(
                    "sub-KSG of {}: unknown relation `{n}`",
                    self.question_id
                ))
            })
        };
        Ok(SubKsg {
            question_id: self.question_id.clone(),
            root: ent(&self.root)?,
            anchor: ent(&self.anchor)?,
            nodes: self.nodes.iter().map(|n| ent(n)).collect::<Result<_>>()?,
            edges: self
                .edges
                .iter()
                .map(|[s, r, o]| Ok(Triple::new(ent(s)?, rel(r)?, ent(o)?)))
                .collect::<Result<_>>()?,
            label: self.label,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// 1 iff an answer entity is one of the sub-KSG's nodes.
    #[default]
    Membership,
    /// 1 iff any answer is reachable from the root at all (the same label
    /// for every sub-KSG of a question).
    Reachability,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionOptions {
    #[serde(default)]
    pub label_mode: LabelMode,
    /// Also emit a sub-KSG for nodes with a mix of leaf and non-leaf
    /// children, holding only the leaf children. Off by default.
    #[serde(default)]
    pub cover_mixed_leaves: bool,
}

pub fn label_subksg(s: &SubKsg, answers: &BTreeSet<EntityId>) -> u8 {
    u8::from(s.nodes.iter().any(|n| answers.contains(n)))
}

/// Sub-KSGs for one root, ordered by anchor id.
pub fn partition_ksg(
    ksg: &Ksg,
    root: EntityId,
    answers: &BTreeSet<EntityId>,
    question_id: &str,
    opts: PartitionOptions,
) -> Result<Vec<SubKsg>> {
    let tree = shortest_path_tree(ksg, root)?;
    let mut rels: BTreeMap<(EntityId, EntityId), Vec<RelationId>> = BTreeMap::new();
    for t in &ksg.edges {
        rels.entry((t.subject, t.object))
            .or_default()
            .push(t.relation);
    }
    let reachable_answer = answers.iter().any(|a| tree.contains(*a));
    let edges_between = |u: EntityId, v: EntityId, out: &mut Vec<Triple>| {
        if let Some(rs) = rels.get(&(u, v)) {
            let mut rs = rs.clone();
            rs.sort_unstable();
            out.extend(rs.into_iter().map(|r| Triple::new(u, r, v)));
        }
    };
    let mut out = Vec::new();
    for (&node, info) in &tree.nodes {
        if info.children.is_empty() {
            continue;
        }
        let leaf_children: Vec<EntityId> = info
            .children
            .iter()
            .copied()
            .filter(|c| tree.is_leaf(*c))
            .collect();
        let all_leaves = leaf_children.len() == info.children.len();
        if !all_leaves && !(opts.cover_mixed_leaves && !leaf_children.is_empty()) {
            continue;
        }
        let path = tree.path_to(node);
        let mut edges = Vec::new();
        for w in path.windows(2) {
            edges_between(w[0], w[1], &mut edges);
        }
        for &c in &leaf_children {
            edges_between(node, c, &mut edges);
        }
        let mut nodes = path;
        nodes.extend(leaf_children);
        let mut s = SubKsg {
            question_id: question_id.to_string(),
            root,
            anchor: node,
            nodes,
            edges,
            label: 0,
        };
        s.label = match opts.label_mode {
            LabelMode::Membership => label_subksg(&s, answers),
            LabelMode::Reachability => u8::from(reachable_answer),
        };
        out.push(s);
    }
    Ok(out)
}

/// Partition result for one question across all of its topic entities.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionPartition {
    pub question_id: String,
    pub answerable: bool,
    pub subksgs: Vec<SubKsg>,
    /// Subgraph nodes not reachable from any root along directed edges.
    pub unreachable: Vec<EntityId>,
}

impl QuestionPartition {
    pub fn covered(&self) -> bool {
        self.subksgs.iter().any(|s| s.label == 1)
    }
}

/// Runs the partition once per topic entity and concatenates the results.
pub fn partition_question(
    q: &QuestionRecord,
    ksg: &Ksg,
    opts: PartitionOptions,
) -> Result<QuestionPartition> {
    let mut subksgs = Vec::new();
    let mut reached = BTreeSet::new();
    for &root in &q.topic_entities {
        if !ksg.contains(root) {
            continue;
        }
        let tree = shortest_path_tree(ksg, root)?;
        reached.extend(tree.nodes.keys().copied());
        subksgs.extend(partition_ksg(ksg, root, &q.answers, &q.id, opts)?);
    }
    let unreachable = ksg
        .nodes
        .iter()
        .copied()
        .filter(|n| !reached.contains(n))
        .collect();
    Ok(QuestionPartition {
        question_id: q.id.clone(),
        answerable: q.answerable,
        subksgs,
        unreachable,
    })
}

/// Fraction of answerable questions with at least one positive sub-KSG.
pub fn coverage_rate(parts: &[QuestionPartition]) -> Result<f64> {
    let eligible: Vec<&QuestionPartition> = parts.iter().filter(|p| p.answerable).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("coverage rate of an empty question set"));
    }
    let covered = eligible.iter().filter(|p| p.covered()).count();
    Ok(covered as f64 / eligible.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::khop_retrieve;

    fn graph(edges: &[(&'static str, &'static str)]) -> (KnowledgeGraph, Ksg) {
        let g = KnowledgeGraph::from_triples(edges.iter().map(|(s, o)| (*s, "r", *o)));
        let all: Vec<EntityId> = (0..g.num_entities() as u32).map(EntityId).collect();
        let ksg = khop_retrieve(&g, &all, 0).unwrap();
        let ksg = Ksg {
            nodes: ksg.nodes,
            edges: {
                let mut e = g.triples().to_vec();
                e.sort_unstable();
                e
            },
        };
        (g, ksg)
    }

    fn id(g: &KnowledgeGraph, n: &str) -> EntityId {
        g.entity_id(n).unwrap()
    }

    #[test]
    fn chain_tree() {
        let (g, ksg) = graph(&[("a", "b"), ("b", "c")]);
        let t = shortest_path_tree(&ksg, id(&g, "a")).unwrap();
        assert_eq!(t.parent(id(&g, "b")), Some(id(&g, "a")));
        assert_eq!(t.parent(id(&g, "c")), Some(id(&g, "b")));
        assert_eq!(t.parent(id(&g, "a")), None);
        assert_eq!(t.depth(id(&g, "c")), Some(2));
    }

    #[test]
    fn diamond_prefers_smaller_parent() {
        // ids: a=0, b=1, d=2, c=3 -> both b and c reach d at depth 2
        let (g, ksg) = graph(&[("a", "b"), ("b", "d"), ("a", "c"), ("c", "d")]);
        assert!(id(&g, "b") < id(&g, "c"));
        let t = shortest_path_tree(&ksg, id(&g, "a")).unwrap();
        assert_eq!(t.parent(id(&g, "d")), Some(id(&g, "b")));
    }

    #[test]
    fn diamond_prefers_smaller_parent_regardless_of_insertion() {
        // c interned before b this time
        let (g, ksg) = graph(&[("a", "c"), ("c", "d"), ("a", "b"), ("b", "d")]);
        let t = shortest_path_tree(&ksg, id(&g, "a")).unwrap();
        assert_eq!(t.parent(id(&g, "d")), Some(id(&g, "c")));
    }

    #[test]
    fn unreachable_node_is_absent() {
        let (g, ksg) = graph(&[("a", "b"), ("x", "b")]);
        let t = shortest_path_tree(&ksg, id(&g, "a")).unwrap();
        assert!(!t.contains(id(&g, "x")));
    }

    #[test]
    fn root_must_be_in_subgraph() {
        let (_, ksg) = graph(&[("a", "b")]);
        assert!(shortest_path_tree(&ksg, EntityId(99)).is_err());
    }

    #[test]
    fn star_gives_one_subksg_anchored_at_root() {
        let (g, ksg) = graph(&[("root", "x"), ("root", "y"), ("root", "z")]);
        let parts = partition_ksg(
            &ksg,
            id(&g, "root"),
            &BTreeSet::new(),
            "q",
            Default::default(),
        )
        .unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].anchor, id(&g, "root"));
        assert_eq!(parts[0].nodes.len(), 4);
        assert_eq!(parts[0].edges.len(), 3);
    }

    #[test]
    fn chain_gives_one_subksg() {
        let (g, ksg) = graph(&[("a", "b"), ("b", "c")]);
        let ans: BTreeSet<_> = [id(&g, "c")].into();
        let parts = partition_ksg(&ksg, id(&g, "a"), &ans, "q", Default::default()).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].anchor, id(&g, "b"));
        assert_eq!(parts[0].nodes, vec![id(&g, "a"), id(&g, "b"), id(&g, "c")]);
        assert_eq!(parts[0].label, 1);
    }

    #[test]
    fn root_without_out_edges_gives_nothing() {
        let (g, ksg) = graph(&[("x", "a")]);
        let parts =
            partition_ksg(&ksg, id(&g, "a"), &BTreeSet::new(), "q", Default::default()).unwrap();
        assert!(parts.is_empty());
    }

    #[test]
    fn mixed_children_block_anchor_unless_extended() {
        // root -> leaf, root -> b -> c
        let (g, ksg) = graph(&[("root", "leaf"), ("root", "b"), ("b", "c")]);
        let strict = partition_ksg(
            &ksg,
            id(&g, "root"),
            &BTreeSet::new(),
            "q",
            Default::default(),
        )
        .unwrap();
        assert_eq!(strict.len(), 1);
        assert_eq!(strict[0].anchor, id(&g, "b"));
        let opts = PartitionOptions {
            cover_mixed_leaves: true,
            ..Default::default()
        };
        let ext = partition_ksg(&ksg, id(&g, "root"), &BTreeSet::new(), "q", opts).unwrap();
        assert_eq!(ext.len(), 2);
        assert_eq!(ext[0].nodes, vec![id(&g, "root"), id(&g, "leaf")]);
    }

    #[test]
    fn labels() {
        let (g, ksg) = graph(&[("r", "a"), ("a", "x"), ("r", "b"), ("b", "y")]);
        let none = BTreeSet::new();
        let parts = partition_ksg(&ksg, id(&g, "r"), &none, "q", Default::default()).unwrap();
        assert!(parts.iter().all(|p| p.label == 0));
        let ans: BTreeSet<_> = [id(&g, "y")].into();
        let parts = partition_ksg(&ksg, id(&g, "r"), &ans, "q", Default::default()).unwrap();
        let labels: Vec<u8> = parts.iter().map(|p| p.label).collect();
        assert_eq!(labels, vec![0, 1]);
        let literal = PartitionOptions {
            label_mode: LabelMode::Reachability,
            ..Default::default()
        };
        let parts = partition_ksg(&ksg, id(&g, "r"), &ans, "q", literal).unwrap();
        assert!(parts.iter().all(|p| p.label == 1));
    }

    #[test]
    fn parallel_relations_are_all_kept() {
        let g = KnowledgeGraph::from_triples([("a", "r2", "b"), ("a", "r1", "b")]);
        let mut edges = g.triples().to_vec();
        edges.sort_unstable();
        let ksg = Ksg {
            nodes: vec![EntityId(0), EntityId(1)],
            edges,
        };
        let parts =
            partition_ksg(&ksg, EntityId(0), &BTreeSet::new(), "q", Default::default()).unwrap();
        assert_eq!(parts[0].edges.len(), 2);
        assert!(parts[0].edges[0].relation < parts[0].edges[1].relation);
    }

    #[test]
    fn coverage() {
        let p = |covered: bool| QuestionPartition {
            question_id: "q".into(),
            answerable: true,
            subksgs: vec![SubKsg {
                question_id: "q".into(),
                root: EntityId(0),
                anchor: EntityId(0),
                nodes: vec![EntityId(0)],
                edges: vec![],
                label: u8::from(covered),
            }],
            unreachable: vec![],
        };
        assert_eq!(coverage_rate(&[p(true), p(true)]).unwrap(), 1.0);
        assert_eq!(coverage_rate(&[p(true), p(false)]).unwrap(), 0.5);
        let mut skipped = p(false);
        skipped.answerable = false;
        assert_eq!(coverage_rate(&[p(true), skipped]).unwrap(), 1.0);
        assert!(coverage_rate(&[]).is_err());
    }
}
