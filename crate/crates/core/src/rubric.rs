//! Scoring rubrics and the per-video step DAG derived from them.
//!
//! Node ids are assigned leaves first (in performed-step order), then one
//! intermediate per occupied stage in order of the stage's first performed
//! member, then the root. Declaration order of stages in the rubric file does
//! not influence the DAG.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RubricError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid rubric file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepType {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub id: u32,
    pub members: Vec<u32>,
}

fn default_true() -> bool {
    true
}

/// Task-level rubric: the catalog of step types and how they group into stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricSpec {
    pub step_types: Vec<StepType>,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub difficulty_multiplier: bool,
    /// Whether steps are performed in a fixed temporal order. The ordering
    /// losses only apply to ordered rubrics.
    #[serde(default = "default_true")]
    pub ordered: bool,
}

impl RubricSpec {
    pub fn validate(&self) -> Result<(), RubricError> {
        let mut ids = BTreeSet::new();
        for st in &self.step_types {
            if !ids.insert(st.id) {
                return Err(RubricError::Config(format!("duplicate step type id {}", st.id)));
            }
        }
        let mut stage_ids = BTreeSet::new();
        let mut owner: HashMap<u32, u32> = HashMap::new();
        for stage in &self.stages {
            if !stage_ids.insert(stage.id) {
                return Err(RubricError::Config(format!("duplicate stage id {}", stage.id)));
            }
            if stage.members.is_empty() {
                return Err(RubricError::Config(format!("stage {} has no members", stage.id)));
            }
            for m in &stage.members {
                if !ids.contains(m) {
                    return Err(RubricError::Config(format!(
                        "stage {} lists unknown step type {m}",
                        stage.id
                    )));
                }
                if let Some(prev) = owner.insert(*m, stage.id) {
                    if prev != stage.id {
                        return Err(RubricError::Config(format!(
                            "step type {m} belongs to stages {prev} and {}",
                            stage.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RubricError> {
        let spec: RubricSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, RubricError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| RubricError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rubric serializes")
    }

    pub fn contains(&self, step_type: u32) -> bool {
        self.step_types.iter().any(|s| s.id == step_type)
    }

    pub fn stage_of(&self, step_type: u32) -> Option<u32> {
        self.stages
            .iter()
            .find(|s| s.members.contains(&step_type))
            .map(|s| s.id)
    }

    pub fn name_of(&self, step_type: u32) -> Option<&str> {
        self.step_types.iter().find(|s| s.id == step_type).map(|s| s.name.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf,
    Intermediate,
    Root,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DagNode {
    pub id: usize,
    pub kind: NodeKind,
    /// Step type for leaves, stage id for intermediates.
    pub label: Option<u32>,
}

/// Per-video rubric DAG: leaves are performed steps, edges point toward the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RubricDag {
    nodes: Vec<DagNode>,
    edges: Vec<(usize, usize)>,
    topo: Vec<usize>,
    preds: Vec<Vec<usize>>,
}

/// A violated structural invariant reported by [`RubricDag::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    SingleRoot { roots: usize },
    RootHasOutgoing,
    LeafHasIncoming { node: usize },
    Acyclicity,
    ReachesRoot { node: usize },
    DanglingEdge { from: usize, to: usize },
    NodeIds,
    LeafOrder,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SingleRoot { roots } => write!(f, "single root ({roots} roots)"),
            Violation::RootHasOutgoing => write!(f, "root has outgoing edges"),
            Violation::LeafHasIncoming { node } => write!(f, "leaf {node} has incoming edges"),
            Violation::Acyclicity => write!(f, "acyclicity"),
            Violation::ReachesRoot { node } => write!(f, "node {node} does not reach the root"),
            Violation::DanglingEdge { from, to } => write!(f, "edge {from}->{to} names a missing node"),
            Violation::NodeIds => write!(f, "node ids must be 0..n in order"),
            Violation::LeafOrder => write!(f, "leaves must come first, in step order"),
        }
    }
}

impl RubricDag {
    /// Assemble a DAG from raw parts without checking invariants.
    pub fn from_parts(nodes: Vec<DagNode>, edges: Vec<(usize, usize)>) -> Self {
        let mut preds = vec![Vec::new(); nodes.len()];
        for &(from, to) in &edges {
            if to < preds.len() {
                preds[to].push(from);
            }
        }
        for p in &mut preds {
            p.sort_unstable();
        }
        let topo = kahn(nodes.len(), &edges).unwrap_or_default();
        RubricDag { nodes, edges, topo, preds }
    }

    pub fn nodes(&self) -> &[DagNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &DagNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Leaf)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }

    /// Step type of each leaf, in leaf order.
    pub fn leaf_step_types(&self) -> Vec<u32> {
        self.leaves().filter_map(|n| n.label).collect()
    }

    pub fn root(&self) -> Option<usize> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Root).map(|n| n.id)
    }

    /// Direct predecessors of `node`, ascending by id.
    pub fn predecessors(&self, node: usize) -> &[usize] {
        &self.preds[node]
    }

    /// Cached topological order (empty if the graph is cyclic).
    pub fn topo(&self) -> &[usize] {
        &self.topo
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let n = self.nodes.len();
        if self.nodes.iter().enumerate().any(|(i, node)| node.id != i) {
            out.push(Violation::NodeIds);
        }
        for &(from, to) in &self.edges {
            if from >= n || to >= n {
                out.push(Violation::DanglingEdge { from, to });
            }
        }
        let roots: Vec<usize> = self
            .nodes
            .iter()
            .filter(|x| x.kind == NodeKind::Root)
            .map(|x| x.id)
            .collect();
        if roots.len() != 1 {
            out.push(Violation::SingleRoot { roots: roots.len() });
        }
        if self
            .edges
            .iter()
            .any(|&(from, _)| roots.contains(&from))
        {
            out.push(Violation::RootHasOutgoing);
        }
        for node in self.nodes.iter().filter(|x| x.kind == NodeKind::Leaf) {
            if self.edges.iter().any(|&(_, to)| to == node.id) {
                out.push(Violation::LeafHasIncoming { node: node.id });
            }
        }
        let leaf_ids: Vec<usize> = self.leaves().map(|x| x.id).collect();
        if leaf_ids.iter().enumerate().any(|(i, &id)| i != id) {
            out.push(Violation::LeafOrder);
        }
        if kahn(n, &self.edges).is_none() {
            out.push(Violation::Acyclicity);
        }
        if let [root] = roots[..] {
            // reverse reachability from the root
            let mut seen = vec![false; n];
            let mut stack = vec![root];
            while let Some(v) = stack.pop() {
                if v >= n || seen[v] {
                    continue;
                }
                seen[v] = true;
                stack.extend(self.edges.iter().filter(|&&(_, to)| to == v).map(|&(from, _)| from));
            }
            for (i, s) in seen.iter().enumerate() {
                if !s {
                    out.push(Violation::ReachesRoot { node: i });
                }
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

/// Kahn's algorithm, always releasing the smallest ready node id first.
fn kahn(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    if edges.iter().any(|&(a, b)| a >= n || b >= n) {
        return None;
    }
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(from, to) in edges {
        indeg[to] += 1;
        succ[from].push(to);
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &s in &succ[v] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(s);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Topological order with ascending-id tie-breaking; leaves come first and the root last.
pub fn topological_order(dag: &RubricDag) -> Result<Vec<usize>, RubricError> {
    kahn(dag.node_count(), dag.edges())
        .ok_or_else(|| RubricError::Contract("graph contains a cycle".into()))
}

/// Derive the DAG for one video from the task rubric and its performed steps.
pub fn build_dag(spec: &RubricSpec, steps: &[u32]) -> Result<RubricDag, RubricError> {
    if steps.is_empty() {
        return Err(RubricError::Config("a video needs at least one step".into()));
    }
    if let Some(bad) = steps.iter().find(|s| !spec.contains(**s)) {
        return Err(RubricError::Config(format!("unknown step type {bad}")));
    }

    let mut nodes: Vec<DagNode> = steps
        .iter()
        .enumerate()
        .map(|(i, &s)| DagNode { id: i, kind: NodeKind::Leaf, label: Some(s) })
        .collect();

    let mut stage_nodes: Vec<(u32, usize)> = Vec::new();
    let mut leaf_parent = Vec::with_capacity(steps.len());
    for &s in steps {
        let parent = match spec.stage_of(s) {
            Some(stage) => {
                let existing = stage_nodes.iter().find(|(id, _)| *id == stage).map(|&(_, n)| n);
                Some(existing.unwrap_or_else(|| {
                    let id = steps.len() + stage_nodes.len();
                    stage_nodes.push((stage, id));
                    id
                }))
            }
            None => None,
        };
        leaf_parent.push(parent);
    }
    for &(stage, id) in &stage_nodes {
        nodes.push(DagNode { id, kind: NodeKind::Intermediate, label: Some(stage) });
    }
    let root = nodes.len();
    nodes.push(DagNode { id: root, kind: NodeKind::Root, label: None });

    let mut edges: Vec<(usize, usize)> = leaf_parent
        .iter()
        .enumerate()
        .map(|(leaf, parent)| (leaf, parent.unwrap_or(root)))
        .collect();
    edges.extend(stage_nodes.iter().map(|&(_, id)| (id, root)));

    Ok(RubricDag::from_parts(nodes, edges))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(stages: &[(u32, &[u32])], n_types: u32) -> RubricSpec {
        RubricSpec {
            step_types: (0..n_types).map(|id| StepType { id, name: format!("s{id}") }).collect(),
            stages: stages.iter().map(|(id, m)| Stage { id: *id, members: m.to_vec() }).collect(),
            difficulty_multiplier: false,
            ordered: true,
        }
    }

    #[test]
    fn three_steps_two_stages() {
        let s = spec(&[(10, &[1, 2]), (11, &[3])], 4);
        let dag = build_dag(&s, &[1, 2, 3]).unwrap();
        assert_eq!(dag.node_count(), 6);
        assert_eq!(dag.edge_count(), 5);
        assert_eq!(dag.leaf_count(), 3);
        assert!(dag.validate().is_ok());
    }

    #[test]
    fn single_stageless_step() {
        let s = spec(&[], 2);
        let dag = build_dag(&s, &[1]).unwrap();
        assert_eq!(dag.node_count(), 2);
        assert_eq!(dag.edges(), &[(0, 1)]);
    }

    #[test]
    fn repeated_step_type_gives_distinct_leaves() {
        let s = spec(&[(0, &[0, 1])], 2);
        let dag = build_dag(&s, &[1, 1]).unwrap();
        assert_eq!(dag.leaf_step_types(), vec![1, 1]);
        assert_eq!(dag.node_count(), 4);
        assert_eq!(dag.predecessors(2), &[0, 1]);
    }

    #[test]
    fn build_errors() {
        let s = spec(&[], 2);
        assert!(matches!(build_dag(&s, &[]), Err(RubricError::Config(_))));
        assert!(matches!(build_dag(&s, &[7]), Err(RubricError::Config(_))));
    }

    #[test]
    fn stage_declaration_order_is_irrelevant() {
        let a = spec(&[(0, &[0, 1]), (1, &[2]), (2, &[3, 4])], 5);
        let mut b = a.clone();
        b.stages.reverse();
        for steps in [vec![0, 2, 3], vec![3, 1, 0, 2], vec![4]] {
            assert_eq!(build_dag(&a, &steps).unwrap(), build_dag(&b, &steps).unwrap());
        }
    }

    #[test]
    fn validate_reports_cycle_and_roots() {
        let leaf = |id| DagNode { id, kind: NodeKind::Leaf, label: Some(0) };
        let mid = |id| DagNode { id, kind: NodeKind::Intermediate, label: Some(0) };
        let root = |id| DagNode { id, kind: NodeKind::Root, label: None };

        let cyclic = RubricDag::from_parts(
            vec![leaf(0), mid(1), mid(2), root(3)],
            vec![(0, 1), (1, 2), (2, 1), (2, 3)],
        );
        let v = cyclic.validate().unwrap_err();
        assert!(v.contains(&Violation::Acyclicity));
        assert!(v.iter().any(|x| x.to_string() == "acyclicity"));
        assert!(topological_order(&cyclic).is_err());

        let two_roots = RubricDag::from_parts(vec![leaf(0), root(1), root(2)], vec![(0, 1), (0, 2)]);
        let v = two_roots.validate().unwrap_err();
        assert!(v.contains(&Violation::SingleRoot { roots: 2 }));
        assert!(v[0].to_string().starts_with("single root"));
    }

    #[test]
    fn topological_orders() {
        let leaf = |id| DagNode { id, kind: NodeKind::Leaf, label: Some(0) };
        let chain = RubricDag::from_parts(
            vec![leaf(0), DagNode { id: 1, kind: NodeKind::Intermediate, label: Some(0) }, DagNode {
                id: 2,
                kind: NodeKind::Root,
                label: None,
            }],
            vec![(0, 1), (1, 2)],
        );
        assert_eq!(topological_order(&chain).unwrap(), vec![0, 1, 2]);

        let s = spec(&[(0, &[0, 1])], 2);
        let diamond = build_dag(&s, &[0, 1]).unwrap();
        assert_eq!(topological_order(&diamond).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rubric_json_rejects_unknown_keys() {
        let ok = r#"{"step_types":[{"id":0,"name":"a"}],"stages":[{"id":0,"members":[0]}],"difficulty_multiplier":false}"#;
        let parsed = RubricSpec::from_json(ok).unwrap();
        assert!(parsed.ordered);
        let bad = r#"{"step_types":[],"stages":[],"difficulty_multiplier":false,"extra":1}"#;
        assert!(RubricSpec::from_json(bad).is_err());
        let overlapping = r#"{"step_types":[{"id":0,"name":"a"}],"stages":[{"id":0,"members":[0]},{"id":1,"members":[0]}]}"#;
        assert!(matches!(RubricSpec::from_json(overlapping), Err(RubricError::Config(_))));
    }
}
