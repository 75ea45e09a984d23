//! Behavior-tree data model, canonical document format, model-output
//! extraction, well-formedness checking and unit-subtree construction.
//!
//! The canonical document is JSON with one object per node:
//!
//! ```json
//! {"kind": "selector", "name": "...", "children": [ ... ]}
//! {"kind": "condition", "name": "...", "predicate": {"name": "hold", "args": ["a", "b"]}}
//! {"kind": "action", "name": "...", "action": {"name": "pick_up", "args": ["a", "b", "c"]}}
//! ```
//!
//! `children` is present iff the node is a composite, `predicate` iff it is a
//! condition and `action` iff it is an action. Unknown keys are rejected.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{
    normalize_symbol, DomainError, DomainSpec, Goal, GroundAction, GroundPredicate,
};
use crate::extract;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeStatus {
    Success,
    Failure,
    /// Never produced by the simulator; kept for executors with long-lived actions.
    Running,
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeStatus::Success => "SUCCESS",
            NodeStatus::Failure => "FAILURE",
            NodeStatus::Running => "RUNNING",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Selector,
    Sequence,
    Condition,
    Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawNode", into = "RawNode")]
pub enum BtNode {
    Selector { name: String, children: Vec<BtNode> },
    Sequence { name: String, children: Vec<BtNode> },
    Condition { name: String, predicate: GroundPredicate },
    Action { name: String, action: GroundAction },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    kind: NodeKind,
    #[serde(default)]
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<BtNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicate: Option<GroundPredicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<GroundAction>,
}

impl TryFrom<RawNode> for BtNode {
    type Error = String;

    fn try_from(raw: RawNode) -> Result<Self, Self::Error> {
        let RawNode {
            kind,
            name,
            children,
            predicate,
            action,
        } = raw;
        let kind_name = format!("{kind:?}").to_lowercase();
        match kind {
            NodeKind::Selector | NodeKind::Sequence => {
                if predicate.is_some() || action.is_some() {
                    return Err(format!("{kind_name} node must not carry `predicate` or `action`"));
                }
                let children = children.ok_or_else(|| format!("{kind_name} node requires `children`"))?;
                if children.is_empty() {
                    return Err(format!("{kind_name} node requires at least one child"));
                }
                Ok(if kind == NodeKind::Selector {
                    BtNode::Selector { name, children }
                } else {
                    BtNode::Sequence { name, children }
                })
            }
            NodeKind::Condition => {
                if children.is_some() || action.is_some() {
                    return Err("condition node must not carry `children` or `action`".into());
                }
                let predicate = predicate.ok_or("condition node requires `predicate`")?;
                Ok(BtNode::Condition { name, predicate })
            }
            NodeKind::Action => {
                if children.is_some() || predicate.is_some() {
                    return Err("action node must not carry `children` or `predicate`".into());
                }
                let action = action.ok_or("action node requires `action`")?;
                Ok(BtNode::Action { name, action })
            }
        }
    }
}

impl From<BtNode> for RawNode {
    fn from(node: BtNode) -> Self {
        let blank = |kind, name| RawNode {
            kind,
            name,
            children: None,
            predicate: None,
            action: None,
        };
        match node {
            BtNode::Selector { name, children } => RawNode {
                children: Some(children),
                ..blank(NodeKind::Selector, name)
            },
            BtNode::Sequence { name, children } => RawNode {
                children: Some(children),
                ..blank(NodeKind::Sequence, name)
            },
            BtNode::Condition { name, predicate } => RawNode {
                predicate: Some(predicate),
                ..blank(NodeKind::Condition, name)
            },
            BtNode::Action { name, action } => RawNode {
                action: Some(action),
                ..blank(NodeKind::Action, name)
            },
        }
    }
}

impl BtNode {
    pub fn selector(name: impl Into<String>, children: Vec<BtNode>) -> Self {
        BtNode::Selector {
            name: name.into(),
            children,
        }
    }

    pub fn sequence(name: impl Into<String>, children: Vec<BtNode>) -> Self {
        BtNode::Sequence {
            name: name.into(),
            children,
        }
    }

    /// Condition labelled with its predicate.
    pub fn condition(predicate: GroundPredicate) -> Self {
        BtNode::Condition {
            name: predicate.to_string(),
            predicate,
        }
    }

    /// Action labelled with its ground action.
    pub fn action(action: GroundAction) -> Self {
        BtNode::Action {
            name: action.to_string(),
            action,
        }
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            BtNode::Selector { .. } => NodeKind::Selector,
            BtNode::Sequence { .. } => NodeKind::Sequence,
            BtNode::Condition { .. } => NodeKind::Condition,
            BtNode::Action { .. } => NodeKind::Action,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            BtNode::Selector { name, .. }
            | BtNode::Sequence { name, .. }
            | BtNode::Condition { name, .. }
            | BtNode::Action { name, .. } => name,
        }
    }

    pub fn children(&self) -> &[BtNode] {
        match self {
            BtNode::Selector { children, .. } | BtNode::Sequence { children, .. } => children,
            _ => &[],
        }
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a BtNode)) {
        f(self);
        for c in self.children() {
            c.walk(f);
        }
    }

    /// Action leaves in left-to-right order.
    pub fn actions(&self) -> Vec<&GroundAction> {
        let mut out = Vec::new();
        self.walk(&mut |n| {
            if let BtNode::Action { action, .. } = n {
                out.push(action);
            }
        });
        out
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_| n += 1);
        n
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(BtNode::depth).max().unwrap_or(0)
    }

    /// Same tree with every label cleared.
    pub fn without_labels(&self) -> BtNode {
        self.map_names(&mut |_| String::new())
    }

    fn map_names(&self, f: &mut impl FnMut(&BtNode) -> String) -> BtNode {
        let name = f(self);
        match self {
            BtNode::Selector { children, .. } => BtNode::Selector {
                name,
                children: children.iter().map(|c| c.map_names(f)).collect(),
            },
            BtNode::Sequence { children, .. } => BtNode::Sequence {
                name,
                children: children.iter().map(|c| c.map_names(f)).collect(),
            },
            BtNode::Condition { predicate, .. } => BtNode::Condition {
                name,
                predicate: predicate.clone(),
            },
            BtNode::Action { action, .. } => BtNode::Action {
                name,
                action: action.clone(),
            },
        }
    }

    /// Case-normalizes every predicate and action symbol.
    pub fn normalized(&self) -> BtNode {
        match self {
            BtNode::Selector { name, children } => BtNode::Selector {
                name: name.clone(),
                children: children.iter().map(BtNode::normalized).collect(),
            },
            BtNode::Sequence { name, children } => BtNode::Sequence {
                name: name.clone(),
                children: children.iter().map(BtNode::normalized).collect(),
            },
            BtNode::Condition { name, predicate } => BtNode::Condition {
                name: name.clone(),
                predicate: predicate.normalized(),
            },
            BtNode::Action { name, action } => BtNode::Action {
                name: name.clone(),
                action: action.normalized(),
            },
        }
    }
}

/// A behavior tree, optionally annotated with the goal it serves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorTree {
    pub root: BtNode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Goal>,
}

impl BehaviorTree {
    pub fn new(root: BtNode) -> Self {
        Self { root, goal: None }
    }

    pub fn with_goal(root: BtNode, goal: Goal) -> Self {
        Self {
            root,
            goal: Some(goal),
        }
    }

    pub fn actions(&self) -> Vec<&GroundAction> {
        self.root.actions()
    }

    pub fn action_leaf_count(&self) -> usize {
        self.root.actions().len()
    }

    /// Structural equality ignoring labels and goal annotations.
    pub fn equal_up_to_labels(&self, other: &BehaviorTree) -> bool {
        self.root.without_labels() == other.root.without_labels()
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("malformed structure at byte {offset}: {reason}")]
    MalformedStructure { offset: usize, reason: String },
    #[error("no structured block in model output")]
    NoStructuredBlock,
}

/// Parses a canonical tree document.
pub fn parse_tree(text: &str) -> Result<BehaviorTree, TreeError> {
    serde_json::from_str::<BtNode>(text)
        .map(BehaviorTree::new)
        .map_err(|e| TreeError::MalformedStructure {
            offset: extract::byte_offset(text, e.line(), e.column()),
            reason: e.to_string(),
        })
}

/// Canonical serialization: two-space indented JSON, fixed key order,
/// trailing newline.
pub fn emit_tree(tree: &BehaviorTree) -> String {
    let mut out = serde_json::to_string_pretty(&tree.root).expect("tree serializes");
    out.push('\n');
    out
}

/// Finds the first structured block in a completion and parses it strictly.
/// Symbols are case-normalized before they are returned.
pub fn extract_tree_from_model_output(text: &str) -> Result<BehaviorTree, TreeError> {
    let block = extract::first_block(text).ok_or(TreeError::NoStructuredBlock)?;
    parse_tree(block.body)
        .map(|t| BehaviorTree::new(t.root.normalized()))
        .map_err(|e| match e {
            TreeError::MalformedStructure { offset, reason } => TreeError::MalformedStructure {
                offset: block.offset + offset,
                reason,
            },
            other => other,
        })
}

/// Maps symbols onto the domain's spelling when they differ only in case or
/// separators (`ParallelGripper` -> `parallelgripper`). Unmatched symbols are
/// left alone so that well-formedness checking still reports them.
pub fn canonicalize(tree: &BehaviorTree, domain: &DomainSpec) -> BehaviorTree {
    fn squash(s: &str) -> String {
        s.chars()
            .filter(char::is_ascii_alphanumeric)
            .map(|c| c.to_ascii_lowercase())
            .collect()
    }
    fn resolve<'a>(raw: &str, mut known: impl Iterator<Item = &'a String>) -> String {
        let key = squash(raw);
        known
            .find(|k| squash(k) == key)
            .cloned()
            .unwrap_or_else(|| raw.to_string())
    }
    fn visit(n: &BtNode, d: &DomainSpec) -> BtNode {
        let objects = |args: &[String]| -> Vec<String> {
            args.iter().map(|a| resolve(a, d.objects.keys())).collect()
        };
        match n {
            BtNode::Selector { name, children } => BtNode::Selector {
                name: name.clone(),
                children: children.iter().map(|c| visit(c, d)).collect(),
            },
            BtNode::Sequence { name, children } => BtNode::Sequence {
                name: name.clone(),
                children: children.iter().map(|c| visit(c, d)).collect(),
            },
            BtNode::Condition { name, predicate } => BtNode::Condition {
                name: name.clone(),
                predicate: GroundPredicate {
                    name: resolve(
                        &predicate.name,
                        d.properties
                            .keys()
                            .chain(d.constraints.keys())
                            .chain(d.relations.keys()),
                    ),
                    args: objects(&predicate.args),
                },
            },
            BtNode::Action { name, action } => BtNode::Action {
                name: name.clone(),
                action: GroundAction {
                    name: resolve(&action.name, d.schemas.iter().map(|s| &s.name)),
                    args: objects(&action.args),
                },
            },
        }
    }
    BehaviorTree {
        root: visit(&tree.root, domain),
        goal: tree.goal.clone(),
    }
}

/// Best-effort recovery used for scoring logical coherence of outputs that
/// failed the strict format: tolerates missing labels, unknown keys, kind
/// aliases (`fallback`, `seq`) and predicates/actions written as
/// `name(arg, ...)` strings. Composites still need at least one child.
pub fn recover_tree_lenient(text: &str) -> Option<BehaviorTree> {
    let block = extract::first_block(text)?;
    let value: Value = serde_json::from_str(block.body).ok().or_else(|| {
        // tolerate trailing commas, a frequent model slip
        let cleaned = block.body.replace(",]", "]").replace(",}", "}");
        serde_json::from_str(&cleaned).ok()
    })?;
    lenient_node(&value).map(BehaviorTree::new)
}

fn lenient_node(v: &Value) -> Option<BtNode> {
    let obj = v.as_object()?;
    let kind = obj.get("kind").or_else(|| obj.get("type"))?.as_str()?;
    let name = obj
        .get("name")
        .or_else(|| obj.get("label"))
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let children = || -> Option<Vec<BtNode>> {
        let list = obj.get("children")?.as_array()?;
        let nodes: Option<Vec<BtNode>> = list.iter().map(lenient_node).collect();
        nodes.filter(|n| !n.is_empty())
    };
    match normalize_symbol(kind).as_str() {
        "selector" | "fallback" => Some(BtNode::Selector {
            name,
            children: children()?,
        }),
        "sequence" | "seq" => Some(BtNode::Sequence {
            name,
            children: children()?,
        }),
        "condition" | "cond" => {
            let (n, args) = lenient_call(obj.get("predicate").or_else(|| obj.get("condition"))?)?;
            Some(BtNode::Condition {
                name,
                predicate: GroundPredicate::new(n, args),
            })
        }
        "action" => {
            let (n, args) = lenient_call(obj.get("action")?)?;
            Some(BtNode::Action {
                name,
                action: GroundAction::new(n, args),
            })
        }
        _ => None,
    }
}

fn lenient_call(v: &Value) -> Option<(String, Vec<String>)> {
    let (name, args) = match v {
        Value::String(s) => {
            let p: GroundPredicate = s.parse().ok()?;
            (p.name, p.args)
        }
        Value::Object(o) => {
            let name = o.get("name")?.as_str()?.to_string();
            let args = match o.get("args") {
                None => Vec::new(),
                Some(a) => a
                    .as_array()?
                    .iter()
                    .map(|x| x.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()?,
            };
            (name, args)
        }
        _ => return None,
    };
    Some((
        normalize_symbol(&name),
        args.iter().map(|a| normalize_symbol(a)).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Well-formedness

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    NoStructuredBlock,
    MalformedStructure,
    UnknownAction,
    UnknownPredicate,
    UnknownObject,
    ArityMismatch,
    TypeMismatch,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("code serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Child-index path from the root, e.g. `root/1/0`.
    pub path: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecReport {
    pub violations: Vec<Violation>,
}

impl ExecReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn from_tree_error(err: &TreeError) -> Self {
        let code = match err {
            TreeError::NoStructuredBlock => ViolationCode::NoStructuredBlock,
            TreeError::MalformedStructure { .. } => ViolationCode::MalformedStructure,
        };
        Self {
            violations: vec![Violation {
                code,
                path: String::new(),
                detail: err.to_string(),
            }],
        }
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

fn violation_for(err: DomainError, path: &str) -> Violation {
    let code = match &err {
        DomainError::UnknownAction(_) => ViolationCode::UnknownAction,
        DomainError::UnknownPredicate(_) => ViolationCode::UnknownPredicate,
        DomainError::UnknownObject(_) => ViolationCode::UnknownObject,
        DomainError::ArityMismatch { .. } => ViolationCode::ArityMismatch,
        DomainError::TypeMismatch { .. } => ViolationCode::TypeMismatch,
        _ => ViolationCode::MalformedStructure,
    };
    Violation {
        code,
        path: path.to_string(),
        detail: err.to_string(),
    }
}

/// Lists every violation of `tree` against `domain`; the tree passes iff the
/// report is empty.
pub fn well_formed(tree: &BehaviorTree, domain: &DomainSpec) -> ExecReport {
    fn visit(node: &BtNode, path: &str, domain: &DomainSpec, out: &mut Vec<Violation>) {
        match node {
            BtNode::Selector { children, .. } | BtNode::Sequence { children, .. } => {
                if children.is_empty() {
                    out.push(Violation {
                        code: ViolationCode::MalformedStructure,
                        path: path.to_string(),
                        detail: "composite node without children".into(),
                    });
                }
                for (i, c) in children.iter().enumerate() {
                    visit(c, &format!("{path}/{i}"), domain, out);
                }
            }
            BtNode::Condition { predicate, .. } => {
                if let Err(e) = domain.check_predicate(predicate) {
                    out.push(violation_for(e, path));
                }
            }
            BtNode::Action { action, .. } => {
                if let Err(e) = domain.ground_action(action) {
                    out.push(violation_for(e, path));
                }
            }
        }
    }
    let mut violations = Vec::new();
    visit(&tree.root, "root", domain, &mut violations);
    ExecReport { violations }
}

/// `Selector[Condition(primary effect), Sequence[Condition(pre)..., Action]]`
/// with preconditions in schema declaration order.
pub fn build_unit_subtree(action: &GroundAction, domain: &DomainSpec) -> Result<BehaviorTree, DomainError> {
    let grounding = domain.ground_action(action)?;
    let effect = grounding.add_effects.first().cloned().ok_or_else(|| DomainError::Schema {
        path: format!("actions.{}", action.name),
        reason: "action has no add-effect to use as goal condition".into(),
    })?;
    let mut steps: Vec<BtNode> = grounding
        .preconditions
        .iter()
        .cloned()
        .map(BtNode::condition)
        .collect();
    steps.push(BtNode::action(action.clone()));
    let root = BtNode::selector(
        effect.to_string(),
        vec![
            BtNode::condition(effect.clone()),
            BtNode::sequence(action.to_string(), steps),
        ],
    );
    Ok(BehaviorTree::with_goal(root, Goal::single(effect)))
}
