//! World-model formalism: objects, properties, constraints, relations,
//! action schemas, states and goals.
//!
//! A [`DomainSpec`] is loaded from a JSON domain document. Predicate templates
//! inside schemas are written in functional notation (`hold(?h, ?t)`), where
//! `?`-prefixed terms are schema variables and bare terms are object constants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("schema violation at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("constraint predicate `{predicate}` appears in the effects of action `{action}`")]
    ConstraintInEffect { action: String, predicate: String },
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("`{symbol}` expects {expected} argument(s), got {found}")]
    ArityMismatch {
        symbol: String,
        expected: usize,
        found: usize,
    },
    #[error("argument `{object}` of `{action}` has type `{found}`, expected {expected}")]
    TypeMismatch {
        action: String,
        object: String,
        expected: String,
        found: String,
    },
    #[error("goal has no conjuncts")]
    EmptyGoal,
    #[error("cannot parse `{text}`: {reason}")]
    Syntax { text: String, reason: String },
}

/// Lowercase snake_case normalization applied to symbols coming from model
/// output (`isInsertedTo` -> `is_inserted_to`, `left hand` -> `left_hand`).
pub fn normalize_symbol(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len() + 4);
    let mut prev: Option<char> = None;
    for c in raw.trim().chars() {
        if c == ' ' || c == '-' || c == '_' {
            if !out.is_empty() && !out.ends_with('_') {
                out.push('_');
            }
        } else if c.is_uppercase() {
            if matches!(prev, Some(p) if p.is_lowercase() || p.is_ascii_digit())
                && !out.ends_with('_')
            {
                out.push('_');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
        prev = Some(c);
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

/// Splits `name(a, b, c)` into its name and argument list.
fn parse_call(text: &str) -> Result<(String, Vec<String>), DomainError> {
    let syntax = |reason: &str| DomainError::Syntax {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let text = text.trim();
    let open = text.find('(').ok_or_else(|| syntax("missing `(`"))?;
    if !text.ends_with(')') {
        return Err(syntax("missing closing `)`"));
    }
    let name = text[..open].trim();
    if name.is_empty() {
        return Err(syntax("missing name"));
    }
    let inner = &text[open + 1..text.len() - 1];
    if inner.contains('(') || inner.contains(')') {
        return Err(syntax("nested parentheses"));
    }
    let args: Vec<String> = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner.split(',').map(|a| a.trim().to_string()).collect()
    };
    if args.iter().any(|a| a.is_empty()) {
        return Err(syntax("empty argument"));
    }
    Ok((name.to_string(), args))
}

fn fmt_call(f: &mut fmt::Formatter<'_>, name: &str, args: &[String]) -> fmt::Result {
    write!(f, "{}({})", name, args.join(", "))
}

/// A predicate with every argument bound to an object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundPredicate {
    pub name: String,
    pub args: Vec<String>,
}

impl GroundPredicate {
    pub fn new<S: Into<String>>(name: impl Into<String>, args: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }

    pub fn normalized(&self) -> Self {
        Self {
            name: normalize_symbol(&self.name),
            args: self.args.iter().map(|a| normalize_symbol(a)).collect(),
        }
    }
}

impl fmt::Display for GroundPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_call(f, &self.name, &self.args)
    }
}

impl FromStr for GroundPredicate {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, args) = parse_call(s)?;
        Ok(Self { name, args })
    }
}

/// An action with every parameter bound to an object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundAction {
    pub name: String,
    pub args: Vec<String>,
}

impl GroundAction {
    pub fn new<S: Into<String>>(name: impl Into<String>, args: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }

    pub fn normalized(&self) -> Self {
        Self {
            name: normalize_symbol(&self.name),
            args: self.args.iter().map(|a| normalize_symbol(a)).collect(),
        }
    }
}

impl fmt::Display for GroundAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_call(f, &self.name, &self.args)
    }
}

impl FromStr for GroundAction {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, args) = parse_call(s)?;
        Ok(Self { name, args })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateKind {
    Property,
    Constraint,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Var(String),
    Const(String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => write!(f, "?{v}"),
            Term::Const(c) => f.write_str(c),
        }
    }
}

/// A predicate over schema variables and constants, e.g. `hold(?h, ?t)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateTemplate {
    pub name: String,
    pub args: Vec<Term>,
}

impl PredicateTemplate {
    fn parse(text: &str) -> Result<Self, DomainError> {
        let (name, args) = parse_call(text)?;
        let args = args
            .into_iter()
            .map(|a| match a.strip_prefix('?') {
                Some(v) => Term::Var(v.to_string()),
                None => Term::Const(a),
            })
            .collect();
        Ok(Self { name, args })
    }

    fn instantiate(&self, binding: &BTreeMap<&str, &str>) -> GroundPredicate {
        GroundPredicate {
            name: self.name.clone(),
            args: self
                .args
                .iter()
                .map(|t| match t {
                    Term::Var(v) => binding[v.as_str()].to_string(),
                    Term::Const(c) => c.clone(),
                })
                .collect(),
        }
    }
}

impl fmt::Display for PredicateTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<String> = self.args.iter().map(ToString::to_string).collect();
        fmt_call(f, &self.name, &args)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    /// Accepted object type tags; a parameter written as `part|site` accepts either.
    pub types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSchema {
    pub name: String,
    pub params: Vec<Param>,
    pub doc: String,
    pub preconditions: Vec<PredicateTemplate>,
    pub add_effects: Vec<PredicateTemplate>,
    pub delete_effects: Vec<PredicateTemplate>,
}

impl ActionSchema {
    /// First declared add-effect; used as the goal condition of unit subtrees.
    pub fn primary_effect(&self) -> Option<&PredicateTemplate> {
        self.add_effects.first()
    }
}

/// Fully instantiated schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    pub action: GroundAction,
    pub preconditions: Vec<GroundPredicate>,
    pub add_effects: Vec<GroundPredicate>,
    pub delete_effects: Vec<GroundPredicate>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub id: String,
    /// Object name to its type tag (`hand`, `tool`, `part`, `site`).
    pub objects: BTreeMap<String, String>,
    pub properties: BTreeMap<String, usize>,
    pub constraints: BTreeMap<String, usize>,
    pub relations: BTreeMap<String, usize>,
    pub schemas: Vec<ActionSchema>,
}

impl DomainSpec {
    pub fn schema(&self, name: &str) -> Option<&ActionSchema> {
        self.schemas.iter().find(|s| s.name == name)
    }

    pub fn predicate_kind(&self, name: &str) -> Option<(PredicateKind, usize)> {
        if let Some(&a) = self.properties.get(name) {
            Some((PredicateKind::Property, a))
        } else if let Some(&a) = self.constraints.get(name) {
            Some((PredicateKind::Constraint, a))
        } else {
            self.relations.get(name).map(|&a| (PredicateKind::Relation, a))
        }
    }

    pub fn has_object(&self, name: &str) -> bool {
        self.objects.contains_key(name)
    }

    /// Checks a ground predicate's name, arity and objects.
    pub fn check_predicate(&self, p: &GroundPredicate) -> Result<PredicateKind, DomainError> {
        let (kind, arity) = self
            .predicate_kind(&p.name)
            .ok_or_else(|| DomainError::UnknownPredicate(p.name.clone()))?;
        if arity != p.args.len() {
            return Err(DomainError::ArityMismatch {
                symbol: p.name.clone(),
                expected: arity,
                found: p.args.len(),
            });
        }
        if let Some(o) = p.args.iter().find(|o| !self.has_object(o)) {
            return Err(DomainError::UnknownObject(o.clone()));
        }
        Ok(kind)
    }

    pub fn check_goal(&self, goal: &Goal) -> Result<(), DomainError> {
        if goal.conjuncts.is_empty() {
            return Err(DomainError::EmptyGoal);
        }
        goal.conjuncts
            .iter()
            .try_for_each(|c| self.check_predicate(c).map(drop))
    }

    pub fn ground_action(&self, action: &GroundAction) -> Result<Grounding, DomainError> {
        let schema = self
            .schema(&action.name)
            .ok_or_else(|| DomainError::UnknownAction(action.name.clone()))?;
        ground(self, schema, &action.args)
    }

    /// Objects whose type tag is accepted by `param`, in name order.
    pub fn objects_for(&self, param: &Param) -> Vec<&str> {
        self.objects
            .iter()
            .filter(|(_, ty)| param.types.iter().any(|t| t == *ty))
            .map(|(name, _)| name.as_str())
            .collect()
    }

    /// Every type-correct grounding of every schema, sorted by (name, args).
    pub fn all_ground_actions(&self) -> Vec<Grounding> {
        fn product(pools: &[Vec<&str>], prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
            match pools.split_first() {
                None => out.push(prefix.clone()),
                Some((pool, rest)) => {
                    for obj in pool {
                        prefix.push(obj.to_string());
                        product(rest, prefix, out);
                        prefix.pop();
                    }
                }
            }
        }
        let mut out = Vec::new();
        for schema in &self.schemas {
            let pools: Vec<Vec<&str>> = schema.params.iter().map(|p| self.objects_for(p)).collect();
            let mut arg_lists = Vec::new();
            product(&pools, &mut Vec::new(), &mut arg_lists);
            out.extend(arg_lists.iter().filter_map(|args| ground(self, schema, args).ok()));
        }
        out.sort_by(|a, b| a.action.cmp(&b.action));
        out
    }
}

/// Instantiates `schema` with `args`.
pub fn ground(domain: &DomainSpec, schema: &ActionSchema, args: &[String]) -> Result<Grounding, DomainError> {
    if args.len() != schema.params.len() {
        return Err(DomainError::ArityMismatch {
            symbol: schema.name.clone(),
            expected: schema.params.len(),
            found: args.len(),
        });
    }
    let mut binding = BTreeMap::new();
    for (param, arg) in schema.params.iter().zip(args) {
        let ty = domain
            .objects
            .get(arg)
            .ok_or_else(|| DomainError::UnknownObject(arg.clone()))?;
        if !param.types.iter().any(|t| t == ty) {
            return Err(DomainError::TypeMismatch {
                action: schema.name.clone(),
                object: arg.clone(),
                expected: param.types.join("|"),
                found: ty.clone(),
            });
        }
        binding.insert(param.name.as_str(), arg.as_str());
    }
    let inst = |ts: &[PredicateTemplate]| ts.iter().map(|t| t.instantiate(&binding)).collect();
    Ok(Grounding {
        action: GroundAction {
            name: schema.name.clone(),
            args: args.to_vec(),
        },
        preconditions: inst(&schema.preconditions),
        add_effects: inst(&schema.add_effects),
        delete_effects: inst(&schema.delete_effects),
    })
}

/// A set of ground facts plus the immutable constraint set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldState {
    pub facts: BTreeSet<GroundPredicate>,
    #[serde(default)]
    pub constraints: BTreeSet<GroundPredicate>,
}

impl WorldState {
    pub fn holds(&self, p: &GroundPredicate) -> bool {
        self.facts.contains(p) || self.constraints.contains(p)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }
}

/// Conjunction of ground predicates plus the natural-language description.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    pub conjuncts: Vec<GroundPredicate>,
    #[serde(default)]
    pub description: String,
}

impl Goal {
    pub fn new(conjuncts: Vec<GroundPredicate>, description: impl Into<String>) -> Self {
        Self {
            conjuncts,
            description: description.into(),
        }
    }

    pub fn single(p: GroundPredicate) -> Self {
        Self {
            conjuncts: vec![p],
            description: String::new(),
        }
    }

    /// Parses `pred(a, b) & pred(c)`; `&`, `;` and ` and ` separate conjuncts.
    pub fn parse(text: &str) -> Result<Self, DomainError> {
        let normalized = text.replace(" and ", "&").replace(';', "&");
        let conjuncts = normalized
            .split('&')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(GroundPredicate::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        if conjuncts.is_empty() {
            return Err(DomainError::EmptyGoal);
        }
        Ok(Self::new(conjuncts, ""))
    }

    pub fn conjunction_text(&self) -> String {
        self.conjuncts
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.conjunction_text())
    }
}

/// True iff every conjunct holds. An empty goal is a precondition violation.
pub fn goal_satisfied(state: &WorldState, goal: &Goal) -> Result<bool, DomainError> {
    if goal.conjuncts.is_empty() {
        return Err(DomainError::EmptyGoal);
    }
    Ok(goal.conjuncts.iter().all(|c| state.holds(c)))
}

// ---------------------------------------------------------------------------
// Domain document

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainDoc {
    id: String,
    #[serde(default)]
    objects: BTreeMap<String, String>,
    #[serde(default)]
    properties: BTreeMap<String, usize>,
    #[serde(default)]
    constraints: BTreeMap<String, usize>,
    #[serde(default)]
    relations: BTreeMap<String, usize>,
    #[serde(default)]
    actions: BTreeMap<String, ActionDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionDoc {
    params: Vec<ParamDoc>,
    #[serde(default)]
    doc: String,
    #[serde(default)]
    preconditions: Vec<String>,
    #[serde(default)]
    add: Vec<String>,
    #[serde(default)]
    delete: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDoc {
    name: String,
    #[serde(rename = "type")]
    ty: String,
}

const OBJECT_TYPES: [&str; 4] = ["hand", "tool", "part", "site"];

/// Parses and validates a domain document.
pub fn load_domain(text: &str) -> Result<DomainSpec, DomainError> {
    let doc: DomainDoc = serde_json::from_str(text).map_err(|e| DomainError::Schema {
        path: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let schema_err = |path: String, reason: String| DomainError::Schema { path, reason };

    for (name, ty) in &doc.objects {
        if !OBJECT_TYPES.contains(&ty.as_str()) {
            return Err(schema_err(
                format!("objects.{name}"),
                format!("unknown type tag `{ty}`"),
            ));
        }
    }
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (section, names) in [
        ("properties", &doc.properties),
        ("constraints", &doc.constraints),
        ("relations", &doc.relations),
    ] {
        for name in names.keys() {
            if let Some(other) = seen.insert(name, section) {
                return Err(schema_err(
                    format!("{section}.{name}"),
                    format!("name also declared in {other}"),
                ));
            }
        }
    }

    let mut spec = DomainSpec {
        id: doc.id,
        objects: doc.objects,
        properties: doc.properties,
        constraints: doc.constraints,
        relations: doc.relations,
        schemas: Vec::new(),
    };

    for (name, action) in doc.actions {
        let path = format!("actions.{name}");
        let mut params = Vec::new();
        for p in &action.params {
            let pname = p.name.trim_start_matches('?').to_string();
            let types: Vec<String> = p.ty.split('|').map(|t| t.trim().to_string()).collect();
            if let Some(t) = types.iter().find(|t| !OBJECT_TYPES.contains(&t.as_str())) {
                return Err(schema_err(
                    format!("{path}.params.{pname}"),
                    format!("unknown type tag `{t}`"),
                ));
            }
            params.push(Param { name: pname, types });
        }
        let parse_list = |key: &str, list: &[String]| -> Result<Vec<PredicateTemplate>, DomainError> {
            list.iter()
                .enumerate()
                .map(|(i, t)| {
                    let tpl = PredicateTemplate::parse(t).map_err(|e| {
                        schema_err(format!("{path}.{key}[{i}]"), e.to_string())
                    })?;
                    let (_, arity) = spec.predicate_kind(&tpl.name).ok_or_else(|| {
                        schema_err(
                            format!("{path}.{key}[{i}]"),
                            format!("unknown predicate `{}`", tpl.name),
                        )
                    })?;
                    if arity != tpl.args.len() {
                        return Err(schema_err(
                            format!("{path}.{key}[{i}]"),
                            format!("`{}` expects {arity} argument(s)", tpl.name),
                        ));
                    }
                    for term in &tpl.args {
                        match term {
                            Term::Var(v) if !params.iter().any(|p| &p.name == v) => {
                                return Err(schema_err(
                                    format!("{path}.{key}[{i}]"),
                                    format!("variable `?{v}` is not a parameter"),
                                ))
                            }
                            Term::Const(c) if !spec.has_object(c) => {
                                return Err(schema_err(
                                    format!("{path}.{key}[{i}]"),
                                    format!("unknown object `{c}`"),
                                ))
                            }
                            _ => {}
                        }
                    }
                    Ok(tpl)
                })
                .collect()
        };
        let preconditions = parse_list("preconditions", &action.preconditions)?;
        let add_effects = parse_list("add", &action.add)?;
        let delete_effects = parse_list("delete", &action.delete)?;
        if let Some(c) = add_effects
            .iter()
            .chain(&delete_effects)
            .find(|t| spec.constraints.contains_key(&t.name))
        {
            return Err(DomainError::ConstraintInEffect {
                action: name,
                predicate: c.name.clone(),
            });
        }
        spec.schemas.push(ActionSchema {
            name,
            params,
            doc: action.doc,
            preconditions,
            add_effects,
            delete_effects,
        });
    }
    Ok(spec)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    state: WorldState,
    goals: Vec<Goal>,
}

/// A built-in domain with its canonical initial state and benchmark subgoals.
#[derive(Debug, Clone)]
pub struct BuiltinDomain {
    pub domain: DomainSpec,
    pub initial: WorldState,
    pub goals: Vec<Goal>,
    /// The embedded domain document.
    pub document: &'static str,
}

pub const BUILTIN_DOMAINS: [&str; 3] = ["gearset", "chair", "lamp"];

pub fn builtin_domain(id: &str) -> Result<BuiltinDomain, DomainError> {
    let (document, scene) = data::domain_documents(id).ok_or_else(|| DomainError::UnknownDomain(id.to_string()))?;
    let domain = load_domain(document)?;
    let scene: SceneDoc = serde_json::from_str(scene).map_err(|e| DomainError::Schema {
        path: format!("{id} scene"),
        reason: e.to_string(),
    })?;
    Ok(BuiltinDomain {
        domain,
        initial: scene.state,
        goals: scene.goals,
        document,
    })
}

// ---------------------------------------------------------------------------
// Prompt renderings

/// PDDL-like rendering of the domain with one explanation line per action.
pub fn render_pddl_like(domain: &DomainSpec) -> String {
    let mut out = format!(";; domain: {}\n", domain.id);
    if !domain.objects.is_empty() {
        let mut by_type: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (name, ty) in &domain.objects {
            by_type.entry(ty).or_default().push(name);
        }
        out.push_str("(:objects\n");
        for (ty, names) in by_type {
            out.push_str(&format!("  {} - {}\n", names.join(" "), ty));
        }
        out.push_str(")\n");
    }
    let sig = |name: &str, arity: usize| {
        let vars: Vec<String> = (1..=arity).map(|i| format!(" ?x{i}")).collect();
        format!("({}{})", name, vars.concat())
    };
    for (label, set, note) in [
        ("properties", &domain.properties, ""),
        ("constraints", &domain.constraints, " ; never changed by actions"),
        ("relations", &domain.relations, ""),
    ] {
        if set.is_empty() {
            continue;
        }
        let sigs: Vec<String> = set.iter().map(|(n, a)| sig(n, *a)).collect();
        out.push_str(&format!("(:{label} {}){note}\n", sigs.join(" ")));
    }
    let lisp = |t: &PredicateTemplate| {
        let args: Vec<String> = t.args.iter().map(|a| format!(" {a}")).collect();
        format!("({}{})", t.name, args.concat())
    };
    let conj = |ts: &[String]| match ts.len() {
        0 => "()".to_string(),
        1 => ts[0].clone(),
        _ => format!("(and {})", ts.join(" ")),
    };
    for schema in &domain.schemas {
        out.push('\n');
        out.push_str(&format!("(:action {}\n", schema.name));
        if !schema.doc.is_empty() {
            out.push_str(&format!("  ; {}\n", schema.doc));
        }
        let params: Vec<String> = schema
            .params
            .iter()
            .map(|p| format!("?{} - {}", p.name, p.types.join("|")))
            .collect();
        out.push_str(&format!("  :parameters ({})\n", params.join(" ")));
        let pre: Vec<String> = schema.preconditions.iter().map(lisp).collect();
        out.push_str(&format!("  :precondition {}\n", conj(&pre)));
        let mut eff: Vec<String> = schema.add_effects.iter().map(lisp).collect();
        eff.extend(schema.delete_effects.iter().map(|t| format!("(not {})", lisp(t))));
        out.push_str(&format!("  :effect {})\n", conj(&eff)));
    }
    out
}

fn triple_line(p: &GroundPredicate) -> String {
    let parts: Vec<&str> = match p.args.as_slice() {
        [] => vec![p.name.as_str()],
        [s] => vec![s.as_str(), p.name.as_str()],
        [s, rest @ ..] => {
            let mut v = vec![s.as_str(), p.name.as_str()];
            v.extend(rest.iter().map(String::as_str));
            v
        }
    };
    format!("({})", parts.join(", "))
}

const CONSTRAINT_MARKER: &str = "# constraints";

/// RDF-like rendering: one `(subject, predicate, object)` or
/// `(subject, property)` line per fact, sorted. Constraints follow under a
/// `# constraints` marker line.
pub fn render_state_triples(state: &WorldState) -> String {
    let sorted = |set: &BTreeSet<GroundPredicate>| {
        let mut lines: Vec<String> = set.iter().map(triple_line).collect();
        lines.sort();
        lines
    };
    let mut out = String::new();
    for line in sorted(&state.facts) {
        out.push_str(&line);
        out.push('\n');
    }
    if !state.constraints.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(CONSTRAINT_MARKER);
        out.push('\n');
        for line in sorted(&state.constraints) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`render_state_triples`].
pub fn parse_state_triples(text: &str) -> Result<WorldState, DomainError> {
    let mut state = WorldState::default();
    let mut in_constraints = false;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line == CONSTRAINT_MARKER {
            in_constraints = true;
            continue;
        }
        let inner = line
            .strip_prefix('(')
            .and_then(|l| l.strip_suffix(')'))
            .ok_or_else(|| DomainError::Syntax {
                text: line.to_string(),
                reason: "expected a parenthesized triple".into(),
            })?;
        let parts: Vec<String> = inner.split(',').map(|p| p.trim().to_string()).collect();
        let pred = match parts.as_slice() {
            [name] => GroundPredicate::new(name.clone(), Vec::<String>::new()),
            [s, name, rest @ ..] => {
                let mut args = vec![s.clone()];
                args.extend(rest.iter().cloned());
                GroundPredicate::new(name.clone(), args)
            }
            [] => unreachable!("split yields at least one part"),
        };
        if in_constraints {
            state.constraints.insert(pred);
        } else {
            state.facts.insert(pred);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gearset() -> BuiltinDomain {
        builtin_domain("gearset").unwrap()
    }

    fn p(s: &str) -> GroundPredicate {
        s.parse().unwrap()
    }

    #[test]
    fn normalizes_model_symbols() {
        assert_eq!(normalize_symbol("isInsertedTo"), "is_inserted_to");
        assert_eq!(normalize_symbol("isEmpty"), "is_empty");
        assert_eq!(normalize_symbol("Hold"), "hold");
        assert_eq!(normalize_symbol("left hand"), "left_hand");
        assert_eq!(normalize_symbol("gearbase hole1"), "gearbase_hole1");
        assert_eq!(normalize_symbol("put_down"), "put_down");
        assert_eq!(normalize_symbol("PickUp"), "pick_up");
    }

    #[test]
    fn gearset_document_loads() {
        let g = gearset();
        assert_eq!(g.domain.schemas.len(), 6);
        for o in [
            "shaft1", "shaft2", "shaft3", "gear1", "gear2", "gear3", "gearbase_hole1",
            "gearbase_hole2", "gearbase_hole3", "left_hand", "parallelgripper", "clampgripper",
        ] {
            assert!(g.domain.has_object(o), "{o}");
        }
        let names: Vec<&str> = g.domain.schemas.iter().map(|s| s.name.as_str()).collect();
        for a in ["insert", "screw", "place", "put_down", "change_tool", "pick_up"] {
            assert!(names.contains(&a), "{a}");
        }
    }

    #[test]
    fn constraint_in_effect_is_rejected() {
        let doc = r#"{"id":"bad","objects":{"t":"tool","p":"part"},
            "constraints":{"can_manipulate":2},
            "actions":{"grab":{"params":[{"name":"t","type":"tool"},{"name":"p","type":"part"}],
                "add":["can_manipulate(?t, ?p)"]}}}"#;
        assert!(matches!(
            load_domain(doc),
            Err(DomainError::ConstraintInEffect { .. })
        ));
    }

    #[test]
    fn empty_objects_is_valid_but_vacuous() {
        let spec = load_domain(r#"{"id":"empty","objects":{}}"#).unwrap();
        assert!(spec.objects.is_empty());
        assert!(spec.schemas.is_empty());
        assert!(spec.all_ground_actions().is_empty());
    }

    #[test]
    fn schema_errors_carry_path() {
        let doc = r#"{"id":"bad","objects":{"t":"tool"},"properties":{"is_empty":1},
            "actions":{"drop":{"params":[{"name":"t","type":"tool"}],"preconditions":["is_full(?t)"]}}}"#;
        match load_domain(doc) {
            Err(DomainError::Schema { path, .. }) => assert_eq!(path, "actions.drop.preconditions[0]"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            load_domain(r#"{"id":"x","bogus":1}"#),
            Err(DomainError::Schema { .. })
        ));
    }

    #[test]
    fn builtin_scenes() {
        let g = gearset();
        assert!(g.initial.holds(&p("hold(left_hand, parallelgripper)")));
        assert!(g.initial.holds(&p("hold(parallelgripper, shaft3)")));
        assert!(g
            .goals
            .iter()
            .any(|goal| goal.conjuncts == vec![p("is_inserted_to(gear1, shaft1)")]));
        let lamp = builtin_domain("lamp").unwrap();
        assert!(lamp.domain.has_object("lamp_base"));
        assert!(lamp.domain.has_object("lamp_bulb"));
        let chair = builtin_domain("chair").unwrap();
        assert!(chair.domain.has_object("chair_seat"));
        assert!(matches!(
            builtin_domain("kitchen"),
            Err(DomainError::UnknownDomain(_))
        ));
        for id in BUILTIN_DOMAINS {
            let b = builtin_domain(id).unwrap();
            for f in b.initial.facts.iter() {
                assert_ne!(b.domain.check_predicate(f).unwrap(), PredicateKind::Constraint, "{f}");
            }
            for c in b.initial.constraints.iter() {
                assert_eq!(b.domain.check_predicate(c).unwrap(), PredicateKind::Constraint, "{c}");
            }
            for goal in &b.goals {
                b.domain.check_goal(goal).unwrap();
            }
        }
    }

    #[test]
    fn ground_pick_up() {
        let g = gearset();
        let schema = g.domain.schema("pick_up").unwrap();
        let args: Vec<String> = ["left_hand", "clampgripper", "gear1"].map(String::from).to_vec();
        let gr = ground(&g.domain, schema, &args).unwrap();
        assert_eq!(gr.preconditions[0], p("hold(left_hand, clampgripper)"));
        assert_eq!(gr.preconditions[1], p("is_empty(clampgripper)"));
        assert_eq!(gr.add_effects[0], p("hold(clampgripper, gear1)"));
        assert!(matches!(
            ground(&g.domain, schema, &args[..2]),
            Err(DomainError::ArityMismatch { .. })
        ));
        let wrong: Vec<String> = ["left_hand", "gear1", "clampgripper"].map(String::from).to_vec();
        assert!(matches!(
            ground(&g.domain, schema, &wrong),
            Err(DomainError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn ground_change_tool() {
        let g = gearset();
        let gr = g
            .domain
            .ground_action(&"change_tool(left_hand, parallelgripper, clampgripper)".parse().unwrap())
            .unwrap();
        assert_eq!(gr.delete_effects, vec![p("hold(left_hand, parallelgripper)")]);
        assert_eq!(gr.add_effects, vec![p("hold(left_hand, clampgripper)")]);
    }

    #[test]
    fn effects_never_touch_constraints() {
        for id in BUILTIN_DOMAINS {
            let b = builtin_domain(id).unwrap();
            for gr in b.domain.all_ground_actions() {
                for e in gr.add_effects.iter().chain(&gr.delete_effects) {
                    assert!(!b.domain.constraints.contains_key(&e.name));
                }
            }
        }
    }

    #[test]
    fn goal_satisfaction() {
        let g = gearset();
        let goal = Goal::single(p("is_inserted_to(gear1, shaft1)"));
        assert!(!goal_satisfied(&g.initial, &goal).unwrap());
        let mut done = g.initial.clone();
        done.facts.insert(p("is_inserted_to(gear1, shaft1)"));
        assert!(goal_satisfied(&done, &goal).unwrap());
        assert_eq!(
            goal_satisfied(&g.initial, &Goal::default()),
            Err(DomainError::EmptyGoal)
        );
    }

    #[test]
    fn goal_parse() {
        let g = Goal::parse("hold(left_hand, clampgripper) & is_empty(parallelgripper)").unwrap();
        assert_eq!(g.conjuncts.len(), 2);
        assert_eq!(g.to_string(), "hold(left_hand, clampgripper) & is_empty(parallelgripper)");
        assert!(Goal::parse("  ").is_err());
    }

    #[test]
    fn triples() {
        let g = gearset();
        let text = render_state_triples(&g.initial);
        assert!(text.lines().any(|l| l == "(left_hand, hold, parallelgripper)"));
        assert!(text.lines().any(|l| l == "(clampgripper, is_empty)"));
        assert_eq!(parse_state_triples(&text).unwrap(), g.initial);
        assert_eq!(render_state_triples(&WorldState::default()), "");
    }

    #[test]
    fn pddl_rendering() {
        let g = gearset();
        let text = render_pddl_like(&g.domain);
        assert_eq!(text, render_pddl_like(&g.domain));
        assert_eq!(text.matches("(:action ").count(), 6);
        assert_eq!(text.matches(":precondition").count(), 6);
        assert_eq!(text.matches(":effect").count(), 6);
        let empty = load_domain(r#"{"id":"empty"}"#).unwrap();
        assert_eq!(render_pddl_like(&empty), ";; domain: empty\n");
    }
}
