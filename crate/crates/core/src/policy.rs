//! Read and write policies.
//!
//! A policy is a content transformer bound to a scope (global, one user, one
//! agent, or a time window) and a direction (read, private write, shared
//! write). The most specific matching binding wins:
//! user > agent > time window > global. With no match the identity
//! transformer applies.
//!
//! Transformers only ever rewrite fragment text. They never add, drop or
//! reorder fragments, and provenance is always taken from the interaction
//! trace, never from transformer output.

use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::Tick;
use crate::memory::{FragmentId, Tier};
use crate::prompts;
use crate::remote::{ChatClient, RemoteError};
use crate::retrieval::RankedFragment;

/// Upper bound on redaction passes before a rule set is declared divergent.
const MAX_REDACTION_PASSES: usize = 8;

/// Stand-in for the user id in shared-tier writes.
pub const REDACTED_USER: &str = "***";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("two bindings match at the same specificity ({0})")]
    AmbiguousBinding(String),
    #[error("duplicate binding for scope {scope} / {direction:?}")]
    DuplicateBinding { scope: String, direction: Direction },
    #[error("time window starts at {start} after it ends at {end}")]
    InvertedWindow { start: Tick, end: Tick },
    #[error("invalid redaction pattern {pattern:?}: {message}")]
    InvalidPattern { pattern: String, message: String },
    #[error("redaction rules do not reach a fixpoint")]
    RedactorDiverges,
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("encoder produced no key-value fragment")]
    EmptyEncoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Read,
    WritePrivate,
    WriteShared,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum PolicyScope {
    Global,
    TimeWindow { start: Tick, end: Tick },
    Agent { agent: String },
    User { user: String },
}

impl PolicyScope {
    /// Global=0 < TimeWindow=1 < Agent=2 < User=3.
    pub fn rank(&self) -> u8 {
        match self {
            PolicyScope::Global => 0,
            PolicyScope::TimeWindow { .. } => 1,
            PolicyScope::Agent { .. } => 2,
            PolicyScope::User { .. } => 3,
        }
    }

    pub fn matches(&self, user: &str, agent: &str, t: Tick) -> bool {
        match self {
            PolicyScope::Global => true,
            PolicyScope::TimeWindow { start, end } => *start <= t && t <= *end,
            PolicyScope::Agent { agent: a } => a == agent,
            PolicyScope::User { user: u } => u == user,
        }
    }

    fn label(&self) -> String {
        match self {
            PolicyScope::Global => "global".into(),
            PolicyScope::TimeWindow { start, end } => format!("time[{}..={}]", start.0, end.0),
            PolicyScope::Agent { agent } => format!("agent:{agent}"),
            PolicyScope::User { user } => format!("user:{user}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "match", rename_all = "snake_case")]
pub enum RedactRule {
    Regex { pattern: String, replacement: String },
    Literal { text: String, replacement: String },
    /// Replaces every occurrence of the interacting user's id.
    Creator { replacement: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformerSpec {
    Identity,
    Redactor { rules: Vec<RedactRule> },
    PromptedRemote { system_prompt: String, endpoint: String },
}

impl TransformerSpec {
    pub fn redact_creator(replacement: impl Into<String>) -> Self {
        TransformerSpec::Redactor {
            rules: vec![RedactRule::Creator { replacement: replacement.into() }],
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if let TransformerSpec::Redactor { rules } = self {
            for rule in rules {
                if let RedactRule::Regex { pattern, .. } = rule {
                    Regex::new(pattern).map_err(|e| PolicyError::InvalidPattern {
                        pattern: pattern.clone(),
                        message: e.to_string(),
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Rewrites one piece of text. `user` is the user on whose behalf the
    /// interaction happened.
    pub fn transform(&self, text: &str, user: &str) -> Result<String, PolicyError> {
        match self {
            TransformerSpec::Identity => Ok(text.to_string()),
            TransformerSpec::Redactor { rules } => redact(rules, text, user),
            TransformerSpec::PromptedRemote { system_prompt, endpoint } => {
                Ok(ChatClient::new(endpoint.as_str()).complete(system_prompt, text)?)
            }
        }
    }
}

enum CompiledRule<'a> {
    Regex(Regex, &'a str),
    Literal(&'a str, &'a str),
}

/// Applies the rules in order, repeating whole passes until the text stops
/// changing, so the result is a fixpoint and redaction is idempotent.
fn redact(rules: &[RedactRule], text: &str, user: &str) -> Result<String, PolicyError> {
    let compiled = rules
        .iter()
        .map(|rule| match rule {
            RedactRule::Regex { pattern, replacement } => Regex::new(pattern)
                .map(|re| CompiledRule::Regex(re, replacement.as_str()))
                .map_err(|e| PolicyError::InvalidPattern {
                    pattern: pattern.clone(),
                    message: e.to_string(),
                }),
            RedactRule::Literal { text, replacement } => {
                Ok(CompiledRule::Literal(text.as_str(), replacement.as_str()))
            }
            RedactRule::Creator { replacement } => Ok(CompiledRule::Literal(user, replacement)),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut current = text.to_string();
    for _ in 0..MAX_REDACTION_PASSES {
        let mut next = current.clone();
        for rule in &compiled {
            next = match rule {
                CompiledRule::Regex(re, rep) => re.replace_all(&next, *rep).into_owned(),
                CompiledRule::Literal(needle, rep) if !needle.is_empty() => {
                    next.replace(needle, rep)
                }
                CompiledRule::Literal(..) => next,
            };
        }
        if next == current {
            return Ok(current);
        }
        current = next;
    }
    Err(PolicyError::RedactorDiverges)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyBinding {
    pub scope: PolicyScope,
    pub direction: Direction,
    pub transformer: TransformerSpec,
}

/// Validated binding set: at most one binding per (scope, direction).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PolicyBinding>", into = "Vec<PolicyBinding>")]
pub struct PolicySet {
    bindings: Vec<PolicyBinding>,
}

impl TryFrom<Vec<PolicyBinding>> for PolicySet {
    type Error = PolicyError;

    fn try_from(bindings: Vec<PolicyBinding>) -> Result<Self, Self::Error> {
        Self::new(bindings)
    }
}

impl From<PolicySet> for Vec<PolicyBinding> {
    fn from(set: PolicySet) -> Self {
        set.bindings
    }
}

impl PolicySet {
    pub fn new(bindings: Vec<PolicyBinding>) -> Result<Self, PolicyError> {
        let mut seen = BTreeSet::new();
        for b in &bindings {
            if let PolicyScope::TimeWindow { start, end } = b.scope {
                if start > end {
                    return Err(PolicyError::InvertedWindow { start, end });
                }
            }
            b.transformer.validate()?;
            if !seen.insert((b.scope.clone(), b.direction)) {
                return Err(PolicyError::DuplicateBinding {
                    scope: b.scope.label(),
                    direction: b.direction,
                });
            }
        }
        Ok(Self { bindings })
    }

    /// Verbatim reads; writes store the trace as-is privately and strip the
    /// user's id from the shared copy.
    pub fn default_instantiation() -> Self {
        Self::new(vec![
            PolicyBinding {
                scope: PolicyScope::Global,
                direction: Direction::Read,
                transformer: TransformerSpec::Identity,
            },
            PolicyBinding {
                scope: PolicyScope::Global,
                direction: Direction::WritePrivate,
                transformer: TransformerSpec::Identity,
            },
            PolicyBinding {
                scope: PolicyScope::Global,
                direction: Direction::WriteShared,
                transformer: TransformerSpec::redact_creator(REDACTED_USER),
            },
        ])
        .expect("default bindings are valid")
    }

    /// Write transformers prompted with the default memory prompts.
    pub fn prompted_instantiation(endpoint: &str) -> Self {
        let prompted = |prompt: &str| TransformerSpec::PromptedRemote {
            system_prompt: prompt.to_string(),
            endpoint: endpoint.to_string(),
        };
        Self::new(vec![
            PolicyBinding {
                scope: PolicyScope::Global,
                direction: Direction::Read,
                transformer: TransformerSpec::Identity,
            },
            PolicyBinding {
                scope: PolicyScope::Global,
                direction: Direction::WritePrivate,
                transformer: prompted(prompts::PRIVATE_MEMORY_PROMPT),
            },
            PolicyBinding {
                scope: PolicyScope::Global,
                direction: Direction::WriteShared,
                transformer: prompted(prompts::SHARED_MEMORY_PROMPT),
            },
        ])
        .expect("prompted bindings are valid")
    }

    pub fn bindings(&self) -> &[PolicyBinding] {
        &self.bindings
    }

    pub fn resolve(
        &self,
        user: &str,
        agent: &str,
        t: Tick,
        direction: Direction,
    ) -> Result<TransformerSpec, PolicyError> {
        let mut best: Option<&PolicyBinding> = None;
        let mut tied = false;
        for b in self.bindings.iter().filter(|b| b.direction == direction) {
            if !b.scope.matches(user, agent, t) {
                continue;
            }
            match best {
                Some(cur) if cur.scope.rank() > b.scope.rank() => {}
                Some(cur) if cur.scope.rank() == b.scope.rank() => tied = true,
                _ => {
                    best = Some(b);
                    tied = false;
                }
            }
        }
        if tied {
            let scope = best.expect("tie implies a match").scope.label();
            return Err(PolicyError::AmbiguousBinding(scope));
        }
        Ok(best.map(|b| b.transformer.clone()).unwrap_or(TransformerSpec::Identity))
    }
}

/// A retrieved fragment with its content, before the read policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub ranked: RankedFragment,
    pub key: String,
    pub value: String,
}

/// A fragment as presented to an agent after the read policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentedFragment {
    pub id: FragmentId,
    pub tier: Tier,
    pub similarity: f64,
    pub key: String,
    pub value: String,
}

pub fn apply_read(
    policy: &TransformerSpec,
    view: &[ViewEntry],
    user: &str,
) -> Result<Vec<PresentedFragment>, PolicyError> {
    view.iter()
        .map(|e| {
            Ok(PresentedFragment {
                id: e.ranked.id.clone(),
                tier: e.ranked.tier,
                similarity: e.ranked.similarity,
                key: policy.transform(&e.key, user)?,
                value: policy.transform(&e.value, user)?,
            })
        })
        .collect()
}

/// One agent exchange on behalf of a user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionTrace {
    pub user: String,
    pub agent: String,
    pub timestamp: Tick,
    pub subquery: String,
    pub response: String,
    /// Distinct resources invoked during the exchange, in first-use order.
    #[serde(default)]
    pub resources: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    #[default]
    Shared,
    /// Every write lands in the private tier.
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFragment {
    pub tier: Tier,
    pub key: String,
    pub value: String,
}

fn render_trace(trace: &InteractionTrace) -> String {
    format!(
        "User: {}\nAgent: {}\nSubquery: {}\nResponse: {}",
        trace.user, trace.agent, trace.subquery, trace.response
    )
}

/// Parses remote encoder output: a JSON array of `{"key","value"}` objects, a
/// JSON object mapping keys to values, or `key: value` lines.
fn parse_key_values(output: &str) -> Vec<(String, String)> {
    #[derive(Deserialize)]
    struct Kv {
        key: String,
        value: String,
    }
    let trimmed = output.trim();
    if let Ok(list) = serde_json::from_str::<Vec<Kv>>(trimmed) {
        return list.into_iter().map(|kv| (kv.key, kv.value)).collect();
    }
    if let Ok(map) = serde_json::from_str::<std::collections::BTreeMap<String, String>>(trimmed) {
        return map.into_iter().collect();
    }
    trimmed
        .lines()
        .filter_map(|line| {
            let line = line.trim().trim_start_matches("- ").trim();
            let (k, v) = line.split_once(':')?;
            let (k, v) = (k.trim().trim_matches('"'), v.trim().trim_matches('"'));
            (!k.is_empty() && !v.is_empty()).then(|| (k.to_string(), v.to_string()))
        })
        .collect()
}

/// Maps a trace to candidate key-value pairs for one tier.
///
/// Identity and redactor transformers emit exactly one pair
/// (subquery, response), rewritten by the redactor. Prompted transformers ask
/// the remote model to extract pairs.
pub fn encode(
    spec: &TransformerSpec,
    trace: &InteractionTrace,
) -> Result<Vec<(String, String)>, PolicyError> {
    match spec {
        TransformerSpec::Identity | TransformerSpec::Redactor { .. } => Ok(vec![(
            spec.transform(&trace.subquery, &trace.user)?,
            spec.transform(&trace.response, &trace.user)?,
        )]),
        TransformerSpec::PromptedRemote { system_prompt, endpoint } => {
            let output =
                ChatClient::new(endpoint.as_str()).complete(system_prompt, &render_trace(trace))?;
            let pairs = parse_key_values(&output);
            if pairs.is_empty() {
                return Err(PolicyError::EmptyEncoding);
            }
            Ok(pairs)
        }
    }
}

/// Candidate fragments for both tiers. All transformers run before anything
/// is returned, so a failure in either tier yields no writes at all.
pub fn plan_writes(
    policies: &PolicySet,
    trace: &InteractionTrace,
    mode: MemoryMode,
) -> Result<Vec<CandidateFragment>, PolicyError> {
    let mut out = Vec::new();
    for (direction, tier) in
        [(Direction::WritePrivate, Tier::Private), (Direction::WriteShared, Tier::Shared)]
    {
        let spec = policies.resolve(&trace.user, &trace.agent, trace.timestamp, direction)?;
        let tier = match mode {
            MemoryMode::Shared => tier,
            MemoryMode::Isolated => Tier::Private,
        };
        out.extend(
            encode(&spec, trace)?
                .into_iter()
                .map(|(key, value)| CandidateFragment { tier, key, value }),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::IndexedRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binding(scope: PolicyScope, direction: Direction, tag: &str) -> PolicyBinding {
        PolicyBinding {
            scope,
            direction,
            transformer: TransformerSpec::Redactor {
                rules: vec![RedactRule::Literal { text: tag.into(), replacement: tag.into() }],
            },
        }
    }

    fn tag_of(spec: &TransformerSpec) -> Option<String> {
        match spec {
            TransformerSpec::Redactor { rules } => match &rules[0] {
                RedactRule::Literal { text, .. } => Some(text.clone()),
                _ => None,
            },
            _ => None,
        }
    }

    #[test]
    fn global_binding_applies_everywhere() {
        let set =
            PolicySet::new(vec![binding(PolicyScope::Global, Direction::Read, "g")]).unwrap();
        for (u, a, t) in [("u1", "a1", 0), ("u9", "a3", 99)] {
            let spec = set.resolve(u, a, Tick(t), Direction::Read).unwrap();
            assert_eq!(tag_of(&spec).as_deref(), Some("g"));
        }
        // unbound direction falls back to identity
        assert_eq!(
            set.resolve("u1", "a1", Tick(0), Direction::WriteShared).unwrap(),
            TransformerSpec::Identity
        );
    }

    #[test]
    fn user_binding_beats_global() {
        let set = PolicySet::new(vec![
            binding(PolicyScope::Global, Direction::Read, "g"),
            binding(PolicyScope::User { user: "u1".into() }, Direction::Read, "u"),
            binding(PolicyScope::Agent { agent: "a1".into() }, Direction::Read, "a"),
        ])
        .unwrap();
        let tag = |u: &str, a: &str| tag_of(&set.resolve(u, a, Tick(0), Direction::Read).unwrap());
        assert_eq!(tag("u1", "a1").as_deref(), Some("u"));
        assert_eq!(tag("u2", "a1").as_deref(), Some("a"));
        assert_eq!(tag("u2", "a2").as_deref(), Some("g"));
    }

    #[test]
    fn overlapping_windows_are_ambiguous() {
        let set = PolicySet::new(vec![
            binding(PolicyScope::TimeWindow { start: Tick(0), end: Tick(10) }, Direction::Read, "x"),
            binding(PolicyScope::TimeWindow { start: Tick(5), end: Tick(20) }, Direction::Read, "y"),
        ])
        .unwrap();
        assert_eq!(tag_of(&set.resolve("u", "a", Tick(2), Direction::Read).unwrap()).as_deref(), Some("x"));
        assert!(matches!(
            set.resolve("u", "a", Tick(7), Direction::Read),
            Err(PolicyError::AmbiguousBinding(_))
        ));
    }

    #[test]
    fn construction_errors() {
        let dup = PolicySet::new(vec![
            binding(PolicyScope::Global, Direction::Read, "a"),
            binding(PolicyScope::Global, Direction::Read, "b"),
        ]);
        assert!(matches!(dup, Err(PolicyError::DuplicateBinding { .. })));
        let inverted = PolicySet::new(vec![binding(
            PolicyScope::TimeWindow { start: Tick(5), end: Tick(1) },
            Direction::Read,
            "a",
        )]);
        assert!(matches!(inverted, Err(PolicyError::InvertedWindow { .. })));
        let bad_regex = PolicySet::new(vec![PolicyBinding {
            scope: PolicyScope::Global,
            direction: Direction::Read,
            transformer: TransformerSpec::Redactor {
                rules: vec![RedactRule::Regex { pattern: "(".into(), replacement: "".into() }],
            },
        }]);
        assert!(matches!(bad_regex, Err(PolicyError::InvalidPattern { .. })));
    }

    // Brute-force resolver: score every matching binding, keep the max rank,
    // fail if the max is shared.
    fn oracle_resolve(
        bindings: &[PolicyBinding],
        u: &str,
        a: &str,
        t: Tick,
        d: Direction,
    ) -> Result<Option<String>, ()> {
        let matching: Vec<&PolicyBinding> = bindings
            .iter()
            .filter(|b| b.direction == d && b.scope.matches(u, a, t))
            .collect();
        let Some(max) = matching.iter().map(|b| b.scope.rank()).max() else {
            return Ok(None);
        };
        let top: Vec<_> = matching.iter().filter(|b| b.scope.rank() == max).collect();
        if top.len() > 1 {
            return Err(());
        }
        Ok(tag_of(&top[0].transformer))
    }

    #[test]
    fn resolver_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let users = ["u1", "u2", "u3"];
        let agents = ["a1", "a2", "a3"];
        let dirs = [Direction::Read, Direction::WritePrivate, Direction::WriteShared];
        for case in 0..500 {
            let mut bindings = Vec::new();
            let mut seen = BTreeSet::new();
            for i in 0..rng.random_range(0..8) {
                let scope = match rng.random_range(0..4) {
                    0 => PolicyScope::Global,
                    1 => {
                        let s = rng.random_range(0..20);
                        PolicyScope::TimeWindow { start: Tick(s), end: Tick(s + rng.random_range(0..10)) }
                    }
                    2 => PolicyScope::Agent { agent: agents.choose(&mut rng).unwrap().to_string() },
                    _ => PolicyScope::User { user: users.choose(&mut rng).unwrap().to_string() },
                };
                let d = *dirs.choose(&mut rng).unwrap();
                if seen.insert((scope.clone(), d)) {
                    bindings.push(binding(scope, d, &format!("b{case}_{i}")));
                }
            }
            let set = PolicySet::new(bindings.clone()).unwrap();
            for _ in 0..10 {
                let (u, a) = (*users.choose(&mut rng).unwrap(), *agents.choose(&mut rng).unwrap());
                let t = Tick(rng.random_range(0..30));
                let d = *dirs.choose(&mut rng).unwrap();
                let got = set.resolve(u, a, t, d);
                match oracle_resolve(&bindings, u, a, t, d) {
                    Err(()) => assert!(matches!(got, Err(PolicyError::AmbiguousBinding(_)))),
                    Ok(expected) => {
                        let got = got.unwrap();
                        assert_eq!(tag_of(&got), expected);
                        if expected.is_none() {
                            assert_eq!(got, TransformerSpec::Identity);
                        }
                    }
                }
            }
        }
    }

    fn entry(id: &str, key: &str, value: &str) -> ViewEntry {
        ViewEntry {
            ranked: RankedFragment {
                id: FragmentId::new(id),
                similarity: 0.5,
                tier: Tier::Shared,
                created_at: Tick(1),
            },
            key: key.into(),
            value: value.into(),
        }
    }

    #[test]
    fn identity_read_is_verbatim() {
        let view = vec![entry("1", "k1", "v1"), entry("2", "k2", "v2")];
        let out = apply_read(&TransformerSpec::Identity, &view, "u1").unwrap();
        for (o, e) in out.iter().zip(&view) {
            assert_eq!((&o.id, &o.key, &o.value), (&e.ranked.id, &e.key, &e.value));
            assert_eq!(o.similarity, e.ranked.similarity);
        }
    }

    #[test]
    fn email_redaction() {
        let spec = TransformerSpec::Redactor {
            rules: vec![RedactRule::Regex {
                pattern: r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}".into(),
                replacement: "[REDACTED]".into(),
            }],
        };
        assert_eq!(spec.transform("contact alice@x.com", "u").unwrap(), "contact [REDACTED]");
    }

    #[test]
    fn divergent_rules_are_reported() {
        let spec = TransformerSpec::Redactor {
            rules: vec![RedactRule::Literal { text: "a".into(), replacement: "aa".into() }],
        };
        assert_eq!(spec.transform("a", "u"), Err(PolicyError::RedactorDiverges));
    }

    fn trace() -> InteractionTrace {
        InteractionTrace {
            user: "u1".into(),
            agent: "a1".into(),
            timestamp: Tick(4),
            subquery: "what did u1 ask".into(),
            response: "u1 asked about kilns".into(),
            resources: vec!["r1".into()],
        }
    }

    #[test]
    fn default_write_plan_emits_one_fragment_per_tier() {
        let plan =
            plan_writes(&PolicySet::default_instantiation(), &trace(), MemoryMode::Shared).unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan[0].tier, Tier::Private);
        assert_eq!(plan[0].value, "u1 asked about kilns");
        assert_eq!(plan[1].tier, Tier::Shared);
        assert!(!plan[1].value.contains("u1"));
        assert!(!plan[1].key.contains("u1"));
    }

    #[test]
    fn isolated_mode_retiers_everything_private() {
        let plan =
            plan_writes(&PolicySet::default_instantiation(), &trace(), MemoryMode::Isolated).unwrap();
        assert!(plan.iter().all(|c| c.tier == Tier::Private));
    }

    #[test]
    fn failing_transformer_fails_the_whole_plan() {
        let set = PolicySet::new(vec![PolicyBinding {
            scope: PolicyScope::Global,
            direction: Direction::WriteShared,
            transformer: TransformerSpec::PromptedRemote {
                system_prompt: prompts::SHARED_MEMORY_PROMPT.into(),
                endpoint: "http://127.0.0.1:9/chat".into(),
            },
        }])
        .unwrap();
        assert!(matches!(
            plan_writes(&set, &trace(), MemoryMode::Shared),
            Err(PolicyError::Remote(_))
        ));
    }

    #[test]
    fn remote_output_parsing() {
        let list = r#"[{"key": "kiln", "value": "hot"}]"#;
        assert_eq!(parse_key_values(list), vec![("kiln".into(), "hot".into())]);
        let map = r#"{"a": "1", "b": "2"}"#;
        assert_eq!(parse_key_values(map).len(), 2);
        let lines = "- kiln temperature: 1200 C\nnoise\n";
        assert_eq!(parse_key_values(lines), vec![("kiln temperature".into(), "1200 C".into())]);
    }

    fn safe_rule() -> impl Strategy<Value = RedactRule> {
        prop_oneof![
            Just(RedactRule::Regex { pattern: r"\d+".into(), replacement: "#".into() }),
            Just(RedactRule::Regex { pattern: r"[aeiou]".into(), replacement: "*".into() }),
            Just(RedactRule::Literal { text: "ab".into(), replacement: "".into() }),
            Just(RedactRule::Literal { text: "xy".into(), replacement: "z".into() }),
            Just(RedactRule::Creator { replacement: "[user]".into() }),
            Just(RedactRule::Creator { replacement: "".into() }),
        ]
    }

    proptest! {
        #[test]
        fn redaction_is_idempotent(
            rules in prop::collection::vec(safe_rule(), 0..4),
            s in "[a-z0-9 ]{0,40}",
        ) {
            let spec = TransformerSpec::Redactor { rules };
            let once = spec.transform(&s, "ab1").unwrap();
            prop_assert_eq!(spec.transform(&once, "ab1").unwrap(), once);
        }

        #[test]
        fn creator_redaction_leaves_no_trace(
            user in "[a-c]{1,3}",
            s in "[a-c ]{0,40}",
        ) {
            let spec = TransformerSpec::redact_creator("");
            let out = spec.transform(&s, &user).unwrap();
            prop_assert!(!out.contains(&user));
        }

        #[test]
        fn read_preserves_cardinality_and_order(
            values in prop::collection::vec("[a-z0-9@. ]{1,20}", 0..20),
            rules in prop::collection::vec(safe_rule(), 0..3),
        ) {
            let view: Vec<ViewEntry> = values
                .iter()
                .enumerate()
                .map(|(i, v)| entry(&i.to_string(), v, v))
                .collect();
            let out = apply_read(&TransformerSpec::Redactor { rules }, &view, "u1").unwrap();
            prop_assert_eq!(out.len(), view.len());
            for (o, e) in out.iter().zip(&view) {
                prop_assert_eq!(&o.id, &e.ranked.id);
            }
        }
    }
}
