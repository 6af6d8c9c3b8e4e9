use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::glob_match;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Query,
    Subscribe,
    Notify,
    Register,
    Discover,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Effect {
    Permit,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Policy {
    pub rule_id: String,
    pub subject_pattern: String,
    pub action: Action,
    /// Glob over "entityType/attributeName".
    pub resource_pattern: String,
    pub effect: Effect,
    /// Attribute names visible under a permit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Vec<String>>,
}

impl Policy {
    pub fn permit(rule_id: &str, subject: &str, action: Action, resource: &str) -> Self {
        Self {
            rule_id: rule_id.into(),
            subject_pattern: subject.into(),
            action,
            resource_pattern: resource.into(),
            effect: Effect::Permit,
            filter: None,
        }
    }

    pub fn deny(rule_id: &str, subject: &str, action: Action, resource: &str) -> Self {
        Self {
            effect: Effect::Deny,
            ..Self::permit(rule_id, subject, action, resource)
        }
    }

    pub fn with_filter(mut self, names: &[&str]) -> Self {
        self.filter = Some(names.iter().map(|s| s.to_string()).collect());
        self
    }

    fn applies(&self, subject: &str, action: Action, resource: Option<&str>) -> bool {
        (self.action == Action::Any || self.action == action)
            && glob_match(&self.subject_pattern, subject)
            && resource.is_none_or(|r| glob_match(&self.resource_pattern, r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Permit,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Decision {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_rule_id: Option<String>,
}

impl Decision {
    pub fn deny(matched_rule_id: Option<String>) -> Self {
        Self {
            verdict: Verdict::Deny,
            filter: None,
            matched_rule_id,
        }
    }

    pub fn is_permit(&self) -> bool {
        self.verdict == Verdict::Permit
    }
}

/// First matching rule wins; no match denies. A `None` resource matches
/// any resource pattern.
pub fn decide(policies: &[Policy], subject: &str, action: Action, resource: Option<&str>) -> Decision {
    match policies.iter().find(|p| p.applies(subject, action, resource)) {
        Some(p) if p.effect == Effect::Permit => Decision {
            verdict: Verdict::Permit,
            filter: p.filter.clone(),
            matched_rule_id: Some(p.rule_id.clone()),
        },
        Some(p) => Decision::deny(Some(p.rule_id.clone())),
        None => Decision::deny(None),
    }
}

fn attribute_of(resource: &str) -> &str {
    resource.rsplit_once('/').map_or("*", |(_, a)| a)
}

/// Decision for a request touching several resources. All denied, or no
/// resources permitted, denies. If everything is permitted without
/// filters the permit is unrestricted; otherwise the permit carries the
/// union of what was allowed: rule filters, plus the attribute of each
/// resource permitted outright. A wildcard attribute permitted outright
/// next to a denied resource contributes nothing.
pub fn authorize(policies: &[Policy], subject: &str, action: Action, resources: &[String]) -> Decision {
    if resources.is_empty() {
        return decide(policies, subject, action, None);
    }
    let decisions: Vec<(&String, Decision)> = resources
        .iter()
        .map(|r| (r, decide(policies, subject, action, Some(r))))
        .collect();
    let permitted: Vec<&(&String, Decision)> = decisions.iter().filter(|(_, d)| d.is_permit()).collect();
    if permitted.is_empty() {
        let first = decisions.into_iter().next().map(|(_, d)| d);
        return first.unwrap_or_else(|| Decision::deny(None));
    }
    let any_denied = permitted.len() < decisions.len();
    let any_filter = permitted.iter().any(|(_, d)| d.filter.is_some());
    let matched_rule_id = permitted[0].1.matched_rule_id.clone();
    if !any_denied && !any_filter {
        return Decision {
            verdict: Verdict::Permit,
            filter: None,
            matched_rule_id,
        };
    }
    let mut allowed = BTreeSet::new();
    for (resource, d) in permitted {
        match &d.filter {
            Some(names) => allowed.extend(names.iter().cloned()),
            None => {
                let attr = attribute_of(resource);
                if attr != "*" {
                    allowed.insert(attr.to_owned());
                }
            }
        }
    }
    Decision {
        verdict: Verdict::Permit,
        filter: Some(allowed.into_iter().collect()),
        matched_rule_id,
    }
}
