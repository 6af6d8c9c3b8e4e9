use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::types::{
    AggregateMode, Annotation, Attribute, AttributeValue, ContextElement, EntityRef, QueryResponse,
    ValueType,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("attribute {entity_type}/{attribute} mixes value types {found:?}")]
pub struct AggregationTypeError {
    pub entity_type: String,
    pub attribute: String,
    pub found: Vec<ValueType>,
}

/// Source tag used on annotations produced by aggregation itself.
pub const AGGREGATE_SOURCE: &str = "aggregate";

/// Combine provider responses into one. See [`AggregateMode`].
///
/// Output elements are ordered by `(id, type)` and their attributes by name,
/// so the result does not depend on the order of `parts`.
pub fn aggregate_responses(
    parts: &[QueryResponse],
    mode: AggregateMode,
) -> Result<QueryResponse, AggregationTypeError> {
    let mut annotations: BTreeSet<Annotation> = parts
        .iter()
        .flat_map(|p| p.annotations.iter().cloned())
        .collect();
    let elements = match mode {
        AggregateMode::Set => merge_set(parts),
        AggregateMode::Average => average(parts, &mut annotations)?,
    };
    Ok(QueryResponse {
        context_elements: elements,
        annotations: annotations.into_iter().collect(),
    })
}

struct Candidate<'a> {
    attr: &'a Attribute,
    hint: Option<&'a str>,
}

fn canonical(value: &AttributeValue) -> String {
    serde_json::to_string(value).unwrap_or_default()
}

/// Newer timestamp wins; ties fall back to provider hint, then to the
/// canonical value encoding so the choice is total.
fn candidate_order(a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    a.attr
        .timestamp
        .cmp(&b.attr.timestamp)
        .then_with(|| a.hint.cmp(&b.hint))
        .then_with(|| canonical(&a.attr.value).cmp(&canonical(&b.attr.value)))
}

fn merge_set(parts: &[QueryResponse]) -> Vec<ContextElement> {
    struct Merged<'a> {
        entity: &'a EntityRef,
        hint: Option<&'a str>,
        attrs: BTreeMap<&'a str, Candidate<'a>>,
    }
    let mut merged: BTreeMap<(&str, &str), Merged<'_>> = BTreeMap::new();
    for element in parts.iter().flat_map(|p| p.context_elements.iter()) {
        let slot = merged.entry(element.key()).or_insert_with(|| Merged {
            entity: &element.entity,
            hint: None,
            attrs: BTreeMap::new(),
        });
        let hint = element.provider_hint.as_deref();
        if hint > slot.hint {
            slot.hint = hint;
        }
        for attr in &element.attributes {
            let candidate = Candidate { attr, hint };
            match slot.attrs.get(attr.name.as_str()) {
                Some(current) if candidate_order(&candidate, current) != Ordering::Greater => {}
                _ => {
                    slot.attrs.insert(attr.name.as_str(), candidate);
                }
            }
        }
    }
    merged
        .into_values()
        .map(|m| ContextElement {
            entity: m.entity.clone(),
            attributes: m.attrs.into_values().map(|c| c.attr.clone()).collect(),
            provider_hint: m.hint.map(str::to_owned),
        })
        .collect()
}

fn average(
    parts: &[QueryResponse],
    annotations: &mut BTreeSet<Annotation>,
) -> Result<Vec<ContextElement>, AggregationTypeError> {
    let mut groups: BTreeMap<(&str, &str), Vec<&Attribute>> = BTreeMap::new();
    for element in parts.iter().flat_map(|p| p.context_elements.iter()) {
        for attr in &element.attributes {
            groups
                .entry((element.entity.entity_type.as_str(), attr.name.as_str()))
                .or_default()
                .push(attr);
        }
    }

    let mut per_type: BTreeMap<&str, Vec<Attribute>> = BTreeMap::new();
    for ((entity_type, name), attrs) in groups {
        let kinds: BTreeSet<ValueType> = attrs.iter().map(|a| a.value.value_type()).collect();
        if kinds.len() > 1 {
            return Err(AggregationTypeError {
                entity_type: entity_type.to_owned(),
                attribute: name.to_owned(),
                found: kinds.into_iter().collect(),
            });
        }
        let mut values: Vec<f64> = attrs.iter().filter_map(|a| a.value.as_number()).collect();
        if values.is_empty() {
            annotations.insert(Annotation {
                source: AGGREGATE_SOURCE.into(),
                code: 0,
                reason: format!("{entity_type}/{name} is not numeric and was dropped from averaging"),
            });
            continue;
        }
        // summation order fixed so the mean is permutation-invariant
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let timestamp = attrs.iter().map(|a| a.timestamp).max().unwrap_or_default();
        per_type.entry(entity_type).or_default().push(Attribute {
            name: name.to_owned(),
            value: AttributeValue::Number(mean),
            timestamp,
        });
    }

    Ok(per_type
        .into_iter()
        .map(|(entity_type, attributes)| {
            ContextElement::new(
                EntityRef::new(format!("avg:{entity_type}"), entity_type),
                attributes,
            )
        })
        .collect())
}
