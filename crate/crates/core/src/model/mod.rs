//! Context data types, matching rules and the JSON wire encoding shared by
//! every service.

mod aggregate;
mod matching;
mod types;
pub mod wire;

pub use aggregate::{aggregate_responses, AggregationTypeError, AGGREGATE_SOURCE};
pub use matching::{
    entities_overlap, filter_attributes, glob_match, match_entity, match_registration,
    scopes_overlap,
};
pub use types::{
    is_valid_endpoint, normalize_endpoint, AggregateMode, Annotation, Attribute, AttributeValue,
    ContextElement, EntityRef, GeoPoint, GridCell, QueryRequest, QueryResponse, Registration,
    Scope, Subscription, SubscriptionKind, ValueType,
};
