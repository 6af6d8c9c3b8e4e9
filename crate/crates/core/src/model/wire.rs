//! Request and response bodies for the HTTP endpoints. Keys are
//! lowerCamelCase and timestamps are integer epoch milliseconds.

use serde::{Deserialize, Serialize};

use super::types::{ContextElement, Registration};

pub const UPDATE_CONTEXT: &str = "/v1/updateContext";
pub const QUERY_CONTEXT: &str = "/v1/queryContext";
pub const SUBSCRIBE_CONTEXT: &str = "/v1/subscribeContext";
pub const UNSUBSCRIBE_CONTEXT: &str = "/v1/unsubscribeContext";
pub const NOTIFY_CONTEXT: &str = "/v1/notifyContext";
pub const REGISTER_CONTEXT: &str = "/v1/registerContext";
pub const DISCOVER_AVAILABILITY: &str = "/v1/discoverContextAvailability";
pub const SUBSCRIBE_AVAILABILITY: &str = "/v1/subscribeContextAvailability";
pub const UNSUBSCRIBE_AVAILABILITY: &str = "/v1/unsubscribeContextAvailability";
pub const NOTIFY_AVAILABILITY: &str = "/v1/notifyContextAvailability";
pub const REPLICATE: &str = "/v1/replicate";
pub const STATUS: &str = "/v1/status";

pub const AUTH_HEADER: &str = "X-Auth-Token";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct UpdateContextRequest {
    pub context_elements: Vec<ContextElement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubscribeResponse {
    pub subscription_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UnsubscribeRequest {
    pub subscription_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NotifyContextRequest {
    pub subscription_id: String,
    pub context_elements: Vec<ContextElement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NotifyAvailabilityRequest {
    pub subscription_id: String,
    pub registrations: Vec<Registration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegisterResponse {
    pub registration_id: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct DiscoverResponse {
    pub registrations: Vec<Registration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Ack {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: u16,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatusResponse {
    pub service: String,
    pub ok: bool,
}
