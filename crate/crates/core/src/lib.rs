//! Federated IoT context exchange.
//!
//! Providers keep their data in per-provider context managers; brokers
//! discover providers through discovery registries and fan requests out to
//! them; an IoT registrar publishes privacy-coarsened availability to the
//! federation; and two independent security scopes (intra-domain and
//! federation) guard every component through policy enforcement proxies.

pub mod clock;
pub mod cm;
pub mod error;
pub mod model;
pub mod net;
pub mod notify;
pub mod discovery;
pub mod replication;
pub mod broker;
pub mod security;
pub mod registrar;
pub mod federation;
