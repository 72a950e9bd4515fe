//! Private IoT computation offloading.
//!
//! A home hub encrypts device data per request and either runs the app on
//! local hardware or offloads it to a function-as-a-service platform. Remote
//! instances can only read the data after a trusted key management service
//! releases the request's data key, which it does under an allow/revoke
//! policy and with a full audit trail.
//!
//! * [`envelope`]: per-request data keys, double-layer wrapping, result sealing
//! * [`kms`]: key management service, audit log, HTTPS API
//! * [`faas_sim`]: FaaS emulator with cold/warm instances and cost metering
//! * [`hub`]: queues, resource allocator, offload policies, keep-alive
//! * [`rules`]: trigger-action rule language and engine
//! * [`toolchain`]: app provisioning, packaging and deployment
//! * [`bench`]: virtual-time experiments and reports

pub mod bench;
pub mod clock;
pub mod envelope;
pub mod faas_sim;
pub mod hub;
pub mod kms;
pub mod net;
pub mod rules;
pub mod tls;
pub mod toolchain;
