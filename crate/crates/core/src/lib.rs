//! Behavioral fingerprinting of NAT'd users from NetFlow records alone.
//!
//! The pipeline: parse or simulate raw NetFlow records, assemble them into
//! ordered bi-directional flows (OBFs), partition OBFs by the
//! (netrange, port) service they talk to, train one Gaussian-emission HMM
//! expert per service for a target user, then detect the user's presence per
//! time interval by aggregating weighted expert verdicts and applying a final
//! classifier (random forest, or a plain weighted-sum threshold).
//!
//! Modules follow the pipeline stages:
//!
//! * [`netflow`] — record model, v5/CSV parsing, flow and OBF assembly
//! * [`whois`] — netrange resolution and the (netrange, port) service key
//! * [`features`] — OBF encoding into HMM observation sequences
//! * [`hmm`] — forward likelihood, k-means init, Baum-Welch training
//! * [`trainer`] — per-service expert training and profile assembly
//! * [`detector`] — OBF classification and interval aggregation
//! * [`classifiers`] — random forest and evaluation metrics
//! * [`simulator`] — synthetic NAT'd traffic with ground truth

pub mod classifiers;
pub mod detector;
pub mod features;
pub mod hmm;
pub mod netflow;
pub mod simulator;
pub mod trainer;
pub mod whois;
