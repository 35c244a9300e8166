pub mod audit;
pub mod broker;
pub mod checkpoint;
pub mod harness;
pub mod cluster;
pub mod oracle;
pub mod probe;
pub mod reconciler;
pub mod sim;
pub mod workload;
pub mod world;
