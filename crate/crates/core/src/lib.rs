//! Elastic task-based workflow runtime: data-dependency graphs, resource
//! aware scheduling, fault handling and elastic node provisioning, driven
//! either by a discrete-event simulator or by a batch scheduler.

pub mod backend;
pub mod reliability;
pub mod report;
pub mod resources;
pub mod scheduler;
pub mod sim;
pub mod taskgraph;
pub mod elasticity;
pub mod engine;
pub mod local;
pub mod run;
pub mod slurm;
pub mod workflows;
