//! Run research code packaged in container images through declarative
//! capsule manifests.
//!
//! A capsule (`capsule.json`) names an image, a task kind, a command
//! template and bundled example cases. [`runner::run_capsule`] resolves a
//! capsule from a [`registry::Registry`], makes sure the image is present,
//! writes the input records into a scratch directory, runs one ephemeral
//! container with that directory mounted at `/repro`, and reads the output
//! records back. [`verify`] replays bundled examples and checks the engine
//! against a capsule's hardware needs.

pub mod cli;
pub mod engine;
pub mod exchange;
pub mod manifest;
pub mod registry;
pub mod runner;
pub mod tasks;
pub mod verify;
