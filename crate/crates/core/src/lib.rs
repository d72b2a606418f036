pub mod acquisition;
pub mod extraction;
pub mod floquet;
pub mod metrics;
pub mod rotor;
pub mod scenario;
