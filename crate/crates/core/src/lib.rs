pub mod arch;
pub mod client;
pub mod context;
pub mod dsl;
pub mod optimizer;
pub mod patterns;
pub mod sim;
pub mod traces;
