pub mod backends;
pub mod bt;
pub mod data;
pub mod domain;
pub mod extract;
pub mod harness;
pub mod schemes;
pub mod sim;
pub mod validation;
