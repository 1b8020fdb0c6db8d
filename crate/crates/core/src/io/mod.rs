pub mod container;
pub mod ppm;

pub use container::{Container, Entry, Payload};
