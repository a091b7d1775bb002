//! Core of the Mercury metadata catalog: the canonical record model,
//! OAI-PMH client-side protocol handling, Dublin Core parsing, the search
//! index, the durable journal store, and the harvester that feeds them.

pub mod catalog;
pub mod dc;
pub mod harvest;
pub mod index;
pub mod mock;
pub mod model;
pub mod oai;
pub mod store;
pub mod time;
pub mod xml;
