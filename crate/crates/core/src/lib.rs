pub mod entity;
pub mod eval;
pub mod gateway;
pub mod retrieval;
pub mod rhd;
pub mod sek;
pub mod trace;
