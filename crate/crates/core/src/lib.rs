pub mod amount;
pub mod channel;
pub mod crypto;
pub mod ledger;
pub mod market;
pub mod peer;
pub mod scenario;
pub mod script;
