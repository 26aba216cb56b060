pub mod chain;
pub mod client;
pub mod codec;
pub mod crypto;
pub mod enclave;
pub mod history;
pub mod ledger;
pub mod merkle;
pub mod mpt;
pub mod operator;
pub mod vm;
