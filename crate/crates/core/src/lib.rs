pub mod config;
pub mod crypto;
pub mod keystore;
pub mod name;
pub mod packet;
pub mod proxy;
pub mod rib;
pub mod router;
pub mod testbed;
pub mod transport;

#[cfg(test)]
pub(crate) mod testutil;
