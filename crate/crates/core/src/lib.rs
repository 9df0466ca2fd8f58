pub mod addr;
pub mod altmap;
pub mod cli;
pub mod config;
pub mod engine;
pub mod faultsvc;
pub mod hash;
pub mod memhier;
pub mod memmgr;
pub mod pagetable;
pub mod setassoc;
pub mod tlb;
pub mod trace;
