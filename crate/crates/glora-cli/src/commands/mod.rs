pub mod common;
pub mod eval;
pub mod gen_data;
pub mod merge;
pub mod pretrain;
pub mod report;
pub mod search;
pub mod train_supernet;
