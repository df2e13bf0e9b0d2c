//! Data, training loops, configuration files and the command line front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod train;

pub use data::{load_dataset, DataSource, Dataset, Split, Subset};
pub use train::{train_classifier, EpochLog, SubnetTrainer, TrainConfig, TrainLog, Trainable};
