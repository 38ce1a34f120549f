pub mod audio;
pub mod document;
pub mod dsp;
pub mod executor;
pub mod graph;
pub mod losses;
pub mod optim;
pub mod params;
pub mod processors;
pub mod pruning;
pub mod training;
pub mod workbench;
