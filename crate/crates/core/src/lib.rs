pub mod callgraph;
pub mod ctd;
pub mod faults;
pub mod mesh_sim;
pub mod search;
pub mod drift;
pub mod perf;
pub mod pdg;
pub mod orchestrator;
