//! Dual-track POMDP dialog agent that identifies `<task, item, recipient>`
//! service requests and learns unknown items and recipients mid-dialog.

pub mod controller;
pub mod experiments;
pub mod kb;
pub mod model;
pub mod parser;
pub mod simuser;
pub mod solver;
