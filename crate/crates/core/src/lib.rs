pub mod corpus;
pub mod numkit;
pub mod text;
pub mod retrieval;
pub mod promptgen;
pub mod fusion;
pub mod trainer;
pub mod pipeline;
