pub mod bench;
pub mod cli;
pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;
