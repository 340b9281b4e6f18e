pub mod analysis;
pub mod corpus;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod scoring;
pub mod seeds;
pub mod trainer;
