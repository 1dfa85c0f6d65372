pub mod corpus;
pub mod metrics;
pub mod model;
pub mod pipelines;
pub mod qe;
pub mod subword;
