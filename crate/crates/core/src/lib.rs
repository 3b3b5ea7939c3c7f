pub mod audio;
pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
