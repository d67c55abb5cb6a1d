pub mod backbone;
pub mod cost;
pub mod family;
pub mod gradcheck;
pub mod graph;
pub mod neck;
pub mod tensor;
