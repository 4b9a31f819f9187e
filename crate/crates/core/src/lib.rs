pub mod audio;
pub mod checks;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;
