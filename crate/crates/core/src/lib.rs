pub mod cli;
pub mod element;
pub mod fields;
pub mod io;
pub mod material;
pub mod mesh;
pub mod optim;
pub mod solver;
pub mod sparse;
pub mod spectral;
pub mod tensor;
