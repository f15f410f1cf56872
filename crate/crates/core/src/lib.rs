pub mod autodiff;
pub mod export;
pub mod fem;
pub mod mesh;
pub mod models;
pub mod training;
