pub mod autodiff;
pub mod data;
pub mod models;
pub mod trainer;
pub mod attribution;
pub mod attention;
pub mod agreement;
pub mod harness;
