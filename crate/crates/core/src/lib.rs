pub mod compression;
pub mod correspondence;
pub mod cumulants;
pub mod error;
pub mod free_product;
pub mod io;
pub mod laws;
pub mod linalg;
pub mod section5;
pub mod subordination;
