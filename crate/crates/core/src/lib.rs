pub mod autodiff;
mod binio;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod meta_loop;
pub mod model;
pub mod objective;
pub mod purifier;

pub use error::{Error, FormatError, Result};
