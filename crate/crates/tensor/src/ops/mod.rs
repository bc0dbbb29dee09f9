pub mod attention;
mod conv;
mod elementwise;
pub mod encoding;
pub mod loss;
mod resample;
