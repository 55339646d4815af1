pub mod attention;
pub mod conv;
pub(crate) mod fft;
