#![allow(dead_code)]
pub mod canny_ref;
pub mod gradcheck;
pub mod suite;
