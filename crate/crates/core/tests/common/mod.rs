#![allow(dead_code)]

pub mod filter_cases;
pub mod gradcheck;
pub mod personal;
pub mod regression;
