#![allow(dead_code)]

pub mod attention;
pub mod crf;
