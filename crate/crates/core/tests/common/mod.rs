#![allow(dead_code)]

pub mod tess_oracle;
