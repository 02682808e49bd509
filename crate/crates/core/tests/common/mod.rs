#![allow(dead_code)]

pub mod gradcheck;
pub mod metric_oracle;
pub mod threshold_oracle;
pub mod tiny;
