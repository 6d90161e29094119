//! The book's chapters, compiled here so their snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod ch01_introduction {}

#[doc = include_str!("../../../book/src/labels.md")]
pub mod ch02_labels {}

#[doc = include_str!("../../../book/src/distances.md")]
pub mod ch03_distances {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod ch04_data {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod ch05_training {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod ch06_cli {}
