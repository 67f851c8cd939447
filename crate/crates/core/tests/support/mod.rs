//! Shared fixtures and textbook reference implementations for integration tests.
#![allow(dead_code)]

pub mod mock_llm;
pub mod oracle;
pub mod tables;
