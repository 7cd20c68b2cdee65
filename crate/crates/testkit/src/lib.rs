//! Random IR generators, brute-force oracles and scripted model answers for
//! tests.
//!
//! The oracles work from the instruction list alone. They share no code with
//! the analyses they check beyond the IR data types.

pub mod generate;
pub mod oracle;
pub mod scripted;

pub use generate::{random_method, random_method_source, random_program_source, MethodShape};
pub use scripted::{build_mock_script, tier1_answers, ScriptPlan};
pub use oracle::{
    closure_reach, oracle_control_relevant, oracle_dependencies, oracle_fcgs, oracle_slice, successor_lists,
    OracleFcg, OracleSlice,
};
