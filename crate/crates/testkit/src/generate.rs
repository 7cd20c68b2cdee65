use std::fmt::Write;

use lamd::ir::{parse_fragment, Method};
use rand::seq::SliceRandom;
use rand::Rng;

/// External APIs the generator may call; the first two match bundled rules.
pub const EXTERNAL_APIS: &[(&str, usize)] = &[
    ("android.telephony.TelephonyManager.getDeviceId", 0),
    ("android.telephony.SmsManager.sendTextMessage", 5),
    ("x.Api.f", 0),
    ("x.Api.g", 1),
    ("x.Api.h", 2),
];

const BINARY_OPS: &[&str] = &["add", "sub", "mul", "cmp", "and"];
const UNARY_OPS: &[&str] = &["neg", "not", "length"];

#[derive(Debug, Clone)]
pub struct MethodShape {
    pub class_name: String,
    pub method_name: String,
    pub params: usize,
    /// Maximum body length, prologue and final return included.
    pub max_len: usize,
    /// Internal methods this one may call, as (qualified name, arity).
    pub callees: Vec<(String, usize)>,
}

impl Default for MethodShape {
    fn default() -> Self {
        MethodShape {
            class_name: "G".into(),
            method_name: "m".into(),
            params: 0,
            max_len: 30,
            callees: Vec::new(),
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [String]) -> &'a str {
    pool.choose(rng).expect("non-empty pool")
}

fn invoke_line<R: Rng>(rng: &mut R, pool: &[String], shape: &MethodShape) -> String {
    let internal = !shape.callees.is_empty() && rng.gen_bool(0.4);
    let (name, arity) = if internal {
        shape.callees.choose(rng).cloned().expect("callee")
    } else {
        let (n, a) = EXTERNAL_APIS.choose(rng).expect("api");
        (n.to_string(), *a)
    };
    let mut line = String::new();
    if rng.gen_bool(0.5) {
        let _ = write!(line, "{} = ", pick(rng, pool));
    }
    line.push_str("invoke ");
    if !internal && rng.gen_bool(0.5) {
        let _ = write!(line, "[{}] ", pick(rng, pool));
    }
    let args: Vec<&str> = (0..arity).map(|_| pick(rng, pool)).collect();
    let _ = write!(line, "{name}/{arity} ({})", args.join(", "));
    line
}

/// Source of one random method. Every local is defined by a constant up
/// front, every instruction carries a label `L<i>`, the last instruction is a
/// return, and no branch targets its own fall-through. At least one invoke
/// is present.
pub fn random_method_source<R: Rng>(rng: &mut R, shape: &MethodShape) -> String {
    let locals = rng.gen_range(2..=4usize);
    let params: Vec<String> = (1..=shape.params).map(|i| format!("p{i}")).collect();
    let mut pool: Vec<String> = (1..=locals).map(|i| format!("r{i}")).collect();
    pool.extend(params.iter().cloned());

    let min_len = locals + 2;
    let n = rng.gen_range(min_len..=shape.max_len.max(min_len));
    let mut body: Vec<String> = (1..=locals).map(|i| format!("r{i} = const {}", rng.gen_range(0..100))).collect();
    for i in locals..n - 1 {
        let line = match rng.gen_range(0..100) {
            0..=11 => format!("{} = const {}", pick(rng, &pool), rng.gen_range(0..100)),
            12..=23 => format!("{} = {}", pick(rng, &pool), pick(rng, &pool)),
            24..=37 => {
                let op = BINARY_OPS.choose(rng).expect("op");
                format!("{} = {op} {}, {}", pick(rng, &pool), pick(rng, &pool), pick(rng, &pool))
            }
            38..=43 => {
                let op = UNARY_OPS.choose(rng).expect("op");
                format!("{} = {op} {}", pick(rng, &pool), pick(rng, &pool))
            }
            44..=65 => invoke_line(rng, &pool, shape),
            66..=83 => {
                let mut target = rng.gen_range(0..n);
                while target == i + 1 {
                    target = rng.gen_range(0..n);
                }
                format!("if {} goto L{target}", pick(rng, &pool))
            }
            84..=93 => format!("goto L{}", rng.gen_range(0..n)),
            _ => {
                if rng.gen_bool(0.5) {
                    format!("return {}", pick(rng, &pool))
                } else {
                    "return".to_string()
                }
            }
        };
        body.push(line);
    }
    body.push("return".into());
    if !body.iter().any(|l| l.contains("invoke ")) {
        let at = rng.gen_range(locals..n - 1);
        body[at] = invoke_line(rng, &pool, shape);
    }

    let mut out = String::new();
    let header_params = if params.is_empty() {
        String::new()
    } else {
        format!(" ({})", params.join(", "))
    };
    let _ = writeln!(
        out,
        "method {}.{}/{}{header_params} {{",
        shape.class_name, shape.method_name, shape.params
    );
    for (i, line) in body.iter().enumerate() {
        let _ = writeln!(out, "L{i}:\n  {line}");
    }
    out.push_str("}\n");
    out
}

pub fn random_method<R: Rng>(rng: &mut R, shape: &MethodShape) -> Method {
    let src = random_method_source(rng, shape);
    parse_fragment(&src).unwrap_or_else(|e| panic!("generator produced invalid method: {e}\n{src}"))
}

/// A program of `count` methods `P.m0 .. P.m<count-1>` that call one another
/// at random, recursion included.
pub fn random_program_source<R: Rng>(rng: &mut R, count: usize, max_len: usize) -> String {
    let arities: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=2)).collect();
    let callees: Vec<(String, usize)> = arities
        .iter()
        .enumerate()
        .map(|(i, &a)| (format!("P.m{i}"), a))
        .collect();
    let mut out = String::new();
    for (i, &params) in arities.iter().enumerate() {
        let shape = MethodShape {
            class_name: "P".into(),
            method_name: format!("m{i}"),
            params,
            max_len,
            callees: callees.clone(),
        };
        out.push_str(&random_method_source(rng, &shape));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use lamd::ir::parse_program;
    use rand::SeedableRng;

    #[test]
    fn generated_methods_parse() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for params in 0..3 {
            for _ in 0..200 {
                let m = random_method(
                    &mut rng,
                    &MethodShape {
                        params,
                        ..MethodShape::default()
                    },
                );
                assert!(m.body.len() <= 30);
                assert!(m.body.iter().any(|i| i.callee().is_some()));
            }
        }
    }

    #[test]
    fn generated_programs_parse() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let src = random_program_source(&mut rng, 4, 12);
            parse_program(&src).unwrap_or_else(|e| panic!("{e}\n{src}"));
        }
    }
}
