//! Suspicious-API catalog and call-site matching.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Callee, MethodId, Program};

/// Bundled catalog with the sensitive APIs used by the fixtures.
pub const DEFAULT_RULES: &str = include_str!("../rules/default.json");

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("malformed rules file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown category `{category}` for {signature}")]
    UnknownCategory { signature: String, category: String },
    #[error("invalid rule signature `{0}`")]
    BadSignature(String),
    #[error("{signature} listed as both access and transfer")]
    ConflictingDuplicate { signature: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// Reads sensitive data.
    Access,
    /// Moves data out of the device (sink).
    Transfer,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Access => "access",
            Category::Transfer => "transfer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiRule {
    pub signature: String,
    pub category: Category,
    pub note: String,
    class_pattern: String,
    method_name: String,
    arity: usize,
}

impl ApiRule {
    pub fn new(signature: &str, category: Category, note: impl Into<String>) -> Result<ApiRule, RulesError> {
        let bad = || RulesError::BadSignature(signature.to_string());
        let (qualified, arity) = signature.rsplit_once('/').ok_or_else(bad)?;
        if arity.is_empty() || !arity.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let (class_pattern, method_name) = qualified.rsplit_once('.').ok_or_else(bad)?;
        if class_pattern.is_empty() || method_name.is_empty() || method_name.contains('*') {
            return Err(bad());
        }
        Ok(ApiRule {
            signature: signature.to_string(),
            category,
            note: note.into(),
            class_pattern: class_pattern.to_string(),
            method_name: method_name.to_string(),
            arity: arity.parse().map_err(|_| bad())?,
        })
    }

    pub fn is_wildcard(&self) -> bool {
        self.class_pattern.contains('*')
    }

    pub fn matches(&self, sig: &MethodId) -> bool {
        sig.param_count == self.arity
            && sig.method_name == self.method_name
            && glob_match(&self.class_pattern, &sig.class_name)
    }
}

/// `*` matches any run of characters; everything else is literal.
fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[derive(Deserialize)]
struct RawRule {
    signature: String,
    category: String,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<ApiRule>,
}

impl RuleSet {
    pub fn rules(&self) -> &[ApiRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn bundled() -> RuleSet {
        load_rules(DEFAULT_RULES.as_bytes()).expect("bundled rules are valid")
    }

    /// Exact signatures win over wildcards; otherwise the first rule in file order.
    pub fn lookup(&self, sig: &MethodId) -> Option<&ApiRule> {
        let rendered = sig.to_string();
        self.rules
            .iter()
            .find(|r| !r.is_wildcard() && r.signature == rendered)
            .or_else(|| self.rules.iter().find(|r| r.matches(sig)))
    }
}

pub fn load_rules(bytes: &[u8]) -> Result<RuleSet, RulesError> {
    let raw: Vec<RawRule> = serde_json::from_slice(bytes)?;
    let mut rules: Vec<ApiRule> = Vec::with_capacity(raw.len());
    for r in raw {
        let category = match r.category.as_str() {
            "access" => Category::Access,
            "transfer" => Category::Transfer,
            other => {
                return Err(RulesError::UnknownCategory {
                    signature: r.signature,
                    category: other.to_string(),
                })
            }
        };
        if let Some(existing) = rules.iter().find(|e| e.signature == r.signature) {
            if existing.category != category {
                return Err(RulesError::ConflictingDuplicate { signature: r.signature });
            }
            continue;
        }
        rules.push(ApiRule::new(&r.signature, category, r.note.unwrap_or_default())?);
    }
    Ok(RuleSet { rules })
}

/// A call to a suspicious API inside a program method.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SuspiciousApiSite {
    pub method: MethodId,
    pub instruction_index: usize,
    pub api_signature: String,
    pub category: Category,
}

/// Every external invoke matching a rule, ordered by (class, method, index).
pub fn find_suspicious_sites(program: &Program, rules: &RuleSet) -> Vec<SuspiciousApiSite> {
    let mut sites = Vec::new();
    for (id, method) in &program.methods {
        for ins in &method.body {
            let Some(Callee::External(sig)) = ins.callee() else { continue };
            if let Some(rule) = rules.lookup(sig) {
                sites.push(SuspiciousApiSite {
                    method: id.clone(),
                    instruction_index: ins.index,
                    api_signature: sig.to_string(),
                    category: rule.category,
                });
            }
        }
    }
    sites
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    #[test]
    fn single_access_rule() {
        let rs = load_rules(
            br#"[{"signature":"android.telephony.TelephonyManager.getDeviceId/0","category":"access"}]"#,
        )
        .unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs.rules()[0].category, Category::Access);
    }

    #[test]
    fn empty_rules_are_legal() {
        assert!(load_rules(b"[]").unwrap().is_empty());
    }

    #[test]
    fn conflicting_duplicate_rejected() {
        let err = load_rules(
            br#"[{"signature":"a.B.c/0","category":"access"},{"signature":"a.B.c/0","category":"transfer"}]"#,
        )
        .unwrap_err();
        assert!(matches!(err, RulesError::ConflictingDuplicate { .. }));
    }

    #[test]
    fn consistent_duplicate_collapsed() {
        let rs = load_rules(
            br#"[{"signature":"a.B.c/0","category":"access","note":"one"},{"signature":"a.B.c/0","category":"access"}]"#,
        )
        .unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs.rules()[0].note, "one");
    }

    #[test]
    fn unknown_category_and_bad_json() {
        assert!(matches!(
            load_rules(br#"[{"signature":"a.B.c/0","category":"sink"}]"#),
            Err(RulesError::UnknownCategory { .. })
        ));
        assert!(matches!(load_rules(b"{"), Err(RulesError::Json(_))));
        assert!(matches!(
            load_rules(br#"[{"signature":"nodots","category":"access"}]"#),
            Err(RulesError::BadSignature(_))
        ));
    }

    #[test]
    fn wildcard_class_segment() {
        let rule = ApiRule::new("java.net.*.openConnection/0", Category::Transfer, "").unwrap();
        assert!(rule.matches(&"java.net.URL.openConnection/0".parse().unwrap()));
        assert!(!rule.matches(&"java.io.URL.openConnection/0".parse().unwrap()));
        assert!(!rule.matches(&"java.net.URL.openConnection/1".parse().unwrap()));
        assert!(glob_match("a*b*c", "aXbYYc"));
        assert!(!glob_match("a*b", "aXbY"));
    }

    #[test]
    fn bundled_rules_load() {
        let rs = RuleSet::bundled();
        let sms: MethodId = "android.telephony.SmsManager.sendTextMessage/5".parse().unwrap();
        assert_eq!(rs.lookup(&sms).unwrap().category, Category::Transfer);
    }

    #[test]
    fn sms_send_is_one_transfer_site() {
        let p = parse_program(
            "method A.m/0 {\n r1 = invoke android.telephony.SmsManager.getDefault/0 ()\n r2 = const \"x\"\n invoke [r1] android.telephony.SmsManager.sendTextMessage/5 (r2, r2, r2, r2, r2)\n}",
        )
        .unwrap();
        let sites = find_suspicious_sites(&p, &RuleSet::bundled());
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].category, Category::Transfer);
        assert_eq!(sites[0].instruction_index, 2);
    }

    #[test]
    fn internal_calls_never_match() {
        let p = parse_program(
            "method android.telephony.TelephonyManager.getDeviceId/0 { return }\nmethod A.m/0 {\n invoke android.telephony.TelephonyManager.getDeviceId/0 ()\n}",
        )
        .unwrap();
        assert!(find_suspicious_sites(&p, &RuleSet::bundled()).is_empty());
    }
}
