//! Minimal robots.txt evaluation: group selection by product token and
//! longest-match `Allow`/`Disallow` with `*` and `$` patterns.

/// Rules that apply to one user agent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Robots {
    rules: Vec<(bool, String)>,
}

fn product_token(user_agent: &str) -> String {
    user_agent.split(['/', ' ']).next().unwrap_or("").to_ascii_lowercase()
}

impl Robots {
    /// Parses `body`, keeping the rules of the most specific group that
    /// matches `user_agent` (falling back to `*`). Unknown lines are ignored.
    pub fn parse(user_agent: &str, body: &str) -> Self {
        let token = product_token(user_agent);
        let mut specific: Option<Vec<(bool, String)>> = None;
        let mut wildcard: Option<Vec<(bool, String)>> = None;
        let mut agents: Vec<String> = Vec::new();
        let mut rules: Vec<(bool, String)> = Vec::new();
        let mut in_rules = false;
        let mut flush = |agents: &mut Vec<String>, rules: &mut Vec<(bool, String)>| {
            for a in agents.iter() {
                let slot = if a == "*" {
                    &mut wildcard
                } else if !token.is_empty() && a == &token {
                    &mut specific
                } else {
                    continue;
                };
                slot.get_or_insert_with(Vec::new).extend(rules.iter().cloned());
            }
            agents.clear();
            rules.clear();
        };
        for raw in body.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let Some((key, value)) = line.split_once(':') else { continue };
            let (key, value) = (key.trim().to_ascii_lowercase(), value.trim());
            match key.as_str() {
                "user-agent" => {
                    if in_rules {
                        flush(&mut agents, &mut rules);
                        in_rules = false;
                    }
                    agents.push(value.to_ascii_lowercase());
                }
                "allow" | "disallow" => {
                    in_rules = true;
                    if !value.is_empty() {
                        rules.push((key == "allow", value.to_string()));
                    }
                }
                _ => {}
            }
        }
        flush(&mut agents, &mut rules);
        Self { rules: specific.or(wildcard).unwrap_or_default() }
    }

    /// Whether `path` (path plus query) may be fetched. The longest matching
    /// pattern decides; `Allow` wins a tie.
    pub fn allowed(&self, path: &str) -> bool {
        let mut best: Option<(usize, bool)> = None;
        for (allow, pattern) in &self.rules {
            if matches(pattern, path) {
                let len = pattern.len();
                if best.is_none_or(|(l, a)| len > l || (len == l && *allow && !a)) {
                    best = Some((len, *allow));
                }
            }
        }
        best.is_none_or(|(_, allow)| allow)
    }
}

fn matches(pattern: &str, path: &str) -> bool {
    let (pattern, anchored) = match pattern.strip_suffix('$') {
        Some(p) => (p, true),
        None => (pattern, false),
    };
    let parts: Vec<&str> = pattern.split('*').collect();
    let mut rest = path;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            let Some(r) = rest.strip_prefix(part) else { return false };
            rest = r;
        } else if i == parts.len() - 1 && anchored {
            return rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(at) => rest = &rest[at + part.len()..],
                None => return false,
            }
        }
    }
    !anchored || rest.is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcard_group_and_prefixes() {
        let r = Robots::parse("waon/0.1", "User-agent: *\nDisallow: /private/\n");
        assert!(!r.allowed("/private/a.png"));
        assert!(r.allowed("/public/a.png"));
        assert!(r.allowed("/private"));
    }

    #[test]
    fn specific_group_wins_over_wildcard() {
        let body = "User-agent: *\nDisallow: /\n\nUser-agent: waon\nUser-agent: other\nDisallow: /x\n";
        let r = Robots::parse("waon/0.1", body);
        assert!(r.allowed("/a"));
        assert!(!r.allowed("/x/y"));
        let r = Robots::parse("somebot", body);
        assert!(!r.allowed("/a"));
    }

    #[test]
    fn longest_match_and_allow_ties() {
        let r = Robots::parse("waon", "User-agent: *\nDisallow: /img\nAllow: /img/ok\nAllow: /same\nDisallow: /same\n");
        assert!(!r.allowed("/img/no.png"));
        assert!(r.allowed("/img/ok/1.png"));
        assert!(r.allowed("/same"));
    }

    #[test]
    fn star_and_dollar() {
        let r = Robots::parse("waon", "User-agent: *\nDisallow: /*.gif$\nDisallow: /a*/b\n");
        assert!(!r.allowed("/x/y.gif"));
        assert!(r.allowed("/x/y.gif?z"));
        assert!(!r.allowed("/abc/b/c"));
        assert!(r.allowed("/b"));
    }

    #[test]
    fn empty_disallow_and_comments() {
        let r = Robots::parse("waon", "# hi\nUser-agent: * # all\nDisallow:\n");
        assert!(r.allowed("/anything"));
        assert!(Robots::parse("waon", "").allowed("/"));
    }
}
