use std::fmt;
use std::str::FromStr;

/// Scripted business logic of a service instance.
///
/// Text form: `calls=P,P2 hold=5 load=16 retries=2 fault=false`, every key
/// optional. `calls=*` (the default) calls every configured plug per request,
/// `calls=-` calls none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Behavior {
    pub calls: Option<Vec<String>>,
    pub hold_ms: u64,
    pub load_threshold: usize,
    pub retries: u32,
    pub fault: bool,
}

impl Default for Behavior {
    fn default() -> Self {
        Behavior {
            calls: None,
            hold_ms: 5,
            load_threshold: 16,
            retries: 2,
            fault: false,
        }
    }
}

impl Behavior {
    /// Plugs one request fans out to, restricted to those configured.
    pub fn plugs_for_request<'a>(
        &'a self,
        configured: impl Iterator<Item = &'a String>,
    ) -> Vec<String> {
        let configured: Vec<&String> = configured.collect();
        match &self.calls {
            None => configured.into_iter().cloned().collect(),
            Some(list) => list
                .iter()
                .filter(|p| configured.contains(p))
                .cloned()
                .collect(),
        }
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut b = Behavior::default();
        for item in s.split_whitespace() {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{item}`"))?;
            let bad = || format!("bad value for `{key}`: `{value}`");
            match key {
                "calls" => {
                    b.calls = match value {
                        "*" => None,
                        "-" => Some(Vec::new()),
                        list => Some(list.split(',').map(str::to_owned).collect()),
                    }
                }
                "hold" => b.hold_ms = value.parse().map_err(|_| bad())?,
                "load" => b.load_threshold = value.parse().map_err(|_| bad())?,
                "retries" => b.retries = value.parse().map_err(|_| bad())?,
                "fault" => b.fault = value.parse().map_err(|_| bad())?,
                _ => return Err(format!("unknown behavior key `{key}`")),
            }
        }
        Ok(b)
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let calls = match &self.calls {
            None => "*".to_owned(),
            Some(v) if v.is_empty() => "-".to_owned(),
            Some(v) => v.join(","),
        };
        write!(
            f,
            "calls={calls} hold={} load={} retries={} fault={}",
            self.hold_ms, self.load_threshold, self.retries, self.fault
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        for text in [
            "calls=* hold=5 load=16 retries=2 fault=false",
            "calls=P,P2 hold=0 load=1 retries=0 fault=true",
            "calls=- hold=7 load=3 retries=1 fault=false",
        ] {
            let b: Behavior = text.parse().unwrap();
            assert_eq!(b.to_string(), text);
        }
        assert_eq!("".parse::<Behavior>().unwrap(), Behavior::default());
        assert!("hold=x".parse::<Behavior>().is_err());
        assert!("speed=1".parse::<Behavior>().is_err());
    }

    #[test]
    fn calls_are_filtered_to_configured_plugs() {
        let b: Behavior = "calls=P,Q".parse().unwrap();
        let configured = ["P".to_string(), "R".to_string()];
        assert_eq!(b.plugs_for_request(configured.iter()), vec!["P"]);
        assert_eq!(
            Behavior::default().plugs_for_request(configured.iter()),
            vec!["P", "R"]
        );
    }
}
