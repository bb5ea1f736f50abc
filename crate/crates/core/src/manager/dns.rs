use std::collections::BTreeMap;
use std::net::IpAddr;

/// A and CNAME records for gateway instances, resolved round-robin.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DnsTable {
    a_records: BTreeMap<String, IpAddr>,
    cname_records: BTreeMap<String, Vec<String>>,
    cursors: BTreeMap<String, usize>,
}

impl DnsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, alias: &str, canonical: &str, address: IpAddr) {
        self.a_records.insert(canonical.to_owned(), address);
        let targets = self.cname_records.entry(alias.to_owned()).or_default();
        if !targets.iter().any(|t| t == canonical) {
            targets.push(canonical.to_owned());
        }
    }

    /// Drops the A record and every CNAME pointing at it.
    pub fn remove(&mut self, canonical: &str) {
        self.a_records.remove(canonical);
        self.cname_records.retain(|_, targets| {
            targets.retain(|t| t != canonical);
            !targets.is_empty()
        });
        let live: Vec<String> = self.cname_records.keys().cloned().collect();
        self.cursors.retain(|alias, _| live.contains(alias));
    }

    /// Next address for `alias`, rotating over its targets.
    pub fn resolve(&mut self, alias: &str) -> Option<IpAddr> {
        let targets = self.cname_records.get(alias)?;
        let cursor = self.cursors.entry(alias.to_owned()).or_insert(0);
        let target = &targets[*cursor % targets.len()];
        *cursor = (*cursor + 1) % targets.len();
        self.a_records.get(target).copied()
    }

    /// All addresses behind `alias`, without moving the cursor.
    pub fn addresses(&self, alias: &str) -> Vec<IpAddr> {
        self.cname_records
            .get(alias)
            .map(|ts| {
                ts.iter()
                    .filter_map(|t| self.a_records.get(t).copied())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn a_records(&self) -> &BTreeMap<String, IpAddr> {
        &self.a_records
    }

    pub fn cname_records(&self) -> &BTreeMap<String, Vec<String>> {
        &self.cname_records
    }

    /// Every CNAME target has an A record.
    pub fn is_consistent(&self) -> bool {
        self.cname_records
            .values()
            .flatten()
            .all(|t| self.a_records.contains_key(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    #[test]
    fn round_robin_over_targets() {
        let mut d = DnsTable::new();
        d.add("A", "A-1", ip("10.0.0.1"));
        d.add("A", "A-2", ip("10.0.0.2"));
        let got: Vec<_> = (0..5).map(|_| d.resolve("A").unwrap()).collect();
        assert_eq!(
            got,
            [
                ip("10.0.0.1"),
                ip("10.0.0.2"),
                ip("10.0.0.1"),
                ip("10.0.0.2"),
                ip("10.0.0.1")
            ]
        );
        assert!(d.resolve("B").is_none());
    }

    #[test]
    fn removal_purges_alias() {
        let mut d = DnsTable::new();
        d.add("A", "A-1", ip("10.0.0.1"));
        d.add("A", "A-2", ip("10.0.0.2"));
        d.remove("A-1");
        assert!(d.is_consistent());
        for _ in 0..3 {
            assert_eq!(d.resolve("A"), Some(ip("10.0.0.2")));
        }
        d.remove("A-2");
        assert!(d.resolve("A").is_none());
        assert!(d.cname_records().is_empty());
    }
}
