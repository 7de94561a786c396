//! Name-keyed registries of interchangeable strategies.

use crate::error::{Error, Result};

/// Ordered map from a strategy name to a factory or trait object.
pub struct Registry<F> {
    kind: &'static str,
    entries: Vec<(String, F)>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, entry: F) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("{} `{}` registered twice", self.kind, name)));
        }
        self.entries.push((name.to_string(), entry));
        Ok(())
    }

    pub fn with(mut self, name: &str, entry: F) -> Self {
        self.register(name, entry).expect("unique builtin name");
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &F)> {
        self.entries.iter().map(|(n, f)| (n.as_str(), f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_duplicates() {
        let mut r: Registry<u32> = Registry::new("thing");
        r.register("a", 1).unwrap();
        r.register("b", 2).unwrap();
        assert!(r.register("a", 3).is_err());
        assert_eq!(*r.get("b").unwrap(), 2);
        let err = r.get("zzz").err().unwrap().to_string();
        assert!(err.contains("a, b"), "{err}");
    }
}
