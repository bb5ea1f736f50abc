use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StatusClass {
    Informational,
    Successful,
    Redirection,
    RequesterError,
    RespondentError,
}

/// Three-digit status code with HTTP class semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StatusCode(u16);

impl StatusCode {
    pub const OK: StatusCode = StatusCode(200);
    pub const CREATED: StatusCode = StatusCode(201);
    pub const BAD_REQUEST: StatusCode = StatusCode(400);
    pub const FORBIDDEN: StatusCode = StatusCode(403);
    pub const NOT_FOUND: StatusCode = StatusCode(404);
    pub const NOT_ACCEPTABLE: StatusCode = StatusCode(406);
    pub const CONFLICT: StatusCode = StatusCode(409);
    pub const GONE: StatusCode = StatusCode(410);
    pub const OVERLOADED: StatusCode = StatusCode(429);
    pub const INTERNAL_ERROR: StatusCode = StatusCode(500);
    pub const UNAVAILABLE: StatusCode = StatusCode(503);
    pub const TIMEOUT: StatusCode = StatusCode(504);

    /// Accepts 100–599 only.
    pub fn new(code: u64) -> Result<Self, u64> {
        if (100..=599).contains(&code) {
            Ok(StatusCode(code as u16))
        } else {
            Err(code)
        }
    }

    pub fn code(self) -> u16 {
        self.0
    }

    pub fn class(self) -> StatusClass {
        match self.0 / 100 {
            1 => StatusClass::Informational,
            2 => StatusClass::Successful,
            3 => StatusClass::Redirection,
            4 => StatusClass::RequesterError,
            _ => StatusClass::RespondentError,
        }
    }

    pub fn is_success(self) -> bool {
        self.class() == StatusClass::Successful
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_is_total_on_valid_range() {
        for code in 100..=599u64 {
            let s = StatusCode::new(code).unwrap();
            let expected = match code / 100 {
                1 => StatusClass::Informational,
                2 => StatusClass::Successful,
                3 => StatusClass::Redirection,
                4 => StatusClass::RequesterError,
                5 => StatusClass::RespondentError,
                _ => unreachable!(),
            };
            assert_eq!(s.class(), expected);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        for code in [0, 1, 99, 600, 999, 1000, u64::MAX] {
            assert!(StatusCode::new(code).is_err(), "{code}");
        }
    }
}
