//! Failures carry a class printed as `error[<class>]: <message>` on one line.

use std::fmt;

#[derive(Debug)]
pub struct Failure {
    pub class: &'static str,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(class: &'static str, msg: impl fmt::Display) -> Self {
        Self {
            class,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Causes already quoted by the message above them are skipped.
        let mut msg = String::new();
        for cause in self.error.chain().map(ToString::to_string) {
            if !msg.ends_with(&cause) {
                if !msg.is_empty() {
                    msg.push_str(": ");
                }
                msg.push_str(&cause);
            }
        }
        let one_line: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        write!(f, "error[{}]: {}", self.class, one_line.join(" "))
    }
}

pub trait ResultExt<T> {
    fn class(self, class: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn class(self, class: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure { class, error: e.into() })
    }
}
