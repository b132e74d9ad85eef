use std::fmt;

/// An error in the caller's input rather than the environment. The CLI exits
/// with status 1 on these and 2 on everything else.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

pub fn is_invalid(err: &anyhow::Error) -> bool {
    err.chain().any(|c| c.is::<Invalid>())
}
