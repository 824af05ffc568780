//! Worker-count control through `FEDTREE_THREADS`.

use crate::error::CliError;

pub const THREADS_VAR: &str = "FEDTREE_THREADS";

/// Parses a thread cap; `None` means "use every available core".
pub fn parse_cap(value: Option<&str>) -> Result<Option<usize>, CliError> {
    let Some(raw) = value else { return Ok(None) };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(CliError::Config(format!(
            "{THREADS_VAR} must be a positive integer, got {raw:?}"
        ))),
    }
}

/// Runs `f` on a pool capped by `FEDTREE_THREADS`.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let cap = parse_cap(std::env::var(THREADS_VAR).ok().as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cap.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps_parse() {
        assert_eq!(parse_cap(None).unwrap(), None);
        assert_eq!(parse_cap(Some(" 3 ")).unwrap(), Some(3));
        assert!(parse_cap(Some("0")).is_err());
        assert!(parse_cap(Some("many")).is_err());
    }
}
