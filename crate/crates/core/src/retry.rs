use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Bounded retries with exponential backoff.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 200,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms =
            self.initial_backoff_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

/// Outcome of one attempt: `Retry` errors are retried while attempts remain,
/// `Fatal` errors return immediately.
pub enum Attempt<E> {
    Retry(E),
    Fatal(E),
}

/// Runs `op` until it succeeds, fails fatally, or the policy is exhausted.
/// Returns the last error together with the number of attempts made.
pub fn with_retry<T, E>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, Attempt<E>>,
) -> Result<T, (E, u32)> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(Attempt::Fatal(e)) => return Err((e, attempt)),
            Err(Attempt::Retry(e)) if attempt >= max => return Err((e, attempt)),
            Err(Attempt::Retry(e)) => {
                log::warn!(
                    "attempt {attempt}/{max} failed, retrying: {}",
                    std::any::type_name_of_val(&e)
                );
                std::thread::sleep(policy.backoff(attempt));
                attempt += 1;
            }
        }
    }
}
