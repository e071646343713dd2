use crate::error::{Error, Result};

/// `(R_i − mean) / (std + eps_norm)` with the population standard deviation.
/// A group whose rewards are all equal gets all-zero advantages.
pub fn advantages(rewards: &[f64], eps_norm: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("advantages need at least 2 rewards, got {}", rewards.len())));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFiniteValue(format!("reward {i}")));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps_norm)).collect())
}
