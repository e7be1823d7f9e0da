use super::AttributionError;

/// Largest game solved by full coalition enumeration.
pub const MAX_PLAYERS: usize = 12;

/// Exact Shapley values of the game `value`, which receives coalitions as
/// bitmasks (bit `i` set means player `i` is in).
pub fn exact_shapley(value: impl Fn(u32) -> f64, n: usize) -> Result<Vec<f64>, AttributionError> {
    if n > MAX_PLAYERS {
        return Err(AttributionError::TooManyPlayers { n, max: MAX_PLAYERS });
    }
    let v: Vec<f64> = (0..1u32 << n).map(&value).collect();
    // weight |S|!(n−|S|−1)!/n! for a coalition of size s not containing i
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for s in 0..(1u32 << n) {
            if s & bit == 0 {
                *p += weight[s.count_ones() as usize] * (v[(s | bit) as usize] - v[s as usize]);
            }
        }
    }
    Ok(phi)
}
