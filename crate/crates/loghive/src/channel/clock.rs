//! Clock offset estimation from a two-message timestamp exchange.

use super::ChannelError;

/// Estimate the peer clock offset from exchange timestamps: local send
/// `t1`, peer receive `t2`, peer send `t3`, local receive `t4`, all in UTC
/// milliseconds. Positive means the peer clock is ahead.
///
/// `offset = ((t2 - t1) + (t3 - t4)) / 2`, exact when the path is
/// symmetric.
pub fn sync_clock(t1: u64, t2: u64, t3: u64, t4: u64) -> Result<i64, ChannelError> {
    if t4 < t1 {
        return Err(ChannelError::Validation(format!(
            "receive time {t4} precedes send time {t1}"
        )));
    }
    let a = t2 as i128 - t1 as i128;
    let b = t3 as i128 - t4 as i128;
    Ok(((a + b) / 2) as i64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skewed_peer_symmetric_latency() {
        // 10 ms each way, peer clock +500 ms
        assert_eq!(sync_clock(0, 510, 520, 20).unwrap(), 505);
    }

    #[test]
    fn zero_latency_equal_clocks() {
        assert_eq!(sync_clock(100, 100, 100, 100).unwrap(), 0);
    }

    #[test]
    fn symmetric_path_synchronized_clocks() {
        assert_eq!(sync_clock(0, 10, 10, 20).unwrap(), 0);
    }

    #[test]
    fn peer_behind_gives_negative_offset() {
        // 5 ms each way, peer clock -200 ms
        assert_eq!(sync_clock(1000, 805, 810, 1015).unwrap(), -200);
    }

    #[test]
    fn rejects_time_running_backwards() {
        assert!(sync_clock(50, 60, 70, 40).is_err());
    }
}
