//! Steady-state detection on per-search cost curves.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyRule {
    /// Trailing window of the rolling median, in searches.
    pub window: usize,
    /// Fraction of the searches, at the end of the run, whose mean is the
    /// plateau.
    pub tail_fraction: f64,
    /// Allowed relative deviation of the rolling median from the plateau.
    pub band: f64,
    /// Absolute slack added to the band.
    pub floor: f64,
}

impl Default for SteadyRule {
    fn default() -> Self {
        Self {
            window: 50,
            tail_fraction: 0.2,
            band: 0.25,
            floor: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    /// Mean cost over the tail of the run.
    pub plateau: f64,
    /// Index (among searches) of the first window end after which the
    /// rolling median never leaves the band.
    pub search_index: usize,
    /// Trace position of that search.
    pub op_seq: usize,
    /// False when the curve only settles inside the tail itself.
    pub reached: bool,
}

/// `points` are `(op_seq, cost)` per search in trace order.
pub fn steady_state(points: &[(usize, f64)], rule: &SteadyRule) -> Option<SteadyState> {
    let n = points.len();
    if n == 0 {
        return None;
    }
    let w = rule.window.clamp(1, n);
    let tail = ((n as f64 * rule.tail_fraction).ceil() as usize).clamp(1, n);
    let plateau = points[n - tail..].iter().map(|p| p.1).sum::<f64>() / tail as f64;
    let limit = rule.band * plateau + rule.floor;
    let mut start = n - 1;
    let mut buf: Vec<f64> = Vec::with_capacity(w);
    for end in (w - 1..n).rev() {
        buf.clear();
        buf.extend(points[end + 1 - w..=end].iter().map(|p| p.1));
        buf.sort_by(f64::total_cmp);
        let median = if w % 2 == 1 {
            buf[w / 2]
        } else {
            0.5 * (buf[w / 2 - 1] + buf[w / 2])
        };
        if (median - plateau).abs() > limit {
            break;
        }
        start = end;
    }
    Some(SteadyState {
        plateau,
        search_index: start,
        op_seq: points[start].0,
        reached: start < n - tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_down_curve() {
        let pts: Vec<(usize, f64)> = (0..400)
            .map(|i| (2 * i, if i < 100 { 1000.0 } else { 50.0 }))
            .collect();
        let rule = SteadyRule {
            window: 20,
            ..SteadyRule::default()
        };
        let s = steady_state(&pts, &rule).unwrap();
        assert_eq!(s.plateau, 50.0);
        assert!(s.reached);
        // The window median flips once more than half of it is past the step.
        assert_eq!(s.search_index, 110);
        assert_eq!(s.op_seq, 220);
    }

    #[test]
    fn flat_curve_is_steady_at_first_window() {
        let pts: Vec<(usize, f64)> = (0..100).map(|i| (i, 10.0)).collect();
        let rule = SteadyRule {
            window: 10,
            ..SteadyRule::default()
        };
        assert_eq!(steady_state(&pts, &rule).unwrap().search_index, 9);
    }

    #[test]
    fn rising_curve_never_settles_early() {
        let pts: Vec<(usize, f64)> = (0..100).map(|i| (i, 100.0 * i as f64)).collect();
        let s = steady_state(&pts, &SteadyRule::default()).unwrap();
        assert!(!s.reached);
    }
}
