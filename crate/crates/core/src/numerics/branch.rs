//! Recording and replay of piece selections in piecewise-defined ops.
//!
//! Ops such as ReLU, clamping, row max/min and temporal interpolation pick
//! one smooth piece per element. While recording, those picks are logged;
//! while replaying, the logged picks are reused so the op is evaluated on the
//! same piece even when its input has crossed a kink. Finite-difference
//! checks use this to compare against the derivative of the piece the
//! analytic gradient was taken on.

use std::cell::RefCell;

enum Mode {
    Live,
    Record(Vec<u32>),
    Replay { log: Vec<u32>, pos: usize, desync: bool },
}

thread_local! {
    static MODE: RefCell<Mode> = const { RefCell::new(Mode::Live) };
}

/// Picks for `n` elements: computed by `live` unless a replay is active.
pub(crate) fn picks(n: usize, live: impl FnMut(usize) -> u32) -> Vec<u32> {
    MODE.with(|m| match &mut *m.borrow_mut() {
        Mode::Live => (0..n).map(live).collect(),
        Mode::Record(log) => {
            let out: Vec<u32> = (0..n).map(live).collect();
            log.extend_from_slice(&out);
            out
        }
        Mode::Replay { log, pos, desync } => {
            if *desync || *pos + n > log.len() {
                *desync = true;
                return (0..n).map(live).collect();
            }
            let out = log[*pos..*pos + n].to_vec();
            *pos += n;
            out
        }
    })
}

fn swap(mode: Mode) -> Mode {
    MODE.with(|m| std::mem::replace(&mut *m.borrow_mut(), mode))
}

/// Runs `f`, returning its result and every pick it made.
pub fn record<T>(f: impl FnOnce() -> T) -> (T, Vec<u32>) {
    let prev = swap(Mode::Record(Vec::new()));
    let out = f();
    let Mode::Record(log) = swap(prev) else { unreachable!() };
    (out, log)
}

/// Runs `f` with picks taken from `log`. The flag is false when `f` asked for
/// a different number of picks than were logged.
pub fn replay<T>(log: &[u32], f: impl FnOnce() -> T) -> (T, bool) {
    let prev = swap(Mode::Replay { log: log.to_vec(), pos: 0, desync: false });
    let out = f();
    let Mode::Replay { log, pos, desync } = swap(prev) else { unreachable!() };
    (out, !desync && pos == log.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_reuses_recorded_picks() {
        let ((), log) = record(|| {
            assert_eq!(picks(3, |k| k as u32), vec![0, 1, 2]);
        });
        let (v, ok) = replay(&log, || picks(3, |_| 9));
        assert_eq!(v, vec![0, 1, 2]);
        assert!(ok);
        let (v, ok) = replay(&log, || picks(4, |_| 9));
        assert_eq!(v, vec![9; 4]);
        assert!(!ok);
        assert_eq!(picks(2, |_| 5), vec![5, 5]);
    }
}
