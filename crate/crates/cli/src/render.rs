use std::fmt::Write as _;

use flexibit_core::gridworld::{render, Trajectory};

pub fn trajectory(tr: &Trajectory) -> String {
    let mut out = String::new();
    for t in 0..tr.len() {
        let s = tr.states[t];
        let held = if s.has_key() { " (key held)" } else { "" };
        writeln!(out, "t={t} {s}{held} action={} reward={}", tr.actions[t], tr.rewards[t]).unwrap();
        out.push_str(&render(s));
    }
    out
}
