//! Random loop-free programs over a 2-bit domain.

use rand::rngs::StdRng;
use rand::Rng;

pub const LAYOUT: &str = "layout A[2]@0 idx@2 secret@3 input idx";

fn reg(rng: &mut StdRng) -> String {
    format!("r{}", rng.gen_range(0..3))
}

fn operand(rng: &mut StdRng) -> String {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(0..4).to_string(),
        1 => "A.size".into(),
        _ => reg(rng),
    }
}

fn value(rng: &mut StdRng) -> String {
    let ops = ["+", "-", "&", "|", "^", "<", ">=", "==", "*"];
    match rng.gen_range(0..3) {
        0 => operand(rng),
        _ => format!(
            "{} {} {}",
            reg(rng),
            ops[rng.gen_range(0..ops.len())],
            operand(rng)
        ),
    }
}

fn address(rng: &mut StdRng) -> String {
    match rng.gen_range(0..6) {
        0 => "idx".into(),
        1 => format!("A + {}", rng.gen_range(0..2)),
        2 | 3 => format!("A + {}", reg(rng)),
        4 => reg(rng),
        _ => format!("{} + {}", reg(rng), reg(rng)),
    }
}

/// One thread body of `len` instructions starting at `first`, with at most
/// `branches` forward branches.
fn thread(rng: &mut StdRng, first: u32, len: u32, branches: &mut u32) -> Vec<String> {
    let mut out = Vec::new();
    for k in 0..len {
        let label = first + k;
        let last = k + 1 == len;
        if k == 0 && rng.gen_bool(0.7) {
            out.push(format!("{label}: load r0, idx"));
            continue;
        }
        let stmt = match rng.gen_range(0..13) {
            12 => format!("{} <- {} < A.size", reg(rng), reg(rng)),
            0..=2 => format!("load {}, {}", reg(rng), address(rng)),
            3 | 4 => format!("store {}, {}", address(rng), operand(rng)),
            5 | 6 => format!("{} <- {}", reg(rng), value(rng)),
            7 => format!("{} <- {} ? {}", reg(rng), reg(rng), operand(rng)),
            8 | 9 if *branches > 0 && !last => {
                *branches -= 1;
                let span = len - k;
                let off = rng.gen_range(1..=span);
                if off == span {
                    format!("beqz {}, end", reg(rng))
                } else {
                    format!("beqz {}, {}", reg(rng), label + off)
                }
            }
            10 => "fence".into(),
            _ => "skip".into(),
        };
        out.push(format!("{label}: {stmt}"));
    }
    out
}

/// A program of at most 10 instructions, at most 2 branches and at most
/// 2 threads, biased towards bounds checks on a loaded input.
pub fn random_program(rng: &mut StdRng) -> String {
    random_program_sized(rng, 10)
}

/// Like `random_program` with at most `max` instructions.
pub fn random_program_sized(rng: &mut StdRng, max: u32) -> String {
    let total = rng.gen_range(2..=max.max(2));
    let threads = if total >= 4 && rng.gen_bool(0.3) {
        2
    } else {
        1
    };
    let mut branches = 2;
    let mut text = vec![LAYOUT.to_string()];
    if threads == 1 {
        text.extend(thread(rng, 1, total, &mut branches));
    } else {
        let split = rng.gen_range(2..=total - 2);
        text.push("thread 0:".into());
        text.extend(thread(rng, 1, split, &mut branches));
        text.push("thread 1:".into());
        text.extend(thread(rng, 1 + split, total - split, &mut branches));
    }
    text.join("\n") + "\n"
}
