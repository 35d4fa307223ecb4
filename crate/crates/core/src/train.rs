//! Shared mini-batch machinery: sharded gradient evaluation with a fixed
//! reduction order, and the per-epoch loss log.

use std::fmt::Write as _;
use std::path::Path;

use nn::{ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::par::Exec;

/// Number of gradient shards per mini-batch. Fixed, so sequential and
/// parallel execution reduce in the same order and agree bit-for-bit.
pub const GRAD_SHARDS: usize = 4;

/// Splits `0..len` into at most [`GRAD_SHARDS`] contiguous ranges.
pub fn shard_ranges(len: usize) -> Vec<std::ops::Range<usize>> {
    if len == 0 {
        return Vec::new();
    }
    let per = len.div_ceil(GRAD_SHARDS);
    (0..len).step_by(per).map(|s| s..(s + per).min(len)).collect()
}

/// Evaluates `build` on each shard of a batch of `len` samples, adds every
/// shard's parameter gradients into `store` in shard order, and returns the
/// element-wise sum of the auxiliary values each shard reports.
///
/// `build` returns the shard's scalar loss and its auxiliary values.
pub fn accumulate_sharded<F>(exec: Exec, store: &mut ParamStore, len: usize, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &ParamStore, std::ops::Range<usize>) -> Result<(Var, Vec<f64>)> + Sync + Send,
{
    let ranges = shard_ranges(len);
    let frozen: &ParamStore = store;
    let shards = exec.try_map(&ranges, |r| -> Result<(Vec<(String, Tensor)>, Vec<f64>)> {
        let mut tape = Tape::new();
        let (loss, aux) = build(&mut tape, frozen, r.clone())?;
        tape.backward(loss)?;
        Ok((tape.param_grads(), aux))
    })?;
    let mut sums: Vec<f64> = Vec::new();
    for (grads, aux) in shards {
        for (name, g) in &grads {
            store.accumulate_grad(name, g)?;
        }
        if sums.is_empty() {
            sums = aux;
        } else {
            for (s, a) in sums.iter_mut().zip(aux) {
                *s += a;
            }
        }
    }
    Ok(sums)
}

/// One line of a loss log: `epoch,total,recon,hidden,kl`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub hidden: f64,
    pub kl: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,total,recon,hidden,kl";

pub fn loss_log_to_string(log: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.epoch, r.total, r.recon, r.hidden, r.kl);
    }
    s
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_log_to_string(log)).map_err(|e| Error::io(path, e))
}

/// Means of the recon column over consecutive blocks of `window` epochs.
pub fn smoothed_recon(log: &[LossRecord], window: usize) -> Vec<f64> {
    log.chunks(window.max(1))
        .map(|c| c.iter().map(|r| r.recon).sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shard_ranges_cover_in_order() {
        assert!(shard_ranges(0).is_empty());
        assert_eq!(shard_ranges(3), vec![0..1, 1..2, 2..3]);
        assert_eq!(shard_ranges(10), vec![0..3, 3..6, 6..9, 9..10]);
        let r = shard_ranges(64);
        assert_eq!(r.len(), 4);
        assert_eq!(r.iter().map(|r| r.len()).sum::<usize>(), 64);
    }

    #[test]
    fn sharded_gradients_match_across_executors_and_whole_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::new("l", 3, 2);
        let mut store = ParamStore::new();
        lin.init(&mut store, &mut rng).unwrap();
        let xs = Tensor::uniform(&[10, 3], 1.0, &mut rng);
        let build = |tape: &mut Tape, s: &ParamStore, r: std::ops::Range<usize>| {
            let rows: Vec<f64> = xs.data()[r.start * 3..r.end * 3].to_vec();
            let x = tape.constant(Tensor::new(&[r.len(), 3], rows)?)?;
            let b = lin.bind(tape, s, nn::Bind::Train)?;
            let y = b.forward(tape, x)?;
            let l = tape.sum_squares(y)?;
            let v = tape.value(l).item();
            Ok((l, vec![v, r.len() as f64]))
        };
        let mut a = store.clone();
        let mut b = store.clone();
        let sa = accumulate_sharded(Exec::Parallel, &mut a, 10, build).unwrap();
        let sb = accumulate_sharded(Exec::Sequential, &mut b, 10, build).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa[1], 10.0);
        let mut tape = Tape::new();
        let (l, _) = build(&mut tape, &store, 0..10).unwrap();
        tape.backward(l).unwrap();
        for (name, g) in tape.param_grads() {
            let got = a.grad(&name).unwrap();
            for (x, y) in got.data().iter().zip(g.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_log_format() {
        let log = [LossRecord {
            epoch: 1,
            total: 1.5,
            recon: 1.0,
            hidden: 0.25,
            kl: 250.0,
        }];
        assert_eq!(loss_log_to_string(&log), "epoch,total,recon,hidden,kl\n1,1.5,1.0,0.25,250.0\n");
    }
}
