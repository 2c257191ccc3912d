#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdc_core::groundtruth::{build_partition, IntervalPartition, PartitionScheme};
use sdc_core::losses::{ClassLogits, CounterOutputs, GroundTruth, HeadOutputs, Mode};
use sdc_core::{CountGrid, Grid};

mod dd;
use dd::{abs, dd, exp, ln, Dd};

/// A random loss instance: grids no larger than 4×4, one or two divisions.
pub struct Instance {
    pub outputs: HeadOutputs,
    pub gt: GroundTruth,
    pub partition: IntervalPartition,
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Grid {
    Grid::new(h, w, (0..h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_instance(mode: Mode, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2usize);
    let (h0, w0) = if n == 1 {
        (rng.random_range(1..=2usize), rng.random_range(1..=2usize))
    } else {
        (1, 1)
    };
    let scheme = if rng.random_bool(0.5) {
        PartitionScheme::OneLinear
    } else {
        PartitionScheme::TwoLinear
    };
    let partition = build_partition(4.0, scheme).unwrap();

    // consistent ground-truth pyramid from the finest level up
    let (hf, wf) = (h0 << n, w0 << n);
    let finest: Vec<f64> = (0..hf * wf)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.0..2.5) })
        .collect();
    let mut levels = vec![CountGrid::new(hf, wf, finest).unwrap()];
    for _ in 0..n {
        let next = levels.last().unwrap().block_sum2().unwrap();
        levels.push(next);
    }
    levels.reverse();
    let gt = GroundTruth::from_counts(levels, &partition).unwrap();

    let dims: Vec<(usize, usize)> = (0..=n).map(|i| (h0 << i, w0 << i)).collect();
    let counter = match mode {
        Mode::Reg => CounterOutputs::Reg(
            dims.iter().map(|&(h, w)| random_grid(&mut rng, h, w, 0.0, 6.0)).collect(),
        ),
        Mode::Cls => {
            let k = partition.num_classes();
            CounterOutputs::Cls(
                dims.iter()
                    .map(|&(h, w)| {
                        let data = (0..h * w * k).map(|_| rng.random_range(-2.0..2.0)).collect();
                        ClassLogits::new(h, w, k, data).unwrap()
                    })
                    .collect(),
            )
        }
    };
    let mask_logits = dims[1..].iter().map(|&(h, w)| random_grid(&mut rng, h, w, -3.0, 3.0)).collect();
    let up_logits = dims[1..].iter().map(|&(h, w)| random_grid(&mut rng, h, w, -2.0, 2.0)).collect();
    Instance {
        outputs: HeadOutputs {
            counter,
            mask_logits,
            up_logits,
        },
        gt,
        partition,
    }
}

/// Flat double-double copy of the head outputs in `Gradients::flatten`
/// order, plus the per-stage grid shapes needed to walk it.
#[derive(Clone)]
struct DdInputs {
    mode: Mode,
    k: usize,
    dims: Vec<(usize, usize)>,
    values: Vec<Dd>,
}

impl DdInputs {
    fn new(o: &HeadOutputs, k: usize) -> Self {
        let mut values = Vec::new();
        let mut dims = Vec::new();
        let mode = match &o.counter {
            CounterOutputs::Reg(v) => {
                for g in v {
                    dims.push(g.dims());
                    values.extend(g.values().iter().map(|&x| dd(x)));
                }
                Mode::Reg
            }
            CounterOutputs::Cls(v) => {
                for l in v {
                    dims.push(l.dims());
                    values.extend(l.values().iter().map(|&x| dd(x)));
                }
                Mode::Cls
            }
        };
        for g in o.mask_logits.iter().chain(&o.up_logits) {
            values.extend(g.values().iter().map(|&x| dd(x)));
        }
        Self { mode, k, dims, values }
    }
}

fn dd_max(mut v: impl Iterator<Item = Dd>) -> Dd {
    let first = v.next().expect("non-empty");
    v.fold(first, |a, b| if b > a { b } else { a })
}

fn dd_min(a: Dd, b: Dd) -> Dd {
    if a < b { a } else { b }
}

fn dd_sum(v: impl Iterator<Item = Dd>) -> Dd {
    v.fold(dd(0.0), |a, b| a + b)
}

fn block(w: usize, j: usize, k: usize) -> [usize; 4] {
    let r0 = 2 * j * w + 2 * k;
    [r0, r0 + 1, r0 + w, r0 + w + 1]
}

/// Total loss evaluated from scratch in double-double arithmetic.
fn dd_total_loss(x: &DdInputs, gt: &GroundTruth, partition: &IntervalPartition) -> Dd {
    let c_max = dd(partition.c_max());
    let values: Vec<Dd> = partition.class_values().into_iter().map(dd).collect();
    let n = x.dims.len();
    let per_cell = if x.mode == Mode::Cls { x.k } else { 1 };

    let mut off = 0;
    let mut counter_raw = Vec::new();
    for &(h, w) in &x.dims {
        counter_raw.push(&x.values[off..off + h * w * per_cell]);
        off += h * w * per_cell;
    }
    let mut masks = Vec::new();
    for &(h, w) in &x.dims[1..] {
        let m: Vec<Dd> = x.values[off..off + h * w].iter().map(|&l| dd(1.0) / (exp(-l) + 1.0)).collect();
        masks.push(m);
        off += h * w;
    }
    let mut ups = Vec::new();
    for &(h, w) in &x.dims[1..] {
        let logits = &x.values[off..off + h * w];
        let mut u = vec![dd(0.0); h * w];
        for j in 0..h / 2 {
            for k in 0..w / 2 {
                let idx = block(w, j, k);
                let m = dd_max(idx.iter().map(|&i| logits[i]));
                let e: Vec<Dd> = idx.iter().map(|&i| exp(logits[i] - m)).collect();
                let z = dd_sum(e.iter().copied());
                for (t, &i) in idx.iter().enumerate() {
                    u[i] = e[t] / z;
                }
            }
        }
        ups.push(u);
        off += h * w;
    }

    let mut counts = Vec::new();
    let mut l_counter = dd(0.0);
    for (i, raw) in counter_raw.iter().enumerate() {
        let cells = x.dims[i].0 * x.dims[i].1;
        let gt_i = gt.counts[i].values();
        let mut c = Vec::with_capacity(cells);
        let mut stage = dd(0.0);
        for cell in 0..cells {
            match x.mode {
                Mode::Reg => {
                    let p = raw[cell];
                    c.push(p);
                    stage += abs(dd_min(p, c_max) - dd_min(dd(gt_i[cell]), c_max));
                }
                Mode::Cls => {
                    let l = &raw[cell * x.k..(cell + 1) * x.k];
                    let m = dd_max(l.iter().copied());
                    let e: Vec<Dd> = l.iter().map(|&v| exp(v - m)).collect();
                    let z = dd_sum(e.iter().copied());
                    c.push(dd_sum(e.iter().zip(&values).map(|(&e, &v)| e * v)) / z);
                    stage += m + ln(z) - l[gt.classes[i][cell]];
                }
            }
        }
        l_counter += stage / cells as f64;
        counts.push(c);
    }

    let mut div = counts[0].clone();
    for i in 1..n {
        let (ph, pw) = x.dims[i - 1];
        let w = x.dims[i].1;
        let mut next = vec![dd(0.0); 4 * ph * pw];
        for j in 0..ph {
            for k in 0..pw {
                for a in block(w, j, k) {
                    let m = masks[i - 1][a];
                    next[a] = (dd(1.0) - m) * div[j * pw + k] * ups[i - 1][a] + m * counts[i][a];
                }
            }
        }
        div = next;
    }
    let last = gt.counts[n - 1].values();
    let l_merge = dd_sum(div.iter().zip(last).map(|(&d, &g)| abs(d - g))) / div.len() as f64;

    let mut l_up = dd(0.0);
    let mut l_div = dd(0.0);
    let mut l_eq = dd(0.0);
    for i in 1..n {
        let t = gt.upmaps[i - 1].values();
        l_up += dd_sum(ups[i - 1].iter().zip(t).map(|(&u, &t)| abs(u - t))) / t.len() as f64;
        let (ph, pw) = x.dims[i - 1];
        let w = x.dims[i].1;
        for j in 0..ph {
            for k in 0..pw {
                let g = gt.counts[i - 1].values()[j * pw + k];
                let idx = block(w, j, k);
                if g > partition.c_max() {
                    l_div -= ln(dd_max(idx.iter().map(|&a| masks[i - 1][a])));
                } else if x.mode == Mode::Reg {
                    let s = dd_sum(idx.iter().map(|&a| counts[i][a]));
                    l_eq += abs(counts[i - 1][j * pw + k] - s);
                }
            }
        }
    }
    l_counter + l_merge + l_up + l_div + l_eq
}

/// Central finite differences of the total loss with step `h`, one
/// coordinate at a time. The loss is re-evaluated independently of the
/// library in double-double precision so cancellation stays far below the
/// gradient magnitudes being checked.
pub fn finite_difference_gradient(inst: &Instance, h: f64) -> Vec<f64> {
    let base = DdInputs::new(&inst.outputs, inst.partition.num_classes());
    (0..base.values.len())
        .map(|i| {
            let mut plus = base.clone();
            plus.values[i] += h;
            let mut minus = base.clone();
            minus.values[i] -= h;
            let diff = dd_total_loss(&plus, &inst.gt, &inst.partition)
                - dd_total_loss(&minus, &inst.gt, &inst.partition);
            (diff / (2.0 * h)).hi()
        })
        .collect()
}

/// The double-double loss at the unperturbed point, for cross-checking.
pub fn oracle_loss(inst: &Instance) -> f64 {
    let x = DdInputs::new(&inst.outputs, inst.partition.num_classes());
    dd_total_loss(&x, &inst.gt, &inst.partition).hi()
}

/// Worst relative error over coordinates whose analytic magnitude exceeds `floor`.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() > floor {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
    }
    worst
}
