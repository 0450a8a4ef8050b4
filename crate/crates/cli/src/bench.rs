use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use dvox::ops::{
    conv3d_backward, conv3d_forward, deformable_conv3d_backward, deformable_conv3d_forward, ConvSpec,
    DeformableConvSpec,
};
use dvox::{Error, Real, Rng, Shape, Tensor5};

/// One benchmark shape: a cubic volume of `extent`, `channels` in and out,
/// cubic kernel `k`, batch one, extent-preserving padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSize {
    pub extent: usize,
    pub channels: usize,
    pub k: usize,
}

impl FromStr for BenchSize {
    type Err = String;

    /// `EXTENTxCHANNELSxK`, e.g. `16x8x3`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("size `{s}` is not EXTENTxCHANNELSxK"))?;
        match nums[..] {
            [extent, channels, k] if extent > 0 && channels > 0 && k % 2 == 1 && k <= 15 => Ok(Self { extent, channels, k }),
            [_, _, _] => Err(format!("size `{s}` needs positive extent and channels and an odd kernel up to 15")),
            _ => Err(format!("size `{s}` is not EXTENTxCHANNELSxK")),
        }
    }
}

impl BenchSize {
    fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.channels, [self.k; 3]).with_padding([self.k / 2; 3])
    }
}

/// Peak-memory estimate in bytes for one forward+backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub offset_channels: usize,
    pub regular: u64,
    pub deformable: u64,
    /// Bytes per offset channel: the offset map and its gradient over the
    /// output grid, plus one predictor filter with bias and their gradients.
    pub per_offset_channel: u64,
}

impl MemoryEstimate {
    pub fn overhead(&self) -> u64 {
        self.deformable - self.regular
    }
}

/// Counts values held at the peak of a regular or deformable forward+backward
/// pass: input, output, parameters, the column buffer, and a gradient for each.
pub fn estimate(size: BenchSize, bytes: usize) -> Result<MemoryEstimate, Error> {
    let overflow = || Error::Capacity(format!("{size:?} overflows the memory estimate"));
    let offset_channels = DeformableConvSpec::new(size.spec()).offset_channels();
    let (c, k, e, b) = (size.channels as u64, size.k as u64, size.extent as u64, bytes as u64);
    let counts = || -> Option<(u64, u64)> {
        let taps = k.checked_pow(3)?;
        let l = e.checked_pow(3)?;
        let cl = c.checked_mul(l)?;
        let params = c.checked_mul(c)?.checked_mul(taps)?.checked_add(c)?;
        let columns = c.checked_mul(taps)?.checked_mul(l)?;
        let regular = cl.checked_mul(2)?.checked_add(params)?.checked_add(columns)?.checked_mul(2)?;
        let per_channel = l.checked_add(c.checked_mul(taps)?)?.checked_add(1)?.checked_mul(2)?;
        Some((regular.checked_mul(b)?, per_channel.checked_mul(b)?))
    };
    let (regular, per_offset_channel) = counts().ok_or_else(overflow)?;
    let deformable = per_offset_channel
        .checked_mul(offset_channels as u64)
        .and_then(|o| o.checked_add(regular))
        .ok_or_else(overflow)?;
    Ok(MemoryEstimate {
        offset_channels,
        regular,
        deformable,
        per_offset_channel,
    })
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub size: BenchSize,
    pub memory: MemoryEstimate,
    pub regular_secs: f64,
    pub deformable_secs: f64,
}

/// Checks every size against `max_bytes` before anything is allocated.
pub fn plan(sizes: &[BenchSize], bytes: usize, max_bytes: u64) -> Result<Vec<MemoryEstimate>, Error> {
    sizes
        .iter()
        .map(|&s| {
            let m = estimate(s, bytes)?;
            if m.deformable > max_bytes {
                return Err(Error::Capacity(format!(
                    "{}x{}x{} needs about {} MiB, limit is {} MiB",
                    s.extent,
                    s.channels,
                    s.k,
                    m.deformable >> 20,
                    max_bytes >> 20
                )));
            }
            Ok(m)
        })
        .collect()
}

pub fn run<T: Real>(sizes: &[BenchSize], max_bytes: u64, reps: usize, seed: u64) -> Result<Vec<BenchRow>, Error> {
    let memory = plan(sizes, T::BYTES, max_bytes)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for (i, (&size, memory)) in sizes.iter().zip(memory).enumerate() {
        let mut rng = Rng::new(seed).split(i as u64);
        let spec = size.spec();
        let dspec = DeformableConvSpec::new(spec);
        let e = size.extent;
        let x = Tensor5::<T>::randn(Shape::new(1, size.channels, e, e, e), &mut rng, 0.0, 1.0)?;
        let w = Tensor5::<T>::randn(spec.weight_shape(), &mut rng, 0.0, 0.1)?;
        let b = vec![T::zero(); size.channels];
        // Small random offsets so taps land between lattice points.
        let ow = Tensor5::<T>::randn(dspec.offset_predictor().weight_shape(), &mut rng, 0.0, 0.01)?;
        let ob = vec![T::zero(); dspec.offset_channels()];

        let start = Instant::now();
        for _ in 0..reps {
            let y = conv3d_forward(&x, &w, &b, &spec)?;
            conv3d_backward(&y, &x, &w, &spec)?;
        }
        let regular_secs = start.elapsed().as_secs_f64() / reps as f64;

        let start = Instant::now();
        for _ in 0..reps {
            let (y, offsets) = deformable_conv3d_forward(&x, &w, &b, &ow, &ob, &dspec)?;
            deformable_conv3d_backward(&y, &x, &w, &ow, &offsets, &dspec)?;
        }
        let deformable_secs = start.elapsed().as_secs_f64() / reps as f64;
        rows.push(BenchRow {
            size,
            memory,
            regular_secs,
            deformable_secs,
        });
    }
    Ok(rows)
}

/// Problems with the memory arithmetic: the offset map must have `3·k³`
/// channels and the deformable overhead must be linear in that count.
pub fn verify(rows: &[BenchRow]) -> Vec<String> {
    let mut problems = Vec::new();
    for r in rows {
        let expected = 3 * r.size.k.pow(3);
        if r.memory.offset_channels != expected {
            problems.push(format!("{:?}: {} offset channels, expected {expected}", r.size, r.memory.offset_channels));
        }
        if r.memory.overhead() != r.memory.per_offset_channel * expected as u64 {
            problems.push(format!("{:?}: overhead is not proportional to 3·k³", r.size));
        }
    }
    problems
}

/// Deterministic columns; timings go to [`timing_csv`].
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("extent,channels,k,offset_channels,regular_bytes,deformable_bytes,overhead_bytes\n");
    for r in rows {
        let m = &r.memory;
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.size.extent,
            r.size.channels,
            r.size.k,
            m.offset_channels,
            m.regular,
            m.deformable,
            m.overhead()
        )
        .unwrap();
    }
    s
}

pub fn timing_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("extent,channels,k,regular_secs,deformable_secs\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.6},{:.6}",
            r.size.extent, r.size.channels, r.size.k, r.regular_secs, r.deformable_secs
        )
        .unwrap();
    }
    s
}

pub fn to_table(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "extent  channels  k  offset_ch  regular_MiB  deform_MiB  regular_s  deform_s  slowdown\n",
    );
    let mib = |b: u64| b as f64 / (1u64 << 20) as f64;
    for r in rows {
        writeln!(
            s,
            "{:>6}  {:>8}  {}  {:>9}  {:>11.2}  {:>10.2}  {:>9.4}  {:>8.4}  {:>7.2}x",
            r.size.extent,
            r.size.channels,
            r.size.k,
            r.memory.offset_channels,
            mib(r.memory.regular),
            mib(r.memory.deformable),
            r.regular_secs,
            r.deformable_secs,
            r.deformable_secs / r.regular_secs.max(1e-12)
        )
        .unwrap();
    }
    s
}
