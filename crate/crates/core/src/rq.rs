//! Residual quantization bottleneck: phoneme-level pooling, depth-stacked
//! codebooks with a reserved zero code, straight-through quantization,
//! commitment loss and EMA codebook updates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EMA_DECAY: f64 = 0.99;

/// Checks that `ranges` tile `[0, frames)` in order with non-empty parts.
pub fn validate_boundaries(ranges: &[(usize, usize)], frames: usize) -> Result<()> {
    if ranges.is_empty() {
        return Err(Error::Boundary("no phoneme ranges".into()));
    }
    let mut next = 0;
    for (i, &(s, e)) in ranges.iter().enumerate() {
        if s != next {
            let kind = if s < next { "overlaps" } else { "leaves a gap before" };
            return Err(Error::Boundary(format!("range {i} [{s}, {e}) {kind} frame {next}")));
        }
        if e <= s {
            return Err(Error::Boundary(format!("range {i} [{s}, {e}) is empty")));
        }
        next = e;
    }
    if next != frames {
        return Err(Error::Boundary(format!("ranges end at {next}, expected {frames}")));
    }
    Ok(())
}

/// Consecutive `[start, end)` ranges from per-phoneme frame counts.
pub fn boundaries_from_durations(durations: &[usize]) -> Vec<(usize, usize)> {
    let mut at = 0;
    durations
        .iter()
        .map(|&d| {
            let r = (at, at + d);
            at += d;
            r
        })
        .collect()
}

/// Mean of `frames[T×d]` over each range, giving `[P×d]`.
///
/// The mean is taken relative to each range's first row, so a range of
/// identical rows pools to that row exactly.
pub fn phoneme_pool<S: Scalar>(tape: &mut Tape<S>, frames: Var, ranges: &[(usize, usize)]) -> Result<Var> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "phoneme_pool",
            detail: format!("expected [frames × width], got {shape:?}"),
        });
    }
    let t = shape[0];
    validate_boundaries(ranges, t)?;
    let p = ranges.len();
    let firsts: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    let mut anchor_idx = Vec::with_capacity(t);
    let mut pool = vec![S::zero(); p * t];
    for (i, &(s, e)) in ranges.iter().enumerate() {
        let w = S::one() / S::count(e - s);
        for f in s..e {
            anchor_idx.push(s);
            pool[i * t + f] = w;
        }
    }
    let anchors = tape.gather_rows(frames, &anchor_idx)?;
    let diff = tape.sub(frames, anchors)?;
    let pool = tape.constant(Tensor::new(&[p, t], pool)?);
    let mean_diff = tape.matmul(pool, diff)?;
    let base = tape.gather_rows(frames, &firsts)?;
    tape.add(base, mean_diff)
}

/// `depth` codebooks of `size` codes in `dim` dimensions. Code 0 of every
/// codebook is the zero vector and is never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct RQCodebook<S> {
    pub depth: usize,
    pub size: usize,
    pub dim: usize,
    pub decay: f64,
    codes: Vec<Tensor<S>>,
    counts: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
}

/// Per-depth code choices and the cumulative reconstructions.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode<S> {
    /// `indices[n][p]`: code chosen at depth `n` for row `p`.
    pub indices: Vec<Vec<usize>>,
    /// `prefix[n]`: sum of the chosen codes at depths `0..=n`, `[P×d]`.
    pub prefix: Vec<Tensor<S>>,
}

impl<S: Scalar> StyleCode<S> {
    /// Full-depth reconstruction.
    pub fn quantized(&self) -> &Tensor<S> {
        self.prefix.last().expect("depth >= 1")
    }
}

impl<S: Scalar> RQCodebook<S> {
    /// Random codes with standard deviation `scale` (code 0 stays zero).
    pub fn new<R: Rng + ?Sized>(depth: usize, size: usize, dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if depth == 0 || size < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "codebook needs depth >= 1, size >= 2, dim >= 1 (got {depth}, {size}, {dim})"
            )));
        }
        let codes = (0..depth)
            .map(|_| {
                let mut c = Tensor::<S>::randn(&[size, dim], rng).map(|x| x * S::lit(scale));
                c.data_mut()[..dim].iter_mut().for_each(|x| *x = S::zero());
                c
            })
            .collect();
        Self::from_codes(codes)
    }

    /// Builds from explicit `[size × dim]` tables; row 0 must be zero.
    pub fn from_codes(codes: Vec<Tensor<S>>) -> Result<Self> {
        let first = codes.first().ok_or_else(|| Error::Config("no codebooks".into()))?;
        if first.rank() != 2 {
            return Err(Error::Shape {
                op: "codebook",
                detail: format!("codes must be [size × dim], got {:?}", first.shape()),
            });
        }
        let (size, dim) = (first.rows(), first.cols());
        for c in &codes {
            if c.shape() != [size, dim] {
                return Err(Error::dim("codebook", c.shape(), &[size, dim]));
            }
            if c.row(0).iter().any(|&x| x != S::zero()) {
                return Err(Error::Config("code 0 must be the zero vector".into()));
            }
        }
        let depth = codes.len();
        Ok(Self {
            depth,
            size,
            dim,
            decay: EMA_DECAY,
            counts: vec![vec![1.0; size]; depth],
            sums: codes.iter().map(|c| c.data().iter().map(|x| x.as_f64()).collect()).collect(),
            codes,
        })
    }

    pub fn codes(&self, depth: usize) -> &Tensor<S> {
        &self.codes[depth]
    }

    /// Greedy residual quantization of the rows of `z[P×dim]`.
    ///
    /// At each depth the code minimising `‖z − (prefix + c)‖²` is chosen,
    /// lowest index on ties; the zero code keeps the previous prefix, so the
    /// reconstruction error never grows with depth.
    pub fn encode(&self, z: &Tensor<S>) -> Result<StyleCode<S>> {
        if z.rank() != 2 || z.cols() != self.dim {
            return Err(Error::dim("rq_encode", z.shape(), &[self.dim]));
        }
        let (p, d) = (z.rows(), self.dim);
        let mut prefix = Tensor::<S>::zeros(&[p, d]);
        let mut indices = Vec::with_capacity(self.depth);
        let mut prefixes = Vec::with_capacity(self.depth);
        for book in &self.codes {
            let mut idx = Vec::with_capacity(p);
            let mut next = prefix.clone();
            for r in 0..p {
                let zr = z.row(r);
                let pr = prefix.row(r);
                let mut best = 0;
                let mut best_d = S::infinity();
                for k in 0..self.size {
                    let c = book.row(k);
                    let mut dist = S::zero();
                    for j in 0..d {
                        let e = zr[j] - (pr[j] + c[j]);
                        dist += e * e;
                    }
                    if dist < best_d {
                        best_d = dist;
                        best = k;
                    }
                }
                idx.push(best);
                let c = book.row(best);
                for j in 0..d {
                    next.data_mut()[r * d + j] = pr[j] + c[j];
                }
            }
            indices.push(idx);
            prefix = next;
            prefixes.push(prefix.clone());
        }
        Ok(StyleCode {
            indices,
            prefix: prefixes,
        })
    }

    /// Reconstruction `Σ_n codes[n][indices[n]]` from indices alone.
    pub fn decode(&self, indices: &[Vec<usize>]) -> Result<Tensor<S>> {
        if indices.len() != self.depth {
            return Err(Error::dim("rq_decode", &[indices.len()], &[self.depth]));
        }
        let p = indices[0].len();
        let mut out = Tensor::<S>::zeros(&[p.max(1), self.dim]);
        for (n, idx) in indices.iter().enumerate() {
            for (r, &k) in idx.iter().enumerate() {
                if k >= self.size {
                    return Err(Error::Bounds {
                        op: "rq_decode",
                        index: k,
                        bound: self.size,
                    });
                }
                let c = self.codes[n].row(k).to_vec();
                for (j, cj) in c.into_iter().enumerate() {
                    out.data_mut()[r * self.dim + j] += cj;
                }
            }
        }
        Ok(out)
    }

    /// EMA update of the codes chosen in `code` for inputs `z`. Each depth
    /// sees the residual left by the shallower depths.
    pub fn update(&mut self, z: &Tensor<S>, code: &StyleCode<S>) -> Result<()> {
        if z.rank() != 2 || z.cols() != self.dim || code.indices.len() != self.depth {
            return Err(Error::dim("codebook_update", z.shape(), &[self.depth, self.dim]));
        }
        let (p, d) = (z.rows(), self.dim);
        let a = self.decay;
        for n in 0..self.depth {
            let mut hits = vec![0usize; self.size];
            let mut acc = vec![0.0f64; self.size * d];
            for r in 0..p {
                let k = code.indices[n][r];
                hits[k] += 1;
                for j in 0..d {
                    let base = if n == 0 { S::zero() } else { code.prefix[n - 1].at(r, j) };
                    acc[k * d + j] += (z.at(r, j) - base).as_f64();
                }
            }
            for k in 1..self.size {
                if hits[k] == 0 {
                    continue;
                }
                self.counts[n][k] = a * self.counts[n][k] + (1.0 - a) * hits[k] as f64;
                for j in 0..d {
                    let s = &mut self.sums[n][k * d + j];
                    *s = a * *s + (1.0 - a) * acc[k * d + j];
                    self.codes[n].data_mut()[k * d + j] = S::lit(*s / self.counts[n][k]);
                }
            }
        }
        Ok(())
    }

    /// Mean squared full-depth reconstruction error per row.
    pub fn quantization_error(&self, z: &Tensor<S>) -> Result<f64> {
        let code = self.encode(z)?;
        let q = code.quantized();
        let se: f64 = z.data().iter().zip(q.data()).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum();
        Ok(se / z.rows() as f64)
    }

    /// Copies the codes into `store` as `{prefix}.{n}` entries.
    pub fn write_to(&self, store: &mut ParameterStore<S>, prefix: &str) -> Result<()> {
        for (n, c) in self.codes.iter().enumerate() {
            let name = format!("{prefix}.{n}");
            match store.get_mut(&name) {
                Some(t) => t.data_mut().copy_from_slice(c.data()),
                None => store.insert(name, c.clone())?,
            }
        }
        Ok(())
    }

    /// Reads codes written by [`RQCodebook::write_to`]. EMA statistics restart.
    pub fn read_from(store: &ParameterStore<S>, prefix: &str) -> Result<Self> {
        let mut codes = Vec::new();
        while let Some(t) = store.get(&format!("{prefix}.{}", codes.len())) {
            codes.push(t.clone());
        }
        Self::from_codes(codes)
    }
}

/// Straight-through quantization: the forward value is the full-depth
/// reconstruction, the backward pass copies the gradient to `z_e`.
pub fn quantize_st<S: Scalar>(tape: &mut Tape<S>, z_e: Var, book: &RQCodebook<S>) -> Result<(Var, StyleCode<S>)> {
    let code = book.encode(tape.value(z_e))?;
    let shift = code.quantized().zip_map(tape.value(z_e), |q, z| q - z)?;
    let shift = tape.constant(shift);
    let zq = tape.add(z_e, shift)?;
    Ok((zq, code))
}

/// `Σ_n ‖z_e − sg(prefix_n)‖²`, differentiable in `z_e` only.
pub fn commit_loss<S: Scalar>(tape: &mut Tape<S>, z_e: Var, code: &StyleCode<S>) -> Result<Var> {
    let mut terms = Vec::with_capacity(code.prefix.len());
    for p in &code.prefix {
        let pv = tape.constant(p.clone());
        let d = tape.sub(z_e, pv)?;
        let sq = tape.square(d);
        terms.push(tape.sum(sq));
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.sum(all))
}
