//! Per-segment moment accumulation.
//!
//! Within a segment's bounding box the indicator `I` of the segment is
//! reduced along x into row moments `sum w_x(dx) I X^m` for `m = 0, 1, 2`
//! (prefix sums for ball weights, explicit row filters for Gaussian weights,
//! one filter per distinct stencil half-width). A descriptor then needs one
//! lookup per stencil row instead of one per stencil offset, because `Z` and
//! `Y` are constant along a row.
//!
//! Work is split into (segment, z-chunk) tasks. Chunk boundaries do not
//! depend on the thread count and every voxel is produced by exactly one
//! task with a fixed accumulation order, so the result is bit-identical for
//! any pool size.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::volume::LabelVolume;

use super::stencil::{NeighborhoodStencil, StencilRow};
use super::{build_stencil, LsdError, LsdParams, LsdVolume, Weighting, LSD_CHANNELS};

const CHUNK_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FastStats {
    pub segments: usize,
    /// Number of independent (segment, chunk) tasks scheduled.
    pub tasks: usize,
    pub stencil_offsets: usize,
    pub stencil_rows: usize,
}

#[derive(Debug, Clone, Copy)]
struct BBox {
    lo: [usize; 3],
    hi: [usize; 3], // inclusive
}

impl BBox {
    fn at(p: [usize; 3]) -> Self {
        Self { lo: p, hi: p }
    }

    fn include(&mut self, p: [usize; 3]) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a]);
        }
    }

    fn dims(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }
}

fn segment_boxes(labels: &LabelVolume) -> BTreeMap<u64, BBox> {
    let [d, h, w] = labels.shape();
    let mut boxes: BTreeMap<u64, BBox> = BTreeMap::new();
    let data = labels.data();
    for z in 0..d {
        for y in 0..h {
            let row = &data[(z * h + y) * w..(z * h + y + 1) * w];
            let mut x = 0;
            while x < w {
                let id = row[x];
                let start = x;
                while x < w && row[x] == id {
                    x += 1;
                }
                if id == 0 {
                    continue;
                }
                boxes
                    .entry(id)
                    .and_modify(|b| {
                        b.include([z, y, start]);
                        b.include([z, y, x - 1]);
                    })
                    .or_insert_with(|| {
                        let mut b = BBox::at([z, y, start]);
                        b.include([z, y, x - 1]);
                        b
                    });
            }
        }
    }
    boxes
}

/// x-row moment sums of one segment's indicator over its bounding box, with
/// `X` measured from the box's low x edge.
enum RowMoments {
    /// Inclusive-exclusive prefix sums, `bw + 1` entries per row.
    Prefix { sums: Vec<[f64; 3]>, stride: usize },
    /// Filtered rows per distinct half-width, `bw` entries per row.
    Filtered {
        maps: Vec<Vec<[f64; 3]>>,
        stride: usize,
    },
}

/// A stencil row with its weight folded into the z/y moment factors.
#[derive(Debug, Clone, Copy)]
struct PreparedRow {
    dy: isize,
    half_width: usize,
    /// Index into `RowMoments::Filtered::maps`.
    map: usize,
    w: f64,
    wz: f64,
    wy: f64,
    wzz: f64,
    wyy: f64,
    wzy: f64,
}

/// Consecutive rows sharing one `dz`; their `dy` values are
/// `dy_first, dy_first + 1, ...`.
#[derive(Debug, Clone, Copy)]
struct RowGroup {
    dz: isize,
    dy_first: isize,
    start: usize,
    len: usize,
}

struct PreparedStencil {
    rows: Vec<PreparedRow>,
    groups: Vec<RowGroup>,
    /// Distinct half-widths, in first-seen order.
    widths: Vec<usize>,
}

fn prepare_rows(stencil: &NeighborhoodStencil) -> PreparedStencil {
    let [sz, sy, _] = stencil.spacing().as_array();
    let mut widths: Vec<usize> = Vec::new();
    let rows = stencil
        .rows()
        .iter()
        .map(|row: &StencilRow| {
            let map = match widths.iter().position(|&k| k == row.half_width) {
                Some(i) => i,
                None => {
                    widths.push(row.half_width);
                    widths.len() - 1
                }
            };
            let (z, y, w) = (row.dz as f64 * sz, row.dy as f64 * sy, row.zy_weight);
            PreparedRow {
                dy: row.dy as isize,
                half_width: row.half_width,
                map,
                w,
                wz: w * z,
                wy: w * y,
                wzz: w * z * z,
                wyy: w * y * y,
                wzy: w * z * y,
            }
        })
        .collect();
    let mut groups: Vec<RowGroup> = Vec::new();
    for (i, row) in stencil.rows().iter().enumerate() {
        let (dz, dy) = (row.dz as isize, row.dy as isize);
        match groups.last_mut() {
            Some(g) if g.dz == dz => {
                debug_assert_eq!(g.dy_first + g.len as isize, dy);
                g.len += 1;
            }
            _ => groups.push(RowGroup {
                dz,
                dy_first: dy,
                start: i,
                len: 1,
            }),
        }
    }
    PreparedStencil {
        rows,
        groups,
        widths,
    }
}

impl RowMoments {
    fn build(
        labels: &LabelVolume,
        id: u64,
        bbox: &BBox,
        stencil: &NeighborhoodStencil,
        widths: &[usize],
    ) -> Self {
        let [bd, bh, bw] = bbox.dims();
        let sx = stencil.spacing().x_nm;
        let rows = bd * bh;
        let xs: Vec<f64> = (0..bw).map(|x| x as f64 * sx).collect();
        let mut indicator = vec![false; rows * bw];
        for zl in 0..bd {
            for yl in 0..bh {
                let src = labels.index(bbox.lo[0] + zl, bbox.lo[1] + yl, bbox.lo[2]);
                let row = &labels.data()[src..src + bw];
                let dst = &mut indicator[(zl * bh + yl) * bw..(zl * bh + yl + 1) * bw];
                for (o, &l) in dst.iter_mut().zip(row) {
                    *o = l == id;
                }
            }
        }

        match stencil.weighting() {
            Weighting::Ball => {
                let stride = bw + 1;
                let mut sums = vec![[0.0; 3]; rows * stride];
                for r in 0..rows {
                    let ind = &indicator[r * bw..(r + 1) * bw];
                    let mut c = [0.0; 3];
                    let out = &mut sums[r * stride..(r + 1) * stride];
                    for x in 0..bw {
                        if ind[x] {
                            c[0] += 1.0;
                            c[1] += xs[x];
                            c[2] += xs[x] * xs[x];
                        }
                        out[x + 1] = c;
                    }
                }
                RowMoments::Prefix { sums, stride }
            }
            Weighting::Gaussian => {
                let maps = widths
                    .iter()
                    .map(|&k| {
                        let taps: Vec<f64> = (-(k as i32)..=k as i32)
                            .map(|dx| stencil.x_weight(dx))
                            .collect();
                        let mut m = vec![[0.0; 3]; rows * bw];
                        for r in 0..rows {
                            let ind = &indicator[r * bw..(r + 1) * bw];
                            for x in 0..bw {
                                let lo = x.saturating_sub(k);
                                let hi = (x + k).min(bw - 1);
                                let mut c = [0.0; 3];
                                for nx in lo..=hi {
                                    if ind[nx] {
                                        let t = taps[nx + k - x];
                                        c[0] += t;
                                        c[1] += t * xs[nx];
                                        c[2] += t * xs[nx] * xs[nx];
                                    }
                                }
                                m[r * bw + x] = c;
                            }
                        }
                        m
                    })
                    .collect();
                RowMoments::Filtered { maps, stride: bw }
            }
        }
    }
}

/// Weighted (count, sum X, sum X^2) of one clipped stencil row.
trait RowLookup: Sync {
    fn get(&self, r: usize, x: usize, row: &PreparedRow, bw: usize) -> [f64; 3];
}

struct PrefixLookup<'a> {
    sums: &'a [[f64; 3]],
    stride: usize,
}

impl RowLookup for PrefixLookup<'_> {
    #[inline(always)]
    fn get(&self, r: usize, x: usize, row: &PreparedRow, bw: usize) -> [f64; 3] {
        let base = r * self.stride;
        let lo = self.sums[base + x.saturating_sub(row.half_width)];
        let hi = self.sums[base + (x + row.half_width + 1).min(bw)];
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
    }
}

struct FilteredLookup<'a> {
    maps: &'a [Vec<[f64; 3]>],
    stride: usize,
}

impl RowLookup for FilteredLookup<'_> {
    #[inline(always)]
    fn get(&self, r: usize, x: usize, row: &PreparedRow, _bw: usize) -> [f64; 3] {
        self.maps[row.map][r * self.stride + x]
    }
}

type TaskOutput = Vec<(usize, [f32; LSD_CHANNELS])>;

fn process_chunk<L: RowLookup>(
    labels: &LabelVolume,
    id: u64,
    bbox: &BBox,
    lookup: &L,
    prepared: &PreparedStencil,
    sx: f64,
    z_range: std::ops::Range<usize>,
) -> TaskOutput {
    let [bd, bh, bw] = bbox.dims();
    let mut out = Vec::new();
    for zl in z_range {
        for yl in 0..bh {
            let gz = bbox.lo[0] + zl;
            let gy = bbox.lo[1] + yl;
            let src = labels.index(gz, gy, bbox.lo[2]);
            let label_row = &labels.data()[src..src + bw];
            for xl in 0..bw {
                if label_row[xl] != id {
                    continue;
                }
                // z and y relative to the voxel, x relative to the box edge
                let mut s = 0.0f64;
                let mut m = [0.0f64; 3];
                let mut q = [0.0f64; 6]; // zz yy xx zy zx yx
                for g in &prepared.groups {
                    let nz = zl as isize + g.dz;
                    if nz < 0 || nz >= bd as isize {
                        continue;
                    }
                    // clip the group's dy range to the box
                    let dy_lo = g.dy_first.max(-(yl as isize));
                    let dy_hi = (g.dy_first + g.len as isize - 1).min((bh - 1 - yl) as isize);
                    if dy_lo > dy_hi {
                        continue;
                    }
                    let first = g.start + (dy_lo - g.dy_first) as usize;
                    let last = g.start + (dy_hi - g.dy_first) as usize;
                    let r_base = (nz as usize * bh + yl) as isize;
                    for row in &prepared.rows[first..=last] {
                        let r = (r_base + row.dy) as usize;
                        let [c0, c1, c2] = lookup.get(r, xl, row, bw);
                        s += row.w * c0;
                        m[0] += row.wz * c0;
                        m[1] += row.wy * c0;
                        m[2] += row.w * c1;
                        q[0] += row.wzz * c0;
                        q[1] += row.wyy * c0;
                        q[2] += row.w * c2;
                        q[3] += row.wzy * c0;
                        q[4] += row.wz * c1;
                        q[5] += row.wy * c1;
                    }
                }
                let mean = [m[0] / s, m[1] / s, m[2] / s];
                let desc = [
                    mean[0] as f32,
                    mean[1] as f32,
                    (mean[2] - xl as f64 * sx) as f32,
                    (q[0] / s - mean[0] * mean[0]).max(0.0) as f32,
                    (q[1] / s - mean[1] * mean[1]).max(0.0) as f32,
                    (q[2] / s - mean[2] * mean[2]).max(0.0) as f32,
                    (q[3] / s - mean[0] * mean[1]) as f32,
                    (q[4] / s - mean[0] * mean[2]) as f32,
                    (q[5] / s - mean[1] * mean[2]) as f32,
                    s as f32,
                ];
                out.push((src + xl, desc));
            }
        }
    }
    out
}

fn process_segment(
    labels: &LabelVolume,
    id: u64,
    bbox: &BBox,
    stencil: &NeighborhoodStencil,
    prepared: &PreparedStencil,
) -> Vec<TaskOutput> {
    let moments = RowMoments::build(labels, id, bbox, stencil, &prepared.widths);
    let sx = stencil.spacing().x_nm;
    let depth = bbox.dims()[0];
    let chunk = |c: usize| {
        let z0 = c * CHUNK_DEPTH;
        z0..(z0 + CHUNK_DEPTH).min(depth)
    };
    let n_chunks = depth.div_ceil(CHUNK_DEPTH);
    match &moments {
        RowMoments::Prefix { sums, stride } => {
            let lookup = PrefixLookup {
                sums,
                stride: *stride,
            };
            (0..n_chunks)
                .into_par_iter()
                .map(|c| process_chunk(labels, id, bbox, &lookup, prepared, sx, chunk(c)))
                .collect()
        }
        RowMoments::Filtered { maps, stride } => {
            let lookup = FilteredLookup {
                maps,
                stride: *stride,
            };
            (0..n_chunks)
                .into_par_iter()
                .map(|c| process_chunk(labels, id, bbox, &lookup, prepared, sx, chunk(c)))
                .collect()
        }
    }
}

/// Descriptors via per-segment row moments. Same contract as
/// [`compute_lsd_oracle`](super::compute_lsd_oracle).
pub fn compute_lsd_fast(labels: &LabelVolume, params: &LsdParams) -> Result<LsdVolume, LsdError> {
    compute_lsd_fast_with_stats(labels, params).map(|(v, _)| v)
}

pub fn compute_lsd_fast_with_stats(
    labels: &LabelVolume,
    params: &LsdParams,
) -> Result<(LsdVolume, FastStats), LsdError> {
    let spacing = labels.spacing();
    params.validate(spacing)?;
    let stencil = build_stencil(spacing, params)?;
    let boxes = segment_boxes(labels);

    let tasks: usize = boxes
        .values()
        .map(|b| b.dims()[0].div_ceil(CHUNK_DEPTH))
        .sum();
    let stats = FastStats {
        segments: boxes.len(),
        tasks,
        stencil_offsets: stencil.len(),
        stencil_rows: stencil.rows().len(),
    };

    let prepared = prepare_rows(&stencil);
    let results: Vec<TaskOutput> = boxes
        .par_iter()
        .flat_map_iter(|(&id, bbox)| process_segment(labels, id, bbox, &stencil, &prepared))
        .collect();

    let n = labels.voxel_count();
    let mut data = vec![0.0f32; n * LSD_CHANNELS];
    for task in results {
        for (idx, desc) in task {
            for (c, v) in desc.into_iter().enumerate() {
                data[c * n + idx] = v;
            }
        }
    }
    Ok((LsdVolume::from_raw(labels.shape(), spacing, data), stats))
}
