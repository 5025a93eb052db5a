//! Jacobi2D halo-exchange mini-app.
//!
//! The grid is tiled over a 2-D chare collection. Each iteration a chare
//! packs its boundary strips (one fine-grained kernel per face on its own
//! stream), sends them to its neighbors over the device zerocopy path,
//! unpacks arriving strips into the halo ring of the active tile buffer,
//! and once all halos are in runs the 5-point stencil into the other tile
//! buffer. Borders are fixed: boundary cells carry their initial values
//! forward unchanged.
//!
//! All arithmetic is plain f64 in a fixed per-cell order, so the final
//! checksum is bit-identical across every decomposition and topology and
//! matches a serial sweep of the full grid.

use crate::config::RunConfig;
use crate::device::OpKind;
use crate::error::{SimError, SimResult};
use crate::metrics::Measurements;
use crate::runtime::{ChareRef, DevPayload, EntryMessage, Mapping, PeTask};
use crate::scalar::TimeScalar;
use crate::sim::SimTime;
use crate::world::{Action, App, HandlerCtx, OpMeta, Outbox, World};

const M_START: u16 = 0;
const M_PACKED: u16 = 1;
const M_RECV: u16 = 2;
const M_DONE: u16 = 3;

/// Per-handler host cost in microseconds.
const HANDLER_COST_US: u64 = 1;

/// Faces in N, S, W, E order; `f ^ 1` is the opposite face.
const FACES: [usize; 4] = [0, 1, 2, 3];

/// Initial grid value: integer-hash derived so every platform computes the
/// same f64 bit pattern.
pub fn initial_value(r: u64, c: u64) -> f64 {
    let h = r
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    ((h >> 20) % 4096) as f64 / 4096.0
}

/// The 5-point update; the serial reference performs the same expression in
/// the same order.
#[inline]
fn stencil_cell(center: f64, north: f64, south: f64, west: f64, east: f64) -> f64 {
    (center + north + south + west + east) / 5.0
}

struct ChareBufs {
    tile: [usize; 2],
    // strips double-buffered by iteration parity: a send buffer may only be
    // repacked two iterations later, after the neighbor consumed it
    send: [[usize; 2]; 4],
    recv: [[usize; 2]; 4],
}

struct ChareState {
    iter: u32,
    next_stencil: u32,
    count: [u32; 2],
    need: u32,
}

pub struct JacobiApp {
    grid: (u64, u64), // (rows, cols)
    iterations: u64,
    odf: u64,
    cdims: (u32, u32),
    tile: (u64, u64), // interior (rows, cols) per tile
    col: u32,
    bufs: Vec<ChareBufs>,
    st: Vec<ChareState>,
    done: u32,
}

impl JacobiApp {
    pub fn from_config<T: TimeScalar>(cfg: &RunConfig<T>) -> SimResult<Self> {
        if cfg.app.odf == 0 {
            return Err(SimError::Config("jacobi2d: odf must be >= 1".into()));
        }
        if cfg.app.grid_x < 3 || cfg.app.grid_y < 3 {
            return Err(SimError::Config(
                "jacobi2d: grid must be at least 3x3".into(),
            ));
        }
        Ok(JacobiApp {
            grid: (cfg.app.grid_y, cfg.app.grid_x),
            iterations: cfg.app.iterations,
            odf: cfg.app.odf,
            cdims: (0, 0),
            tile: (0, 0),
            col: 0,
            bufs: Vec::new(),
            st: Vec::new(),
            done: 0,
        })
    }

    /// Pick the chare grid: the divisor pair of the chare count that evenly
    /// divides the grid with the squarest tiles.
    fn choose_tiling(total: u64, grid: (u64, u64)) -> SimResult<(u32, u32)> {
        let mut best: Option<((u32, u32), u64)> = None;
        for cr in 1..=total {
            if !total.is_multiple_of(cr) {
                continue;
            }
            let cc = total / cr;
            if !grid.0.is_multiple_of(cr) || !grid.1.is_multiple_of(cc) {
                continue;
            }
            let (tr, tc) = (grid.0 / cr, grid.1 / cc);
            if tr < 1 || tc < 1 {
                continue;
            }
            let score = tr.abs_diff(tc);
            if best.is_none_or(|(_, s)| score < s) {
                best = Some(((cr as u32, cc as u32), score));
            }
        }
        best.map(|(dims, _)| dims).ok_or_else(|| {
            SimError::Config(format!(
                "jacobi2d: no tiling of a {}x{} grid into {total} chares divides evenly",
                grid.0, grid.1
            ))
        })
    }

    fn coords(&self, index: u32) -> (u32, u32) {
        (index / self.cdims.1, index % self.cdims.1)
    }

    fn neighbor(&self, index: u32, face: usize) -> Option<u32> {
        let (ci, cj) = self.coords(index);
        let (ni, nj) = match face {
            0 => (ci.checked_sub(1)?, cj),
            1 => {
                if ci + 1 >= self.cdims.0 {
                    return None;
                }
                (ci + 1, cj)
            }
            2 => (ci, cj.checked_sub(1)?),
            3 => {
                if cj + 1 >= self.cdims.1 {
                    return None;
                }
                (ci, cj + 1)
            }
            _ => unreachable!(),
        };
        Some(ni * self.cdims.1 + nj)
    }

    fn strip_len(&self, face: usize) -> u64 {
        if face < 2 {
            self.tile.1
        } else {
            self.tile.0
        }
    }

    /// Stride-aware pack kernel: tile edge row/col into a contiguous strip.
    fn pack_effect(
        tile: usize,
        strip: usize,
        tr: usize,
        tc: usize,
        face: usize,
    ) -> crate::device::KernelEffect {
        Box::new(move |bufs| {
            let (src, dst) = bufs.pair_mut(tile, strip);
            let w = tc + 2;
            match face {
                0 => dst[..tc].copy_from_slice(&src[w + 1..w + 1 + tc]),
                1 => dst[..tc].copy_from_slice(&src[tr * w + 1..tr * w + 1 + tc]),
                2 => {
                    for r in 0..tr {
                        dst[r] = src[(r + 1) * w + 1];
                    }
                }
                3 => {
                    for r in 0..tr {
                        dst[r] = src[(r + 1) * w + tc];
                    }
                }
                _ => unreachable!(),
            }
        })
    }

    /// Unpack kernel: received strip into the halo ring of the tile.
    fn unpack_effect(
        strip: usize,
        tile: usize,
        tr: usize,
        tc: usize,
        face: usize,
    ) -> crate::device::KernelEffect {
        Box::new(move |bufs| {
            let (src, dst) = bufs.pair_mut(strip, tile);
            let w = tc + 2;
            match face {
                0 => dst[1..1 + tc].copy_from_slice(&src[..tc]),
                1 => dst[(tr + 1) * w + 1..(tr + 1) * w + 1 + tc].copy_from_slice(&src[..tc]),
                2 => {
                    for r in 0..tr {
                        dst[(r + 1) * w] = src[r];
                    }
                }
                3 => {
                    for r in 0..tr {
                        dst[(r + 1) * w + tc + 1] = src[r];
                    }
                }
                _ => unreachable!(),
            }
        })
    }

    /// The stencil kernel: 5-point average of the source tile (with halos)
    /// into the destination tile's interior; fixed boundary cells copy
    /// through.
    #[allow(clippy::too_many_arguments)]
    fn stencil_effect(
        src: usize,
        dst: usize,
        tr: usize,
        tc: usize,
        r0: u64,
        c0: u64,
        grid: (u64, u64),
    ) -> crate::device::KernelEffect {
        Box::new(move |bufs| {
            let (s, d) = bufs.pair_mut(src, dst);
            let w = tc + 2;
            for r in 0..tr {
                let gr = r0 + r as u64;
                let row = (r + 1) * w;
                for c in 0..tc {
                    let gc = c0 + c as u64;
                    let i = row + c + 1;
                    d[i] = if gr == 0 || gr == grid.0 - 1 || gc == 0 || gc == grid.1 - 1 {
                        s[i]
                    } else {
                        stencil_cell(s[i], s[i - w], s[i + w], s[i - 1], s[i + 1])
                    };
                }
            }
        })
    }

    fn tile_origin(&self, index: u32) -> (u64, u64) {
        let (ci, cj) = self.coords(index);
        (ci as u64 * self.tile.0, cj as u64 * self.tile.1)
    }

    fn packs_and_sends<T: TimeScalar>(
        &mut self,
        w: &mut World<T>,
        out: &mut Outbox<T>,
        ctx: &mut HandlerCtx<T>,
        index: u32,
        iter: u32,
    ) -> SimResult<()> {
        let chare = ChareRef {
            collection: self.col,
            index,
        };
        let stream = w.chare_stream(chare);
        let parity = (iter % 2) as usize;
        let (tr, tc) = (self.tile.0 as usize, self.tile.1 as usize);
        for &face in &FACES {
            if self.neighbor(index, face).is_none() {
                continue;
            }
            let b = &self.bufs[index as usize];
            let items = self.strip_len(face);
            w.enqueue_op(
                ctx,
                out,
                stream,
                OpKind::Kernel {
                    work_items: items,
                    sm_request: 1,
                    effect: Some(Self::pack_effect(
                        b.tile[parity],
                        b.send[face][parity],
                        tr,
                        tc,
                        face,
                    )),
                },
                None,
            )?;
            w.enqueue_op(
                ctx,
                out,
                stream,
                OpKind::HostCallback {
                    pe: ctx.pe,
                    meta: Some(OpMeta::Task {
                        pe: ctx.pe,
                        task: PeTask::Entry(EntryMessage {
                            src: chare,
                            dest: chare,
                            method: M_PACKED,
                            args: vec![iter as u64, face as u64],
                            payload: None,
                            send_time: ctx.cursor,
                            transfer: None,
                            routed: false,
                        }),
                    }),
                },
                None,
            )?;
        }
        Ok(())
    }

    fn maybe_stencil<T: TimeScalar>(
        &mut self,
        w: &mut World<T>,
        out: &mut Outbox<T>,
        ctx: &mut HandlerCtx<T>,
        index: u32,
    ) -> SimResult<()> {
        let k = self.st[index as usize].next_stencil;
        if k as u64 >= self.iterations {
            return Ok(());
        }
        {
            let st = &self.st[index as usize];
            if st.iter != k || st.count[(k % 2) as usize] != st.need {
                return Ok(());
            }
        }
        let chare = ChareRef {
            collection: self.col,
            index,
        };
        let stream = w.chare_stream(chare);
        let cap = w.dev.sm_capacity(w.chare_device(chare));
        let parity = (k % 2) as usize;
        let (tr, tc) = (self.tile.0 as usize, self.tile.1 as usize);
        let (r0, c0) = self.tile_origin(index);
        let b = &self.bufs[index as usize];
        w.enqueue_op(
            ctx,
            out,
            stream,
            OpKind::Kernel {
                work_items: self.tile.0 * self.tile.1,
                sm_request: cap,
                effect: Some(Self::stencil_effect(
                    b.tile[parity],
                    b.tile[1 - parity],
                    tr,
                    tc,
                    r0,
                    c0,
                    self.grid,
                )),
            },
            None,
        )?;
        w.enqueue_op(
            ctx,
            out,
            stream,
            OpKind::HostCallback {
                pe: ctx.pe,
                meta: Some(OpMeta::Task {
                    pe: ctx.pe,
                    task: PeTask::Entry(EntryMessage {
                        src: chare,
                        dest: chare,
                        method: M_DONE,
                        args: vec![k as u64],
                        payload: None,
                        send_time: ctx.cursor,
                        transfer: None,
                        routed: false,
                    }),
                }),
            },
            None,
        )?;
        let st = &mut self.st[index as usize];
        st.count[parity] = 0;
        st.next_stencil = k + 1;
        Ok(())
    }
}

impl<T: TimeScalar> App<T> for JacobiApp {
    fn init(&mut self, w: &mut World<T>, out: &mut Outbox<T>) -> SimResult<()> {
        let total = self.odf * w.topo.n_gpus() as u64;
        self.cdims = Self::choose_tiling(total, self.grid)?;
        self.tile = (
            self.grid.0 / self.cdims.0 as u64,
            self.grid.1 / self.cdims.1 as u64,
        );
        if self.tile.0 < 1 || self.tile.1 < 1 {
            return Err(SimError::Config(
                "jacobi2d: tiles must be at least 1x1".into(),
            ));
        }
        self.col = w.create_collection("tiles", self.cdims, Mapping::Block)?;
        let (tr, tc) = (self.tile.0 as usize, self.tile.1 as usize);
        for index in 0..total as u32 {
            let chare = ChareRef {
                collection: self.col,
                index,
            };
            let dev = w.chare_device(chare);
            let tile = [
                w.dev.buffers.alloc(dev, (tr + 2) * (tc + 2)),
                w.dev.buffers.alloc(dev, (tr + 2) * (tc + 2)),
            ];
            let send = [
                [w.dev.buffers.alloc(dev, tc), w.dev.buffers.alloc(dev, tc)],
                [w.dev.buffers.alloc(dev, tc), w.dev.buffers.alloc(dev, tc)],
                [w.dev.buffers.alloc(dev, tr), w.dev.buffers.alloc(dev, tr)],
                [w.dev.buffers.alloc(dev, tr), w.dev.buffers.alloc(dev, tr)],
            ];
            let recv = [
                [w.dev.buffers.alloc(dev, tc), w.dev.buffers.alloc(dev, tc)],
                [w.dev.buffers.alloc(dev, tc), w.dev.buffers.alloc(dev, tc)],
                [w.dev.buffers.alloc(dev, tr), w.dev.buffers.alloc(dev, tr)],
                [w.dev.buffers.alloc(dev, tr), w.dev.buffers.alloc(dev, tr)],
            ];
            // initial interior values; halo rings start zero and are
            // refreshed by unpacks before every stencil read
            let (r0, c0) = self.tile_origin(index);
            let data = w.dev.buffers.data_mut(tile[0]);
            for r in 0..tr {
                for c in 0..tc {
                    data[(r + 1) * (tc + 2) + c + 1] = initial_value(r0 + r as u64, c0 + c as u64);
                }
            }
            let need = FACES
                .iter()
                .filter(|&&f| self.neighbor(index, f).is_some())
                .count() as u32;
            self.bufs.push(ChareBufs { tile, send, recv });
            self.st.push(ChareState {
                iter: 0,
                next_stencil: 0,
                count: [0, 0],
                need,
            });
            out.at(
                SimTime::zero(),
                Action::Deliver {
                    pe: w.chare_pe(chare),
                    task: PeTask::Entry(EntryMessage {
                        src: chare,
                        dest: chare,
                        method: M_START,
                        args: Vec::new(),
                        payload: None,
                        send_time: SimTime::zero(),
                        transfer: None,
                        routed: false,
                    }),
                },
            );
        }
        Ok(())
    }

    fn handle(
        &mut self,
        w: &mut World<T>,
        out: &mut Outbox<T>,
        ctx: &mut HandlerCtx<T>,
        msg: &EntryMessage<T>,
    ) -> SimResult<()> {
        ctx.charge(T::from_count(HANDLER_COST_US));
        let index = msg.dest.index;
        match msg.method {
            M_START => {
                if self.iterations == 0 {
                    self.done += 1;
                    return Ok(());
                }
                self.packs_and_sends(w, out, ctx, index, 0)?;
                self.maybe_stencil(w, out, ctx, index)
            }
            M_PACKED => {
                let (iter, face) = (msg.args[0] as u32, msg.args[1] as usize);
                let neighbor = self
                    .neighbor(index, face)
                    .expect("packed face has a neighbor");
                let dst_chare = ChareRef {
                    collection: self.col,
                    index: neighbor,
                };
                let bytes = (self.strip_len(face) * 8) as usize;
                let parity = (iter % 2) as usize;
                let src_buf = self.bufs[index as usize].send[face][parity];
                let dst_buf = self.bufs[neighbor as usize].recv[face ^ 1][parity];
                w.send(
                    ctx,
                    out,
                    msg.dest,
                    dst_chare,
                    M_RECV,
                    vec![iter as u64, (face ^ 1) as u64],
                    Some(DevPayload {
                        src_buf,
                        src_off: 0,
                        dst_buf,
                        dst_off: 0,
                        bytes,
                    }),
                )
            }
            M_RECV => {
                let (iter, face) = (msg.args[0] as u32, msg.args[1] as usize);
                let parity = (iter % 2) as usize;
                let stream = w.chare_stream(msg.dest);
                let b = &self.bufs[index as usize];
                let (tr, tc) = (self.tile.0 as usize, self.tile.1 as usize);
                w.enqueue_op(
                    ctx,
                    out,
                    stream,
                    OpKind::Kernel {
                        work_items: self.strip_len(face),
                        sm_request: 1,
                        effect: Some(Self::unpack_effect(
                            b.recv[face][parity],
                            b.tile[parity],
                            tr,
                            tc,
                            face,
                        )),
                    },
                    None,
                )?;
                self.st[index as usize].count[parity] += 1;
                self.maybe_stencil(w, out, ctx, index)
            }
            M_DONE => {
                let k = msg.args[0] as u32;
                self.st[index as usize].iter = k + 1;
                if (k + 1) as u64 == self.iterations {
                    self.done += 1;
                    return Ok(());
                }
                self.packs_and_sends(w, out, ctx, index, k + 1)?;
                self.maybe_stencil(w, out, ctx, index)
            }
            other => Err(SimError::Protocol(format!(
                "jacobi2d: unknown method {other}"
            ))),
        }
    }
}

impl<T: TimeScalar> super::Bench<T> for JacobiApp {
    fn results(&self, world: &World<T>, end: SimTime<T>) -> Measurements {
        debug_assert_eq!(
            self.done as usize,
            self.bufs.len(),
            "all chares ran to completion"
        );
        // assemble the final grid and sum it row-major, the same order the
        // serial reference uses
        let parity = (self.iterations % 2) as usize;
        let (gr, gc) = (self.grid.0 as usize, self.grid.1 as usize);
        let (tr, tc) = (self.tile.0 as usize, self.tile.1 as usize);
        let mut grid = vec![0.0_f64; gr * gc];
        for (index, b) in self.bufs.iter().enumerate() {
            let (r0, c0) = self.tile_origin(index as u32);
            let data = world.dev.buffers.data(b.tile[parity]);
            for r in 0..tr {
                let dst = (r0 as usize + r) * gc + c0 as usize;
                let src = (r + 1) * (tc + 2) + 1;
                grid[dst..dst + tc].copy_from_slice(&data[src..src + tc]);
            }
        }
        let mut checksum = 0.0_f64;
        for v in &grid {
            checksum += *v;
        }
        let time_per_step = if self.iterations > 0 {
            Some(end.to_f64() / self.iterations as f64)
        } else {
            None
        };
        Measurements {
            checksum: Some(checksum),
            time_per_step_us: time_per_step,
            ..Default::default()
        }
    }
}
