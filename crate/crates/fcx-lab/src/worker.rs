//! Data-worker server: runs the sampler over a dataset and streams examples
//! to a trainer over the wire protocol.
//!
//! Sample identity lives entirely in `(seed, stream_id, counter)`, so any
//! worker produces byte-identical examples for the same coordinates and the
//! trainer never needs to know which worker served what.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use fcx_core::field::NormStats;
use fcx_core::rng::RngStream;
use fcx_core::sampler::{sample_example, CropSpec, FrameSource, MemFrames};

use crate::dataset::Dataset;
use crate::error::{LabError, Result};
use crate::proto::{
    read_frame, write_frame, ErrMsg, Hello, MsgType, SampleHeader, SampleReq, encode_sample,
    PROTOCOL_VERSION,
};

/// Everything a worker needs to serve: training-split frames, normalization
/// stats, the crop geometry, and the dataset digest used in the handshake.
pub struct WorkerContext {
    pub frames: MemFrames,
    pub stats: NormStats,
    pub crop: CropSpec,
    pub digest: String,
}

impl WorkerContext {
    /// Build a context from an on-disk dataset. `crop` of `None` means
    /// full-grid samples.
    pub fn load(data_dir: &Path, crop: Option<(usize, usize)>) -> Result<Self> {
        let ds = Dataset::open(data_dir)?;
        let stats = ds.read_stats()?;
        let digest = ds.content_digest()?;
        let frames = ds.load_train()?;
        let (h, w) = (ds.meta.grid_h, ds.meta.grid_w);
        let crop = match crop {
            Some((ch, cw)) => CropSpec::new(h, w, ch, cw)?,
            None => CropSpec::full(h, w),
        };
        Ok(Self { frames, stats, crop, digest })
    }
}

fn send_err(conn: &mut TcpStream, message: &str) {
    // Best-effort: the peer may already be gone.
    if let Ok(p) = (ErrMsg { message: message.to_string() }).encode() {
        let _ = write_frame(conn, MsgType::Err, &p);
    }
}

fn serve_request(ctx: &WorkerContext, conn: &mut TcpStream, req: &SampleReq) -> Result<()> {
    for i in 0..req.count {
        let counter = req.counter_base + i;
        let rng = RngStream::new(req.seed, req.stream_id).substream(counter);
        let ex = sample_example(rng, &ctx.frames, &ctx.stats, &ctx.crop, req.horizon)?;
        let header = SampleHeader {
            dataset_digest: ctx.digest.clone(),
            t0: ex.t0,
            origin: ex.origin,
            crop: (ctx.crop.crop_h, ctx.crop.crop_w),
            horizon: req.horizon,
            channels: ctx.frames.channels(),
            dtype: "f32".into(),
            seed: req.seed,
            stream_id: req.stream_id,
            counter,
        };
        let input: Vec<f32> = ex.input.iter().map(|&x| x as f32).collect();
        let targets: Vec<Vec<f32>> =
            ex.targets.iter().map(|t| t.iter().map(|&x| x as f32).collect()).collect();
        let payload = encode_sample(&header, &input, &targets)?;
        write_frame(conn, MsgType::Sample, &payload)?;
    }
    write_frame(conn, MsgType::Done, &[])
}

/// One client session: handshake, then request loop until DONE or disconnect.
fn handle_session(ctx: &WorkerContext, conn: &mut TcpStream) -> Result<()> {
    let first = read_frame(conn)?;
    if first.msg_type != MsgType::Hello {
        let msg = format!("expected HELLO, got {:?}", first.msg_type);
        send_err(conn, &msg);
        return Err(LabError::Protocol(msg));
    }
    let hello = Hello::decode(&first.payload)?;
    if hello.protocol_version != PROTOCOL_VERSION {
        let msg = format!("protocol version {} unsupported", hello.protocol_version);
        send_err(conn, &msg);
        return Err(LabError::Protocol(msg));
    }
    if hello.dataset_digest != ctx.digest {
        let msg = "dataset digest mismatch".to_string();
        send_err(conn, &msg);
        return Err(LabError::Protocol(msg));
    }
    let ack = Hello { dataset_digest: ctx.digest.clone(), protocol_version: PROTOCOL_VERSION };
    write_frame(conn, MsgType::HelloAck, &ack.encode()?)?;

    loop {
        let frame = match read_frame(conn) {
            Ok(f) => f,
            // A disconnect between requests is a normal end of session.
            Err(_) => return Ok(()),
        };
        match frame.msg_type {
            MsgType::Ping => write_frame(conn, MsgType::Ping, &[])?,
            MsgType::Done => return Ok(()),
            MsgType::SampleReq => {
                let req = SampleReq::decode(&frame.payload)?;
                if let Err(e) = serve_request(ctx, conn, &req) {
                    send_err(conn, &format!("{}", e));
                    return Err(e);
                }
            }
            other => {
                let msg = format!("unexpected {:?} frame", other);
                send_err(conn, &msg);
                return Err(LabError::Protocol(msg));
            }
        }
    }
}

/// Accept loop. Each connection gets its own thread; returns when the handle
/// created by [`spawn_worker`] is stopped (or never, for a CLI worker).
pub fn serve(ctx: Arc<WorkerContext>, listener: TcpListener, stop: Arc<AtomicBool>) -> Result<()> {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(mut c) => {
                let ctx = Arc::clone(&ctx);
                std::thread::spawn(move || {
                    let _ = handle_session(&ctx, &mut c);
                });
            }
            Err(e) => return Err(LabError::Protocol(format!("accept failed: {}", e))),
        }
    }
    Ok(())
}

/// A worker running on a background thread, for tests and the pool.
pub struct WorkerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl WorkerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting connections and join the accept thread. Sessions in
    /// flight end when their client disconnects.
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Bind an ephemeral local port and serve `ctx` on a background thread.
pub fn spawn_worker(ctx: Arc<WorkerContext>) -> Result<WorkerHandle> {
    let listener = TcpListener::bind("127.0.0.1:0")
        .map_err(|e| LabError::Protocol(format!("bind failed: {}", e)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| LabError::Protocol(format!("local_addr failed: {}", e)))?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = Arc::clone(&stop);
    let thread = std::thread::spawn(move || {
        let _ = serve(ctx, listener, stop2);
    });
    Ok(WorkerHandle { addr, stop, thread: Some(thread) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_stats, generate, DatasetMeta};
    use crate::proto::decode_sample;
    use fcx_core::sampler::example_for_index;
    use fcx_core::sampler::STREAM_SAMPLER;
    use tempfile::TempDir;

    fn tiny_context() -> (TempDir, Arc<WorkerContext>) {
        let tmp = TempDir::new().unwrap();
        let mut meta = DatasetMeta::desk_default(3);
        meta.grid_h = 8;
        meta.grid_w = 16;
        meta.n_timesteps = 32;
        let ds = generate(&meta, tmp.path()).unwrap();
        let stats = compute_stats(&ds, ds.train_range()).unwrap();
        ds.write_stats(&stats).unwrap();
        let ctx = WorkerContext::load(tmp.path(), Some((4, 6))).unwrap();
        (tmp, Arc::new(ctx))
    }

    fn handshake(addr: SocketAddr, digest: &str) -> TcpStream {
        let mut conn = TcpStream::connect(addr).unwrap();
        let hello =
            Hello { dataset_digest: digest.to_string(), protocol_version: PROTOCOL_VERSION };
        write_frame(&mut conn, MsgType::Hello, &hello.encode().unwrap()).unwrap();
        let ack = read_frame(&mut conn).unwrap();
        assert_eq!(ack.msg_type, MsgType::HelloAck);
        conn
    }

    #[test]
    fn served_samples_match_in_process_sampler_bit_for_bit() {
        let (_tmp, ctx) = tiny_context();
        let handle = spawn_worker(Arc::clone(&ctx)).unwrap();
        let mut conn = handshake(handle.addr(), &ctx.digest);

        let req = SampleReq {
            count: 2,
            horizon: 2,
            seed: 9,
            stream_id: STREAM_SAMPLER,
            counter_base: 0,
        };
        write_frame(&mut conn, MsgType::SampleReq, &req.encode().unwrap()).unwrap();

        for counter in 0..2u64 {
            let frame = read_frame(&mut conn).unwrap();
            assert_eq!(frame.msg_type, MsgType::Sample);
            let (header, body) = decode_sample(&frame.payload).unwrap();
            assert_eq!(header.counter, counter);
            assert_eq!(header.crop, (4, 6));

            // Oracle: the in-process sampler at the same coordinates.
            let ex =
                example_for_index(9, counter, &ctx.frames, &ctx.stats, &ctx.crop, 2).unwrap();
            assert_eq!(header.t0, ex.t0);
            assert_eq!(header.origin, ex.origin);
            let want: Vec<u32> = ex
                .input
                .iter()
                .chain(ex.targets.iter().flatten())
                .map(|&x| (x as f32).to_bits())
                .collect();
            let got: Vec<u32> = body.iter().map(|x| x.to_bits()).collect();
            assert_eq!(want, got);
        }
        let done = read_frame(&mut conn).unwrap();
        assert_eq!(done.msg_type, MsgType::Done);
        handle.stop();
    }

    #[test]
    fn wrong_digest_gets_err_then_close() {
        let (_tmp, ctx) = tiny_context();
        let handle = spawn_worker(Arc::clone(&ctx)).unwrap();
        let mut conn = TcpStream::connect(handle.addr()).unwrap();
        let hello =
            Hello { dataset_digest: "deadbeef".into(), protocol_version: PROTOCOL_VERSION };
        write_frame(&mut conn, MsgType::Hello, &hello.encode().unwrap()).unwrap();
        let reply = read_frame(&mut conn).unwrap();
        assert_eq!(reply.msg_type, MsgType::Err);
        let msg = ErrMsg::decode(&reply.payload).unwrap();
        assert!(msg.message.contains("digest"));
        // Connection is closed: the next read hits EOF.
        assert!(read_frame(&mut conn).is_err());
        handle.stop();
    }

    #[test]
    fn empty_request_yields_done_only() {
        let (_tmp, ctx) = tiny_context();
        let handle = spawn_worker(Arc::clone(&ctx)).unwrap();
        let mut conn = handshake(handle.addr(), &ctx.digest);
        let req =
            SampleReq { count: 0, horizon: 1, seed: 1, stream_id: STREAM_SAMPLER, counter_base: 7 };
        write_frame(&mut conn, MsgType::SampleReq, &req.encode().unwrap()).unwrap();
        let frame = read_frame(&mut conn).unwrap();
        assert_eq!(frame.msg_type, MsgType::Done);

        // The session stays usable afterwards.
        write_frame(&mut conn, MsgType::Ping, &[]).unwrap();
        let pong = read_frame(&mut conn).unwrap();
        assert_eq!(pong.msg_type, MsgType::Ping);
        handle.stop();
    }

    #[test]
    fn malformed_first_frame_is_rejected() {
        let (_tmp, ctx) = tiny_context();
        let handle = spawn_worker(Arc::clone(&ctx)).unwrap();
        let mut conn = TcpStream::connect(handle.addr()).unwrap();
        write_frame(&mut conn, MsgType::Ping, &[]).unwrap();
        let reply = read_frame(&mut conn).unwrap();
        assert_eq!(reply.msg_type, MsgType::Err);
        handle.stop();
    }
}
