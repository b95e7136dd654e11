//! Client-side example streams: local sampling or a pool of remote workers,
//! plus bounded prefetch and batch assembly.
//!
//! The stream contract is the same everywhere: examples arrive in strictly
//! increasing counter order, and example `i` is a pure function of the run
//! seed, so worker count and worker failures never change what the trainer
//! sees.

use std::collections::{BTreeMap, VecDeque};
use std::net::{SocketAddr, TcpStream};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use fcx_core::field::{FieldBatch, NormStats};
use fcx_core::sampler::{example_for_index, CropSpec, FrameSource, MemFrames, TrainExample};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::proto::{
    decode_sample, read_frame, write_frame, Hello, MsgType, SampleReq, PROTOCOL_VERSION,
};

/// One standardized example in training precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Example32 {
    pub input: Vec<f32>,
    pub targets: Vec<Vec<f32>>,
    pub t0: usize,
    pub origin: (usize, usize),
    pub counter: u64,
}

fn narrow(ex: &TrainExample, counter: u64) -> Example32 {
    Example32 {
        input: ex.input.iter().map(|&x| x as f32).collect(),
        targets: ex.targets.iter().map(|t| t.iter().map(|&x| x as f32).collect()).collect(),
        t0: ex.t0,
        origin: ex.origin,
        counter,
    }
}

/// A sequential, counter-ordered stream of training examples.
pub trait ExampleSource {
    fn channels(&self) -> usize;
    fn crop(&self) -> (usize, usize);
    fn horizon(&self) -> usize;
    fn next_example(&mut self) -> Result<Example32>;
}

/// In-process sampling; the reference stream every other source must match.
pub struct LocalSource {
    frames: MemFrames,
    stats: NormStats,
    crop: CropSpec,
    horizon: usize,
    seed: u64,
    next: u64,
}

impl LocalSource {
    pub fn new(frames: MemFrames, stats: NormStats, crop: CropSpec, horizon: usize, seed: u64) -> Self {
        Self { frames, stats, crop, horizon, seed, next: 0 }
    }
}

impl ExampleSource for LocalSource {
    fn channels(&self) -> usize {
        self.frames.channels()
    }

    fn crop(&self) -> (usize, usize) {
        (self.crop.crop_h, self.crop.crop_w)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn next_example(&mut self) -> Result<Example32> {
        let counter = self.next;
        let ex = example_for_index(self.seed, counter, &self.frames, &self.stats, &self.crop, self.horizon)?;
        self.next += 1;
        Ok(narrow(&ex, counter))
    }
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    base: u64,
    count: u64,
}

struct WorkerConn {
    conn: TcpStream,
    pending: Option<Chunk>,
}

/// Connection parameters for a [`WorkerPool`].
#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub seed: u64,
    pub stream_id: u64,
    pub horizon: usize,
    pub channels: usize,
    pub crop: (usize, usize),
    /// Samples per request; also the reassembly granularity on worker death.
    pub chunk: u64,
    /// How long to retry reconnecting once every worker is dead.
    pub timeout: Duration,
}

impl PoolConfig {
    pub fn new(seed: u64, horizon: usize, channels: usize, crop: (usize, usize)) -> Self {
        Self {
            seed,
            stream_id: fcx_core::sampler::STREAM_SAMPLER,
            horizon,
            channels,
            crop,
            chunk: 8,
            timeout: Duration::from_secs(30),
        }
    }
}

/// Deterministic example stream assembled from remote workers.
pub struct WorkerPool {
    addrs: Vec<SocketAddr>,
    workers: Vec<Option<WorkerConn>>,
    digest: String,
    cfg: PoolConfig,
    next_assign: u64,
    next_deliver: u64,
    reclaimed: VecDeque<Chunk>,
    buffer: BTreeMap<u64, Example32>,
}

fn handshake(addr: SocketAddr, digest: &str) -> Result<TcpStream> {
    let mut conn = TcpStream::connect(addr)
        .map_err(|e| LabError::Protocol(format!("connect {}: {}", addr, e)))?;
    let hello = Hello { dataset_digest: digest.to_string(), protocol_version: PROTOCOL_VERSION };
    write_frame(&mut conn, MsgType::Hello, &hello.encode()?)?;
    let reply = read_frame(&mut conn)?;
    if reply.msg_type != MsgType::HelloAck {
        return Err(LabError::Protocol(format!("worker {} refused handshake", addr)));
    }
    Ok(conn)
}

impl WorkerPool {
    /// Connect to every reachable worker; at least one must answer.
    pub fn connect(addrs: &[SocketAddr], digest: &str, cfg: PoolConfig) -> Result<Self> {
        if addrs.is_empty() {
            return Err(LabError::Config("worker pool needs at least one address".into()));
        }
        if cfg.chunk == 0 {
            return Err(LabError::Config("pool chunk size must be positive".into()));
        }
        let workers: Vec<Option<WorkerConn>> = addrs
            .iter()
            .map(|&a| handshake(a, digest).ok().map(|conn| WorkerConn { conn, pending: None }))
            .collect();
        if workers.iter().all(|w| w.is_none()) {
            return Err(LabError::Protocol("no worker accepted the handshake".into()));
        }
        Ok(Self {
            addrs: addrs.to_vec(),
            workers,
            digest: digest.to_string(),
            cfg,
            next_assign: 0,
            next_deliver: 0,
            reclaimed: VecDeque::new(),
            buffer: BTreeMap::new(),
        })
    }

    /// Test hook: cut the connection to worker `i` as if it crashed.
    pub fn sever_worker(&mut self, i: usize) {
        if let Some(Some(w)) = self.workers.get(i) {
            let _ = w.conn.shutdown(std::net::Shutdown::Both);
        }
    }

    pub fn live_workers(&self) -> usize {
        self.workers.iter().filter(|w| w.is_some()).count()
    }

    fn next_chunk(&mut self) -> Chunk {
        if let Some(c) = self.reclaimed.pop_front() {
            return c;
        }
        let c = Chunk { base: self.next_assign, count: self.cfg.chunk };
        self.next_assign += self.cfg.chunk;
        c
    }

    /// Give every idle live worker a chunk to produce. Reclaimed chunks go
    /// out first so the delivery frontier is always in flight somewhere.
    fn ensure_requests(&mut self) {
        for i in 0..self.workers.len() {
            let needs = matches!(&self.workers[i], Some(w) if w.pending.is_none());
            if !needs {
                continue;
            }
            let chunk = self.next_chunk();
            let req = SampleReq {
                count: chunk.count,
                horizon: self.cfg.horizon,
                seed: self.cfg.seed,
                stream_id: self.cfg.stream_id,
                counter_base: chunk.base,
            };
            let sent = (|| -> Result<()> {
                let w = self.workers[i].as_mut().unwrap();
                write_frame(&mut w.conn, MsgType::SampleReq, &req.encode()?)?;
                w.pending = Some(chunk);
                Ok(())
            })();
            if sent.is_err() {
                self.kill_worker(i);
                self.reclaimed.push_front(chunk);
            }
        }
    }

    fn kill_worker(&mut self, i: usize) {
        if let Some(w) = self.workers[i].take() {
            if let Some(c) = w.pending {
                self.reclaimed.push_front(c);
            }
        }
    }

    /// Read one full chunk from worker `i` into the reorder buffer.
    fn drain_chunk(&mut self, i: usize) {
        let chunk = match &self.workers[i] {
            Some(w) => match w.pending {
                Some(c) => c,
                None => return,
            },
            None => return,
        };
        let outcome = (|| -> Result<Vec<Example32>> {
            let w = self.workers[i].as_mut().unwrap();
            let mut got = Vec::with_capacity(chunk.count as usize);
            loop {
                let frame = read_frame(&mut w.conn)?;
                match frame.msg_type {
                    MsgType::Done => return Ok(got),
                    MsgType::Sample => {
                        let (h, body) = decode_sample(&frame.payload)?;
                        if h.dataset_digest != self.digest
                            || h.seed != self.cfg.seed
                            || h.stream_id != self.cfg.stream_id
                            || h.horizon != self.cfg.horizon
                            || h.channels != self.cfg.channels
                            || h.crop != self.cfg.crop
                        {
                            return Err(LabError::Protocol(
                                "sample header disagrees with pool configuration".into(),
                            ));
                        }
                        if h.counter < chunk.base || h.counter >= chunk.base + chunk.count {
                            return Err(LabError::Protocol("sample counter outside its chunk".into()));
                        }
                        let per = h.channels * h.crop.0 * h.crop.1;
                        let input = body[..per].to_vec();
                        let targets: Vec<Vec<f32>> =
                            (0..h.horizon).map(|k| body[(1 + k) * per..(2 + k) * per].to_vec()).collect();
                        got.push(Example32 {
                            input,
                            targets,
                            t0: h.t0,
                            origin: h.origin,
                            counter: h.counter,
                        });
                    }
                    MsgType::Err => {
                        return Err(LabError::Protocol("worker reported an error".into()))
                    }
                    other => {
                        return Err(LabError::Protocol(format!("unexpected {:?} frame", other)))
                    }
                }
            }
        })();
        match outcome {
            Ok(examples) => {
                let w = self.workers[i].as_mut().unwrap();
                w.pending = None;
                for ex in examples {
                    // Duplicates after a reassignment are identical by
                    // construction; keep the first copy.
                    self.buffer.entry(ex.counter).or_insert(ex);
                }
            }
            Err(_) => self.kill_worker(i),
        }
    }

    /// Index of the worker holding the chunk that contains the delivery
    /// frontier, else any busy worker.
    fn pick_worker(&self) -> Option<usize> {
        let mut busy = None;
        for (i, w) in self.workers.iter().enumerate() {
            if let Some(w) = w {
                if let Some(c) = w.pending {
                    busy = busy.or(Some(i));
                    if self.next_deliver >= c.base && self.next_deliver < c.base + c.count {
                        return Some(i);
                    }
                }
            }
        }
        busy
    }

    fn reconnect_or_fail(&mut self) -> Result<()> {
        let start = Instant::now();
        loop {
            for i in 0..self.addrs.len() {
                if self.workers[i].is_none() {
                    if let Ok(conn) = handshake(self.addrs[i], &self.digest) {
                        self.workers[i] = Some(WorkerConn { conn, pending: None });
                    }
                }
            }
            if self.live_workers() > 0 {
                return Ok(());
            }
            if start.elapsed() >= self.cfg.timeout {
                return Err(LabError::Protocol(format!(
                    "all workers dead for {:?}",
                    self.cfg.timeout
                )));
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

impl ExampleSource for WorkerPool {
    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn crop(&self) -> (usize, usize) {
        self.cfg.crop
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn next_example(&mut self) -> Result<Example32> {
        loop {
            if let Some(ex) = self.buffer.remove(&self.next_deliver) {
                self.next_deliver += 1;
                return Ok(ex);
            }
            if self.live_workers() == 0 {
                self.reconnect_or_fail()?;
            }
            self.ensure_requests();
            match self.pick_worker() {
                Some(i) => self.drain_chunk(i),
                // Every live worker lost its connection while requesting.
                None => continue,
            }
        }
    }
}

impl ExampleSource for Box<dyn ExampleSource + Send> {
    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn crop(&self) -> (usize, usize) {
        (**self).crop()
    }

    fn horizon(&self) -> usize {
        (**self).horizon()
    }

    fn next_example(&mut self) -> Result<Example32> {
        (**self).next_example()
    }
}

/// Background-thread wrapper with a bounded example queue, so a slow consumer
/// caps producer memory at `depth` examples.
pub struct PrefetchSource {
    channels: usize,
    crop: (usize, usize),
    horizon: usize,
    rx: Option<Receiver<Result<Example32>>>,
    thread: Option<JoinHandle<()>>,
}

impl PrefetchSource {
    pub fn new(mut src: impl ExampleSource + Send + 'static, depth: usize) -> Self {
        let (channels, crop, horizon) = (src.channels(), src.crop(), src.horizon());
        let (tx, rx) = sync_channel(depth.max(1));
        let thread = std::thread::spawn(move || loop {
            let item = src.next_example();
            let stop = item.is_err();
            if tx.send(item).is_err() || stop {
                break;
            }
        });
        Self { channels, crop, horizon, rx: Some(rx), thread: Some(thread) }
    }
}

impl ExampleSource for PrefetchSource {
    fn channels(&self) -> usize {
        self.channels
    }

    fn crop(&self) -> (usize, usize) {
        self.crop
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn next_example(&mut self) -> Result<Example32> {
        match self.rx.as_ref().unwrap().recv() {
            Ok(item) => item,
            Err(_) => Err(LabError::Protocol("prefetch producer stopped".into())),
        }
    }
}

impl Drop for PrefetchSource {
    fn drop(&mut self) {
        // Closing the queue unblocks the producer, which then exits.
        drop(self.rx.take());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Assemble the next `batch` examples into `(inputs, targets-per-step)`.
pub fn next_batch(
    src: &mut impl ExampleSource,
    batch: usize,
    channel_names: &[String],
) -> Result<(FieldBatch<f32>, Vec<FieldBatch<f32>>)> {
    if batch == 0 {
        return Err(LabError::Config("batch size must be positive".into()));
    }
    let c = src.channels();
    let (h, w) = src.crop();
    let k = src.horizon();
    let per = c * h * w;
    let mut inputs = Vec::with_capacity(batch * per);
    let mut targets: Vec<Vec<f32>> = vec![Vec::with_capacity(batch * per); k];
    for _ in 0..batch {
        let ex = src.next_example()?;
        inputs.extend_from_slice(&ex.input);
        for (step, t) in ex.targets.iter().enumerate() {
            targets[step].extend_from_slice(t);
        }
    }
    let inputs = FieldBatch::new(batch, c, h, w, channel_names.to_vec(), inputs)?;
    let targets = targets
        .into_iter()
        .map(|t| FieldBatch::new(batch, c, h, w, channel_names.to_vec(), t).map_err(LabError::Core))
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, targets))
}

/// SHA-256 over `n` examples (counter plus value bits); equal digests mean
/// bit-identical streams.
pub fn stream_digest(src: &mut impl ExampleSource, n: u64) -> Result<String> {
    let mut hash = Sha256::new();
    for _ in 0..n {
        let ex = src.next_example()?;
        hash.update(ex.counter.to_le_bytes());
        for v in ex.input.iter().chain(ex.targets.iter().flatten()) {
            hash.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hash.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_stats, generate, DatasetMeta};
    use crate::worker::{spawn_worker, WorkerContext, WorkerHandle};
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;
    use tempfile::TempDir;

    fn lab() -> (TempDir, Arc<WorkerContext>) {
        let tmp = TempDir::new().unwrap();
        let mut meta = DatasetMeta::desk_default(11);
        meta.grid_h = 8;
        meta.grid_w = 16;
        meta.n_timesteps = 40;
        let ds = generate(&meta, tmp.path()).unwrap();
        let stats = compute_stats(&ds, ds.train_range()).unwrap();
        ds.write_stats(&stats).unwrap();
        let ctx = WorkerContext::load(tmp.path(), Some((4, 6))).unwrap();
        (tmp, Arc::new(ctx))
    }

    fn local(ctx: &WorkerContext, horizon: usize, seed: u64) -> LocalSource {
        LocalSource::new(ctx.frames.clone(), ctx.stats.clone(), ctx.crop, horizon, seed)
    }

    fn pool_cfg(ctx: &WorkerContext, horizon: usize, seed: u64, chunk: u64) -> PoolConfig {
        let mut cfg = PoolConfig::new(seed, horizon, ctx.frames.channels(), (4, 6));
        cfg.chunk = chunk;
        cfg
    }

    fn spawn_n(ctx: &Arc<WorkerContext>, n: usize) -> (Vec<WorkerHandle>, Vec<SocketAddr>) {
        let handles: Vec<_> = (0..n).map(|_| spawn_worker(Arc::clone(ctx)).unwrap()).collect();
        let addrs = handles.iter().map(|h| h.addr()).collect();
        (handles, addrs)
    }

    #[test]
    fn one_and_three_workers_match_the_local_stream() {
        let (_tmp, ctx) = lab();
        let want = stream_digest(&mut local(&ctx, 2, 5), 24).unwrap();

        for n in [1usize, 3] {
            let (handles, addrs) = spawn_n(&ctx, n);
            let mut pool =
                WorkerPool::connect(&addrs, &ctx.digest, pool_cfg(&ctx, 2, 5, 4)).unwrap();
            let got = stream_digest(&mut pool, 24).unwrap();
            assert_eq!(got, want, "worker count {}", n);
            for h in handles {
                h.stop();
            }
        }
    }

    #[test]
    fn worker_death_mid_stream_leaves_the_stream_unchanged() {
        let (_tmp, ctx) = lab();
        let want = stream_digest(&mut local(&ctx, 1, 13), 30).unwrap();

        let (handles, addrs) = spawn_n(&ctx, 2);
        let mut pool = WorkerPool::connect(&addrs, &ctx.digest, pool_cfg(&ctx, 1, 13, 4)).unwrap();
        let mut hash = Sha256::new();
        for i in 0..30u64 {
            if i == 5 {
                pool.sever_worker(0);
            }
            let ex = pool.next_example().unwrap();
            assert_eq!(ex.counter, i);
            hash.update(ex.counter.to_le_bytes());
            for v in ex.input.iter().chain(ex.targets.iter().flatten()) {
                hash.update(v.to_le_bytes());
            }
        }
        assert_eq!(hex::encode(hash.finalize()), want);
        assert_eq!(pool.live_workers(), 1);
        for h in handles {
            h.stop();
        }
    }

    #[test]
    fn all_workers_dead_times_out_with_an_error() {
        let (_tmp, ctx) = lab();
        let (handles, addrs) = spawn_n(&ctx, 1);
        let mut cfg = pool_cfg(&ctx, 1, 3, 4);
        cfg.timeout = Duration::from_millis(200);
        let mut pool = WorkerPool::connect(&addrs, &ctx.digest, cfg).unwrap();
        assert!(pool.next_example().is_ok());
        for h in handles {
            h.stop();
        }
        pool.sever_worker(0);
        let mut result = Ok(());
        for _ in 0..200 {
            match pool.next_example() {
                Ok(_) => continue, // already-buffered chunk drains first
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let err = result.unwrap_err();
        assert!(format!("{}", err).contains("dead"), "{}", err);
    }

    struct Counting<S> {
        inner: S,
        produced: Arc<AtomicU64>,
    }

    impl<S: ExampleSource> ExampleSource for Counting<S> {
        fn channels(&self) -> usize {
            self.inner.channels()
        }
        fn crop(&self) -> (usize, usize) {
            self.inner.crop()
        }
        fn horizon(&self) -> usize {
            self.inner.horizon()
        }
        fn next_example(&mut self) -> Result<Example32> {
            self.produced.fetch_add(1, Ordering::SeqCst);
            self.inner.next_example()
        }
    }

    #[test]
    fn prefetch_is_bounded_and_transparent() {
        let (_tmp, ctx) = lab();
        let produced = Arc::new(AtomicU64::new(0));
        let counting = Counting { inner: local(&ctx, 1, 21), produced: Arc::clone(&produced) };
        let mut pre = PrefetchSource::new(counting, 4);

        // A stalled consumer caps production at queue depth + 1 in flight.
        std::thread::sleep(Duration::from_millis(100));
        assert!(produced.load(Ordering::SeqCst) <= 5, "{}", produced.load(Ordering::SeqCst));

        let mut plain = local(&ctx, 1, 21);
        for i in 0..12u64 {
            let a = pre.next_example().unwrap();
            let b = plain.next_example().unwrap();
            assert_eq!(a, b, "example {}", i);
        }
    }

    #[test]
    fn batch_assembly_shapes_and_order() {
        let (_tmp, ctx) = lab();
        let names = vec!["za".to_string(), "ta".into(), "qa".into(), "pa".into()];
        let mut src = local(&ctx, 1, 2);
        let (inputs, targets) = next_batch(&mut src, 4, &names).unwrap();
        assert_eq!(
            (inputs.batch, inputs.channels, inputs.height, inputs.width),
            (4, 4, 4, 6)
        );
        assert_eq!(targets.len(), 1);
        assert_eq!(targets[0].batch, 4);
        assert_eq!(targets[0].example_len(), 4 * 4 * 6);

        // Example rows follow counter order: row i is stream example i.
        let mut again = local(&ctx, 1, 2);
        for i in 0..4 {
            let ex = again.next_example().unwrap();
            assert_eq!(inputs.example(i), &ex.input[..]);
            assert_eq!(targets[0].example(i), &ex.targets[0][..]);
        }
    }
}
