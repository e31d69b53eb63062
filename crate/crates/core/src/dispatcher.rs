//! TCP job farm. Frames are a 4-byte big-endian length followed by UTF-8
//! JSON; a connection opens with a `NFCS-RPC/1` hello carrying the plan hash.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::cache::cache_key;
use crate::orchestrator::search::{Evaluator, LocalEvaluator, PyramidSpec};
use crate::orchestrator::{EvalJob, EvalOutcome, EvalStatus, FeatureCache, SearchPlan, StageKind};
use crate::toyland::LossTerms;

pub const PROTOCOL: &str = "NFCS-RPC/1";
/// Frames above this size are treated as malformed.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub job_id: u64,
    pub stage: StageKind,
    pub tokens: Vec<usize>,
    pub seed: u64,
    pub plan_hash: String,
    pub cache_key: String,
    pub pyramid: Option<PyramidSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub job_id: u64,
    pub reward: Option<f64>,
    pub terms: Option<LossTerms>,
    pub ap: Option<f64>,
    pub wall_ms: f64,
    pub worker: String,
    pub status: EvalStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        protocol: String,
        plan_hash: String,
        worker: String,
    },
    Welcome,
    Reject {
        reason: String,
    },
    Job(EvalRequest),
    Result(EvalResult),
    Shutdown,
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {} bytes exceeds the limit", body.len())));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`; returns the message and
/// the number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("truncated frame header".into()));
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame length {len} exceeds the limit")));
    }
    let body = bytes
        .get(4..4 + len)
        .ok_or_else(|| Error::Protocol("truncated frame body".into()))?;
    let msg = serde_json::from_slice(body).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))?;
    Ok((msg, 4 + len))
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. I/O failures stay `Io`; bad content is `Protocol`.
pub fn read_frame(r: &mut impl Read) -> Result<Message> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head)?;
    let len = u32::from_be_bytes(head) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame length {len} exceeds the limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))
}

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    /// Reassign a job once it runs this many times the median job time.
    pub timeout_factor: f64,
    /// Timeout before any job has completed.
    pub initial_timeout: Duration,
    /// Abort when no worker is connected for this long with jobs pending.
    pub idle_abort: Duration,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            timeout_factor: 10.0,
            initial_timeout: Duration::from_secs(3600),
            idle_abort: Duration::from_secs(600),
        }
    }
}

enum Event {
    Joined {
        conn: u64,
        name: String,
        jobs: Sender<Option<EvalRequest>>,
        stream: TcpStream,
    },
    Done {
        conn: u64,
        result: EvalResult,
    },
    Lost {
        conn: u64,
    },
}

struct WorkerSlot {
    name: String,
    jobs: Sender<Option<EvalRequest>>,
    stream: TcpStream,
    /// Job index within the current batch and its start time.
    busy: Option<(usize, Instant)>,
    timed_out: bool,
}

/// Accepts workers and farms out batches of jobs. The calling thread owns
/// the job queue; connection handlers talk to it over a channel.
pub struct Coordinator {
    addr: SocketAddr,
    plan_hash: String,
    cache_key: String,
    config: CoordinatorConfig,
    events: Receiver<Event>,
    workers: BTreeMap<u64, WorkerSlot>,
    durations: Vec<f64>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    /// Results that arrived after their job was already answered.
    pub duplicates: usize,
    /// Jobs handed out again after a timeout or a lost worker.
    pub reassigned: usize,
}

fn handle_connection(conn: u64, mut stream: TcpStream, plan_hash: String, events: Sender<Event>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let hello = read_frame(&mut stream);
    let name = match hello {
        Ok(Message::Hello {
            protocol,
            plan_hash: h,
            worker,
        }) => {
            let reason = if protocol != PROTOCOL {
                Some(format!("protocol {protocol} is not {PROTOCOL}"))
            } else if h != plan_hash {
                Some(format!("plan hash {h} does not match the coordinator's {plan_hash}"))
            } else {
                None
            };
            if let Some(reason) = reason {
                let _ = write_frame(&mut stream, &Message::Reject { reason });
                return;
            }
            worker
        }
        _ => {
            let _ = write_frame(
                &mut stream,
                &Message::Reject {
                    reason: "expected a hello frame".into(),
                },
            );
            return;
        }
    };
    if write_frame(&mut stream, &Message::Welcome).is_err() {
        return;
    }
    let _ = stream.set_read_timeout(None);
    let (tx, rx) = mpsc::channel();
    let Ok(clone) = stream.try_clone() else {
        return;
    };
    if events
        .send(Event::Joined {
            conn,
            name,
            jobs: tx,
            stream: clone,
        })
        .is_err()
    {
        return;
    }
    while let Ok(Some(req)) = rx.recv() {
        let job_id = req.job_id;
        if write_frame(&mut stream, &Message::Job(req)).is_err() {
            let _ = events.send(Event::Lost { conn });
            return;
        }
        match read_frame(&mut stream) {
            Ok(Message::Result(result)) if result.job_id == job_id => {
                if events.send(Event::Done { conn, result }).is_err() {
                    return;
                }
            }
            _ => {
                let _ = events.send(Event::Lost { conn });
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        }
    }
    let _ = write_frame(&mut stream, &Message::Shutdown);
}

impl Coordinator {
    pub fn bind(addr: impl ToSocketAddrs, plan: &SearchPlan, config: CoordinatorConfig) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let plan_hash = plan.hash();
        let acceptor = {
            let stop = stop.clone();
            let plan_hash = plan_hash.clone();
            std::thread::spawn(move || {
                let mut next = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let _ = stream.set_nonblocking(false);
                            let _ = stream.set_nodelay(true);
                            let (h, tx) = (plan_hash.clone(), tx.clone());
                            let conn = next;
                            next += 1;
                            std::thread::spawn(move || handle_connection(conn, stream, h, tx));
                        }
                        Err(_) => std::thread::sleep(Duration::from_millis(20)),
                    }
                }
            })
        };
        Ok(Self {
            addr: local,
            plan_hash,
            cache_key: cache_key(plan),
            config,
            events: rx,
            workers: BTreeMap::new(),
            durations: Vec::new(),
            stop,
            acceptor: Some(acceptor),
            duplicates: 0,
            reassigned: 0,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    /// Blocks until `n` workers have joined or `timeout` passes.
    pub fn wait_for_workers(&mut self, n: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while self.workers.len() < n {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Error::Protocol(format!("{} of {n} workers joined in time", self.workers.len())));
            }
            match self.events.recv_timeout(left) {
                Ok(ev) => self.absorb(ev, &mut Batch::empty()),
                Err(_) => continue,
            }
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        if self.durations.is_empty() {
            return self.config.initial_timeout;
        }
        let mut d = self.durations.clone();
        d.sort_by(f64::total_cmp);
        let median = d[d.len() / 2];
        Duration::from_secs_f64((median * self.config.timeout_factor).max(0.05))
    }

    fn absorb(&mut self, ev: Event, batch: &mut Batch) {
        match ev {
            Event::Joined { conn, name, jobs, stream } => {
                self.workers.insert(
                    conn,
                    WorkerSlot {
                        name,
                        jobs,
                        stream,
                        busy: None,
                        timed_out: false,
                    },
                );
            }
            Event::Done { conn, result } => {
                let Some(w) = self.workers.get_mut(&conn) else {
                    return;
                };
                let Some((idx, started)) = w.busy.take() else {
                    return;
                };
                w.timed_out = false;
                match batch.index.get(&result.job_id) {
                    Some(&i) if i == idx && batch.results[i].is_none() => {
                        self.durations.push(started.elapsed().as_secs_f64());
                        batch.queue.retain(|&q| q != i);
                        batch.results[i] = Some(EvalOutcome {
                            job_id: result.job_id,
                            reward: result.reward,
                            terms: result.terms,
                            ap: result.ap,
                            status: result.status,
                            wall_ms: result.wall_ms,
                        });
                    }
                    _ => self.duplicates += 1,
                }
            }
            Event::Lost { conn } => {
                if let Some(w) = self.workers.remove(&conn) {
                    if let Some((i, _)) = w.busy {
                        if batch.requeue(i) {
                            self.reassigned += 1;
                        }
                    }
                }
            }
        }
    }
}

struct Batch {
    requests: Vec<EvalRequest>,
    index: BTreeMap<u64, usize>,
    results: Vec<Option<EvalOutcome>>,
    queue: VecDeque<usize>,
}

impl Batch {
    fn empty() -> Self {
        Batch {
            requests: Vec::new(),
            index: BTreeMap::new(),
            results: Vec::new(),
            queue: VecDeque::new(),
        }
    }

    /// Puts job `i` back at the front unless it is answered or queued.
    fn requeue(&mut self, i: usize) -> bool {
        let open = i < self.results.len() && self.results[i].is_none() && !self.queue.contains(&i);
        if open {
            self.queue.push_front(i);
        }
        open
    }
}

impl Evaluator for Coordinator {
    fn evaluate(&mut self, jobs: &[EvalJob], pyramid: Option<&PyramidSpec>) -> Result<Vec<EvalOutcome>> {
        let mut batch = Batch {
            requests: jobs
                .iter()
                .map(|j| EvalRequest {
                    job_id: j.id,
                    stage: j.stage,
                    tokens: j.tokens.clone(),
                    seed: j.seed,
                    plan_hash: self.plan_hash.clone(),
                    cache_key: self.cache_key.clone(),
                    pyramid: pyramid.cloned(),
                })
                .collect(),
            index: jobs.iter().enumerate().map(|(i, j)| (j.id, i)).collect(),
            results: vec![None; jobs.len()],
            queue: (0..jobs.len()).collect(),
        };
        let mut alone_since: Option<Instant> = None;
        while batch.results.iter().any(Option::is_none) {
            // Hand queued jobs to idle workers.
            let idle: Vec<u64> = self.workers.iter().filter(|(_, w)| w.busy.is_none()).map(|(&c, _)| c).collect();
            for conn in idle {
                let Some(i) = batch.queue.pop_front() else {
                    break;
                };
                let w = self.workers.get_mut(&conn).expect("listed above");
                if w.jobs.send(Some(batch.requests[i].clone())).is_ok() {
                    w.busy = Some((i, Instant::now()));
                    w.timed_out = false;
                } else {
                    self.workers.remove(&conn);
                    batch.queue.push_front(i);
                }
            }
            // Reassign jobs that overran the timeout; the slow worker keeps
            // its copy and the first result wins.
            let limit = self.timeout();
            for w in self.workers.values_mut() {
                if let Some((i, started)) = w.busy {
                    if !w.timed_out && started.elapsed() > limit && batch.results[i].is_none() {
                        w.timed_out = true;
                        if batch.requeue(i) {
                            self.reassigned += 1;
                        }
                    }
                }
            }
            if self.workers.is_empty() {
                let since = *alone_since.get_or_insert_with(Instant::now);
                if since.elapsed() > self.config.idle_abort {
                    let pending = batch.results.iter().filter(|r| r.is_none()).count();
                    return Err(Error::Protocol(format!("no workers connected; {pending} jobs pending")));
                }
            } else {
                alone_since = None;
            }
            match self.events.recv_timeout(Duration::from_millis(50)) {
                Ok(ev) => self.absorb(ev, &mut batch),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Protocol("acceptor stopped".into())),
            }
        }
        Ok(batch.results.into_iter().map(|r| r.expect("loop exits when complete")).collect())
    }
}

impl Drop for Coordinator {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.values() {
            let _ = w.jobs.send(None);
            if w.busy.is_some() {
                let _ = w.stream.shutdown(Shutdown::Both);
            }
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Coordinator {
    /// Names of the connected workers.
    pub fn worker_names(&self) -> Vec<String> {
        self.workers.values().map(|w| w.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct WorkerOptions {
    /// Connection attempts, one per 100 ms, before giving up.
    pub connect_attempts: usize,
    /// Drop the connection upon receiving this many jobs, without answering
    /// the last one. Used to exercise reassignment.
    pub vanish_after: Option<usize>,
}

/// Serves jobs from the coordinator at `addr` until it shuts down.
/// Returns the number of jobs answered.
pub fn run_worker(addr: &str, plan: &SearchPlan, cache_root: &Path, name: &str, opts: &WorkerOptions) -> Result<usize> {
    let cache = FeatureCache::open(plan, cache_root)?;
    let mut local = LocalEvaluator::new(plan.clone(), Arc::new(cache), 1);
    let plan_hash = plan.hash();
    let key = cache_key(plan);
    let mut stream = {
        let mut attempt = 0;
        loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if attempt + 1 < opts.connect_attempts.max(1) => {
                    attempt += 1;
                    let _ = e;
                    std::thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    stream.set_nodelay(true)?;
    write_frame(
        &mut stream,
        &Message::Hello {
            protocol: PROTOCOL.into(),
            plan_hash: plan_hash.clone(),
            worker: name.into(),
        },
    )?;
    match read_frame(&mut stream)? {
        Message::Welcome => {}
        Message::Reject { reason } => return Err(Error::Protocol(format!("coordinator rejected the worker: {reason}"))),
        other => return Err(Error::Protocol(format!("unexpected reply to hello: {other:?}"))),
    }
    let mut received = 0usize;
    let mut answered = 0usize;
    loop {
        let msg = match read_frame(&mut stream) {
            Ok(m) => m,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(answered),
            Err(e) => return Err(e),
        };
        let req = match msg {
            Message::Job(r) => r,
            Message::Shutdown => return Ok(answered),
            other => return Err(Error::Protocol(format!("unexpected frame {other:?}"))),
        };
        received += 1;
        if opts.vanish_after.is_some_and(|n| received >= n) {
            let _ = stream.shutdown(Shutdown::Both);
            return Ok(answered);
        }
        if req.plan_hash != plan_hash || req.cache_key != key {
            return Err(Error::Protocol(format!("job {} targets another plan or cache", req.job_id)));
        }
        let job = EvalJob {
            id: req.job_id,
            stage: req.stage,
            tokens: req.tokens,
            seed: req.seed,
        };
        let out = local.evaluate(std::slice::from_ref(&job), req.pyramid.as_ref())?;
        let out = out.into_iter().next().expect("one outcome per job");
        write_frame(
            &mut stream,
            &Message::Result(EvalResult {
                job_id: out.job_id,
                reward: out.reward,
                terms: out.terms,
                ap: out.ap,
                wall_ms: out.wall_ms,
                worker: name.into(),
                status: out.status,
            }),
        )?;
        answered += 1;
    }
}
