//! Wall-clock streaming: a producer thread renders frames ahead into a
//! bounded ring while the consumer pulls them on a fixed real-time cadence,
//! the way a DAC drains its FIFO.
//!
//! An underrun (the ring is empty when a frame is due) is counted and the
//! consumer then waits for the late frame. No samples are ever fabricated.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, SendTimeoutError, Sender, TryRecvError};
use serde::Serialize;

use super::{Command, FrameBatch, Reply, RuntimeError, Simulator};

pub const MIN_RING_FRAMES: usize = 4;

type CommandEnvelope = (Command, Sender<Result<Reply, RuntimeError>>);

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PaceReport {
    pub frames: u64,
    pub samples: u64,
    pub underruns: u64,
    pub seq_gaps: u64,
    /// Worst lateness of a frame relative to its deadline, in seconds.
    pub max_late_s: f64,
    pub elapsed_s: f64,
}

/// Handle to a running producer thread.
pub struct Streamer {
    commands: Sender<CommandEnvelope>,
    frames: Receiver<FrameBatch>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Simulator>>,
    frame_period: Duration,
    expected_seq: Option<u64>,
}

impl Streamer {
    /// Spawns the producer. The simulator must already be started.
    pub fn spawn(sim: Simulator, ring_frames: usize) -> Result<Self, RuntimeError> {
        if !sim.is_running() {
            return Err(RuntimeError::NotRunning);
        }
        let ring_frames = ring_frames.max(MIN_RING_FRAMES);
        let frame_period =
            Duration::from_secs_f64(sim.config().frame_size as f64 / sim.config().sample_rate);
        let (cmd_tx, cmd_rx) = bounded::<CommandEnvelope>(64);
        let (frame_tx, frame_rx) = bounded::<FrameBatch>(ring_frames);
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let handle = thread::Builder::new()
            .name("crankhil-producer".into())
            .spawn(move || produce(sim, cmd_rx, frame_tx, stop_flag))
            .map_err(|e| RuntimeError::InvalidConfig(format!("cannot spawn producer: {e}")))?;
        Ok(Self {
            commands: cmd_tx,
            frames: frame_rx,
            stop,
            handle: Some(handle),
            frame_period,
            expected_seq: None,
        })
    }

    pub fn frame_period(&self) -> Duration {
        self.frame_period
    }

    /// Sends a command to the producer and waits for its reply.
    pub fn command(&self, command: Command) -> Result<Reply, RuntimeError> {
        let (tx, rx) = bounded(1);
        self.commands
            .send((command, tx))
            .map_err(|_| RuntimeError::Disconnected)?;
        rx.recv().map_err(|_| RuntimeError::Disconnected)?
    }

    /// Frames currently buffered ahead of the consumer.
    pub fn buffered(&self) -> usize {
        self.frames.len()
    }

    /// Blocks until the ring holds `frames` frames (or `timeout` passes).
    pub fn prefill(&self, frames: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.frames.len() < frames.min(self.frames.capacity().unwrap_or(frames)) {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_micros(200));
        }
        true
    }

    /// Pulls frames on the wall-clock cadence for `duration`, handing each to
    /// `sink`.
    pub fn pace<F: FnMut(&FrameBatch)>(&mut self, duration: Duration, mut sink: F) -> PaceReport {
        let total = (duration.as_secs_f64() / self.frame_period.as_secs_f64()).round() as u64;
        self.pace_frames(total, &mut sink)
    }

    /// Like [`Streamer::pace`] but keeps going until `keep_going` returns
    /// false (checked once per frame).
    pub fn pace_while<F, K>(&mut self, mut keep_going: K, mut sink: F) -> PaceReport
    where
        F: FnMut(&FrameBatch),
        K: FnMut() -> bool,
    {
        self.pace_inner(u64::MAX, &mut keep_going, &mut sink)
    }

    fn pace_frames<F: FnMut(&FrameBatch)>(&mut self, total: u64, sink: &mut F) -> PaceReport {
        self.pace_inner(total, &mut || true, sink)
    }

    fn pace_inner(
        &mut self,
        total: u64,
        keep_going: &mut dyn FnMut() -> bool,
        sink: &mut dyn FnMut(&FrameBatch),
    ) -> PaceReport {
        let mut report = PaceReport::default();
        let start = Instant::now();
        let mut k = 0u64;
        while k < total && keep_going() {
            let deadline = start + self.frame_period.mul_f64(k as f64);
            let now = Instant::now();
            if deadline > now {
                thread::sleep(deadline - now);
            }
            let frame = match self.frames.try_recv() {
                Ok(f) => f,
                Err(TryRecvError::Empty) => {
                    report.underruns += 1;
                    match self.frames.recv() {
                        Ok(f) => f,
                        Err(_) => break,
                    }
                }
                Err(TryRecvError::Disconnected) => break,
            };
            let late = Instant::now().saturating_duration_since(deadline).as_secs_f64();
            report.max_late_s = report.max_late_s.max(late);
            if let Some(expected) = self.expected_seq {
                if frame.seq != expected {
                    report.seq_gaps += 1;
                }
            }
            self.expected_seq = Some(frame.seq + 1);
            report.frames += 1;
            report.samples += frame.len() as u64;
            sink(&frame);
            k += 1;
        }
        report.elapsed_s = start.elapsed().as_secs_f64();
        report
    }

    /// Stops the producer and hands back the simulator.
    pub fn stop(mut self) -> Simulator {
        self.shutdown().expect("producer thread panicked")
    }

    fn shutdown(&mut self) -> Option<Simulator> {
        self.stop.store(true, Ordering::Release);
        // unblock a producer waiting on a full ring
        while self.frames.try_recv().is_ok() {}
        self.handle.take().and_then(|h| h.join().ok())
    }
}

impl Drop for Streamer {
    fn drop(&mut self) {
        if self.handle.is_some() {
            self.shutdown();
        }
    }
}

fn produce(
    mut sim: Simulator,
    commands: Receiver<CommandEnvelope>,
    frames: Sender<FrameBatch>,
    stop: Arc<AtomicBool>,
) -> Simulator {
    let serve = |sim: &mut Simulator| {
        while let Ok((cmd, reply)) = commands.try_recv() {
            let _ = reply.send(sim.execute(cmd));
        }
    };
    'outer: while !stop.load(Ordering::Acquire) {
        serve(&mut sim);
        let mut frame = match sim.next_frame() {
            Ok(f) => f,
            Err(_) => break,
        };
        loop {
            match frames.send_timeout(frame, Duration::from_millis(1)) {
                Ok(()) => break,
                Err(SendTimeoutError::Timeout(f)) => {
                    if stop.load(Ordering::Acquire) {
                        break 'outer;
                    }
                    serve(&mut sim);
                    frame = f;
                }
                Err(SendTimeoutError::Disconnected(_)) => break 'outer,
            }
        }
    }
    serve(&mut sim);
    sim
}
