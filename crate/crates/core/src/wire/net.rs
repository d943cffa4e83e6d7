use std::io::{ErrorKind, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::error::{Error, Result};
use crate::models::{evaluate, ModelSpec, TrainReport, TrainableModel};
use crate::nn::{FlatParams, Manifest};
use crate::strategies::{
    effective_spec, init_seed, local_update, run_collaborative, stream_seed, AdamPolicy, Executor,
    InstitutionData, InstitutionInfo, LocalTask, ModelUpdate, RunLog, RunOptions, StrategyConfig,
    StrategyKind, TaskSpec,
};

use super::codec::{encode_frame, error_code, FrameReader, Message, WireError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

pub fn strategy_tag(kind: StrategyKind) -> Result<u8> {
    match kind {
        StrategyKind::Federated => Ok(0),
        StrategyKind::Iil => Ok(1),
        StrategyKind::Ciil => Ok(2),
        StrategyKind::Centralized => Err(Error::config("centralized runs have no wire tag")),
    }
}

pub fn strategy_from_tag(tag: u8) -> Result<StrategyKind> {
    match tag {
        0 => Ok(StrategyKind::Federated),
        1 => Ok(StrategyKind::Iil),
        2 => Ok(StrategyKind::Ciil),
        other => Err(WireError::Version(format!("unknown strategy tag {other}")).into()),
    }
}

fn send(stream: &mut TcpStream, msg: &Message) -> Result<()> {
    stream.write_all(&encode_frame(msg)?)?;
    stream.flush()?;
    Ok(())
}

fn params_to_f32(params: &FlatParams<f32>) -> Vec<f32> {
    params.values().to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeOptions {
    /// Number of collaborators; their ids must be exactly `0..roster`.
    pub roster: usize,
    /// Longest wait for any single expected message.
    pub timeout: Duration,
    pub run: RunOptions,
}

struct Conn {
    writer: TcpStream,
    info: InstitutionInfo,
}

type Inbox = Receiver<(usize, Result<Message>)>;

/// Institutions reached over TCP. Requests go out on each connection; replies
/// arrive through one channel fed by a reader thread per connection.
pub struct RemoteExecutor {
    conns: Vec<Conn>,
    info: Vec<InstitutionInfo>,
    inbox: Inbox,
    timeout: Duration,
    manifest: Arc<Manifest>,
}

impl RemoteExecutor {
    fn broadcast_error(&mut self, text: &str) {
        let msg = Message::Error {
            code: error_code::ABORTED,
            text: text.to_string(),
        };
        for c in &mut self.conns {
            let _ = send(&mut c.writer, &msg);
        }
    }

    fn send_to(&mut self, id: usize, msg: &Message) -> Result<()> {
        send(&mut self.conns[id].writer, msg).map_err(|e| {
            Error::Aborted(format!(
                "sending {} to institution {id} failed: {e}",
                msg.name()
            ))
        })
    }

    /// One reply from each of `ids`, in the order of `ids`.
    fn collect(&mut self, ids: &[usize], expect: &'static str) -> Result<Vec<Message>> {
        let mut got: Vec<Option<Message>> = vec![None; self.conns.len()];
        let mut pending = ids.len();
        while pending > 0 {
            let (from, msg) = match self.inbox.recv_timeout(self.timeout) {
                Ok(x) => x,
                Err(RecvTimeoutError::Timeout) => {
                    let missing: Vec<usize> =
                        ids.iter().copied().filter(|&i| got[i].is_none()).collect();
                    return Err(Error::Timeout(format!(
                        "{expect} from institution(s) {missing:?}"
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Aborted("all collaborator connections closed".into()))
                }
            };
            let msg = msg.map_err(|e| Error::Aborted(format!("institution {from}: {e}")))?;
            if let Message::Error { code, text } = &msg {
                return Err(Error::Aborted(format!(
                    "institution {from} reported error {code}: {text}"
                )));
            }
            if !ids.contains(&from) || got[from].is_some() {
                return Err(Error::protocol(format!(
                    "unexpected {} from institution {from}",
                    msg.name()
                )));
            }
            if msg.name() != expect {
                return Err(Error::protocol(format!(
                    "expected {expect} from institution {from}, got {}",
                    msg.name()
                )));
            }
            got[from] = Some(msg);
            pending -= 1;
        }
        Ok(ids.iter().map(|&i| got[i].take().unwrap()).collect())
    }
}

impl Executor<f32> for RemoteExecutor {
    fn institutions(&self) -> &[InstitutionInfo] {
        &self.info
    }

    fn train(
        &mut self,
        task: &TaskSpec,
        targets: &[usize],
        params: &FlatParams<f32>,
    ) -> Result<Vec<ModelUpdate<f32>>> {
        let epochs = match task.local {
            LocalTask::Epochs(e) => e,
            LocalTask::Patience { patience, .. } => patience,
        };
        let msg = Message::Task {
            round_index: task.round as u32,
            strategy_tag: strategy_tag(task.kind)?,
            epochs: epochs as u32,
            topology_hash: self.manifest.topology_hash(),
            params: params_to_f32(params),
        };
        for &t in targets {
            if t >= self.conns.len() {
                return Err(Error::precondition(format!("no institution {t}")));
            }
            self.send_to(t, &msg)?;
        }
        let replies = self.collect(targets, "UPDATE")?;
        let mut out = Vec::with_capacity(targets.len());
        for (&t, reply) in targets.iter().zip(replies) {
            let Message::Update {
                round_index,
                n_samples,
                params,
                local_val_dice,
            } = reply
            else {
                unreachable!("collect checked the type");
            };
            if round_index as usize != task.round {
                return Err(Error::protocol(format!(
                    "institution {t} answered round {round_index} during round {}",
                    task.round
                )));
            }
            if n_samples == 0 {
                return Err(Error::protocol(format!(
                    "institution {t} reported no samples"
                )));
            }
            let params = FlatParams::new(params, self.manifest.clone())
                .map_err(|e| Error::protocol(format!("institution {t}: {e}")))?;
            let mut local_metrics = TrainReport::default();
            if !local_val_dice.is_nan() {
                local_metrics.per_epoch_local_val_dice.push(local_val_dice);
            }
            out.push(ModelUpdate {
                institution_id: t,
                round_index: task.round,
                params,
                n_samples: n_samples as usize,
                local_metrics,
            });
        }
        Ok(out)
    }

    /// Validation-count-weighted mean of every institution's local Dice.
    fn global_dice(&mut self, params: &FlatParams<f32>) -> Result<Option<f64>> {
        let msg = Message::ValRequest {
            params: params_to_f32(params),
        };
        let ids: Vec<usize> = (0..self.conns.len()).collect();
        for &i in &ids {
            self.send_to(i, &msg)?;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for reply in self.collect(&ids, "VAL_RESPONSE")? {
            if let Message::ValResponse {
                val_dice,
                val_count,
            } = reply
            {
                if val_count > 0 && val_dice.is_finite() {
                    num += val_dice * val_count as f64;
                    den += val_count as f64;
                }
            }
        }
        Ok((den > 0.0).then(|| num / den))
    }

    fn inst0_train_dice(&mut self, _params: &FlatParams<f32>) -> Result<Option<f64>> {
        Ok(None)
    }
}

fn spawn_reader(id: usize, stream: TcpStream, tx: Sender<(usize, Result<Message>)>) -> Result<()> {
    stream.set_read_timeout(None)?;
    thread::Builder::new()
        .name(format!("fedseg-conn-{id}"))
        .spawn(move || {
            let mut reader = FrameReader::new(stream);
            loop {
                let item = match reader.read_message() {
                    Ok(Some(m)) => Ok(m),
                    Ok(None) => Err(Error::Aborted("connection closed".into())),
                    Err(e) => Err(e),
                };
                let stop = item.is_err();
                if tx.send((id, item)).is_err() || stop {
                    break;
                }
            }
        })?;
    Ok(())
}

/// Waits for `opts.roster` HELLOs, then runs `cfg` over the network and
/// sends FINAL to everyone. Any failure aborts the run; collaborators are
/// told with an ERROR frame and no partial round is applied.
pub fn aggregator_serve(
    listener: TcpListener,
    init: FlatParams<f32>,
    cfg: &StrategyConfig,
    opts: &ServeOptions,
) -> Result<RunLog<f32>> {
    cfg.validate()?;
    strategy_tag(cfg.kind)?;
    if cfg.kind == StrategyKind::Federated && cfg.adam_policy() == AdamPolicy::AggregateMoments {
        return Err(Error::config(
            "aggregate_moments needs optimizer state at the server and is in-process only",
        ));
    }
    if opts.roster == 0 {
        return Err(Error::config("roster is empty"));
    }
    let mut slots: Vec<Option<(TcpStream, InstitutionInfo)>> =
        (0..opts.roster).map(|_| None).collect();
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + opts.timeout;
    let mut joined = 0;
    while joined < opts.roster {
        let (mut stream, peer) = match listener.accept() {
            Ok(x) => x,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout(format!(
                        "collaborators to connect ({joined} of {})",
                        opts.roster
                    )));
                }
                thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(opts.timeout))?;
        let hello = FrameReader::new(stream.try_clone()?).read_message();
        let (id, train_count, val_count) = match hello {
            Ok(Some(Message::Hello {
                institution_id,
                train_count,
                val_count,
            })) => (
                institution_id as usize,
                train_count as usize,
                val_count as usize,
            ),
            other => {
                warn!("dropping connection from {peer}: expected HELLO, got {other:?}");
                continue;
            }
        };
        if id >= opts.roster {
            let text = format!("institution {id} is not on the roster of {}", opts.roster);
            let _ = send(
                &mut stream,
                &Message::Error {
                    code: error_code::ROSTER_MISMATCH,
                    text: text.clone(),
                },
            );
            for (s, _) in slots.iter_mut().flatten() {
                let _ = send(
                    s,
                    &Message::Error {
                        code: error_code::ABORTED,
                        text: text.clone(),
                    },
                );
            }
            return Err(Error::config(text));
        }
        if slots[id].is_some() {
            warn!("rejecting duplicate institution {id} from {peer}");
            let _ = send(
                &mut stream,
                &Message::Error {
                    code: error_code::DUPLICATE_INSTITUTION,
                    text: format!("institution {id} is already connected"),
                },
            );
            continue;
        }
        info!("institution {id} joined from {peer} ({train_count} train / {val_count} val slices)");
        slots[id] = Some((
            stream,
            InstitutionInfo {
                id,
                train_count,
                val_count,
            },
        ));
        joined += 1;
    }

    let (tx, inbox) = mpsc::channel();
    let mut conns = Vec::with_capacity(opts.roster);
    for (id, slot) in slots.into_iter().enumerate() {
        let (stream, info) = slot.expect("roster complete");
        spawn_reader(id, stream.try_clone()?, tx.clone())?;
        conns.push(Conn {
            writer: stream,
            info,
        });
    }
    drop(tx);
    let info = conns.iter().map(|c| c.info).collect();
    let mut exec = RemoteExecutor {
        conns,
        info,
        inbox,
        timeout: opts.timeout,
        manifest: init.shared_manifest().clone(),
    };
    match run_collaborative(&mut exec, init, cfg, &opts.run) {
        Ok(log) => {
            let fin = Message::Final {
                params: params_to_f32(&log.final_params),
            };
            for id in 0..exec.conns.len() {
                exec.send_to(id, &fin)?;
            }
            Ok(log)
        }
        Err(e) => {
            exec.broadcast_error(&e.to_string());
            Err(e)
        }
    }
}

/// How a collaborator interprets TASK frames; must match the aggregator's
/// strategy for the two sides to agree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollaboratorOptions {
    pub spec: ModelSpec,
    pub seed: u64,
    pub adam_policy: AdamPolicy,
    pub keep_optimizer_state: bool,
    pub max_epochs: usize,
    /// Extra connection attempts after the first fails.
    pub connect_retries: u32,
    pub retry_delay: Duration,
}

impl CollaboratorOptions {
    pub fn for_strategy(spec: &ModelSpec, cfg: &StrategyConfig, seed: u64) -> Self {
        Self {
            spec: effective_spec(spec, cfg),
            seed,
            adam_policy: cfg.adam_policy(),
            keep_optimizer_state: cfg.keep_optimizer_state(),
            max_epochs: cfg.max_epochs(),
            connect_retries: 0,
            retry_delay: Duration::from_millis(500),
        }
    }

    fn task(&self, kind: StrategyKind, round: usize, epochs: usize) -> TaskSpec {
        let (local, reset_optimizer) = match kind {
            StrategyKind::Federated => (
                LocalTask::Epochs(epochs),
                self.adam_policy == AdamPolicy::ResetEachRound,
            ),
            StrategyKind::Iil => (
                LocalTask::Patience {
                    patience: epochs,
                    max_epochs: self.max_epochs,
                },
                !self.keep_optimizer_state,
            ),
            _ => (LocalTask::Epochs(epochs), !self.keep_optimizer_state),
        };
        TaskSpec {
            kind,
            round,
            local,
            reset_optimizer,
        }
    }
}

/// What a collaborator saw during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollaboratorReport {
    pub final_params: Vec<f32>,
    /// `(round, local validation Dice)` for each UPDATE sent.
    pub updates: Vec<(usize, Option<f64>)>,
    /// Local Dice reported in each VAL_RESPONSE.
    pub val_responses: Vec<f64>,
}

fn connect(addr: &str, opts: &CollaboratorOptions) -> Result<TcpStream> {
    let mut attempt = 0;
    loop {
        let resolved = addr.to_socket_addrs().map(|mut a| a.next());
        let result = match resolved {
            Ok(Some(sa)) => TcpStream::connect(sa),
            Ok(None) => Err(std::io::Error::new(
                ErrorKind::NotFound,
                "address resolves to nothing",
            )),
            Err(e) => Err(e),
        };
        match result {
            Ok(s) => return Ok(s),
            Err(e) if attempt < opts.connect_retries => {
                attempt += 1;
                debug!("connect to {addr} failed ({e}); retry {attempt}");
                thread::sleep(opts.retry_delay);
            }
            Err(e) => {
                return Err(Error::Aborted(format!(
                    "cannot reach aggregator at {addr}: {e}"
                )))
            }
        }
    }
}

/// HELLO, then serve TASK and VAL_REQUEST frames until FINAL. Only
/// parameters and summary numbers ever leave this function.
pub fn collaborator_run(
    addr: &str,
    data: &InstitutionData,
    opts: &CollaboratorOptions,
) -> Result<CollaboratorReport> {
    let mut model: TrainableModel<f32> = opts
        .spec
        .build(init_seed(opts.seed, 0), stream_seed(opts.seed, data.id))?;
    let mut evaluator = model.clone();
    let topology = model.network().manifest().topology_hash();
    let mut stream = connect(addr, opts)?;
    stream.set_nodelay(true)?;
    let mut reader = FrameReader::new(stream.try_clone()?);
    let count = |n: usize| u32::try_from(n).map_err(|_| Error::config("shard too large"));
    send(
        &mut stream,
        &Message::Hello {
            institution_id: count(data.id)?,
            train_count: count(data.train.len())?,
            val_count: count(data.val.len())?,
        },
    )?;
    let mut report = CollaboratorReport::default();
    let fail = |stream: &mut TcpStream, code: u16, err: Error| -> Error {
        let _ = send(
            stream,
            &Message::Error {
                code,
                text: err.to_string(),
            },
        );
        err
    };
    loop {
        let msg = reader
            .read_message()?
            .ok_or_else(|| Error::Aborted("aggregator closed the connection".into()))?;
        match msg {
            Message::Task {
                round_index,
                strategy_tag,
                epochs,
                topology_hash,
                params,
            } => {
                if topology_hash != topology {
                    let err = WireError::Version(format!(
                        "topology hash {topology_hash:08x} does not match local model {topology:08x}"
                    ));
                    return Err(fail(&mut stream, error_code::TOPOLOGY_MISMATCH, err.into()));
                }
                let kind = strategy_from_tag(strategy_tag)?;
                let task = opts.task(kind, round_index as usize, epochs as usize);
                let params = FlatParams::new(params, model.params().shared_manifest().clone())?;
                let update =
                    match local_update(&mut model, data, &task, &params, opts.spec.batch_size) {
                        Ok(u) => u,
                        Err(e) => return Err(fail(&mut stream, error_code::INTERNAL, e)),
                    };
                let dice = update.local_val_dice();
                report.updates.push((task.round, dice));
                send(
                    &mut stream,
                    &Message::Update {
                        round_index,
                        n_samples: count(update.n_samples)?,
                        params: params_to_f32(&update.params),
                        local_val_dice: dice.unwrap_or(f64::NAN),
                    },
                )?;
            }
            Message::ValRequest { params } => {
                let params = FlatParams::new(params, model.params().shared_manifest().clone())?;
                evaluator.set_params(&params)?;
                let dice = if data.val.is_empty() {
                    f64::NAN
                } else {
                    evaluate(&evaluator, &data.val)?
                };
                report.val_responses.push(dice);
                send(
                    &mut stream,
                    &Message::ValResponse {
                        val_dice: dice,
                        val_count: count(data.val.len())?,
                    },
                )?;
            }
            Message::Final { params } => {
                report.final_params = params;
                return Ok(report);
            }
            Message::Error { code, text } => {
                return Err(Error::Aborted(format!("aggregator error {code}: {text}")))
            }
            other => {
                return Err(fail(
                    &mut stream,
                    error_code::INTERNAL,
                    Error::protocol(format!("collaborator cannot handle {}", other.name())),
                ))
            }
        }
    }
}
