//! Discrete-event hub runtime over virtual time.
//!
//! Every request goes through the real envelope and KMS code paths; only
//! durations are modelled. Local jobs share the device by processor sharing:
//! with k jobs running each progresses at `1 / contention_factor(k)`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use super::monitor::{Reservation, ResourceMonitor};
use super::policy::{allocate, AllocationContext, OffloadDecision, PolicyKind, Target};
use super::queue::BoundedQueue;
use super::{
    open_remote_outcome, prepare_invocation, AppBinding, DeviceEvent, DeviceSpec, EventBody, HubConfig, HubError,
    Request, TerminalState,
};
use crate::clock::{Millis, VirtualClock, HOUR_MS};
use crate::envelope::{open_data, AppId, DataKey};
use crate::faas_sim::{
    invocation_cost, synthetic_inference, FaasEndpoint, FunctionId, InferenceResult, InvocationRecord,
    InvocationRequest, ServedState,
};
use crate::kms::KmsClient;
use crate::rules::{Action, NotificationSink, RuleEngine, RuleEvent};

/// Billing month used for budget accounting.
pub const MONTH_MS: Millis = 720 * HOUR_MS;

const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Local,
    Remote,
    Rejected,
}

/// Terminal record of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: String,
    pub app_id: AppId,
    pub profile: String,
    pub enqueued_at: Millis,
    pub decided_at: Option<Millis>,
    pub target: TargetKind,
    pub terminal: TerminalState,
    pub completed_at: Millis,
    pub latency_ms: Millis,
    pub queue_ms: Millis,
    pub encrypt_ms: Millis,
    pub kms_ms: Millis,
    pub exec_ms: Millis,
    pub remote_e2e_ms: Option<Millis>,
    pub served_state: Option<ServedState>,
    pub cost_usd: Decimal,
    pub error: Option<String>,
    pub result: Option<InferenceResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HubLogEvent {
    Enqueued {
        at: Millis,
        request_id: String,
        app_id: AppId,
    },
    Decision {
        request_id: String,
        #[serde(flatten)]
        decision: OffloadDecision,
    },
    Completed(RequestOutcome),
    KeepAlive {
        at: Millis,
        function_id: FunctionId,
        served_state: ServedState,
        cost_usd: Decimal,
    },
    Dropped {
        at: Millis,
        request_id: String,
        reason: String,
    },
    Notification {
        at: Millis,
        text: String,
    },
    RuleError {
        at: Millis,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EvKind {
    LocalDone = 0,
    RemoteDone = 1,
    ExecStart = 2,
    EncryptDone = 3,
    Tick = 4,
    Timeout = 5,
}

type EvKey = (Millis, EvKind, u64);

enum Route {
    Local {
        reservation: Option<Reservation>,
        plaintext: Option<Zeroizing<Vec<u8>>>,
        exec_started: Option<Millis>,
    },
    Remote {
        function_id: FunctionId,
        key: DataKey,
        record: Option<Box<InvocationRecord>>,
    },
}

struct InFlight {
    request: Request,
    profile: String,
    decided_at: Millis,
    encrypt_ms: Millis,
    kms_ms: Millis,
    wire: Option<InvocationRequest>,
    route: Route,
    timeout_key: Option<EvKey>,
    timed_out: bool,
}

struct LocalJob {
    no: u64,
    remaining: f64,
}

/// Hub runtime driven by [`HubSim::ingest`], [`HubSim::advance_to`] and
/// [`HubSim::drain`]. Time only moves forward.
pub struct HubSim {
    config: HubConfig,
    device: DeviceSpec,
    monitor: ResourceMonitor,
    queue: BoundedQueue<Request>,
    kms: Arc<dyn KmsClient>,
    faas: Option<Arc<dyn FaasEndpoint>>,
    clock: Option<VirtualClock>,
    apps: BTreeMap<AppId, AppBinding>,
    routes: BTreeMap<String, AppId>,
    latest_payload: HashMap<String, Vec<u8>>,
    rules: Option<RuleEngine>,
    sink: NotificationSink,

    now: Millis,
    next_request: u64,
    seq: u64,
    events: BTreeMap<EvKey, u64>,
    inflight: BTreeMap<u64, InFlight>,
    encrypting: Vec<Millis>,
    jobs: Vec<LocalJob>,
    jobs_updated: Millis,
    local_done_key: Option<EvKey>,
    results: std::collections::VecDeque<String>,
    outcomes: BTreeMap<String, RequestOutcome>,
    ewma: BTreeMap<AppId, f64>,
    last_remote: BTreeMap<FunctionId, Millis>,
    month: u64,
    month_spend: Decimal,
    remote_cost: Decimal,
    rng: ChaCha8Rng,

    keep_alive_count: u64,
    keep_alive_cost: Decimal,
    tick_scheduled: bool,
    dropped: u64,
    delivered: u64,
    log: Vec<HubLogEvent>,
    log_writer: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for HubSim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HubSim")
            .field("now", &self.now)
            .field("queued", &self.queue.len())
            .field("inflight", &self.inflight.len())
            .finish_non_exhaustive()
    }
}

impl HubSim {
    pub fn new(
        config: HubConfig,
        kms: Arc<dyn KmsClient>,
        faas: Option<Arc<dyn FaasEndpoint>>,
    ) -> Result<Self, HubError> {
        config.policy.validate()?;
        let device = DeviceSpec::defaults(config.device_class.clone());
        Ok(Self {
            monitor: ResourceMonitor::new(device.clone(), config.max_local),
            queue: BoundedQueue::new(config.queue_capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            device,
            kms,
            faas,
            clock: None,
            apps: BTreeMap::new(),
            routes: BTreeMap::new(),
            latest_payload: HashMap::new(),
            rules: None,
            sink: NotificationSink::memory(),
            now: 0,
            next_request: 0,
            seq: 0,
            events: BTreeMap::new(),
            inflight: BTreeMap::new(),
            encrypting: Vec::new(),
            jobs: Vec::new(),
            jobs_updated: 0,
            local_done_key: None,
            results: Default::default(),
            outcomes: BTreeMap::new(),
            ewma: BTreeMap::new(),
            last_remote: BTreeMap::new(),
            month: 0,
            month_spend: Decimal::ZERO,
            remote_cost: Decimal::ZERO,
            keep_alive_count: 0,
            keep_alive_cost: Decimal::ZERO,
            tick_scheduled: false,
            dropped: 0,
            delivered: 0,
            log: Vec::new(),
            log_writer: None,
            config,
        })
    }

    /// Keeps `clock` in step with hub time (the KMS audit log reads it).
    pub fn with_clock(mut self, clock: VirtualClock) -> Self {
        clock.advance_to(self.now);
        self.clock = Some(clock);
        self
    }

    pub fn with_rules(mut self, engine: RuleEngine) -> Self {
        self.rules = Some(engine);
        self
    }

    pub fn with_sink(mut self, sink: NotificationSink) -> Self {
        self.sink = sink;
        self
    }

    /// Mirrors every log event to `w` as one JSON line.
    pub fn with_log_writer(mut self, w: Box<dyn Write + Send>) -> Self {
        self.log_writer = Some(w);
        self
    }

    pub fn add_app(&mut self, binding: AppBinding) {
        let seed = binding
            .profile
            .remote_e2e_ms(ServedState::Warm, self.config.network_overhead_ms, self.kms.response_latency_ms());
        self.ewma.insert(binding.app_id().clone(), seed as f64);
        if let (Some(item), Some(rules)) = (&binding.item_id, self.rules.as_mut()) {
            rules.register_item(item);
        }
        if binding.keep_alive
            && binding.function_id.is_some()
            && !self.tick_scheduled
            && self.config.keep_alive_period_ms().is_some()
        {
            self.schedule(self.now, EvKind::Tick, 0);
            self.tick_scheduled = true;
        }
        self.apps.insert(binding.app_id().clone(), binding);
    }

    /// Data events from `device_id` become requests for `app_id`.
    pub fn route_device(&mut self, device_id: &str, app_id: &AppId) {
        self.routes.insert(device_id.to_string(), app_id.clone());
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn monitor(&self) -> &ResourceMonitor {
        &self.monitor
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queued(&self) -> Vec<Request> {
        self.queue.snapshot()
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &RequestOutcome> {
        self.outcomes.values()
    }

    pub fn outcome(&self, request_id: &str) -> Option<&RequestOutcome> {
        self.outcomes.get(request_id)
    }

    pub fn log(&self) -> &[HubLogEvent] {
        &self.log
    }

    pub fn notifications(&self) -> &[crate::rules::Notification] {
        self.sink.entries()
    }

    pub fn rules(&self) -> Option<&RuleEngine> {
        self.rules.as_ref()
    }

    pub fn keep_alive_count(&self) -> u64 {
        self.keep_alive_count
    }

    pub fn keep_alive_cost(&self) -> Decimal {
        self.keep_alive_cost
    }

    /// Cloud spend on requests, excluding keep-alive.
    pub fn remote_cost(&self) -> Decimal {
        self.remote_cost
    }

    pub fn month_spend(&self) -> Decimal {
        self.month_spend
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    /// Expected remote latency currently used by the allocator.
    pub fn expected_remote_ms(&self, app_id: &AppId) -> Option<f64> {
        self.ewma.get(app_id).copied()
    }

    /// Ingests a device event at its arrival time. Events at the current
    /// instant are batched: the queue is only served when time moves.
    pub fn ingest(&mut self, event: DeviceEvent) -> Result<Vec<Request>, HubError> {
        if event.arrived_at > self.now {
            self.advance_to(event.arrived_at)?;
        }
        match event.body {
            EventBody::Data { payload } => {
                self.check_size(payload.len())?;
                let app = self.routes.get(&event.device_id).cloned();
                let out = match app {
                    Some(app) => vec![self.enqueue(&app, payload.clone(), None)?],
                    None => Vec::new(),
                };
                self.latest_payload.insert(event.device_id, payload);
                Ok(out)
            }
            EventBody::StateChange { from, to } => {
                let ev = RuleEvent::ThingChanged {
                    thing_id: event.device_id,
                    from,
                    to,
                };
                self.run_rules(&ev)
            }
        }
    }

    /// Enqueues a request for `app_id` directly, bypassing device routing.
    pub fn submit(&mut self, app_id: &AppId, payload: Vec<u8>, at: Millis) -> Result<Request, HubError> {
        if at > self.now {
            self.advance_to(at)?;
        }
        self.check_size(payload.len())?;
        self.enqueue(app_id, payload, None)
    }

    fn check_size(&self, size: usize) -> Result<(), HubError> {
        if size > self.config.max_payload {
            return Err(HubError::PayloadTooLarge {
                size,
                max: self.config.max_payload,
            });
        }
        Ok(())
    }

    fn enqueue(&mut self, app_id: &AppId, payload: Vec<u8>, deadline_hint: Option<Millis>) -> Result<Request, HubError> {
        if !self.apps.contains_key(app_id) {
            return Err(HubError::UnknownApp(app_id.to_string()));
        }
        let request = Request {
            request_id: format!("req-{:08}", self.next_request),
            app_id: app_id.clone(),
            payload,
            enqueued_at: self.now,
            deadline_hint,
        };
        self.queue.push(request.clone())?;
        self.next_request += 1;
        self.emit(HubLogEvent::Enqueued {
            at: self.now,
            request_id: request.request_id.clone(),
            app_id: app_id.clone(),
        });
        Ok(request)
    }

    /// Processes everything scheduled up to and including `t`.
    pub fn advance_to(&mut self, t: Millis) -> Result<(), HubError> {
        loop {
            self.pump()?;
            self.handle_results();
            match self.events.first_key_value() {
                Some((&key, _)) if key.0 <= t => {
                    let no = self.events.remove(&key).expect("present");
                    self.set_now(key.0);
                    self.fire(key, no)?;
                }
                _ => break,
            }
        }
        self.set_now(t.max(self.now));
        self.pump()?;
        self.handle_results();
        Ok(())
    }

    /// Runs until no request is queued or in flight. Requests that can
    /// never be scheduled are errored out.
    pub fn drain(&mut self) -> Result<(), HubError> {
        loop {
            self.pump()?;
            self.handle_results();
            if self.queue.is_empty() && self.inflight.is_empty() {
                return Ok(());
            }
            let next = self.events.keys().find(|k| k.1 != EvKind::Tick).map(|k| k.0);
            match next {
                Some(t) => self.advance_to(t)?,
                None => {
                    while let Some(r) = self.queue.pop() {
                        self.reject(r, None, "unschedulable");
                    }
                }
            }
        }
    }

    fn set_now(&mut self, t: Millis) {
        self.now = t;
        if let Some(c) = &self.clock {
            c.advance_to(t);
        }
        let month = t / MONTH_MS;
        if month != self.month {
            self.month = month;
            self.month_spend = Decimal::ZERO;
        }
    }

    fn schedule(&mut self, at: Millis, kind: EvKind, no: u64) -> EvKey {
        let key = (at, kind, self.seq);
        self.seq += 1;
        self.events.insert(key, no);
        key
    }

    fn emit(&mut self, ev: HubLogEvent) {
        if let Some(w) = self.log_writer.as_mut() {
            if let Ok(line) = serde_json::to_string(&ev) {
                if let Err(e) = writeln!(w, "{line}") {
                    tracing::warn!("event log write failed: {e}");
                }
            }
        }
        self.log.push(ev);
    }

    fn pump(&mut self) -> Result<(), HubError> {
        while let Some(head) = self.queue.with_front(|r| r.cloned()) {
            let binding = self.apps.get(&head.app_id).expect("enqueue checks app").clone();
            let local_exec = binding.profile.local_exec(&self.device.class);
            let kms_ms = self.kms.response_latency_ms();
            let expected_remote_cost = invocation_cost(binding.profile.billed_gbs_at(ServedState::Warm, binding.memory_gb))?;
            let backlog = self.local_backlog();
            let ctx = AllocationContext {
                now: self.now,
                device: &self.device,
                local_exec_ms: local_exec,
                local_mem_gb: binding.profile.local_mem_gb,
                kms_ms: kms_ms as f64,
                local_backlog: &backlog,
                function_id: binding.function_id.as_ref(),
                expected_remote_ms: self.ewma[binding.app_id()],
                expected_remote_cost,
                month_spend: self.month_spend,
            };
            let (decision, reservation) = allocate(&ctx, &self.monitor, &self.config.policy);
            if decision.target == Target::Queued {
                let kind = self.config.policy.kind;
                let never_local = kind == PolicyKind::RemoteOnly
                    || local_exec.is_none()
                    || binding.profile.local_mem_gb > self.device.total_mem_gb
                    || self.monitor.total_slots() == 0;
                let never_remote = kind == PolicyKind::LocalOnly || binding.function_id.is_none();
                if never_local && never_remote {
                    let r = self.queue.pop().expect("head");
                    self.reject(r, Some(decision), "unschedulable");
                    continue;
                }
                if kind == PolicyKind::LocalOnly && self.config.reject_when_full {
                    let r = self.queue.pop().expect("head");
                    self.reject(r, Some(decision), "local admission rejected");
                    continue;
                }
                break;
            }
            let request = self.queue.pop().expect("head");
            self.emit(HubLogEvent::Decision {
                request_id: request.request_id.clone(),
                decision: decision.clone(),
            });
            self.dispatch(request, &binding, decision, reservation);
        }
        Ok(())
    }

    fn reject(&mut self, request: Request, decision: Option<OffloadDecision>, reason: &str) {
        if let Some(d) = decision {
            self.emit(HubLogEvent::Decision {
                request_id: request.request_id.clone(),
                decision: d,
            });
        }
        let profile = self.apps.get(&request.app_id).map(|b| b.profile.name.clone()).unwrap_or_default();
        let outcome = RequestOutcome {
            request_id: request.request_id.clone(),
            app_id: request.app_id.clone(),
            profile,
            enqueued_at: request.enqueued_at,
            decided_at: Some(self.now),
            target: TargetKind::Rejected,
            terminal: TerminalState::Errored,
            completed_at: self.now,
            latency_ms: self.now - request.enqueued_at,
            queue_ms: self.now - request.enqueued_at,
            encrypt_ms: 0,
            kms_ms: 0,
            exec_ms: 0,
            remote_e2e_ms: None,
            served_state: None,
            cost_usd: Decimal::ZERO,
            error: Some(reason.to_string()),
            result: None,
        };
        self.finish(outcome);
    }

    fn dispatch(&mut self, request: Request, binding: &AppBinding, decision: OffloadDecision, reservation: Option<Reservation>) {
        let no = self.seq;
        self.seq += 1;
        self.encrypting.retain(|&end| end > self.now);
        let concurrent = self.encrypting.len() + 1;
        let encrypt_ms = self.device.crypto.encrypt_ms(request.payload.len(), concurrent).ceil() as Millis;
        self.encrypting.push(self.now + encrypt_ms);

        let prepared = prepare_invocation(
            &binding.app,
            &binding.kms_public,
            &request.request_id,
            &request.payload,
            self.config.max_payload,
        );
        let (wire, key) = match prepared {
            Ok(p) => p,
            Err(e) => {
                if let Some(r) = reservation {
                    self.monitor.release(r);
                }
                self.reject(request, None, &e.to_string());
                return;
            }
        };
        let route = match decision.target {
            Target::Local { .. } => Route::Local {
                reservation,
                plaintext: None,
                exec_started: None,
            },
            Target::Remote { function_id } => Route::Remote {
                function_id,
                key,
                record: None,
            },
            Target::Queued => unreachable!("queued requests are not dispatched"),
        };
        let timeout = binding.profile.remote_e2e_ms(
            ServedState::Cold,
            self.config.network_overhead_ms,
            self.kms.response_latency_ms(),
        ) * self.config.timeout_factor;
        let timeout_key = (self.config.timeout_factor > 0).then(|| self.schedule(self.now + timeout, EvKind::Timeout, no));
        self.schedule(self.now + encrypt_ms, EvKind::EncryptDone, no);
        self.inflight.insert(
            no,
            InFlight {
                profile: binding.profile.name.clone(),
                request,
                decided_at: self.now,
                encrypt_ms,
                kms_ms: 0,
                wire: Some(wire),
                route,
                timeout_key,
                timed_out: false,
            },
        );
    }

    fn fire(&mut self, key: EvKey, no: u64) -> Result<(), HubError> {
        match key.1 {
            EvKind::EncryptDone => self.on_encrypted(no),
            EvKind::ExecStart => self.on_exec_start(no),
            EvKind::LocalDone => {
                if self.local_done_key == Some(key) {
                    self.local_done_key = None;
                    self.on_local_done();
                }
            }
            EvKind::RemoteDone => self.on_remote_done(no),
            EvKind::Timeout => self.on_timeout(no),
            EvKind::Tick => self.on_tick()?,
        }
        Ok(())
    }

    fn on_encrypted(&mut self, no: u64) {
        let Some(f) = self.inflight.get_mut(&no) else { return };
        let wire = f.wire.take().expect("wire present until sent");
        let remote_fid = match &f.route {
            Route::Remote { function_id, .. } => Some(function_id.clone()),
            Route::Local { .. } => None,
        };
        let Some(function_id) = remote_fid else {
            let private = &self.apps[&wire.app_id].app.private;
            let opened = self
                .kms
                .decrypt_data_key(&wire.app_id, &wire.request_id, &wire.encrypted_key)
                .map_err(HubError::from)
                .and_then(|k| Ok(open_data(&wire.encrypted_data, &k, private)?));
            let kms_ms = self.kms.response_latency_ms();
            f.kms_ms = kms_ms;
            match opened {
                Ok(pt) => {
                    if let Route::Local { plaintext, .. } = &mut f.route {
                        *plaintext = Some(Zeroizing::new(pt));
                    }
                    self.schedule(self.now + kms_ms, EvKind::ExecStart, no);
                }
                Err(e) => self.complete(no, Err(e.to_string()), None),
            }
            return;
        };
        let faas = self.faas.clone().expect("remote decisions require a FaaS endpoint");
        match faas.invoke(&function_id, &wire, Some(self.now)) {
            Ok(record) => {
                let done = record.completed_at.max(self.now) + self.device.crypto.result_open_ms.ceil() as Millis;
                self.last_remote.insert(function_id, record.completed_at);
                self.month_spend += record.cost_usd;
                self.remote_cost += record.cost_usd;
                if let Some(InFlight {
                    route: Route::Remote { record: r, .. },
                    ..
                }) = self.inflight.get_mut(&no)
                {
                    *r = Some(Box::new(record));
                }
                self.schedule(done, EvKind::RemoteDone, no);
            }
            Err(e) => self.complete(no, Err(e.to_string()), None),
        }
    }

    fn on_exec_start(&mut self, no: u64) {
        let Some(f) = self.inflight.get_mut(&no) else { return };
        let binding = &self.apps[&f.request.app_id];
        let base = binding.profile.local_exec(&self.device.class).expect("local decisions need a local profile");
        if let Route::Local { exec_started, .. } = &mut f.route {
            *exec_started = Some(self.now);
        }
        let frac = self.config.local_jitter_frac;
        let scale = if frac > 0.0 { self.rng.gen_range(1.0 - frac..=1.0 + frac) } else { 1.0 };
        self.advance_jobs();
        self.jobs.push(LocalJob {
            no,
            remaining: base as f64 * scale,
        });
        self.reschedule_jobs();
    }

    /// Remaining work of executing jobs, plus the full work of admitted jobs
    /// that have not started executing.
    fn local_backlog(&self) -> Vec<f64> {
        let rate = if self.jobs.is_empty() {
            0.0
        } else {
            1.0 / self.device.contention_factor(self.jobs.len())
        };
        let elapsed = (self.now - self.jobs_updated) as f64;
        let mut out: Vec<f64> = self.jobs.iter().map(|j| (j.remaining - elapsed * rate).max(0.0)).collect();
        for f in self.inflight.values() {
            if let Route::Local { exec_started: None, .. } = f.route {
                if let Some(e) = self.apps[&f.request.app_id].profile.local_exec(&self.device.class) {
                    out.push(e as f64);
                }
            }
        }
        out
    }

    fn advance_jobs(&mut self) {
        let elapsed = (self.now - self.jobs_updated) as f64;
        if !self.jobs.is_empty() && elapsed > 0.0 {
            let rate = 1.0 / self.device.contention_factor(self.jobs.len());
            for j in &mut self.jobs {
                j.remaining -= elapsed * rate;
            }
        }
        self.jobs_updated = self.now;
    }

    fn reschedule_jobs(&mut self) {
        if let Some(k) = self.local_done_key.take() {
            self.events.remove(&k);
        }
        let Some(min) = self.jobs.iter().map(|j| j.remaining).min_by(f64::total_cmp) else {
            return;
        };
        let factor = self.device.contention_factor(self.jobs.len());
        let dt = (min.max(0.0) * factor - EPS).ceil().max(0.0) as Millis;
        self.local_done_key = Some(self.schedule(self.now + dt, EvKind::LocalDone, 0));
    }

    fn on_local_done(&mut self) {
        self.advance_jobs();
        let (done, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.jobs).into_iter().partition(|j| j.remaining <= EPS);
        self.jobs = rest;
        for job in done {
            let result = self.inflight.get_mut(&job.no).and_then(|f| match &mut f.route {
                Route::Local { plaintext, .. } => plaintext.take().map(|pt| synthetic_inference(&pt)),
                Route::Remote { .. } => None,
            });
            self.complete(job.no, Ok(result), None);
        }
        self.reschedule_jobs();
    }

    fn on_remote_done(&mut self, no: u64) {
        let Some(f) = self.inflight.get(&no) else { return };
        let Route::Remote { key, record: Some(record), .. } = &f.route else { return };
        let app_id = f.request.app_id.clone();
        let opened = open_remote_outcome(record, key);
        let e2e = record.e2e_ms as f64;
        let record = (**record).clone();
        let alpha = self.config.ewma_alpha;
        if let Some(avg) = self.ewma.get_mut(&app_id) {
            *avg = alpha * e2e + (1.0 - alpha) * *avg;
        }
        let res = opened
            .map(|pt| InferenceResult::from_json_bytes(&pt))
            .map_err(|e| e.to_string());
        self.complete(no, res, Some(record));
    }

    fn on_timeout(&mut self, no: u64) {
        let Some(f) = self.inflight.get_mut(&no) else { return };
        f.timeout_key = None;
        f.timed_out = true;
        let outcome = self.outcome_for(no, Err("timeout".into()), None);
        self.finish(outcome);
    }

    /// Terminal transition for an in-flight request. Late completions of
    /// timed-out requests are dropped and counted.
    fn complete(&mut self, no: u64, result: Result<Option<InferenceResult>, String>, record: Option<InvocationRecord>) {
        let Some(f) = self.inflight.get(&no) else { return };
        if f.timed_out {
            let f = self.inflight.remove(&no).expect("present");
            self.release_route(f.route);
            self.dropped += 1;
            self.emit(HubLogEvent::Dropped {
                at: self.now,
                request_id: f.request.request_id,
                reason: "completed after timeout".into(),
            });
            return;
        }
        let outcome = self.outcome_for(no, result, record);
        let f = self.inflight.remove(&no).expect("present");
        if let Some(k) = f.timeout_key {
            self.events.remove(&k);
        }
        self.release_route(f.route);
        self.finish(outcome);
    }

    fn release_route(&mut self, route: Route) {
        if let Route::Local {
            reservation: Some(r), ..
        } = route
        {
            self.monitor.release(r);
        }
    }

    fn outcome_for(
        &self,
        no: u64,
        result: Result<Option<InferenceResult>, String>,
        record: Option<InvocationRecord>,
    ) -> RequestOutcome {
        let f = &self.inflight[&no];
        let (target, exec_ms, kms_ms) = match &f.route {
            Route::Local { exec_started, .. } => {
                let exec = exec_started.map_or(0, |t| self.now - t);
                (TargetKind::Local, exec, f.kms_ms)
            }
            Route::Remote { .. } => (
                TargetKind::Remote,
                record.as_ref().map_or(0, |r| r.exec_ms),
                record.as_ref().map_or(0, |r| r.kms_ms),
            ),
        };
        let pending_record = match &f.route {
            Route::Remote { record: r, .. } => record.clone().or_else(|| r.as_deref().cloned()),
            Route::Local { .. } => None,
        };
        let (terminal, error, result) = match result {
            Ok(r) if target == TargetKind::Local => (TerminalState::LocalDone, None, r),
            Ok(r) => (TerminalState::RemoteDone, None, r),
            Err(e) => (TerminalState::Errored, Some(e), None),
        };
        RequestOutcome {
            request_id: f.request.request_id.clone(),
            app_id: f.request.app_id.clone(),
            profile: f.profile.clone(),
            enqueued_at: f.request.enqueued_at,
            decided_at: Some(f.decided_at),
            target,
            terminal,
            completed_at: self.now,
            latency_ms: self.now - f.request.enqueued_at,
            queue_ms: f.decided_at - f.request.enqueued_at,
            encrypt_ms: f.encrypt_ms,
            kms_ms,
            exec_ms,
            remote_e2e_ms: pending_record.as_ref().map(|r| r.e2e_ms),
            served_state: pending_record.as_ref().map(|r| r.served_state),
            cost_usd: pending_record.as_ref().map_or(Decimal::ZERO, |r| r.cost_usd),
            error,
            result,
        }
    }

    fn finish(&mut self, outcome: RequestOutcome) {
        debug_assert!(!self.outcomes.contains_key(&outcome.request_id));
        if outcome.terminal != TerminalState::Errored {
            self.results.push_back(outcome.request_id.clone());
        }
        self.emit(HubLogEvent::Completed(outcome.clone()));
        self.outcomes.insert(outcome.request_id.clone(), outcome);
    }

    fn on_tick(&mut self) -> Result<(), HubError> {
        let Some(period) = self.config.keep_alive_period_ms() else {
            return Ok(());
        };
        let targets: Vec<FunctionId> = self
            .apps
            .values()
            .filter(|b| b.keep_alive)
            .filter_map(|b| b.function_id.clone())
            .collect();
        if let Some(faas) = self.faas.clone() {
            for fid in targets {
                let due = self
                    .last_remote
                    .get(&fid)
                    .is_none_or(|&last| (self.now + period).saturating_sub(last) >= self.config.idle_threshold_ms);
                if !due {
                    continue;
                }
                let record = faas.keep_alive(&fid, Some(self.now))?;
                self.last_remote.insert(fid.clone(), record.completed_at);
                self.keep_alive_count += 1;
                self.keep_alive_cost += record.cost_usd;
                self.month_spend += record.cost_usd;
                self.emit(HubLogEvent::KeepAlive {
                    at: self.now,
                    function_id: fid,
                    served_state: record.served_state,
                    cost_usd: record.cost_usd,
                });
            }
        }
        self.schedule(self.now + period, EvKind::Tick, 0);
        Ok(())
    }

    /// Delivers completed results to the rules engine, in completion order.
    /// Returns how many were delivered.
    pub fn handle_results(&mut self) -> usize {
        let mut n = 0;
        while let Some(id) = self.results.pop_front() {
            n += 1;
            self.delivered += 1;
            let outcome = &self.outcomes[&id];
            let item = self.apps.get(&outcome.app_id).and_then(|b| b.item_id.clone());
            let Some(item_id) = item else { continue };
            let ev = RuleEvent::ItemUpdate {
                item_id,
                result: outcome.result.clone(),
            };
            if let Err(e) = self.run_rules(&ev) {
                self.emit(HubLogEvent::RuleError {
                    at: self.now,
                    message: e.to_string(),
                });
            }
        }
        n
    }

    fn run_rules(&mut self, ev: &RuleEvent) -> Result<Vec<Request>, HubError> {
        let now = self.now;
        let Some(engine) = self.rules.as_mut() else {
            return Ok(Vec::new());
        };
        let actions = match engine.process(ev, now) {
            Ok(a) => a,
            Err(e) => {
                self.emit(HubLogEvent::RuleError {
                    at: now,
                    message: e.to_string(),
                });
                return Ok(Vec::new());
            }
        };
        let mut created = Vec::new();
        for action in actions {
            match action {
                Action::SendCommand { item_id, .. } => {
                    let binding = self.apps.values().find(|b| b.item_id.as_deref() == Some(item_id.as_str()));
                    let Some(binding) = binding else {
                        self.emit(HubLogEvent::RuleError {
                            at: now,
                            message: crate::rules::RuleError::UnknownBinding { item_id }.to_string(),
                        });
                        continue;
                    };
                    let app_id = binding.app_id().clone();
                    let payload = binding
                        .source_device
                        .as_ref()
                        .and_then(|d| self.latest_payload.get(d).cloned())
                        .unwrap_or_default();
                    created.push(self.enqueue(&app_id, payload, None)?);
                }
                Action::SendNotification { text } => {
                    self.sink.push(now, &text)?;
                    self.emit(HubLogEvent::Notification { at: now, text });
                }
            }
        }
        Ok(created)
    }
}
