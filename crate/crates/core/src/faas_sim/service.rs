//! Single-owner event loop around [`Platform`] and the endpoint trait the
//! hub and toolchain talk to.

use std::sync::{mpsc, Arc};
use std::thread;

use super::{FaasError, FunctionId, FunctionPackage, InvocationRecord, InvocationRequest, Platform};
use crate::clock::{Millis, TimeSource};

/// Client-side view of a FaaS platform. `at` is the virtual submission time;
/// `None` lets the platform use its own clock.
pub trait FaasEndpoint: Send + Sync {
    fn endpoint(&self) -> String;
    fn deploy(&self, package: &FunctionPackage) -> Result<FunctionId, FaasError>;
    fn remove(&self, function_id: &FunctionId) -> Result<(), FaasError>;
    fn invoke(
        &self,
        function_id: &FunctionId,
        request: &InvocationRequest,
        at: Option<Millis>,
    ) -> Result<InvocationRecord, FaasError>;
    fn keep_alive(&self, function_id: &FunctionId, at: Option<Millis>) -> Result<InvocationRecord, FaasError>;
}

impl<T: FaasEndpoint + ?Sized> FaasEndpoint for Arc<T> {
    fn endpoint(&self) -> String {
        (**self).endpoint()
    }
    fn deploy(&self, package: &FunctionPackage) -> Result<FunctionId, FaasError> {
        (**self).deploy(package)
    }
    fn remove(&self, function_id: &FunctionId) -> Result<(), FaasError> {
        (**self).remove(function_id)
    }
    fn invoke(
        &self,
        function_id: &FunctionId,
        request: &InvocationRequest,
        at: Option<Millis>,
    ) -> Result<InvocationRecord, FaasError> {
        (**self).invoke(function_id, request, at)
    }
    fn keep_alive(&self, function_id: &FunctionId, at: Option<Millis>) -> Result<InvocationRecord, FaasError> {
        (**self).keep_alive(function_id, at)
    }
}

type Job = Box<dyn FnOnce(&mut Platform) + Send>;

/// Submission queue into the platform loop. Cloning shares the loop; the
/// loop exits when the last handle is dropped.
#[derive(Clone)]
pub struct PlatformHandle {
    tx: mpsc::Sender<Job>,
    clock: Option<Arc<dyn TimeSource>>,
}

impl std::fmt::Debug for PlatformHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlatformHandle").finish_non_exhaustive()
    }
}

fn stopped() -> FaasError {
    FaasError::Transport {
        message: "platform loop stopped".into(),
    }
}

impl PlatformHandle {
    pub fn spawn(platform: Platform) -> Self {
        Self::spawn_inner(platform, None)
    }

    /// Calls without an explicit time use `clock`.
    pub fn spawn_with_clock(platform: Platform, clock: Arc<dyn TimeSource>) -> Self {
        Self::spawn_inner(platform, Some(clock))
    }

    fn spawn_inner(mut platform: Platform, clock: Option<Arc<dyn TimeSource>>) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        thread::Builder::new()
            .name("faas-loop".into())
            .spawn(move || {
                for job in rx {
                    job(&mut platform);
                }
            })
            .expect("spawn platform loop");
        Self { tx, clock }
    }

    /// Runs `f` on the loop and waits for its result.
    pub fn call<R: Send + 'static>(&self, f: impl FnOnce(&mut Platform) -> R + Send + 'static) -> Result<R, FaasError> {
        let (rtx, rrx) = mpsc::sync_channel(1);
        self.tx
            .send(Box::new(move |p| {
                let _ = rtx.send(f(p));
            }))
            .map_err(|_| stopped())?;
        rrx.recv().map_err(|_| stopped())
    }

    fn resolve(&self, at: Option<Millis>) -> Option<Millis> {
        at.or_else(|| self.clock.as_ref().map(|c| c.now_ms()))
    }
}

impl FaasEndpoint for PlatformHandle {
    fn endpoint(&self) -> String {
        "in-process".into()
    }

    fn deploy(&self, package: &FunctionPackage) -> Result<FunctionId, FaasError> {
        let package = package.clone();
        self.call(move |p| p.deploy(package))?
    }

    fn remove(&self, function_id: &FunctionId) -> Result<(), FaasError> {
        let id = function_id.clone();
        self.call(move |p| p.remove(&id))?
    }

    fn invoke(
        &self,
        function_id: &FunctionId,
        request: &InvocationRequest,
        at: Option<Millis>,
    ) -> Result<InvocationRecord, FaasError> {
        let (id, req, at) = (function_id.clone(), request.clone(), self.resolve(at));
        self.call(move |p| {
            let now = at.unwrap_or(p.now());
            p.invoke(&id, &req, now)
        })?
    }

    fn keep_alive(&self, function_id: &FunctionId, at: Option<Millis>) -> Result<InvocationRecord, FaasError> {
        let (id, at) = (function_id.clone(), self.resolve(at));
        self.call(move |p| {
            let now = at.unwrap_or(p.now());
            p.keep_alive(&id, now)
        })?
    }
}
