//! The measured-launch invocation layer.
//!
//! Every kernel call goes through one choreography: measure the artifact
//! files as they exist on disk *right now*, write the request envelope to
//! the exchange file, open a dynamic launch, run the kernel, close the
//! launch, and read the reply envelope back. The exchange files model the
//! shared memory an untrusted host could reach between the kernel's writes
//! and the caller's reads — which is exactly where the tamper hooks sit,
//! so tests can play that host.
//!
//! A single gate serializes launches. Callers that need the launch log to
//! survive past the call (to quote over it) take the gate themselves and
//! hold it; the log only clears when the *next* launch begins.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{ArcMutexGuard, Mutex, RawMutex};
use thiserror::Error;

use crate::crypto::{hash, Digest};
use crate::pal::{run_pal_bytes, EnvelopeError, PalContext, PalEnvelope};
use crate::tpm::{SharedTpm, TpmError};

/// Holding this keeps the launch gate closed: no other kernel invocation
/// can start, so the current launch log stays intact for quoting.
pub type FlickerGuard = ArcMutexGuard<RawMutex, ()>;

/// A byte-level rewrite applied to an envelope in the exchange window.
pub type TamperHook = Box<dyn FnMut(&mut Vec<u8>) + Send>;

#[derive(Debug, Error)]
pub enum FlickerError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("launch refused: {0}")]
    Tpm(#[from] TpmError),
    #[error("kernel reply unreadable: {0}")]
    Envelope(#[from] EnvelopeError),
}

/// Fresh measurements of the three artifact files.
pub struct ImageMeasurements {
    pub pal_bytes: Vec<u8>,
    pub pal_digest: Digest,
    pub flicker_digest: Digest,
    pub proxy_digest: Digest,
}

pub struct Flicker {
    gate: Arc<Mutex<()>>,
    tpm: SharedTpm,
    pal_image: PathBuf,
    flicker_image: PathBuf,
    proxy_image: PathBuf,
    input_path: PathBuf,
    output_path: PathBuf,
    input_tamper: Mutex<Option<TamperHook>>,
    output_tamper: Mutex<Option<TamperHook>>,
    exchanges: Mutex<Vec<Vec<u8>>>,
}

impl Flicker {
    pub fn new(
        tpm: SharedTpm,
        pal_image: &Path,
        flicker_image: &Path,
        proxy_image: &Path,
        exchange_dir: &Path,
    ) -> Flicker {
        Flicker {
            gate: Arc::new(Mutex::new(())),
            tpm,
            pal_image: pal_image.to_path_buf(),
            flicker_image: flicker_image.to_path_buf(),
            proxy_image: proxy_image.to_path_buf(),
            input_path: exchange_dir.join("pal-input.env"),
            output_path: exchange_dir.join("pal-output.env"),
            input_tamper: Mutex::new(None),
            output_tamper: Mutex::new(None),
            exchanges: Mutex::new(Vec::new()),
        }
    }

    pub fn tpm(&self) -> &SharedTpm {
        &self.tpm
    }

    /// Take the launch gate, waiting if another invocation is running.
    pub fn guard(&self) -> FlickerGuard {
        self.gate.lock_arc()
    }

    /// Take the launch gate only if it is free.
    pub fn try_guard(&self) -> Option<FlickerGuard> {
        self.gate.try_lock_arc()
    }

    /// Arm or clear the exchange-window rewrite hooks.
    pub fn set_input_tamper(&self, hook: Option<TamperHook>) {
        *self.input_tamper.lock() = hook;
    }

    pub fn set_output_tamper(&self, hook: Option<TamperHook>) {
        *self.output_tamper.lock() = hook;
    }

    /// Every envelope that crossed the exchange files, for audits.
    pub fn exchange_bytes(&self) -> Vec<Vec<u8>> {
        self.exchanges.lock().clone()
    }

    /// Read and hash the artifact files as they are on disk now.
    pub fn measure_images(&self) -> Result<ImageMeasurements, FlickerError> {
        let read = |path: &Path| {
            fs::read(path).map_err(|source| FlickerError::Io { path: path.to_path_buf(), source })
        };
        let pal_bytes = read(&self.pal_image)?;
        let flicker_bytes = read(&self.flicker_image)?;
        let proxy_bytes = read(&self.proxy_image)?;
        Ok(ImageMeasurements {
            pal_digest: hash(&pal_bytes),
            flicker_digest: hash(&flicker_bytes),
            proxy_digest: hash(&proxy_bytes),
            pal_bytes,
        })
    }

    /// Run one kernel invocation, taking and releasing the gate.
    pub fn invoke(&self, request: &PalEnvelope) -> Result<PalEnvelope, FlickerError> {
        let guard = self.guard();
        let reply = self.invoke_locked(&guard, request);
        drop(guard);
        reply
    }

    /// Run one kernel invocation under a gate the caller already holds.
    /// On return the launch is closed but its log is still live; it stays
    /// that way until the guard is released and the next launch begins.
    pub fn invoke_locked(
        &self,
        _guard: &FlickerGuard,
        request: &PalEnvelope,
    ) -> Result<PalEnvelope, FlickerError> {
        let images = self.measure_images()?;
        let ctx = PalContext {
            flicker_digest: images.flicker_digest,
            proxy_digest: images.proxy_digest,
        };

        let mut input = request.encode();
        if let Some(hook) = self.input_tamper.lock().as_mut() {
            hook(&mut input);
        }
        self.exchange(&self.input_path, &input)?;
        let input = self.read_exchange(&self.input_path)?;

        let output = {
            let mut tpm = self.tpm.lock();
            tpm.drtm_launch(&images.pal_bytes)?;
            let output = run_pal_bytes(&mut tpm, &ctx, &input);
            tpm.drtm_close()?;
            output
        };

        let mut output = output;
        if let Some(hook) = self.output_tamper.lock().as_mut() {
            hook(&mut output);
        }
        self.exchange(&self.output_path, &output)?;
        let output = self.read_exchange(&self.output_path)?;
        Ok(PalEnvelope::decode(&output)?)
    }

    fn exchange(&self, path: &Path, bytes: &[u8]) -> Result<(), FlickerError> {
        fs::write(path, bytes)
            .map_err(|source| FlickerError::Io { path: path.to_path_buf(), source })?;
        self.exchanges.lock().push(bytes.to_vec());
        Ok(())
    }

    fn read_exchange(&self, path: &Path) -> Result<Vec<u8>, FlickerError> {
        fs::read(path).map_err(|source| FlickerError::Io { path: path.to_path_buf(), source })
    }
}
